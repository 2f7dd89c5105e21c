//! Boxes, proposals and detections shared by inference, post-processing and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Result, VildError};
use crate::vocab::CategoryId;

pub type ImageId = u64;

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(VildError::invalid(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Intersection over union, no +1 pixel convention.
    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = VildError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// One class-agnostic region: a box, its objectness, the backbone feature
/// the region head consumes and optionally the teacher's image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: ImageId,
    pub source_id: u32,
    pub bbox: BBox,
    pub objectness: f64,
    pub feature: Vec<f64>,
    pub teacher: Option<Embedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    #[serde(rename = "box", serialize_with = "crate::io::ser_sig_box")]
    pub bbox: BBox,
    #[serde(serialize_with = "crate::io::ser_sig")]
    pub score: f64,
    #[serde(default)]
    pub source_id: u32,
}

/// Descending score, ties by lower source id then lower category id.
pub fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_id.cmp(&b.source_id))
        .then(a.category_id.cmp(&b.category_id))
}
