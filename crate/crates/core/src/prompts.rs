//! The 63 prompt templates used to embed category names, and their expansion.

/// Prompt templates, in order. `{article}` becomes "a" or "an" and
/// `{category}` the category name or synonym.
pub const PROMPT_TEMPLATES: [&str; 63] = [
    "There is {article} {category} in the scene.",
    "There is the {category} in the scene.",
    "a photo of {article} {category} in the scene.",
    "a photo of the {category} in the scene.",
    "a photo of one {category} in the scene.",
    "itap of {article} {category}.",
    "itap of my {category}.",
    "itap of the {category}.",
    "a photo of {article} {category}.",
    "a photo of my {category}.",
    "a photo of the {category}.",
    "a photo of one {category}.",
    "a photo of many {category}.",
    "a good photo of {article} {category}.",
    "a good photo of the {category}.",
    "a bad photo of {article} {category}.",
    "a bad photo of the {category}.",
    "a photo of a nice {category}.",
    "a photo of the nice {category}.",
    "a photo of a cool {category}.",
    "a photo of the cool {category}.",
    "a photo of a weird {category}.",
    "a photo of the weird {category}.",
    "a photo of a small {category}.",
    "a photo of the small {category}.",
    "a photo of a large {category}.",
    "a photo of the large {category}.",
    "a photo of a clean {category}.",
    "a photo of the clean {category}.",
    "a photo of a dirty {category}.",
    "a photo of the dirty {category}.",
    "a bright photo of {article} {category}.",
    "a bright photo of the {category}.",
    "a dark photo of {article} {category}.",
    "a dark photo of the {category}.",
    "a photo of a hard to see {category}.",
    "a photo of the hard to see {category}.",
    "a low resolution photo of {article} {category}.",
    "a low resolution photo of the {category}.",
    "a cropped photo of {article} {category}.",
    "a cropped photo of the {category}.",
    "a close-up photo of {article} {category}.",
    "a close-up photo of the {category}.",
    "a jpeg corrupted photo of {article} {category}.",
    "a jpeg corrupted photo of the {category}.",
    "a blurry photo of {article} {category}.",
    "a blurry photo of the {category}.",
    "a pixelated photo of {article} {category}.",
    "a pixelated photo of the {category}.",
    "a black and white photo of the {category}.",
    "a black and white photo of {article} {category}.",
    "a plastic {category}.",
    "the plastic {category}.",
    "a toy {category}.",
    "the toy {category}.",
    "a plushie {category}.",
    "the plushie {category}.",
    "a cartoon {category}.",
    "the cartoon {category}.",
    "an embroidered {category}.",
    "the embroidered {category}.",
    "a painting of the {category}.",
    "a painting of a {category}.",
];

/// "an" before a word starting with a vowel letter, "a" otherwise.
pub fn article_for(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub fn fill_template(template: &str, name: &str) -> String {
    template
        .replace("{article}", article_for(name))
        .replace("{category}", name)
}

/// Every template filled with the category name, then with each synonym in
/// turn. Output length is `63 * (1 + synonyms.len())`, grouped by name.
pub fn render_prompts(category_name: &str, synonyms: &[String]) -> Vec<String> {
    std::iter::once(category_name)
        .chain(synonyms.iter().map(String::as_str))
        .flat_map(|name| PROMPT_TEMPLATES.iter().map(move |t| fill_template(t, name)))
        .collect()
}
