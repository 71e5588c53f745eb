//! Prompt templates with `{placeholder}` substitution.
//!
//! Only the named placeholders are replaced; any other brace group (the
//! output schema, e.g. `{high/medium/low}`) is kept verbatim.

use crate::corpus::ItemMeta;

pub const DEEP_INTEREST: &str = include_str!("../../templates/deep_interest.txt");
pub const MULTIMODAL_INTEREST: &str = include_str!("../../templates/multimodal_interest.txt");
pub const VISUAL_DESCRIPTION: &str = include_str!("../../templates/visual_description.txt");
pub const ENSEMBLE_AGGREGATION: &str = include_str!("../../templates/ensemble_aggregation.txt");
pub const USER_PROFILE: &str = include_str!("../../templates/user_profile.txt");
pub const RLDI_CLASSIFICATION: &str = include_str!("../../templates/rldi_classification.txt");

/// Replace each `{key}` in `template` with its value, in a single pass.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match values.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// One-line rendering of an item used inside prompts.
pub fn describe_item(meta: &ItemMeta) -> String {
    let mut parts = Vec::new();
    if !meta.categories.is_empty() {
        parts.push(format!("categories: {}", meta.categories.join(", ")));
    }
    if !meta.description.is_empty() {
        parts.push(format!("description: {}", meta.description));
    }
    if parts.is_empty() {
        meta.title.clone()
    } else {
        format!("{} ({})", meta.title, parts.join("; "))
    }
}

/// Chain-of-thought prompt for one item. Items with an image caption get the
/// multi-modal template instead; `history_context` items are listed before
/// the item itself in the text-only template.
pub fn render_item_prompt(meta: &ItemMeta, history_context: &[ItemMeta]) -> String {
    match &meta.image_caption {
        Some(caption) => render_multimodal_prompt(meta, caption),
        None => render_text_prompt(meta, history_context),
    }
}

pub fn render_text_prompt(meta: &ItemMeta, history_context: &[ItemMeta]) -> String {
    let history = history_context
        .iter()
        .chain(std::iter::once(meta))
        .map(describe_item)
        .collect::<Vec<_>>()
        .join(", ");
    fill(DEEP_INTEREST, &[("history", &history)])
}

pub fn render_multimodal_prompt(meta: &ItemMeta, image_description: &str) -> String {
    fill(
        MULTIMODAL_INTEREST,
        &[("title", &describe_item(meta)), ("image_description", image_description)],
    )
}

pub fn render_visual_prompt(caption: &str) -> String {
    fill(VISUAL_DESCRIPTION, &[("image", caption)])
}

/// `outputs` pairs a provider id with its interest texts.
pub fn render_ensemble_prompt(outputs: &[(String, Vec<String>)]) -> String {
    let lines = outputs
        .iter()
        .map(|(model, interests)| format!("{model} Output: [{}]", interests.join(", ")))
        .collect::<Vec<_>>()
        .join("\n");
    fill(
        ENSEMBLE_AGGREGATION,
        &[("model_outputs", &lines), ("model_count", &outputs.len().to_string())],
    )
}

/// `item_interests` pairs an item title with its interest texts.
pub fn render_user_prompt(item_interests: &[(String, Vec<String>)]) -> String {
    let lines = item_interests
        .iter()
        .map(|(title, interests)| format!("- {title}: {}", interests.join("; ")))
        .collect::<Vec<_>>()
        .join("\n");
    fill(USER_PROFILE, &[("item_interests", &lines)])
}

pub fn render_rldi_prompt(interest_text: &str, source_items: &[ItemMeta]) -> String {
    let items = source_items
        .iter()
        .map(|m| m.title.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    fill(RLDI_CLASSIFICATION, &[("interest_text", interest_text), ("items", &items)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_keeps_unknown_placeholders() {
        assert_eq!(fill("a {x} {y} {", &[("x", "1")]), "a 1 {y} {");
        assert_eq!(fill("{x}{x}", &[("x", "{x}")]), "{x}{x}");
    }

    #[test]
    fn text_prompt_has_title_and_steps() {
        let meta = ItemMeta::new("i1", "Noise-canceling headphones");
        let p = render_item_prompt(&meta, &[]);
        assert!(p.contains("User History: Noise-canceling headphones\n"));
        for step in ["Step 1: Identify surface patterns", "Step 2: Infer latent motivations", "Step 3: Predict cross-domain"] {
            assert!(p.contains(step), "{step}");
        }
        assert!(p.contains("[Interest_1]: {text} | Confidence: {high/medium/low}"));
        assert_eq!(p, render_item_prompt(&meta, &[]));
    }

    #[test]
    fn template_bytes_preserved_outside_fields() {
        let meta = ItemMeta::new("i1", "T");
        let p = render_item_prompt(&meta, &[]);
        assert_eq!(p, DEEP_INTEREST.replace("{history}", "T"));
    }

    #[test]
    fn caption_switches_to_multimodal() {
        let mut meta = ItemMeta::new("i1", "Compact mirror");
        meta.image_caption = Some("matte rose-gold compact case".into());
        let p = render_item_prompt(&meta, &[]);
        assert!(p.starts_with("Given product text and image, extract unified interests."));
        assert!(p.contains("Visual Tags: [{tag_1}, {tag_2}]"));
        assert!(p.contains("Image: matte rose-gold compact case"));
    }

    #[test]
    fn history_context_listed_first() {
        let a = ItemMeta::new("a", "Kindle");
        let b = ItemMeta::new("b", "Atomic Habits");
        let p = render_item_prompt(&b, &[a]);
        assert!(p.contains("User History: Kindle, Atomic Habits\n"));
    }

    #[test]
    fn rldi_prompt_shape() {
        let p = render_rldi_prompt("home office optimization", &[ItemMeta::new("x", "Desk Lamp")]);
        assert!(p.contains("Interest: \"home office optimization\"\nSource Items: Desk Lamp\n"));
        assert!(p.ends_with("Output: Label: {0/1}\n"));
    }

    #[test]
    fn ensemble_prompt_counts_models() {
        let p = render_ensemble_prompt(&[
            ("a".into(), vec!["x".into()]),
            ("b".into(), vec!["y".into(), "z".into()]),
        ]);
        assert!(p.contains("a Output: [x]\nb Output: [y, z]"));
        assert!(p.contains("Support: {N}/2 LLMs"));
    }
}
