//! Parsers for the structured model outputs.

use crate::error::{Error, Result};

/// Confidence word to score: high/medium/low → 1.0/0.6/0.3.
pub fn confidence_score(word: &str) -> Option<f64> {
    match word.trim().to_ascii_lowercase().as_str() {
        "high" => Some(1.0),
        "medium" => Some(0.6),
        "low" => Some(0.3),
        _ => None,
    }
}

/// `[Interest_k]: text | Confidence: level` lines, in order of appearance.
pub fn parse_interest_lines(raw: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for line in raw.lines().map(str::trim) {
        let Some(rest) = line.strip_prefix("[Interest_") else {
            continue;
        };
        let Some(close) = rest.find("]:") else {
            return Err(Error::parse("[Interest_k] line", raw));
        };
        let body = &rest[close + 2..];
        let (text, conf) = match body.rsplit_once('|') {
            Some((text, tail)) => {
                let level = tail
                    .trim()
                    .strip_prefix("Confidence:")
                    .ok_or_else(|| Error::parse("Confidence", raw))?;
                let score = confidence_score(level).ok_or_else(|| Error::parse("Confidence", raw))?;
                (text.trim(), score)
            }
            None => return Err(Error::parse("Confidence", raw)),
        };
        if text.is_empty() {
            return Err(Error::parse("[Interest_k] text", raw));
        }
        out.push((text.to_string(), conf));
    }
    if out.is_empty() {
        return Err(Error::parse("interests", raw));
    }
    Ok(out)
}

/// The `[Lifestyle]:` sentence.
pub fn parse_lifestyle(raw: &str) -> Result<String> {
    raw.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("[Lifestyle]:"))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::parse("[Lifestyle]", raw))
}

/// Items of a `Name: [a, b, c]` line.
pub fn parse_bracket_list(raw: &str, name: &str) -> Result<Vec<String>> {
    let prefix = format!("{name}:");
    let line = raw
        .lines()
        .map(str::trim)
        .find(|l| l.starts_with(&prefix))
        .ok_or_else(|| Error::parse(name, raw))?;
    let body = line[prefix.len()..].trim();
    let inner = body
        .strip_prefix('[')
        .and_then(|b| b.strip_suffix(']'))
        .ok_or_else(|| Error::parse(name, raw))?;
    Ok(inner
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}

/// Parsed multi-modal output.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalOutput {
    pub visual_tags: Vec<String>,
    pub text_tags: Vec<String>,
    pub unified: Vec<String>,
}

pub fn parse_multimodal(raw: &str) -> Result<MultimodalOutput> {
    let out = MultimodalOutput {
        visual_tags: parse_bracket_list(raw, "Visual Tags")?,
        text_tags: parse_bracket_list(raw, "Text Tags")?,
        unified: parse_bracket_list(raw, "Unified Interests")?,
    };
    if out.unified.is_empty() {
        return Err(Error::parse("Unified Interests", raw));
    }
    Ok(out)
}

pub fn parse_visual_description(raw: &str) -> Result<String> {
    let text = raw
        .lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("Visual Description:"))
        .unwrap_or(raw)
        .trim();
    if text.is_empty() {
        return Err(Error::parse("Visual Description", raw));
    }
    Ok(text.lines().next().unwrap_or(text).to_string())
}

/// `Label: 0` or `Label: 1`.
pub fn parse_label(raw: &str) -> Result<u8> {
    let idx = raw.rfind("Label:").ok_or_else(|| Error::parse("Label:", raw))?;
    match raw[idx + "Label:".len()..].trim_start().chars().next() {
        Some('1') => Ok(1),
        Some('0') => Ok(0),
        _ => Err(Error::parse("Label:", raw)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interest_line() {
        let got = parse_interest_lines("[Interest_1]: trail running endurance | Confidence: high").unwrap();
        assert_eq!(got, vec![("trail running endurance".to_string(), 1.0)]);
    }

    #[test]
    fn mixed_levels_and_noise() {
        let raw = "Step 1: ...\n[Interest_1]: a b c | Confidence: Medium\nchatter\n[Interest_2]: d | Confidence: low\n[Lifestyle]: x";
        let got = parse_interest_lines(raw).unwrap();
        assert_eq!(got, vec![("a b c".into(), 0.6), ("d".into(), 0.3)]);
    }

    #[test]
    fn empty_and_bad_confidence() {
        assert!(matches!(parse_interest_lines(""), Err(Error::Parse { .. })));
        let err = parse_interest_lines("[Interest_1]: x | Confidence: very").unwrap_err();
        assert!(err.to_string().contains("Confidence"));
    }

    #[test]
    fn lifestyle_required() {
        assert_eq!(parse_lifestyle("[Lifestyle]: Knowledge worker.").unwrap(), "Knowledge worker.");
        let err = parse_lifestyle("[Interest_1]: a | Confidence: high").unwrap_err();
        assert!(matches!(err, Error::Parse { ref section, .. } if section == "[Lifestyle]"));
    }

    #[test]
    fn multimodal_sections() {
        let raw = "Visual Tags: [matte, rose-gold]\nText Tags: [portable]\nUnified Interests: [rose-gold aesthetic, on-the-go beauty]";
        let got = parse_multimodal(raw).unwrap();
        assert_eq!(got.visual_tags, vec!["matte", "rose-gold"]);
        assert_eq!(got.unified.len(), 2);

        let bad = "Visual Tags: matte, rose-gold\nText Tags: [portable]\nUnified Interests: [x]";
        let err = parse_multimodal(bad).unwrap_err();
        assert!(matches!(err, Error::Parse { ref section, .. } if section == "Visual Tags"));
    }

    #[test]
    fn labels() {
        assert_eq!(parse_label("Label: 1").unwrap(), 1);
        assert_eq!(parse_label("reasoning...\nLabel: 0").unwrap(), 0);
        assert!(parse_label("positive").is_err());
        assert!(parse_label("Label: maybe").is_err());
    }
}
