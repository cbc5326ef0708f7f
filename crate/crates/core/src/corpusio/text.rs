use std::collections::HashMap;

use crate::error::{input_err, Error, Result};

/// Section name when `line` opens with an all-caps `HEADER:`.
fn header_name(line: &str) -> Option<&str> {
    let (name, _) = line.trim_start().split_once(':')?;
    let name = name.trim();
    let valid = !name.is_empty()
        && name.chars().any(|c| c.is_ascii_uppercase())
        && name
            .chars()
            .all(|c| c.is_ascii_uppercase() || matches!(c, ' ' | '/' | '-' | '&' | '(' | ')'));
    valid.then_some(name)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Text of the FINDINGS section, on one line with whitespace collapsed.
///
/// The section runs from the `FINDINGS:` header to the next all-caps header
/// line or the end of the document.
pub fn extract_findings(raw_report: &str) -> Result<String> {
    if raw_report.trim().is_empty() {
        return input_err("empty report");
    }
    let mut lines = raw_report.lines();
    let mut body = String::new();
    let mut found = false;
    for line in lines.by_ref() {
        if header_name(line) == Some("FINDINGS") {
            let (_, rest) = line.split_once(':').unwrap_or(("", ""));
            body.push_str(rest);
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::MissingSection);
    }
    for line in lines {
        if header_name(line).is_some() {
            break;
        }
        body.push(' ');
        body.push_str(line);
    }
    let text = collapse_whitespace(&body);
    if text.is_empty() {
        return Err(Error::MissingSection);
    }
    Ok(text)
}

/// Text augmentation such as back translation.
pub trait TextAugmenter {
    fn augment(&self, text: &str) -> std::result::Result<String, String>;
}

pub struct IdentityAugmenter;

impl TextAugmenter for IdentityAugmenter {
    fn augment(&self, text: &str) -> std::result::Result<String, String> {
        Ok(text.to_string())
    }
}

/// Word-for-word replacement from a fixed table; matching is case-insensitive
/// and punctuation is left in place.
#[derive(Clone, Debug, Default)]
pub struct SynonymAugmenter {
    table: HashMap<String, String>,
}

impl SynonymAugmenter {
    pub fn new<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            table: pairs
                .into_iter()
                .map(|(k, v)| (k.into().to_lowercase(), v.into()))
                .collect(),
        }
    }

    /// A small radiology synonym table used for the second text view.
    pub fn radiology() -> Self {
        Self::new([
            ("effusion", "fluid"),
            ("opacity", "opacification"),
            ("consolidation", "airspace disease"),
            ("enlarged", "increased"),
            ("mild", "slight"),
            ("small", "minimal"),
            ("no", "without"),
            ("normal", "unremarkable"),
            ("present", "seen"),
            ("lung", "pulmonary"),
        ])
    }
}

impl TextAugmenter for SynonymAugmenter {
    fn augment(&self, text: &str) -> std::result::Result<String, String> {
        let mut out = String::with_capacity(text.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if !word.is_empty() {
                match self.table.get(&word.to_lowercase()) {
                    Some(rep) => out.push_str(rep),
                    None => out.push_str(word),
                }
                word.clear();
            }
        };
        for c in text.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        Ok(out)
    }
}

pub fn augment_text(findings: &str, augmenter: &dyn TextAugmenter) -> Result<String> {
    augmenter
        .augment(findings)
        .map_err(|reason| Error::Augmentation {
            original: findings.to_string(),
            reason,
        })
}
