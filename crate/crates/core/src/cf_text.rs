//! Text counterfactuals: extractor prompts, parsing of the extractor's
//! answer into semantic phrases, and masking those phrases out of the
//! caption to leave only its spurious context.
//!
//! Matching is case-insensitive and respects word boundaries. Phrases are
//! claimed longest-first, then left to right, without overlap. Occurrences
//! of the mask token already present in the text are never re-masked,
//! so masking twice is the same as masking once.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Sample;

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

const SLOT: &str = "%s";
const TEXT_HEADINGS: [&str; 2] = ["main content words:", "main content elements:"];
const CONTEXT_HEADINGS: [&str; 2] = ["context words:", "context elements:"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptName {
    ImageAnalysis,
    TextAnalysis,
}

/// A prompt template with exactly one `%s` slot for the caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAsset {
    name: PromptName,
    template: String,
}

impl PromptAsset {
    pub fn new(name: PromptName, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let slots = template.matches(SLOT).count();
        if slots != 1 {
            return Err(Error::Template(format!(
                "{name:?} template has {slots} `%s` slots, expected 1"
            )));
        }
        Ok(Self { name, template })
    }

    /// The shipped extractor prompts.
    pub fn builtin(name: PromptName) -> Self {
        let template = match name {
            PromptName::ImageAnalysis => include_str!("../assets/prompts/image_analysis.txt"),
            PromptName::TextAnalysis => include_str!("../assets/prompts/text_analysis.txt"),
        };
        Self {
            name,
            template: template.to_string(),
        }
    }

    pub fn name(&self) -> PromptName {
        self.name
    }

    pub fn template(&self) -> &str {
        &self.template
    }
}

/// Substitutes the caption verbatim into the slot.
pub fn render_prompt(asset: &PromptAsset, tweet_text: &str) -> Result<String> {
    let slots = asset.template.matches(SLOT).count();
    if slots != 1 {
        return Err(Error::Template(format!(
            "template has {slots} `%s` slots, expected 1"
        )));
    }
    Ok(asset.template.replacen(SLOT, tweet_text, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    ExtractorResponse,
    #[default]
    ManualFile,
}

/// Semantic phrases of one sample, i.e. what gets masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticAnnotation {
    pub sample_id: String,
    pub semantic_phrases: Vec<String>,
    #[serde(default)]
    pub context_phrases: Vec<String>,
    #[serde(default)]
    pub source: AnnotationSource,
}

impl SemanticAnnotation {
    pub fn manual<S: AsRef<str>>(sample_id: impl Into<String>, phrases: &[S]) -> Self {
        Self {
            sample_id: sample_id.into(),
            semantic_phrases: clean_list(phrases.iter().map(AsRef::as_ref)),
            context_phrases: Vec::new(),
            source: AnnotationSource::ManualFile,
        }
    }

    pub fn with_sample_id(mut self, id: impl Into<String>) -> Self {
        self.sample_id = id.into();
        self
    }
}

fn trim_item(s: &str) -> &str {
    s.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '*' | '“' | '”' | '‘' | '’')
    })
}

fn clean_list<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        let item = trim_item(item);
        if item.is_empty() {
            continue;
        }
        if seen.insert(item.to_lowercase()) {
            out.push(item.to_string());
        }
    }
    out
}

/// Byte offsets just past every case-insensitive occurrence of `needle`
/// (ASCII headings only).
fn heading_ends(haystack: &str, needle: &str) -> Vec<usize> {
    let lower = haystack.to_ascii_lowercase();
    lower
        .match_indices(needle)
        .map(|(i, m)| i + m.len())
        .collect()
}

/// The list body after a heading: a bracketed list if one opens on the
/// same line, otherwise the rest of the line.
fn list_after(response: &str, at: usize) -> (bool, &str) {
    let rest = &response[at..];
    let line = rest.split('\n').next().unwrap_or("");
    let lead = line.len()
        - line
            .trim_start_matches(|c: char| c.is_whitespace() || c == '*')
            .len();
    if line[lead..].starts_with('[') {
        let after = &rest[lead + 1..];
        let close = after.find(']').unwrap_or(after.len());
        return (true, &after[..close]);
    }
    (false, line)
}

fn extract_list(response: &str, headings: &[&str]) -> Option<Vec<String>> {
    let mut ends: Vec<usize> = headings
        .iter()
        .flat_map(|h| heading_ends(response, h))
        .collect();
    ends.sort_unstable();
    let last_bracketed = ends
        .iter()
        .rev()
        .map(|&e| list_after(response, e))
        .find(|(bracketed, _)| *bracketed);
    let (_, body) = last_bracketed.or_else(|| ends.last().map(|&e| list_after(response, e)))?;
    Some(clean_list(body.split(',')))
}

/// Pulls the semantic phrase list out of an extractor answer.
pub fn parse_extractor_response(response: &str) -> Result<SemanticAnnotation> {
    let semantic_phrases = extract_list(response, &TEXT_HEADINGS)
        .ok_or_else(|| Error::Parse("response has no `Main Content Words:` heading".to_string()))?;
    let context_phrases = extract_list(response, &CONTEXT_HEADINGS).unwrap_or_default();
    Ok(SemanticAnnotation {
        sample_id: String::new(),
        semantic_phrases,
        context_phrases,
        source: AnnotationSource::ExtractorResponse,
    })
}

/// Result of masking one text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskedText {
    pub text: String,
    /// Byte ranges of the original text that were replaced, in order.
    pub spans: Vec<Range<usize>>,
    /// Phrases that never matched.
    pub missed: Vec<String>,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn fold(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

/// Replaces every semantic phrase occurrence with `mask_token`.
pub fn apply_mask(text: &str, annotation: &SemanticAnnotation, mask_token: &str) -> MaskedText {
    mask_phrases(text, &annotation.semantic_phrases, mask_token)
}

pub fn mask_phrases<S: AsRef<str>>(text: &str, phrases: &[S], mask_token: &str) -> MaskedText {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let folded: Vec<char> = chars.iter().map(|&(_, c)| fold(c)).collect();
    let n = chars.len();
    let mut claimed = vec![false; n];

    // existing mask tokens stay as they are
    if !mask_token.is_empty() {
        for (start, m) in text.match_indices(mask_token) {
            let a = chars.partition_point(|&(b, _)| b < start);
            let z = chars.partition_point(|&(b, _)| b < start + m.len());
            claimed[a..z].iter_mut().for_each(|c| *c = true);
        }
    }

    let mut order: Vec<(usize, Vec<char>, &str)> = phrases
        .iter()
        .map(|p| p.as_ref().trim())
        .filter(|p| !p.is_empty())
        .enumerate()
        .map(|(i, p)| (i, p.chars().map(fold).collect(), p))
        .collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut found: Vec<Range<usize>> = Vec::new();
    let mut missed = Vec::new();
    for (_, pat, original) in &order {
        let m = pat.len();
        let mut hit = false;
        let mut i = 0;
        while i + m <= n {
            let fits = folded[i..i + m] == pat[..]
                && !claimed[i..i + m].iter().any(|&c| c)
                && (!is_word(pat[0]) || i == 0 || !is_word(chars[i - 1].1))
                && (!is_word(pat[m - 1]) || i + m == n || !is_word(chars[i + m].1));
            if fits {
                claimed[i..i + m].iter_mut().for_each(|c| *c = true);
                found.push(i..i + m);
                hit = true;
                i += m;
            } else {
                i += 1;
            }
        }
        if !hit {
            missed.push(original.to_string());
        }
    }
    found.sort_by_key(|r| r.start);

    let byte_at = |ci: usize| chars.get(ci).map_or(text.len(), |&(b, _)| b);
    let mut out = String::with_capacity(text.len());
    let mut spans = Vec::with_capacity(found.len());
    let mut cursor = 0;
    for r in found {
        let (a, z) = (byte_at(r.start), byte_at(r.end));
        out.push_str(&text[cursor..a]);
        out.push_str(mask_token);
        spans.push(a..z);
        cursor = z;
    }
    out.push_str(&text[cursor..]);
    MaskedText {
        text: out,
        spans,
        missed,
    }
}

/// Per-dataset masking summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub samples: usize,
    pub phrases: usize,
    pub missed_phrases: usize,
    pub miss_rate: f64,
    /// Samples where nothing could be masked; they are excluded downstream.
    pub unmasked: Vec<String>,
    pub missed: BTreeMap<String, Vec<String>>,
    pub without_annotation: Vec<String>,
}

/// Counterfactual text for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub sample_id: String,
    pub spurious_text: String,
    /// True when no phrase matched (or none were given).
    pub unmasked: bool,
}

/// Masks every sample that has an annotation.
pub fn mask_corpus<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    annotations: &BTreeMap<String, SemanticAnnotation>,
    mask_token: &str,
) -> (Vec<MaskedSample>, MaskReport) {
    let mut report = MaskReport::default();
    let mut out = Vec::new();
    for s in samples {
        let Some(ann) = annotations.get(&s.id) else {
            report.without_annotation.push(s.id.clone());
            continue;
        };
        report.samples += 1;
        let masked = apply_mask(&s.text, ann, mask_token);
        let given = ann
            .semantic_phrases
            .iter()
            .filter(|p| !p.trim().is_empty())
            .count();
        report.phrases += given;
        report.missed_phrases += masked.missed.len();
        let unmasked = masked.spans.is_empty();
        if unmasked {
            report.unmasked.push(s.id.clone());
        }
        if !masked.missed.is_empty() {
            log::debug!("{}: phrases not found: {:?}", s.id, masked.missed);
            report.missed.insert(s.id.clone(), masked.missed);
        }
        out.push(MaskedSample {
            sample_id: s.id.clone(),
            spurious_text: masked.text,
            unmasked,
        });
    }
    report.miss_rate = if report.phrases == 0 {
        0.0
    } else {
        report.missed_phrases as f64 / report.phrases as f64
    };
    (out, report)
}
