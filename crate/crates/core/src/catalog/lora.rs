//! `<lora:NAME:WEIGHT>` prompt tags.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

const TAG_OPEN: &str = "<lora:";

static TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^<lora:([^:>]+):([+-]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+))>").expect("tag regex")
});

/// A tag found in a prompt. Malformed tags are reported with `weight: None`
/// and `name` holding the raw fragment; they stay in the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraTag {
    pub name: String,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stripped {
    pub clean: String,
    pub tags: Vec<LoraTag>,
}

/// Removes well-formed LoRA tags and joins the surrounding text with a
/// single space (none before punctuation). Text away from removed tags is
/// kept byte for byte.
///
/// Joining can splice a new well-formed tag together, so stripping repeats
/// until nothing more is removed.
pub fn strip_lora_tags(prompt: &str) -> Stripped {
    let mut out = strip_once(prompt);
    loop {
        let again = strip_once(&out.clean);
        if again.tags.iter().all(|t| t.weight.is_none()) {
            return out;
        }
        out.clean = again.clean;
        out.tags.extend(again.tags.into_iter().filter(|t| t.weight.is_some()));
    }
}

fn strip_once(prompt: &str) -> Stripped {
    let mut clean = String::with_capacity(prompt.len());
    let mut tags = Vec::new();
    let mut rest = prompt;
    // Set after a removal: the next chunk needs joining to `clean`.
    let mut pending_join = false;
    loop {
        let (chunk, next) = match rest.find(TAG_OPEN) {
            Some(i) => (&rest[..i], Some(i)),
            None => (rest, None),
        };
        push_chunk(&mut clean, chunk, pending_join);
        pending_join = false;
        let Some(i) = next else { break };
        let at = &rest[i..];
        if let Some(m) = TAG.captures(at) {
            let whole = m.get(0).expect("match").as_str();
            tags.push(LoraTag {
                name: m[1].to_string(),
                weight: m[2].parse().ok(),
            });
            // Trim whitespace left of the tag; the right side is handled on join.
            let trimmed = clean.trim_end().len();
            clean.truncate(trimmed);
            pending_join = true;
            rest = &at[whole.len()..];
        } else {
            let end = at.find('>').map(|e| e + 1).unwrap_or(at.len());
            tags.push(LoraTag { name: at[..end].to_string(), weight: None });
            clean.push_str(TAG_OPEN);
            rest = &at[TAG_OPEN.len()..];
        }
    }
    Stripped { clean, tags }
}

fn push_chunk(clean: &mut String, chunk: &str, join: bool) {
    if !join {
        clean.push_str(chunk);
        return;
    }
    let chunk = chunk.trim_start();
    if chunk.is_empty() {
        return;
    }
    let needs_space = !clean.is_empty()
        && !chunk.starts_with([',', '.', ';', ':', '!', '?', ')', ']'])
        && !clean.ends_with(['(', '[']);
    if needs_space {
        clean.push(' ');
    }
    clean.push_str(chunk);
}
