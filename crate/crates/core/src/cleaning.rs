//! Rule-based filtering of parallel pairs.
//!
//! Cleaning only rejects; it never rewrites text. Every rule is independent
//! and reports its own reason identifier, so a rejected record carries the
//! full list of rules it failed on either side. There is deliberately no
//! source/target length-ratio rule: morphological inflection produces large
//! but legitimate surface-length differences between well-formed sides.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::ParallelPair;

/// Inclusive code point ranges treated as emoji; shipped as data so the
/// table is auditable and editable without recompiling rule logic.
const EMOJI_BLOCKS_TSV: &str = include_str!("../data/emoji_blocks.tsv");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningPolicy {
    pub min_chars: usize,
    pub max_char_repeat_ratio: f64,
    pub max_word_repeat_ratio: f64,
    pub url_filter: bool,
    pub emoji_filter: bool,
    pub list_item_filter: bool,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            min_chars: 20,
            // "Excessive" repetition is undefined upstream; these defaults
            // only apply to texts with >= 10 chars / >= 5 words.
            max_char_repeat_ratio: 0.5,
            max_word_repeat_ratio: 0.5,
            url_filter: true,
            emoji_filter: true,
            list_item_filter: true,
        }
    }
}

impl CleaningPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_chars < 1 {
            return Err("min_chars must be >= 1".to_string());
        }
        for (name, r) in [
            ("max_char_repeat_ratio", self.max_char_repeat_ratio),
            ("max_word_repeat_ratio", self.max_word_repeat_ratio),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(format!("{name} must be in (0,1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    MinChars,
    Url,
    Emoji,
    CharRepeat,
    WordRepeat,
    ListItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningDecision {
    pub keep: bool,
    pub reasons: Vec<Rule>,
}

/// Minimum text sizes below which the repetition rules do not fire, to
/// avoid rejecting short legitimate text ("aa" is not "excessive").
const REPEAT_MIN_CHARS: usize = 10;
const REPEAT_MIN_WORDS: usize = 5;

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // scheme "://" for {http, https, ftp}, or a bare "www." host prefix at
    // a word boundary. Version strings like "3.4.1" do not match.
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:https?|ftp)://\S+|\bwww\.\S+").expect("url pattern")
    })
}

pub fn has_url(text: &str) -> bool {
    url_regex().is_match(text)
}

fn emoji_blocks() -> &'static Vec<(u32, u32)> {
    static BLOCKS: OnceLock<Vec<(u32, u32)>> = OnceLock::new();
    BLOCKS.get_or_init(|| {
        EMOJI_BLOCKS_TSV
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let mut cols = l.split('\t');
                let start = u32::from_str_radix(cols.next().expect("start"), 16).expect("hex");
                let end = u32::from_str_radix(cols.next().expect("end"), 16).expect("hex");
                (start, end)
            })
            .collect()
    })
}

pub fn has_emoji(text: &str) -> bool {
    text.chars().any(|c| {
        let cp = c as u32;
        emoji_blocks().iter().any(|&(s, e)| cp >= s && cp <= e)
    })
}

/// Returns (char_ratio, word_ratio): the frequency of the most common
/// character (Unicode scalar values, spaces included) and of the most
/// common whitespace-delimited word. Both 0 for empty input.
pub fn repetition_ratios(text: &str) -> (f64, f64) {
    let mut char_counts: HashMap<char, usize> = HashMap::new();
    let mut total_chars = 0usize;
    for c in text.chars() {
        *char_counts.entry(c).or_insert(0) += 1;
        total_chars += 1;
    }
    let char_ratio = if total_chars == 0 {
        0.0
    } else {
        *char_counts.values().max().unwrap() as f64 / total_chars as f64
    };

    let mut word_counts: HashMap<&str, usize> = HashMap::new();
    let mut total_words = 0usize;
    for w in text.split_whitespace() {
        *word_counts.entry(w).or_insert(0) += 1;
        total_words += 1;
    }
    let word_ratio = if total_words == 0 {
        0.0
    } else {
        *word_counts.values().max().unwrap() as f64 / total_words as f64
    };

    (char_ratio, word_ratio)
}

const BULLETS: [char; 4] = ['•', '-', '*', '–'];

/// A standalone list item is a leading bullet or numeral marker
/// (`N.` / `N)` / `(N)`) followed by fewer than `min_chars` characters of
/// content.
pub fn is_standalone_list_item(text: &str, min_chars: usize) -> bool {
    let trimmed = text.trim();
    let rest = match strip_list_marker(trimmed) {
        Some(rest) => rest,
        None => return false,
    };
    rest.trim().chars().count() < min_chars
}

fn strip_list_marker(text: &str) -> Option<&str> {
    if let Some(first) = text.chars().next() {
        if BULLETS.contains(&first) {
            return Some(&text[first.len_utf8()..]);
        }
    }
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^(?:\(\d+\)|\d+[.)])\s*").expect("marker pattern"));
    re.find(text).map(|m| &text[m.end()..])
}

fn check_side(text: &str, policy: &CleaningPolicy, reasons: &mut Vec<Rule>) {
    let n_chars = text.chars().count();
    if n_chars < policy.min_chars {
        push_unique(reasons, Rule::MinChars);
    }
    if policy.url_filter && has_url(text) {
        push_unique(reasons, Rule::Url);
    }
    if policy.emoji_filter && has_emoji(text) {
        push_unique(reasons, Rule::Emoji);
    }
    let (char_ratio, word_ratio) = repetition_ratios(text);
    if n_chars >= REPEAT_MIN_CHARS && char_ratio > policy.max_char_repeat_ratio {
        push_unique(reasons, Rule::CharRepeat);
    }
    if text.split_whitespace().count() >= REPEAT_MIN_WORDS
        && word_ratio > policy.max_word_repeat_ratio
    {
        push_unique(reasons, Rule::WordRepeat);
    }
    if policy.list_item_filter && is_standalone_list_item(text, policy.min_chars) {
        push_unique(reasons, Rule::ListItem);
    }
}

fn push_unique(reasons: &mut Vec<Rule>, rule: Rule) {
    if !reasons.contains(&rule) {
        reasons.push(rule);
    }
}

/// Applies every enabled rule to both sides of the pair. Reasons accumulate
/// across rules and sides in a fixed order, so identical input always
/// yields an identical decision.
pub fn clean_pair(pair: &ParallelPair, policy: &CleaningPolicy) -> CleaningDecision {
    let mut reasons = Vec::new();
    check_side(&pair.source_text, policy, &mut reasons);
    check_side(&pair.target_text, policy, &mut reasons);
    CleaningDecision {
        keep: reasons.is_empty(),
        reasons,
    }
}
