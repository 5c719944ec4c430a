//! Instruction formatting of parallel pairs, conversation preprocessing,
//! and synthetic-generation job building/parsing.
//!
//! All stochastic choices are drawn from a per-document ChaCha8 stream
//! seeded with `global_seed ^ fnv1a(doc_id)`, in a fixed order (turn-shape,
//! then chunk size when multi-turn, then direction, then template), so
//! formatting is deterministic and order-independent across documents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::fnv1a;
use crate::model::{Conversation, Message, ParallelPair, Policy, ReasoningMode, Role};

const EN2CY_TXT: &str = include_str!("../data/templates/en2cy.txt");
const CY2EN_TXT: &str = include_str!("../data/templates/cy2en.txt");
const IDENTITY_PHRASES_TXT: &str = include_str!("../data/identity_phrases.txt");
const STOPWORDS_EN_TXT: &str = include_str!("../data/stopwords_en.txt");
const STOPWORDS_CY_TXT: &str = include_str!("../data/stopwords_cy.txt");
const TRANSLATION_SYSTEM: &str = include_str!("../data/prompts/translation_system.txt");
const TRANSLATION_USER: &str = include_str!("../data/prompts/translation_user.txt");
const CULTURE_SYSTEM: &str = include_str!("../data/prompts/culture_system.txt");

pub const TORTOISE_OPEN: char = '\u{3014}';
pub const TORTOISE_CLOSE: char = '\u{3015}';

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("template bank: expected {expected} templates in {name}, found {found}")]
    TemplateCount {
        name: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("template bank: template {index} in {name} must contain exactly one {{text}} placeholder")]
    Placeholder { name: &'static str, index: usize },
    #[error("conversation {0} has no user message")]
    NoUserMessage(String),
    #[error("missing {0}")]
    MissingField(&'static str),
    #[error("missing_brackets")]
    MissingBrackets,
    #[error("unclosed_brackets")]
    UnclosedBrackets,
    #[error("io error reading {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    En2Cy,
    Cy2En,
}

/// The 21 instruction templates: 11 English-to-Welsh and 10
/// Welsh-to-English, each with exactly one `{text}` placeholder.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub en2cy: Vec<String>,
    pub cy2en: Vec<String>,
}

fn parse_templates(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

impl TemplateBank {
    /// The bank shipped with the crate.
    pub fn bundled() -> Self {
        let bank = TemplateBank {
            en2cy: parse_templates(EN2CY_TXT),
            cy2en: parse_templates(CY2EN_TXT),
        };
        bank.validate().expect("bundled templates are well-formed");
        bank
    }

    /// Load from a directory containing en2cy.txt and cy2en.txt, one
    /// template per line.
    pub fn load(dir: &std::path::Path) -> Result<Self, FormatError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| FormatError::Io { path, source })
        };
        let bank = TemplateBank {
            en2cy: parse_templates(&read("en2cy.txt")?),
            cy2en: parse_templates(&read("cy2en.txt")?),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        for (name, list, expected) in [
            ("en2cy", &self.en2cy, 11usize),
            ("cy2en", &self.cy2en, 10usize),
        ] {
            if list.len() != expected {
                return Err(FormatError::TemplateCount {
                    name: if name == "en2cy" { "en2cy" } else { "cy2en" },
                    expected,
                    found: list.len(),
                });
            }
            for (i, t) in list.iter().enumerate() {
                if t.matches("{text}").count() != 1 {
                    return Err(FormatError::Placeholder {
                        name: if name == "en2cy" { "en2cy" } else { "cy2en" },
                        index: i,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn templates(&self, direction: Direction) -> &[String] {
        match direction {
            Direction::En2Cy => &self.en2cy,
            Direction::Cy2En => &self.cy2en,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormatterConfig {
    pub seed: u64,
    pub single_turn_fraction: f64,
    pub direction_split: f64,
    pub group_min: usize,
    pub group_max: usize,
}

impl Default for FormatterConfig {
    fn default() -> Self {
        FormatterConfig {
            seed: 0,
            single_turn_fraction: 0.7,
            direction_split: 0.5,
            group_min: 2,
            group_max: 5,
        }
    }
}

/// Per-document RNG stream.
pub fn doc_rng(seed: u64, doc_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(doc_id.as_bytes()))
}

fn source_target<'a>(pair: &'a ParallelPair, direction: Direction) -> (&'a str, &'a str) {
    match direction {
        Direction::En2Cy => (&pair.source_text, &pair.target_text),
        Direction::Cy2En => (&pair.target_text, &pair.source_text),
    }
}

/// Build a single-turn translation conversation from one pair, with the
/// direction and template index already chosen.
pub fn format_single_turn_with(
    pair: &ParallelPair,
    bank: &TemplateBank,
    direction: Direction,
    template_index: usize,
    dataset: &str,
) -> Conversation {
    let template = &bank.templates(direction)[template_index];
    let (src, tgt) = source_target(pair, direction);
    Conversation {
        id: format!("fmt-{}", pair.id),
        dataset: dataset.to_string(),
        messages: vec![
            Message::user(template.replace("{text}", src)),
            Message::assistant(tgt),
        ],
        policy: Policy::Off,
        reasoning_mode: ReasoningMode::NotApplicable,
    }
}

/// Draws direction (probability `direction_split` of en->cy) then a
/// uniform template, in that order.
pub fn format_single_turn(
    pair: &ParallelPair,
    bank: &TemplateBank,
    config: &FormatterConfig,
    rng: &mut ChaCha8Rng,
    dataset: &str,
) -> Conversation {
    let direction = draw_direction(config, rng);
    let idx = rng.random_range(0..bank.templates(direction).len());
    format_single_turn_with(pair, bank, direction, idx, dataset)
}

fn draw_direction(config: &FormatterConfig, rng: &mut ChaCha8Rng) -> Direction {
    if rng.random_bool(config.direction_split) {
        Direction::En2Cy
    } else {
        Direction::Cy2En
    }
}

/// Build one multi-turn conversation from consecutive pairs of the same
/// document. All turns share one direction; the first user turn uses the
/// sampled template, later user turns carry the bare source text.
pub fn format_multi_turn_with(
    pairs: &[ParallelPair],
    bank: &TemplateBank,
    direction: Direction,
    template_index: usize,
    dataset: &str,
) -> Conversation {
    let template = &bank.templates(direction)[template_index];
    let mut messages = Vec::with_capacity(pairs.len() * 2);
    for (i, pair) in pairs.iter().enumerate() {
        let (src, tgt) = source_target(pair, direction);
        let user = if i == 0 {
            template.replace("{text}", src)
        } else {
            src.to_string()
        };
        messages.push(Message::user(user));
        messages.push(Message::assistant(tgt));
    }
    Conversation {
        id: format!("fmt-{}", pairs[0].id),
        dataset: dataset.to_string(),
        messages,
        policy: Policy::Off,
        reasoning_mode: ReasoningMode::NotApplicable,
    }
}

/// Format a whole corpus of cleaned pairs. `pairs` may arrive in any
/// order; they are grouped by doc_id and sorted by seq_index, and gaps in
/// seq_index split a document into separate consecutive runs.
///
/// Within a run, each decision point draws the turn shape: with
/// probability `single_turn_fraction` the head pair becomes a single-turn
/// example; otherwise a chunk size uniform on {group_min..group_max} is
/// drawn and that many consecutive pairs (capped by the run remainder)
/// form one multi-turn conversation. A remainder of one pair is emitted as
/// single-turn rather than discarded.
pub fn format_pairs(
    pairs: &[ParallelPair],
    bank: &TemplateBank,
    config: &FormatterConfig,
    dataset: &str,
) -> Vec<Conversation> {
    let mut by_doc: Vec<(&str, Vec<&ParallelPair>)> = Vec::new();
    {
        let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for p in pairs {
            let slot = *index.entry(p.doc_id.as_str()).or_insert_with(|| {
                by_doc.push((p.doc_id.as_str(), Vec::new()));
                by_doc.len() - 1
            });
            by_doc[slot].1.push(p);
        }
    }

    let mut out = Vec::new();
    for (doc_id, mut doc_pairs) in by_doc {
        doc_pairs.sort_by_key(|p| p.seq_index);
        let mut rng = doc_rng(config.seed, doc_id);
        // split on seq_index gaps into consecutive runs
        let mut run: Vec<&ParallelPair> = Vec::new();
        for p in doc_pairs {
            if let Some(last) = run.last() {
                if p.seq_index != last.seq_index + 1 {
                    format_run(&run, bank, config, &mut rng, dataset, &mut out);
                    run.clear();
                }
            }
            run.push(p);
        }
        if !run.is_empty() {
            format_run(&run, bank, config, &mut rng, dataset, &mut out);
        }
    }
    out
}

fn format_run(
    run: &[&ParallelPair],
    bank: &TemplateBank,
    config: &FormatterConfig,
    rng: &mut ChaCha8Rng,
    dataset: &str,
    out: &mut Vec<Conversation>,
) {
    let mut pos = 0;
    while pos < run.len() {
        let remaining = run.len() - pos;
        let single = remaining == 1 || rng.random_bool(config.single_turn_fraction);
        if single {
            out.push(format_single_turn(run[pos], bank, config, rng, dataset));
            pos += 1;
        } else {
            let size = rng
                .random_range(config.group_min..=config.group_max)
                .min(remaining);
            let chunk: Vec<ParallelPair> = run[pos..pos + size].iter().map(|&p| p.clone()).collect();
            let direction = draw_direction(config, rng);
            let idx = rng.random_range(0..bank.templates(direction).len());
            if size == 1 {
                out.push(format_single_turn_with(&chunk[0], bank, direction, idx, dataset));
            } else {
                out.push(format_multi_turn_with(&chunk, bank, direction, idx, dataset));
            }
            pos += size;
        }
    }
}

/// Reduce a conversation to its first user--assistant pair (question-only
/// when no assistant reply follows), keeping any leading system message.
pub fn flatten_first_turn(conv: &Conversation) -> Result<Conversation, FormatError> {
    let user_idx = conv
        .messages
        .iter()
        .position(|m| m.role == Role::User)
        .ok_or_else(|| FormatError::NoUserMessage(conv.id.clone()))?;
    let mut messages = Vec::new();
    if let Some(first) = conv.messages.first() {
        if first.role == Role::System {
            messages.push(first.clone());
        }
    }
    messages.push(conv.messages[user_idx].clone());
    if let Some(reply) = conv.messages.get(user_idx + 1) {
        if reply.role == Role::Assistant {
            messages.push(reply.clone());
        }
    }
    Ok(Conversation {
        messages,
        ..conv.clone()
    })
}

fn identity_phrases() -> impl Iterator<Item = &'static str> {
    IDENTITY_PHRASES_TXT
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Keep iff no message contains any phrase from the identity list
/// (case-insensitive substring match).
pub fn filter_identity_content(conv: &Conversation) -> bool {
    !conv.messages.iter().any(|m| {
        let lower = m.content.to_lowercase();
        identity_phrases().any(|p| lower.contains(p))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lang {
    English,
    Welsh,
    Other,
}

fn stopword_set(text: &'static str) -> Vec<&'static str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// Margin of net stopword hits required before committing to a language.
const DETECT_MARGIN: i64 = 2;

/// Reference detector: stopword-frequency scoring over bundled English and
/// Welsh lists. A production detector plugs in behind the same signature.
pub fn detect_language(text: &str) -> Lang {
    use std::sync::OnceLock;
    static EN: OnceLock<std::collections::HashSet<&'static str>> = OnceLock::new();
    static CY: OnceLock<std::collections::HashSet<&'static str>> = OnceLock::new();
    let en = EN.get_or_init(|| stopword_set(STOPWORDS_EN_TXT).into_iter().collect());
    let cy = CY.get_or_init(|| stopword_set(STOPWORDS_CY_TXT).into_iter().collect());

    let mut en_hits = 0i64;
    let mut cy_hits = 0i64;
    for word in text.to_lowercase().split(|c: char| !c.is_alphabetic()) {
        if word.is_empty() {
            continue;
        }
        if en.contains(word) {
            en_hits += 1;
        }
        if cy.contains(word) {
            cy_hits += 1;
        }
    }
    if en_hits - cy_hits >= DETECT_MARGIN {
        Lang::English
    } else if cy_hits - en_hits >= DETECT_MARGIN {
        Lang::Welsh
    } else {
        Lang::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub presence_penalty: f64,
}

/// Recommended sampling parameters for the teacher translation model.
pub const TRANSLATION_DECODING: DecodingParams = DecodingParams {
    temperature: 0.7,
    top_p: 0.8,
    top_k: 20,
    presence_penalty: 1.5,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedParse {
    TortoiseBrackets,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobReasoning {
    On,
    Off,
}

/// One request to a teacher model, ready to send to a sampling endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub id: String,
    pub system: String,
    pub user: String,
    pub expected_parse: ExpectedParse,
    pub decoding: DecodingParams,
    pub reasoning_mode: JobReasoning,
}

/// Translation job per the fixed prompt: exceptions for XML/URLs/maths and
/// code, output wrapped in tortoise shell brackets.
pub fn build_translation_job(
    id: &str,
    text: &str,
    source_lang: &str,
    target_lang: &str,
) -> Result<GenerationJob, FormatError> {
    if text.is_empty() {
        return Err(FormatError::MissingField("text"));
    }
    let user = TRANSLATION_USER
        .replace("{source_lang}", source_lang)
        .replace("{target_lang}", target_lang)
        .replace("{text}", text);
    Ok(GenerationJob {
        id: id.to_string(),
        system: TRANSLATION_SYSTEM.to_string(),
        user,
        expected_parse: ExpectedParse::TortoiseBrackets,
        decoding: TRANSLATION_DECODING,
        reasoning_mode: JobReasoning::Off,
    })
}

/// Content of the first well-formed 〔…〕 span; surrounding text discarded.
pub fn parse_tortoise_brackets(response: &str) -> Result<String, FormatError> {
    let open = response
        .char_indices()
        .find(|&(_, c)| c == TORTOISE_OPEN)
        .map(|(i, _)| i)
        .ok_or(FormatError::MissingBrackets)?;
    let start = open + TORTOISE_OPEN.len_utf8();
    let close = response[start..]
        .find(TORTOISE_CLOSE)
        .ok_or(FormatError::UnclosedBrackets)?;
    Ok(response[start..start + close].to_string())
}

/// Culture job: the fixed system prompt with persona and cultural context
/// injected. Always non-reasoning, so the thinking trace cannot leak the
/// injected context.
pub fn build_culture_job(
    id: &str,
    question: &str,
    persona: &str,
    cultural_context: &str,
) -> Result<GenerationJob, FormatError> {
    if question.is_empty() {
        return Err(FormatError::MissingField("question"));
    }
    if persona.is_empty() {
        return Err(FormatError::MissingField("persona"));
    }
    if cultural_context.is_empty() {
        return Err(FormatError::MissingField("cultural_context"));
    }
    let system = CULTURE_SYSTEM
        .replace("{user_persona}", persona)
        .replace("{cultural_context}", cultural_context);
    Ok(GenerationJob {
        id: id.to_string(),
        system,
        user: question.to_string(),
        expected_parse: ExpectedParse::Raw,
        decoding: TRANSLATION_DECODING,
        reasoning_mode: JobReasoning::Off,
    })
}

/// Replay job: sample the base model on a chat/instruction prompt in the
/// given reasoning mode. Conversations built from the responses carry
/// policy = on.
pub fn build_replay_job(
    id: &str,
    prompt: &str,
    reasoning_mode: JobReasoning,
) -> Result<GenerationJob, FormatError> {
    if prompt.is_empty() {
        return Err(FormatError::MissingField("prompt"));
    }
    Ok(GenerationJob {
        id: id.to_string(),
        system: String::new(),
        user: prompt.to_string(),
        expected_parse: ExpectedParse::Raw,
        decoding: TRANSLATION_DECODING,
        reasoning_mode,
    })
}

/// Wrap a replay response as an on-policy conversation.
pub fn replay_conversation(job: &GenerationJob, response: &str, dataset: &str) -> Conversation {
    Conversation {
        id: format!("replay-{}", job.id),
        dataset: dataset.to_string(),
        messages: vec![Message::user(&job.user), Message::assistant(response)],
        policy: Policy::On,
        reasoning_mode: match job.reasoning_mode {
            JobReasoning::On => ReasoningMode::On,
            JobReasoning::Off => ReasoningMode::Off,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, doc: &str, seq: u64, en: &str, cy: &str) -> ParallelPair {
        ParallelPair {
            id: id.to_string(),
            doc_id: doc.to_string(),
            seq_index: seq,
            source_lang: "en".to_string(),
            target_lang: "cy".to_string(),
            source_text: en.to_string(),
            target_text: cy.to_string(),
            provenance: "test".to_string(),
        }
    }

    #[test]
    fn bundled_bank_counts() {
        let bank = TemplateBank::bundled();
        assert_eq!(bank.en2cy.len(), 11);
        assert_eq!(bank.cy2en.len(), 10);
    }

    #[test]
    fn single_turn_forced_templates() {
        let bank = TemplateBank::bundled();
        let p = pair("1", "d", 0, "Good morning", "Bore da");
        let c = format_single_turn_with(&p, &bank, Direction::En2Cy, 0, "t");
        assert_eq!(
            c.messages[0].content,
            "Translate the following English text into Welsh: Good morning"
        );
        assert_eq!(c.messages[1].content, "Bore da");

        let c = format_single_turn_with(&p, &bank, Direction::Cy2En, 8, "t");
        assert_eq!(
            c.messages[0].content,
            "Cyfieithwch y testun Cymraeg canlynol i'r Saesneg: Bore da"
        );
        assert_eq!(c.messages[1].content, "Good morning");
    }

    #[test]
    fn no_placeholder_leaks() {
        let bank = TemplateBank::bundled();
        let p = pair("1", "d", 0, "Hello there", "Helo yna");
        for dir in [Direction::En2Cy, Direction::Cy2En] {
            for i in 0..bank.templates(dir).len() {
                let c = format_single_turn_with(&p, &bank, dir, i, "t");
                for m in &c.messages {
                    assert!(!m.content.contains("{text}"));
                }
            }
        }
    }

    #[test]
    fn multi_turn_shares_direction_and_alternates() {
        let bank = TemplateBank::bundled();
        let pairs: Vec<ParallelPair> = (0..3)
            .map(|i| pair(&format!("p{i}"), "d", i, &format!("en {i}"), &format!("cy {i}")))
            .collect();
        let c = format_multi_turn_with(&pairs, &bank, Direction::En2Cy, 1, "t");
        assert_eq!(c.messages.len(), 6);
        c.validate().unwrap();
        assert_eq!(c.messages[0].content, "Translate to Welsh: en 0");
        assert_eq!(c.messages[2].content, "en 1"); // bare source text
        assert_eq!(c.messages[5].content, "cy 2");
    }

    #[test]
    fn format_pairs_deterministic_and_gap_splitting() {
        let bank = TemplateBank::bundled();
        let config = FormatterConfig {
            seed: 42,
            ..FormatterConfig::default()
        };
        let mut pairs = Vec::new();
        for doc in 0..5 {
            for seq in 0..10u64 {
                // leave a gap at seq 5
                let seq = if seq >= 5 { seq + 3 } else { seq };
                pairs.push(pair(
                    &format!("d{doc}s{seq}"),
                    &format!("doc{doc}"),
                    seq,
                    &format!("english sentence {doc} {seq}"),
                    &format!("brawddeg gymraeg {doc} {seq}"),
                ));
            }
        }
        let a = format_pairs(&pairs, &bank, &config, "t");
        let b = format_pairs(&pairs, &bank, &config, "t");
        assert_eq!(a, b);
        // every conversation validates and every pair appears exactly once
        let total_turns: usize = a.iter().map(|c| c.messages.len() / 2).sum();
        assert_eq!(total_turns, pairs.len());
        for c in &a {
            c.validate().unwrap();
        }
        // no chunk spans the seq gap: multi-turn count <= 5 turns
        for c in &a {
            assert!(c.messages.len() <= 10);
        }
    }

    #[test]
    fn format_pairs_order_independent_across_docs() {
        let bank = TemplateBank::bundled();
        let config = FormatterConfig {
            seed: 7,
            ..FormatterConfig::default()
        };
        let mut pairs = Vec::new();
        for doc in 0..4 {
            for seq in 0..6u64 {
                pairs.push(pair(
                    &format!("d{doc}s{seq}"),
                    &format!("doc{doc}"),
                    seq,
                    &format!("source text {doc} {seq}"),
                    &format!("testun ffynhonnell {doc} {seq}"),
                ));
            }
        }
        let a = format_pairs(&pairs, &bank, &config, "t");
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let mut b = format_pairs(&shuffled, &bank, &config, "t");
        let mut a_sorted = a.clone();
        a_sorted.sort_by(|x, y| x.id.cmp(&y.id));
        b.sort_by(|x, y| x.id.cmp(&y.id));
        assert_eq!(a_sorted, b);
    }

    #[test]
    fn flatten_keeps_first_pair() {
        let conv = Conversation {
            id: "c".to_string(),
            dataset: "t".to_string(),
            messages: vec![
                Message::system("sys"),
                Message::user("u1"),
                Message::assistant("a1"),
                Message::user("u2"),
                Message::assistant("a2"),
            ],
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        };
        let flat = flatten_first_turn(&conv).unwrap();
        let contents: Vec<&str> = flat.messages.iter().map(|m| m.content.as_str()).collect();
        assert_eq!(contents, ["sys", "u1", "a1"]);

        let single = Conversation {
            messages: vec![Message::user("u1")],
            ..conv.clone()
        };
        assert_eq!(flatten_first_turn(&single).unwrap().messages.len(), 1);

        let no_user = Conversation {
            messages: vec![Message::system("s"), Message::assistant("a")],
            ..conv
        };
        assert!(flatten_first_turn(&no_user).is_err());
    }

    #[test]
    fn identity_filter() {
        let mk = |text: &str| Conversation {
            id: "c".to_string(),
            dataset: "t".to_string(),
            messages: vec![Message::user(text)],
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        };
        assert!(!filter_identity_content(&mk("What model are you?")));
        assert!(filter_identity_content(&mk("explain model-view-controller")));
        assert!(filter_identity_content(&mk("")));
    }

    #[test]
    fn language_detection() {
        assert_eq!(detect_language("the of and to in that it was"), Lang::English);
        assert_eq!(detect_language("mae yn y ac ar gyda ond"), Lang::Welsh);
        assert_eq!(detect_language("zzz qqq xxx"), Lang::Other);
    }

    #[test]
    fn translation_job_contents() {
        let job = build_translation_job("j1", "Hello", "English", "Welsh").unwrap();
        assert!(job
            .user
            .contains("You need to translate the following English source text to Welsh"));
        assert!(job.user.ends_with("English: Hello"));
        assert!(job.user.contains("Wrap the translated text in tortoise shell brackets."));
        assert_eq!(job.expected_parse, ExpectedParse::TortoiseBrackets);
        assert_eq!(job.decoding, TRANSLATION_DECODING);
        assert!(!job.user.contains("{source_lang}"));
        assert!(!job.user.contains("{text}"));

        assert!(build_translation_job("j2", "", "English", "Welsh").is_err());
    }

    #[test]
    fn tortoise_parsing() {
        assert_eq!(parse_tortoise_brackets("Here: 〔Bore da〕").unwrap(), "Bore da");
        assert_eq!(parse_tortoise_brackets("〔a〕 junk 〔b〕").unwrap(), "a");
        assert!(matches!(
            parse_tortoise_brackets("no brackets at all"),
            Err(FormatError::MissingBrackets)
        ));
        assert!(matches!(
            parse_tortoise_brackets("open 〔 but never closed"),
            Err(FormatError::UnclosedBrackets)
        ));
        assert_eq!(parse_tortoise_brackets("〔〕").unwrap(), "");
    }

    #[test]
    fn culture_job_contents() {
        let job = build_culture_job("c1", "How do queues work?", "A student from Japan", "Queueing norms").unwrap();
        assert!(job.system.contains("Personal details: A student from Japan"));
        assert!(job.system.contains("Relevant Cultural Context: Queueing norms"));
        assert!(!job.system.contains("{user_persona}"));
        assert!(!job.system.contains("{cultural_context}"));
        assert_eq!(job.reasoning_mode, JobReasoning::Off);
        assert_eq!(job.user, "How do queues work?");

        let err = build_culture_job("c2", "q", "", "ctx").unwrap_err();
        assert!(err.to_string().contains("persona"));
    }

    #[test]
    fn replay_job_and_conversation() {
        let on = build_replay_job("r1", "Tell me about tea.", JobReasoning::On).unwrap();
        let off = build_replay_job("r1", "Tell me about tea.", JobReasoning::Off).unwrap();
        assert_eq!(on.user, off.user);
        assert_ne!(on.reasoning_mode, off.reasoning_mode);
        assert!(build_replay_job("r2", "", JobReasoning::On).is_err());

        let conv = replay_conversation(&on, "Tea is popular.", "replay");
        assert_eq!(conv.policy, Policy::On);
        assert_eq!(conv.reasoning_mode, ReasoningMode::On);
        conv.validate().unwrap();
    }

    #[test]
    fn split_statistics() {
        let bank = TemplateBank::bundled();
        let config = FormatterConfig {
            seed: 1234,
            ..FormatterConfig::default()
        };
        // 250 docs x 40 pairs = 10,000 pairs
        let mut pairs = Vec::new();
        for doc in 0..250 {
            for seq in 0..40u64 {
                pairs.push(pair(
                    &format!("d{doc}s{seq}"),
                    &format!("doc{doc}"),
                    seq,
                    &format!("sentence number {seq} of document {doc}"),
                    &format!("brawddeg rhif {seq} o ddogfen {doc}"),
                ));
            }
        }
        let convs = format_pairs(&pairs, &bank, &config, "t");
        let single = convs.iter().filter(|c| c.messages.len() == 2).count();
        let frac = single as f64 / convs.len() as f64;
        assert!((0.66..=0.74).contains(&frac), "single fraction {frac}");
        // chunk sizes only ever 2..=5 turns
        for c in &convs {
            let turns = c.messages.len() / 2;
            assert!(turns == 1 || (2..=5).contains(&turns));
        }
    }
}
