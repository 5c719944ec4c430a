//! Canonical conversation rendering and role-based loss masks.
//!
//! Rendering grammar, per message:
//!   marker("<|role|>")  content(text)  marker("<|end|>")
//! An assistant message with a reasoning trace renders the trace as its
//! own content segment between "<|think|>" and "<|/think|>" markers,
//! before the reply content.
//!
//! Loss weight is 1.0 exactly on assistant content tokens (reasoning
//! included unless disabled) and 0.0 on every marker and every
//! system/user content token, so gradients flow only from response
//! generation.

use serde::{Deserialize, Serialize};

use crate::model::{Conversation, Role, TokenCounter};

pub const MARKER_END: &str = "<|end|>";
pub const MARKER_THINK_OPEN: &str = "<|think|>";
pub const MARKER_THINK_CLOSE: &str = "<|/think|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Marker,
    Content,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub role: Role,
    pub text: String,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedConversation {
    pub segments: Vec<Segment>,
    pub total_tokens: u64,
}

fn role_marker(role: Role) -> String {
    format!("<|{role}|>")
}

pub fn render(conv: &Conversation, counter: &dyn TokenCounter) -> RenderedConversation {
    let mut segments = Vec::new();
    let mut push = |kind: SegmentKind, role: Role, text: String, counter: &dyn TokenCounter| {
        let token_count = match kind {
            SegmentKind::Marker => 1,
            SegmentKind::Content => counter.count(&text),
        };
        segments.push(Segment {
            kind,
            role,
            text,
            token_count,
        });
    };
    for msg in &conv.messages {
        push(SegmentKind::Marker, msg.role, role_marker(msg.role), counter);
        if let Some(reasoning) = &msg.reasoning {
            push(SegmentKind::Marker, msg.role, MARKER_THINK_OPEN.to_string(), counter);
            push(SegmentKind::Content, msg.role, reasoning.clone(), counter);
            push(SegmentKind::Marker, msg.role, MARKER_THINK_CLOSE.to_string(), counter);
        }
        push(SegmentKind::Content, msg.role, msg.content.clone(), counter);
        push(SegmentKind::Marker, msg.role, MARKER_END.to_string(), counter);
    }
    let total_tokens = segments.iter().map(|s| s.token_count).sum();
    RenderedConversation {
        segments,
        total_tokens,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMask {
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskOptions {
    /// Supervise reasoning-trace content. Reasoning traces are training
    /// targets by default.
    pub supervise_reasoning: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            supervise_reasoning: true,
        }
    }
}

/// Marker tokens are always weight 0, including assistant markers; only
/// assistant content is supervised.
pub fn loss_mask(rendered: &RenderedConversation, options: MaskOptions) -> LossMask {
    let mut weights = Vec::with_capacity(rendered.total_tokens as usize);
    // reasoning content is the content segment between think markers; we
    // recognise it as any assistant content segment followed (in render
    // order) by the think-close marker
    for (i, seg) in rendered.segments.iter().enumerate() {
        let supervised = seg.kind == SegmentKind::Content
            && seg.role == Role::Assistant
            && (options.supervise_reasoning || !is_reasoning_segment(rendered, i));
        let w = if supervised { 1.0 } else { 0.0 };
        weights.extend(std::iter::repeat(w).take(seg.token_count as usize));
    }
    LossMask { weights }
}

fn is_reasoning_segment(rendered: &RenderedConversation, i: usize) -> bool {
    rendered
        .segments
        .get(i + 1)
        .map(|next| next.kind == SegmentKind::Marker && next.text == MARKER_THINK_CLOSE)
        .unwrap_or(false)
}

pub fn has_assistant_content(conv: &Conversation) -> bool {
    conv.messages.iter().any(|m| m.role == Role::Assistant)
}

/// Run-length encoding of a mask: [(value, run_length)...].
pub fn run_length_encode(weights: &[f64]) -> Vec<(f64, u64)> {
    let mut out: Vec<(f64, u64)> = Vec::new();
    for &w in weights {
        match out.last_mut() {
            Some((v, run)) if *v == w => *run += 1,
            _ => out.push((w, 1)),
        }
    }
    out
}

/// Output record of the mask stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: String,
    pub total_tokens: u64,
    pub weights: Vec<(f64, u64)>,
}

pub fn mask_record(conv: &Conversation, counter: &dyn TokenCounter, options: MaskOptions) -> MaskRecord {
    let rendered = render(conv, counter);
    let mask = loss_mask(&rendered, options);
    if !has_assistant_content(conv) {
        log::warn!("conversation {}: no assistant message, mask is all-zero", conv.id);
    }
    MaskRecord {
        id: conv.id.clone(),
        total_tokens: rendered.total_tokens,
        weights: run_length_encode(&mask.weights),
    }
}
