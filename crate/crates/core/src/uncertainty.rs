//! Entropy-based sample scoring and top-N selection.
//!
//! Each sample is probed with greedy decoding for up to `t_max` continuation
//! tokens, recording the top-k log-probabilities at every generated
//! position. The per-position entropy of the renormalised top-k
//! distribution (in nats) is averaged over the positions actually
//! generated, and the highest-scoring samples are retained: high mean
//! entropy means the model spreads probability over many plausible
//! continuations, i.e. it finds the sample unfamiliar.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Conversation, Role};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("conversation {0} has no user message")]
    NoUserMessage(String),
    #[error("invalid logprob {value} at position {position}: logprobs must be <= 0")]
    InvalidLogprob { position: usize, value: f64 },
    #[error("endpoint does not expose logprobs")]
    MissingLogprobs,
    #[error("transport failure after {attempts} attempts: {msg}")]
    Transport { attempts: u32, msg: String },
    #[error("endpoint returned no positions")]
    EmptyResponse,
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub k: usize,
    pub t_max: usize,
    pub select_n: usize,
    pub endpoint: String,
    pub model: String,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 20,
            t_max: 32,
            select_n: 30_000,
            endpoint: String::new(),
            model: String::new(),
        }
    }
}

/// One (token, logprob) alternative at a generated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Top-k log-probabilities per generated position, sorted descending by
/// logprob within each position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKLogprobs {
    pub id: String,
    pub positions: Vec<Vec<TokenLogprob>>,
}

impl TopKLogprobs {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.positions.is_empty() {
            return Err(ScoreError::EmptyResponse);
        }
        for (t, pos) in self.positions.iter().enumerate() {
            for entry in pos {
                if entry.logprob > 0.0 {
                    return Err(ScoreError::InvalidLogprob {
                        position: t,
                        value: entry.logprob,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub mean_entropy: f64,
    pub positions_scored: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_position: Option<Vec<f64>>,
}

/// System content (if any), two newlines, then the first user message.
/// Later turns are ignored.
pub fn build_probe_prompt(conv: &Conversation) -> Result<String, ScoreError> {
    let user = conv
        .messages
        .iter()
        .find(|m| m.role == Role::User)
        .ok_or_else(|| ScoreError::NoUserMessage(conv.id.clone()))?;
    let system = conv.messages.iter().find(|m| m.role == Role::System);
    Ok(match system {
        Some(sys) => format!("{}\n\n{}", sys.content, user.content),
        None => user.content.clone(),
    })
}

/// Softmax over the position's logprobs via the max-shift trick, so the
/// result sums to 1 even when the raw entries do not.
pub fn renormalize(logprobs: &[f64]) -> Vec<f64> {
    assert!(!logprobs.is_empty(), "renormalize requires >= 1 entry");
    let max = logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logprobs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats; zero-probability entries contribute 0.
pub fn position_entropy(probs: &[f64]) -> f64 {
    debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean per-position entropy over the positions actually generated. Early
/// stop yields fewer positions; dividing by the generated count (not the
/// configured maximum) avoids biasing short generations toward 0.
pub fn sample_score(logprobs: &TopKLogprobs) -> Result<SampleScore, ScoreError> {
    logprobs.validate()?;
    let per_position: Vec<f64> = logprobs
        .positions
        .iter()
        .map(|pos| {
            let lps: Vec<f64> = pos.iter().map(|e| e.logprob).collect();
            position_entropy(&renormalize(&lps))
        })
        .collect();
    let mean = per_position.iter().sum::<f64>() / per_position.len() as f64;
    Ok(SampleScore {
        id: logprobs.id.clone(),
        mean_entropy: mean,
        positions_scored: per_position.len(),
        per_position: Some(per_position),
    })
}

/// Heap entry ordered so the WORST element of the current top-n pops
/// first: lower score is worse; among equal scores, larger id is worse.
#[derive(Debug, PartialEq)]
struct HeapEntry {
    score: f64,
    id: String,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Streaming top-n selection: keeps at most n entries in memory. Returns
/// ids of the n highest-scoring samples in rank order (descending score,
/// ties broken by ascending id).
pub fn rank_and_select<I>(scores: I, n: usize) -> Vec<String>
where
    I: IntoIterator<Item = SampleScore>,
{
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
    let mut population = 0usize;
    for s in scores {
        population += 1;
        heap.push(HeapEntry {
            score: s.mean_entropy,
            id: s.id,
        });
        if heap.len() > n {
            heap.pop();
        }
    }
    if n > population {
        log::warn!("select: requested {n} but only {population} scores; returning all");
    }
    let mut out: Vec<HeapEntry> = heap.into_vec();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    out.into_iter().map(|e| e.id).collect()
}

/// Wire format of the completions-style probe request.
///
/// Request JSON: {"model", "prompt", "temperature": 0, "max_tokens",
/// "logprobs": k}. The response is parsed field by field:
///   choices[0].logprobs.top_logprobs — array (one map per generated
///   position) of token -> logprob. Missing `logprobs` means the endpoint
///   does not expose them; logprobs > 0 are rejected.
#[derive(Debug, Serialize)]
pub struct ProbeRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_tokens: usize,
    pub logprobs: usize,
}

pub const PROBE_RETRY_LIMIT: u32 = 3;

/// Issues one greedy-decode probe request and parses the response. The
/// credential, when required, is read from the PIPELINE_API_KEY
/// environment variable.
pub fn probe(prompt: &str, config: &ProbeConfig, id: &str) -> Result<TopKLogprobs, ScoreError> {
    let request = ProbeRequest {
        model: &config.model,
        prompt,
        temperature: 0.0,
        max_tokens: config.t_max,
        logprobs: config.k,
    };
    let body = serde_json::to_value(&request).expect("serializable request");

    let mut last_err = String::new();
    for attempt in 1..=PROBE_RETRY_LIMIT {
        let mut req = ureq::post(&config.endpoint);
        if let Ok(key) = std::env::var("PIPELINE_API_KEY") {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let json: serde_json::Value = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| ScoreError::BadResponse(e.to_string()))?;
                return parse_probe_response(&json, id);
            }
            Err(e) => {
                last_err = e.to_string();
                if attempt < PROBE_RETRY_LIMIT {
                    std::thread::sleep(std::time::Duration::from_millis(
                        100 * (1 << (attempt - 1)),
                    ));
                }
            }
        }
    }
    Err(ScoreError::Transport {
        attempts: PROBE_RETRY_LIMIT,
        msg: last_err,
    })
}

pub fn parse_probe_response(
    json: &serde_json::Value,
    id: &str,
) -> Result<TopKLogprobs, ScoreError> {
    let choice = json
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ScoreError::BadResponse("no choices".to_string()))?;
    let top = choice
        .get("logprobs")
        .filter(|l| !l.is_null())
        .and_then(|l| l.get("top_logprobs"))
        .and_then(|t| t.as_array())
        .ok_or(ScoreError::MissingLogprobs)?;

    let mut positions = Vec::with_capacity(top.len());
    for pos in top {
        let map = pos
            .as_object()
            .ok_or_else(|| ScoreError::BadResponse("top_logprobs entry not an object".to_string()))?;
        let mut entries: Vec<TokenLogprob> = map
            .iter()
            .map(|(token, lp)| {
                lp.as_f64()
                    .map(|logprob| TokenLogprob {
                        token: token.clone(),
                        logprob,
                    })
                    .ok_or_else(|| ScoreError::BadResponse("non-numeric logprob".to_string()))
            })
            .collect::<Result<_, _>>()?;
        entries.sort_by(|a, b| {
            b.logprob
                .partial_cmp(&a.logprob)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.token.cmp(&b.token))
        });
        positions.push(entries);
    }
    let out = TopKLogprobs {
        id: id.to_string(),
        positions,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Message, Policy, ReasoningMode};
    use serde_json::json;

    fn conv(messages: Vec<Message>) -> Conversation {
        Conversation {
            id: "c".to_string(),
            dataset: "t".to_string(),
            messages,
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        }
    }

    #[test]
    fn probe_prompt_concatenation() {
        let c = conv(vec![
            Message::system("S"),
            Message::user("U"),
            Message::assistant("A"),
        ]);
        assert_eq!(build_probe_prompt(&c).unwrap(), "S\n\nU");
        let c2 = conv(vec![Message::user("U")]);
        assert_eq!(build_probe_prompt(&c2).unwrap(), "U");
    }

    #[test]
    fn probe_prompt_requires_user() {
        let c = Conversation {
            id: "x".to_string(),
            dataset: "t".to_string(),
            messages: vec![Message::assistant("A")],
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        };
        assert!(matches!(
            build_probe_prompt(&c),
            Err(ScoreError::NoUserMessage(_))
        ));
    }

    #[test]
    fn renormalize_cases() {
        assert_eq!(renormalize(&[-1.5]), vec![1.0]);

        let uniform = renormalize(&vec![-3.0; 20]);
        for p in &uniform {
            assert!((p - 0.05).abs() < 1e-12);
        }

        let p = renormalize(&[0.6f64.ln(), 0.3f64.ln()]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn renormalize_is_shift_invariant() {
        let base = [-0.2, -1.0, -3.5, -7.0];
        let shifted: Vec<f64> = base.iter().map(|l| l - 2.5).collect();
        let (p1, p2) = (renormalize(&base), renormalize(&shifted));
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((position_entropy(&p1) - position_entropy(&p2)).abs() < 1e-12);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(position_entropy(&[1.0]), 0.0);
        let uniform = vec![0.05; 20];
        assert!((position_entropy(&uniform) - 20.0f64.ln()).abs() < 1e-12);
        // H([2/3, 1/3]) = ln 3 - (2/3) ln 2
        let h = position_entropy(&[2.0 / 3.0, 1.0 / 3.0]);
        let expected = 3.0f64.ln() - (2.0 / 3.0) * 2.0f64.ln();
        assert!((h - expected).abs() < 1e-12);
    }

    fn uniform_position(k: usize) -> Vec<TokenLogprob> {
        (0..k)
            .map(|i| TokenLogprob {
                token: format!("t{i}"),
                logprob: -(k as f64).ln(),
            })
            .collect()
    }

    #[test]
    fn sample_score_uniform_and_deterministic() {
        let uniform = TopKLogprobs {
            id: "u".to_string(),
            positions: (0..32).map(|_| uniform_position(20)).collect(),
        };
        let s = sample_score(&uniform).unwrap();
        assert!((s.mean_entropy - 20.0f64.ln()).abs() < 1e-12);
        assert_eq!(s.positions_scored, 32);

        let det = TopKLogprobs {
            id: "d".to_string(),
            positions: (0..8)
                .map(|_| {
                    vec![TokenLogprob {
                        token: "only".to_string(),
                        logprob: 0.0,
                    }]
                })
                .collect(),
        };
        assert_eq!(sample_score(&det).unwrap().mean_entropy, 0.0);
    }

    #[test]
    fn sample_score_bounds() {
        let lp = TopKLogprobs {
            id: "m".to_string(),
            positions: vec![uniform_position(20), vec![TokenLogprob {
                token: "x".to_string(),
                logprob: -0.01,
            }]],
        };
        let s = sample_score(&lp).unwrap();
        assert!(s.mean_entropy >= 0.0 && s.mean_entropy <= 20.0f64.ln());
    }

    #[test]
    fn positive_logprob_rejected() {
        let lp = TopKLogprobs {
            id: "bad".to_string(),
            positions: vec![vec![TokenLogprob {
                token: "x".to_string(),
                logprob: 0.3,
            }]],
        };
        assert!(matches!(
            sample_score(&lp),
            Err(ScoreError::InvalidLogprob { .. })
        ));
    }

    #[test]
    fn select_ordering_and_ties() {
        let scores = vec![
            SampleScore { id: "a".into(), mean_entropy: 0.1, positions_scored: 1, per_position: None },
            SampleScore { id: "b".into(), mean_entropy: 0.9, positions_scored: 1, per_position: None },
            SampleScore { id: "c".into(), mean_entropy: 0.5, positions_scored: 1, per_position: None },
        ];
        assert_eq!(rank_and_select(scores, 2), vec!["b", "c"]);

        let tied = vec![
            SampleScore { id: "z".into(), mean_entropy: 0.5, positions_scored: 1, per_position: None },
            SampleScore { id: "y".into(), mean_entropy: 0.5, positions_scored: 1, per_position: None },
        ];
        assert_eq!(rank_and_select(tied, 1), vec!["y"]);
    }

    #[test]
    fn select_more_than_population_returns_all() {
        let scores = vec![SampleScore {
            id: "only".into(),
            mean_entropy: 0.2,
            positions_scored: 1,
            per_position: None,
        }];
        assert_eq!(rank_and_select(scores, 10), vec!["only"]);
    }

    #[test]
    fn parse_response_full_and_early_stop() {
        let position = |k: usize| {
            let mut m = serde_json::Map::new();
            for i in 0..k {
                m.insert(format!("tok{i}"), json!(-1.0 - i as f64));
            }
            serde_json::Value::Object(m)
        };
        let full = json!({"choices": [{"logprobs": {"top_logprobs": (0..32).map(|_| position(20)).collect::<Vec<_>>()}}]});
        let parsed = parse_probe_response(&full, "s1").unwrap();
        assert_eq!(parsed.positions.len(), 32);
        assert_eq!(parsed.positions[0].len(), 20);
        // sorted descending within each position
        assert!(parsed.positions[0][0].logprob >= parsed.positions[0][19].logprob);

        let early = json!({"choices": [{"logprobs": {"top_logprobs": (0..7).map(|_| position(5)).collect::<Vec<_>>()}}]});
        assert_eq!(parse_probe_response(&early, "s2").unwrap().positions.len(), 7);
    }

    #[test]
    fn parse_response_missing_logprobs() {
        let resp = json!({"choices": [{"text": "hello"}]});
        assert!(matches!(
            parse_probe_response(&resp, "x"),
            Err(ScoreError::MissingLogprobs)
        ));
    }

    #[test]
    fn parse_response_positive_logprob() {
        let resp = json!({"choices": [{"logprobs": {"top_logprobs": [{"a": 0.5}]}}]});
        assert!(matches!(
            parse_probe_response(&resp, "x"),
            Err(ScoreError::InvalidLogprob { .. })
        ));
    }
}
