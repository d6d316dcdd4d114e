//! Scripted offline model.
//!
//! A script is an ordered list of substring rules matched against the user
//! prompt; the first match answers, otherwise the default reply does.
//! Embeddings are seeded pseudo-random vectors whose projection onto a fixed
//! direction equals the scripted difficulty of the text.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatRequest, ChatResponse, LanguageModel};
use crate::error::{Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub elapsed_seconds: f64,
}

impl MockReply {
    pub fn new(text: impl Into<String>, token_probs: Option<Vec<f64>>, elapsed_seconds: f64) -> Self {
        MockReply {
            text: text.into(),
            token_probs,
            elapsed_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(flatten)]
    pub reply: MockReply,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, reply: MockReply) -> Self {
        MockRule {
            pattern: pattern.into(),
            reply,
        }
    }
}

/// Scripted difficulty for embeddings of texts containing `pattern`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub default: MockReply,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub difficulty: Vec<DifficultyRule>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

impl MockScript {
    pub fn new(default: MockReply) -> Self {
        MockScript {
            default,
            rules: Vec::new(),
            difficulty: Vec::new(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let script: MockScript = serde_json::from_str(&fs::read_to_string(path)?)?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        let replies = std::iter::once(&self.default).chain(self.rules.iter().map(|r| &r.reply));
        for reply in replies {
            if let Some(p) = reply.token_probs.iter().flatten().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return Err(Error::InvalidProbability(*p));
            }
            if !(reply.elapsed_seconds >= 0.0 && reply.elapsed_seconds.is_finite()) {
                return Err(Error::Config(format!(
                    "mock elapsed_seconds must be finite and nonnegative, got {}",
                    reply.elapsed_seconds
                )));
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("mock embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn reply_for(&self, user: &str) -> &MockReply {
        self.rules
            .iter()
            .find(|r| user.contains(&r.pattern))
            .map(|r| &r.reply)
            .unwrap_or(&self.default)
    }

    pub fn difficulty_of(&self, text: &str) -> f64 {
        self.difficulty
            .iter()
            .find(|r| text.contains(&r.pattern))
            .map_or(0.0, |r| r.value)
    }
}

pub struct MockModel {
    script: MockScript,
    seed: u64,
    direction: Vec<f64>,
}

fn seeded_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl MockModel {
    pub fn new(script: MockScript, seed: u64) -> Result<Self> {
        script.validate()?;
        let mut direction = gaussian(&mut seeded_rng(seed, "difficulty-direction"), script.embedding_dim);
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        direction.iter_mut().for_each(|v| *v /= norm);
        Ok(MockModel { script, seed, direction })
    }

    /// Unit vector whose dot product with an embedding recovers the
    /// scripted difficulty.
    pub fn difficulty_direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl LanguageModel for MockModel {
    fn endpoint(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let reply = self.script.reply_for(&request.user);
        let token_probs = reply.token_probs.clone().unwrap_or_default();
        let completion_tokens = match &reply.token_probs {
            Some(p) => p.len() as u64,
            None => word_count(&reply.text),
        };
        Ok(ChatResponse {
            text: reply.text.clone(),
            token_probs,
            prompt_tokens: word_count(&request.system) + word_count(&request.user),
            completion_tokens,
            elapsed_seconds: reply.elapsed_seconds,
        })
    }

    fn hidden_state(&self, prompt: &str) -> Result<Vec<f64>, BackendError> {
        let mut noise = gaussian(&mut seeded_rng(self.seed, prompt), self.direction.len());
        let along: f64 = noise.iter().zip(&self.direction).map(|(n, d)| n * d).sum();
        let difficulty = self.script.difficulty_of(prompt);
        for (n, d) in noise.iter_mut().zip(&self.direction) {
            *n += (difficulty - along) * d;
        }
        Ok(noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Prompt;

    fn model(seed: u64) -> MockModel {
        let mut script = MockScript::new(MockReply::new("fallback", None, 0.0));
        script.rules.push(MockRule::new("alpha", MockReply::new("A", Some(vec![0.9, 0.8]), 1.0)));
        script.rules.push(MockRule::new("alp", MockReply::new("never", Some(vec![0.1]), 1.0)));
        script.difficulty.push(DifficultyRule { pattern: "hard".into(), value: 2.5 });
        MockModel::new(script, seed).unwrap()
    }

    #[test]
    fn first_matching_rule_wins() {
        let m = model(1);
        let r = m.complete(&ChatRequest::new(Prompt::user("say alpha please"))).unwrap();
        assert_eq!(r.text, "A");
        assert_eq!(r.completion_tokens, 2);
        assert_eq!(r.prompt_tokens, 3);
        let r = m.complete(&ChatRequest::new(Prompt::user("nothing here"))).unwrap();
        assert_eq!(r.text, "fallback");
        assert!(r.token_probs.is_empty());
    }

    #[test]
    fn identical_requests_identical_responses() {
        let m = model(1);
        let req = ChatRequest::new(Prompt::new("sys", "alpha"));
        assert_eq!(m.complete(&req).unwrap(), m.complete(&req).unwrap());
    }

    #[test]
    fn embeddings_are_deterministic_and_distinct() {
        let m = model(3);
        let a = m.hidden_state("first text").unwrap();
        assert_eq!(a, m.hidden_state("first text").unwrap());
        let b = m.hidden_state("second text").unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
        assert_eq!(a, model(3).hidden_state("first text").unwrap());
        assert_ne!(a, model(4).hidden_state("first text").unwrap());
    }

    #[test]
    fn projection_recovers_scripted_difficulty() {
        let m = model(9);
        let dot = |v: &[f64]| v.iter().zip(m.difficulty_direction()).map(|(a, b)| a * b).sum::<f64>();
        assert!((dot(&m.hidden_state("a hard one").unwrap()) - 2.5).abs() < 1e-9);
        assert!(dot(&m.hidden_state("an easy one").unwrap()).abs() < 1e-9);
    }

    #[test]
    fn script_json_shape() {
        let json = r#"{"default": {"text": "?"},
            "rules": [{"match": "2+2", "text": "4", "token_probs": [0.99], "elapsed_seconds": 0.5}]}"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.rules[0].pattern, "2+2");
        assert_eq!(script.rules[0].reply.token_probs, Some(vec![0.99]));
        assert_eq!(script.embedding_dim, DEFAULT_EMBEDDING_DIM);
        script.validate().unwrap();

        let bad = r#"{"default": {"text": "?", "token_probs": [1.5]}}"#;
        let script: MockScript = serde_json::from_str(bad).unwrap();
        assert!(script.validate().is_err());
    }
}
