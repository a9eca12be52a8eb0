use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{TokenId, Tokenizer};

/// Chooses the next token from the logits of the current step.
pub trait TokenPolicy {
    /// `None` ends the episode.
    fn choose(&mut self, logits: &[f64]) -> Option<TokenId>;

    /// Called when the controller force-closes a block; `closer` is the
    /// closing tag it injected.
    fn on_forced_close(&mut self, _closer: &str) {}
}

/// Argmax; ties go to the lowest id.
#[derive(Debug, Clone, Default)]
pub struct Greedy;

impl TokenPolicy for Greedy {
    fn choose(&mut self, logits: &[f64]) -> Option<TokenId> {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        (!logits.is_empty()).then_some(best as TokenId)
    }
}

/// Seeded temperature sampling.
#[derive(Debug, Clone)]
pub struct Sampler {
    temperature: f64,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(temperature: f64, seed: u64) -> Self {
        Self { temperature, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl TokenPolicy for Sampler {
    fn choose(&mut self, logits: &[f64]) -> Option<TokenId> {
        if logits.is_empty() {
            return None;
        }
        let t = self.temperature.max(1e-6);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
        let mut u = self.rng.random::<f64>() * weights.iter().sum::<f64>();
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return Some(i as TokenId);
            }
            u -= w;
        }
        Some((weights.len() - 1) as TokenId)
    }
}

/// Replays a fixed token stream, ignoring the logits.
///
/// After a forced close the script skips ahead past its own copy of the
/// injected closing tag, so the rest of the script stays aligned.
#[derive(Debug, Clone)]
pub struct Scripted {
    tokens: Vec<TokenId>,
    pos: usize,
    tokenizer: Tokenizer,
}

impl Scripted {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens, pos: 0, tokenizer: Tokenizer::default() }
    }

    pub fn from_text(text: &str) -> Self {
        let tokenizer = Tokenizer::default();
        Self { tokens: tokenizer.encode(text), pos: 0, tokenizer }
    }

    pub fn remaining(&self) -> usize {
        self.tokens.len() - self.pos
    }
}

impl TokenPolicy for Scripted {
    fn choose(&mut self, _logits: &[f64]) -> Option<TokenId> {
        let t = self.tokens.get(self.pos).copied();
        self.pos += 1;
        t
    }

    fn on_forced_close(&mut self, closer: &str) {
        let mut bytes = Vec::new();
        for i in self.pos..self.tokens.len() {
            bytes.extend_from_slice(self.tokenizer.token_bytes(self.tokens[i]));
            if bytes.windows(closer.len()).any(|w| w == closer.as_bytes()) {
                self.pos = i + 1;
                return;
            }
        }
        self.pos = self.tokens.len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_takes_first_maximum() {
        assert_eq!(Greedy.choose(&[0.1, 0.5, 0.5, -1.0]), Some(1));
        assert_eq!(Greedy.choose(&[]), None);
    }

    #[test]
    fn sampler_is_seeded() {
        let logits: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let draw = |seed| {
            let mut s = Sampler::new(0.8, seed);
            (0..20).map(|_| s.choose(&logits).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn scripted_skips_past_closer() {
        let mut s = Scripted::from_text("<plan>aaaa</plan><focus:I1>b</focus>");
        s.choose(&[]);
        s.choose(&[]);
        s.on_forced_close("</plan>");
        let tok = Tokenizer::default();
        let rest: Vec<TokenId> = std::iter::from_fn(|| s.choose(&[])).collect();
        assert_eq!(tok.decode(&rest), "<focus:I1>b</focus>");
    }
}
