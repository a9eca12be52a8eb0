//! Byte-fallback tokenizer with a small set of multi-byte pieces.
//!
//! Ids `0..256` are raw bytes. Ids from 256 upward are the entries of
//! [`PIECES`]: the grammar tags plus a handful of frequent words, so that a
//! scripted transcript costs a realistic number of decode steps. Encoding is
//! greedy longest-match over the pieces with byte fallback, which makes every
//! UTF-8 string encodable.

use super::TokenId;

pub const PIECES: &[&str] = &[
    "<plan>",
    "</plan>",
    "<focus:",
    "</focus>",
    "<answer>",
    "</answer>",
    "Next focus: ",
    "END",
    "Summary:",
    " and I",
    " image",
    " images",
    " the",
    " The",
    " is",
    " are",
    " in",
    " of",
    " to",
    " this",
    " car",
    " cars",
    " visible",
    " There",
    " no",
    " one",
    " two",
    " I'll",
    " check",
    " Image",
    ". ",
    ", ",
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pieces: Vec<&'static [u8]>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { pieces: PIECES.iter().map(|p| p.as_bytes()).collect() }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        256 + self.pieces.len()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let best = self
                .pieces
                .iter()
                .enumerate()
                .filter(|(_, p)| bytes[i..].starts_with(p))
                .max_by_key(|(id, p)| (p.len(), std::cmp::Reverse(*id)));
            match best {
                Some((id, p)) => {
                    out.push((256 + id) as TokenId);
                    i += p.len();
                }
                None => {
                    out.push(bytes[i] as TokenId);
                    i += 1;
                }
            }
        }
        out
    }

    /// Bytes of a single token; ids outside the vocabulary decode to U+FFFD.
    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        const REPLACEMENT: &[u8] = "\u{FFFD}".as_bytes();
        const BYTES: [u8; 256] = {
            let mut b = [0u8; 256];
            let mut i = 0;
            while i < 256 {
                b[i] = i as u8;
                i += 1;
            }
            b
        };
        let id = id as usize;
        if id < 256 {
            &BYTES[id..id + 1]
        } else {
            self.pieces.get(id - 256).copied().unwrap_or(REPLACEMENT)
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().flat_map(|&id| self.token_bytes(id).iter().copied()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Turns a stream of token byte strings into complete UTF-8 text.
///
/// Incomplete multi-byte sequences are held back until the next token;
/// invalid bytes become U+FFFD.
#[derive(Debug, Clone, Default)]
pub struct Utf8Stream {
    pending: Vec<u8>,
}

impl Utf8Stream {
    pub fn push(&mut self, bytes: &[u8]) -> String {
        self.pending.extend_from_slice(bytes);
        let mut out = String::new();
        loop {
            match std::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    return out;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(std::str::from_utf8(&self.pending[..valid]).expect("validated prefix"));
                    match e.error_len() {
                        Some(bad) => {
                            out.push('\u{FFFD}');
                            self.pending.drain(..valid + bad);
                        }
                        None => {
                            self.pending.drain(..valid);
                            return out;
                        }
                    }
                }
            }
        }
    }

    /// Flushes any dangling partial sequence as U+FFFD.
    pub fn finish(&mut self) -> String {
        if self.pending.is_empty() {
            String::new()
        } else {
            self.pending.clear();
            "\u{FFFD}".to_string()
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}
