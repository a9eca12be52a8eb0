//! Prompt assembly: a text template with image placeholders expanded into a
//! token sequence and its layout.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layout::TokenLayout;
use crate::model::{TokenId, Tokenizer};

/// Where the image blocks go. Every image is preceded by a short label.
pub const IMAGES_PLACEHOLDER: &str = "{images}";

pub const DEFAULT_TEMPLATE: &str = "You are given several images. Work through them one at a time.\n\
{images}\n\
Question: How many images show a red car?\n\
Options: (A) 1 (B) 2 (C) 3 (D) 4\n\
Plan inside <plan></plan>, inspect inside <focus:Ij></focus>, then answer inside <answer></answer>.\n";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub template: String,
    pub num_images: usize,
    pub image_tokens: usize,
    pub seed: u64,
}

impl PromptSpec {
    pub fn new(num_images: usize, image_tokens: usize, seed: u64) -> Self {
        Self { template: DEFAULT_TEMPLATE.to_string(), num_images, image_tokens, seed }
    }
}

/// Tokens and layout for `spec`. Image tokens are seeded draws from the
/// vocabulary; a template without the placeholder gets the images appended.
pub fn build_prompt(spec: &PromptSpec, tokenizer: &Tokenizer) -> (Vec<TokenId>, TokenLayout) {
    let (before, after) = match spec.template.split_once(IMAGES_PLACEHOLDER) {
        Some((b, a)) => (b.to_string(), a.to_string()),
        None => (spec.template.clone(), String::new()),
    };
    let vocab = tokenizer.vocab_size();
    let mut tokens = Vec::new();
    let mut builder = TokenLayout::builder();

    let head = tokenizer.encode(&before);
    builder = builder.text(head.len());
    tokens.extend(head);
    for j in 1..=spec.num_images {
        let label = tokenizer.encode(&format!("Image {j}: "));
        builder = builder.text(label.len());
        tokens.extend(label);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ j as u64);
        builder = builder.image(spec.image_tokens);
        tokens.extend((0..spec.image_tokens).map(|_| rng.random_range(0..vocab) as TokenId));
        let sep = tokenizer.encode("\n");
        builder = builder.text(sep.len());
        tokens.extend(sep);
    }
    let tail = tokenizer.encode(&after);
    builder = builder.text(tail.len());
    tokens.extend(tail);
    (tokens, builder.build())
}
