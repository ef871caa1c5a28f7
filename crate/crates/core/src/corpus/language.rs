use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::PAD;
use crate::error::{Error, Result};

/// Token id layout shared by the two toy languages.
///
/// With `n = (vocab_size − 1) / 3` content words per language:
/// `1..=n` are source words, `n+1..=2n` target words, and `2n+1..=3n`
/// colloquial target variants that only occur in naturally written target
/// text. Ids above `3n` are unused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub vocab_size: usize,
    pub words: usize,
}

/// Source words with these (0-based) word indices act as keywords.
pub const KEYWORD_GROUP_A: [usize; 3] = [0, 1, 2];
pub const KEYWORD_GROUP_B: [usize; 3] = [3, 4, 5];
const MIN_WORDS: usize = 8;

impl Vocab {
    pub fn new(vocab_size: usize) -> Result<Self> {
        let words = vocab_size.saturating_sub(1) / 3;
        if words < MIN_WORDS {
            return Err(Error::invalid(format!(
                "vocab_size {vocab_size} leaves fewer than {MIN_WORDS} words per language"
            )));
        }
        Ok(Vocab { vocab_size, words })
    }

    pub fn source_token(&self, word: usize) -> usize {
        1 + word
    }

    pub fn target_token(&self, word: usize) -> usize {
        1 + self.words + word
    }

    pub fn variant_token(&self, word: usize) -> usize {
        1 + 2 * self.words + word
    }

    pub fn source_word(&self, token: usize) -> Option<usize> {
        (1..=self.words).contains(&token).then(|| token - 1)
    }

    /// Word index of a target token, accepting both standard and variant forms.
    pub fn target_word(&self, token: usize) -> Option<usize> {
        let n = self.words;
        if (n + 1..=2 * n).contains(&token) {
            Some(token - 1 - n)
        } else if (2 * n + 1..=3 * n).contains(&token) {
            Some(token - 1 - 2 * n)
        } else {
            None
        }
    }

    pub fn is_keyword_word(word: usize) -> bool {
        KEYWORD_GROUP_A.contains(&word) || KEYWORD_GROUP_B.contains(&word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Source language into target language.
    Forward,
    /// Target language (standard or variant forms) into source language.
    Backward,
}

/// A pair of toy languages related by a word cipher, plus the noise model of
/// the simulated translation system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub vocab_size: usize,
    /// `cipher[w]` is the target word index for source word `w`.
    pub cipher: Vec<usize>,
    pub swap_rate: f64,
    pub noise_rate: f64,
    /// Probability that naturally written target text uses a variant form.
    pub variant_rate: f64,
    pub seed: u64,
}

impl ToyLanguageSpec {
    pub fn new(vocab_size: usize, swap_rate: f64, noise_rate: f64, variant_rate: f64, seed: u64) -> Result<Self> {
        let vocab = Vocab::new(vocab_size)?;
        let mut cipher: Vec<usize> = (0..vocab.words).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cipher.shuffle(&mut rng);
        let spec = ToyLanguageSpec {
            vocab_size,
            cipher,
            swap_rate,
            noise_rate,
            variant_rate,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        for (name, rate) in [
            ("swap_rate", self.swap_rate),
            ("noise_rate", self.noise_rate),
            ("variant_rate", self.variant_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::invalid(format!("{name} {rate} outside [0, 1]")));
            }
        }
        let mut seen = vec![false; vocab.words];
        if self.cipher.len() != vocab.words {
            return Err(Error::invalid("cipher length differs from the word count"));
        }
        for &w in &self.cipher {
            if w >= vocab.words || std::mem::replace(&mut seen[w], true) {
                return Err(Error::invalid("cipher is not a permutation"));
            }
        }
        Ok(())
    }

    /// Source word index for a target word index.
    pub fn inverse_word(&self, target_word: usize) -> usize {
        self.cipher.iter().position(|&c| c == target_word).expect("cipher is a permutation")
    }

    fn inverse_cipher(&self) -> Vec<usize> {
        let mut inv = vec![0; self.cipher.len()];
        for (w, &c) in self.cipher.iter().enumerate() {
            inv[c] = w;
        }
        inv
    }

    /// Standard target rendering of source words, with no translation noise
    /// but with variant forms at `variant_rate`.
    pub fn natural_target(&self, source_tokens: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
        let vocab = self.vocab()?;
        source_tokens
            .iter()
            .map(|&t| {
                if t == PAD {
                    return Ok(PAD);
                }
                let w = vocab.source_word(t).ok_or_else(|| bad_token(t, Direction::Forward))?;
                let c = self.cipher[w];
                Ok(if rng.random::<f64>() < self.variant_rate {
                    vocab.variant_token(c)
                } else {
                    vocab.target_token(c)
                })
            })
            .collect()
    }
}

fn bad_token(token: usize, direction: Direction) -> Error {
    Error::invalid(format!("token {token} does not belong to the input language of a {direction:?} translation"))
}

/// Output of [`translate_aligned`].
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub tokens: Vec<usize>,
    /// `origin[j]` is the input position that output position `j` came from.
    pub origin: Vec<usize>,
    /// Output positions overwritten by translation noise.
    pub corrupted: Vec<bool>,
}

/// Word-for-word cipher, then adjacent swaps at `swap_rate`, then random
/// replacement by output-language words at `noise_rate`.
pub fn translate_aligned(
    tokens: &[usize],
    spec: &ToyLanguageSpec,
    direction: Direction,
    rng: &mut impl Rng,
) -> Result<Translation> {
    let vocab = spec.vocab()?;
    let inverse = spec.inverse_cipher();
    let mut out: Vec<usize> = tokens
        .iter()
        .map(|&t| {
            if t == PAD {
                return Ok(PAD);
            }
            match direction {
                Direction::Forward => vocab
                    .source_word(t)
                    .map(|w| vocab.target_token(spec.cipher[w]))
                    .ok_or_else(|| bad_token(t, direction)),
                Direction::Backward => vocab
                    .target_word(t)
                    .map(|w| vocab.source_token(inverse[w]))
                    .ok_or_else(|| bad_token(t, direction)),
            }
        })
        .collect::<Result<_>>()?;
    let mut origin: Vec<usize> = (0..tokens.len()).collect();
    let mut i = 0;
    while i + 1 < out.len() {
        if rng.random::<f64>() < spec.swap_rate {
            out.swap(i, i + 1);
            origin.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut corrupted = vec![false; out.len()];
    for (tok, flag) in out.iter_mut().zip(corrupted.iter_mut()) {
        if *tok != PAD && rng.random::<f64>() < spec.noise_rate {
            let w = rng.random_range(0..vocab.words);
            *tok = match direction {
                Direction::Forward => vocab.target_token(w),
                Direction::Backward => vocab.source_token(w),
            };
            *flag = true;
        }
    }
    Ok(Translation {
        tokens: out,
        origin,
        corrupted,
    })
}

pub fn translate(tokens: &[usize], spec: &ToyLanguageSpec, direction: Direction, rng: &mut impl Rng) -> Result<Vec<usize>> {
    Ok(translate_aligned(tokens, spec, direction, rng)?.tokens)
}
