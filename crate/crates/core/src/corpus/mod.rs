//! Synthetic parallel corpora standing in for translate-train / translate-test.
//!
//! A [`DatasetBundle`] holds training pairs (real source, machine-translated
//! target, back-translated source) and test pairs (naturally written target,
//! machine-translated source).

mod jsonl;
mod language;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TaskKind;

pub use jsonl::{load_jsonl, save_jsonl};
pub use language::{
    translate, translate_aligned, Direction, ToyLanguageSpec, Translation, Vocab, KEYWORD_GROUP_A, KEYWORD_GROUP_B,
};

pub const MIN_LEN: usize = 6;
pub const MAX_LEN: usize = 12;
const KEYWORD_TAG_RATE: f64 = 0.3;

/// Number of output labels of the task head.
pub fn label_count(task: TaskKind) -> usize {
    match task {
        TaskKind::Classification => 4,
        TaskKind::Structured | TaskKind::Span => 2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Label of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqLabel {
    Class(usize),
    /// Per-token tag; `None` where the alignment to the labelled text was lost.
    Tags(Vec<Option<usize>>),
    /// Inclusive token span.
    Span { start: usize, end: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleLabel {
    pub src: SeqLabel,
    pub tgt: SeqLabel,
    #[serde(default)]
    pub bt_src: Option<SeqLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub src_is_real: bool,
    pub tgt_is_real: bool,
}

/// A source/target pair. Training pairs carry a real source, its translation
/// and a back-translation; test pairs carry a real target and its
/// translate-test source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub split: Split,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub bt_src: Option<Vec<usize>>,
    pub label: ExampleLabel,
    pub provenance: Provenance,
}

impl ParallelExample {
    /// Label of whichever source sequence `tokens` points at.
    pub fn source_label_for(&self, tokens: &[usize]) -> &SeqLabel {
        match (&self.bt_src, &self.label.bt_src) {
            (Some(bt), Some(label)) if std::ptr::eq(bt.as_slice(), tokens) => label,
            _ => &self.label.src,
        }
    }

    pub fn validate(&self, task: TaskKind) -> Result<()> {
        let labels = std::iter::once((&self.label.src, self.src.len()))
            .chain(std::iter::once((&self.label.tgt, self.tgt.len())))
            .chain(self.bt_src.iter().zip(&self.label.bt_src).map(|(t, l)| (l, t.len())));
        for (label, len) in labels {
            check_label(task, label, len)?;
        }
        if let (SeqLabel::Class(a), SeqLabel::Class(b)) = (&self.label.src, &self.label.tgt) {
            if a != b {
                return Err(Error::invalid(format!("class label differs across the pair ({a} vs {b})")));
            }
        }
        if self.split == Split::Train && self.bt_src.is_some() != self.label.bt_src.is_some() {
            return Err(Error::invalid("back-translation and its label must come together"));
        }
        Ok(())
    }
}

fn check_label(task: TaskKind, label: &SeqLabel, len: usize) -> Result<()> {
    let ok = match (task, label) {
        (TaskKind::Classification, SeqLabel::Class(c)) => *c < label_count(task),
        (TaskKind::Structured, SeqLabel::Tags(tags)) => {
            tags.len() == len && tags.iter().flatten().all(|&t| t < label_count(task))
        }
        (TaskKind::Span, SeqLabel::Span { start, end }) => start <= end && *end < len,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("label {label:?} does not fit a {task} sequence of length {len}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub task: TaskKind,
    pub train: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
}

impl DatasetBundle {
    pub fn empty(task: TaskKind) -> Self {
        DatasetBundle {
            task,
            train: vec![],
            test: vec![],
        }
    }

    /// Labelled real source-language training text.
    pub fn source_train(&self) -> Vec<&[usize]> {
        self.train.iter().filter(|e| e.provenance.src_is_real).map(|e| e.src.as_slice()).collect()
    }

    /// Machine-translated target-language training text.
    pub fn target_train(&self) -> Vec<&[usize]> {
        self.train.iter().map(|e| e.tgt.as_slice()).collect()
    }

    /// Source text obtained by translating the target training text back.
    pub fn back_translated_train(&self) -> Vec<&[usize]> {
        self.train.iter().filter_map(|e| e.bt_src.as_deref()).collect()
    }

    /// Naturally written target-language test text.
    pub fn target_test(&self) -> Vec<&[usize]> {
        self.test.iter().filter(|e| e.provenance.tgt_is_real).map(|e| e.tgt.as_slice()).collect()
    }

    /// Test text translated into the source language.
    pub fn translate_test(&self) -> Vec<&[usize]> {
        self.test.iter().map(|e| e.src.as_slice()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for e in self.train.iter().chain(&self.test) {
            e.validate(self.task)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSizes {
    pub train: usize,
    pub test: usize,
}

/// Carries a label through a translation.
pub fn map_label(label: &SeqLabel, tr: &Translation) -> SeqLabel {
    match label {
        SeqLabel::Class(c) => SeqLabel::Class(*c),
        SeqLabel::Tags(tags) => SeqLabel::Tags(
            tr.origin
                .iter()
                .zip(&tr.corrupted)
                .map(|(&o, &bad)| if bad { None } else { tags[o] })
                .collect(),
        ),
        SeqLabel::Span { start, end } => {
            let moved: Vec<usize> = tr
                .origin
                .iter()
                .enumerate()
                .filter(|(_, o)| (*start..=*end).contains(*o))
                .map(|(j, _)| j)
                .collect();
            SeqLabel::Span {
                start: *moved.iter().min().expect("span is non-empty"),
                end: *moved.iter().max().expect("span is non-empty"),
            }
        }
    }
}

fn filler(vocab: &Vocab, rng: &mut impl Rng) -> usize {
    let first = KEYWORD_GROUP_B[2] + 1;
    vocab.source_token(rng.random_range(first..vocab.words))
}

fn pick(group: &[usize], vocab: &Vocab, rng: &mut impl Rng) -> usize {
    vocab.source_token(group[rng.random_range(0..group.len())])
}

/// One labelled source-language sentence.
fn source_sentence(task: TaskKind, vocab: &Vocab, rng: &mut impl Rng) -> (Vec<usize>, SeqLabel) {
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    let mut tokens: Vec<usize> = (0..len).map(|_| filler(vocab, rng)).collect();
    let keywords: Vec<usize> = KEYWORD_GROUP_A.iter().chain(&KEYWORD_GROUP_B).copied().collect();
    match task {
        TaskKind::Classification => {
            let class = rng.random_range(0..label_count(task));
            let mut free: Vec<usize> = (0..len).collect();
            for (present, group) in [(class & 2 != 0, &KEYWORD_GROUP_A), (class & 1 != 0, &KEYWORD_GROUP_B)] {
                if !present {
                    continue;
                }
                for _ in 0..rng.random_range(1..=2) {
                    let slot = free.swap_remove(rng.random_range(0..free.len()));
                    tokens[slot] = pick(group, vocab, rng);
                }
            }
            (tokens, SeqLabel::Class(class))
        }
        TaskKind::Structured => {
            let mut tags = vec![Some(0); len];
            for (tok, tag) in tokens.iter_mut().zip(tags.iter_mut()) {
                if rng.random::<f64>() < KEYWORD_TAG_RATE {
                    *tok = pick(&keywords, vocab, rng);
                    *tag = Some(1);
                }
            }
            (tokens, SeqLabel::Tags(tags))
        }
        TaskKind::Span => {
            let run = rng.random_range(1..=3);
            let start = rng.random_range(0..=len - run);
            for tok in &mut tokens[start..start + run] {
                *tok = pick(&keywords, vocab, rng);
            }
            (tokens, SeqLabel::Span { start, end: start + run - 1 })
        }
    }
}

/// Generates all five data collections. The bundle is a pure function of the arguments.
pub fn gen_bundle(task: TaskKind, sizes: BundleSizes, spec: &ToyLanguageSpec, seed: u64) -> Result<DatasetBundle> {
    if sizes.train == 0 || sizes.test == 0 {
        return Err(Error::invalid("bundle sizes must be positive"));
    }
    spec.validate()?;
    let vocab = spec.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(sizes.train);
    for _ in 0..sizes.train {
        let (src, label) = source_sentence(task, &vocab, &mut rng);
        let fwd = translate_aligned(&src, spec, Direction::Forward, &mut rng)?;
        let tgt_label = map_label(&label, &fwd);
        let bwd = translate_aligned(&fwd.tokens, spec, Direction::Backward, &mut rng)?;
        let bt_label = map_label(&tgt_label, &bwd);
        train.push(ParallelExample {
            split: Split::Train,
            src,
            tgt: fwd.tokens,
            bt_src: Some(bwd.tokens),
            label: ExampleLabel {
                src: label,
                tgt: tgt_label,
                bt_src: Some(bt_label),
            },
            provenance: Provenance {
                src_is_real: true,
                tgt_is_real: false,
            },
        });
    }
    let mut test = Vec::with_capacity(sizes.test);
    for _ in 0..sizes.test {
        let (meaning, label) = source_sentence(task, &vocab, &mut rng);
        let tgt = spec.natural_target(&meaning, &mut rng)?;
        let tt = translate_aligned(&tgt, spec, Direction::Backward, &mut rng)?;
        let src_label = map_label(&label, &tt);
        test.push(ParallelExample {
            split: Split::Test,
            src: tt.tokens,
            tgt,
            bt_src: None,
            label: ExampleLabel {
                src: src_label,
                tgt: label,
                bt_src: None,
            },
            provenance: Provenance {
                src_is_real: false,
                tgt_is_real: true,
            },
        });
    }
    let bundle = DatasetBundle { task, train, test };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(swap: f64, noise: f64) -> ToyLanguageSpec {
        ToyLanguageSpec::new(50, swap, noise, 0.0, 11).unwrap()
    }

    fn sizes(train: usize, test: usize) -> BundleSizes {
        BundleSizes { train, test }
    }

    #[test]
    fn five_collections_have_requested_sizes() {
        let b = gen_bundle(TaskKind::Classification, sizes(4, 2), &spec(0.1, 0.1), 5).unwrap();
        let counts = [
            b.source_train().len(),
            b.target_train().len(),
            b.back_translated_train().len(),
            b.target_test().len(),
            b.translate_test().len(),
        ];
        assert_eq!(counts, [4, 4, 4, 2, 2]);
    }

    #[test]
    fn classification_labels_survive_noise() {
        for noise in [0.0, 0.5, 1.0] {
            let b = gen_bundle(TaskKind::Classification, sizes(30, 5), &spec(0.2, noise), 1).unwrap();
            for e in b.train.iter().chain(&b.test) {
                assert_eq!(e.label.src, e.label.tgt);
            }
        }
    }

    #[test]
    fn classes_follow_keyword_groups() {
        let b = gen_bundle(TaskKind::Classification, sizes(50, 1), &spec(0.0, 0.0), 2).unwrap();
        for e in &b.train {
            let SeqLabel::Class(c) = e.label.src else { panic!() };
            let has = |g: &[usize]| e.src.iter().any(|&t| g.contains(&(t - 1)));
            assert_eq!(c, 2 * has(&KEYWORD_GROUP_A) as usize + has(&KEYWORD_GROUP_B) as usize);
        }
    }

    #[test]
    fn clean_structured_tags_follow_the_cipher() {
        let s = spec(0.0, 0.0);
        let vocab = s.vocab().unwrap();
        let b = gen_bundle(TaskKind::Structured, sizes(20, 2), &s, 3).unwrap();
        for e in &b.train {
            assert_eq!(e.label.src, e.label.tgt);
            for (&src, &tgt) in e.src.iter().zip(&e.tgt) {
                assert_eq!(vocab.target_token(s.cipher[src - 1]), tgt);
            }
        }
    }

    #[test]
    fn corrupted_tokens_lose_their_tag() {
        let b = gen_bundle(TaskKind::Structured, sizes(40, 2), &spec(0.0, 0.5), 3).unwrap();
        let missing = b
            .train
            .iter()
            .filter_map(|e| match &e.label.tgt {
                SeqLabel::Tags(t) => Some(t.iter().filter(|x| x.is_none()).count()),
                _ => None,
            })
            .sum::<usize>();
        assert!(missing > 0);
    }

    #[test]
    fn spans_move_with_swaps() {
        let b = gen_bundle(TaskKind::Span, sizes(40, 5), &spec(0.5, 0.0), 4).unwrap();
        let s = spec(0.5, 0.0);
        let vocab = s.vocab().unwrap();
        for e in &b.train {
            let SeqLabel::Span { start, end } = e.label.tgt else { panic!() };
            let n = e.src[..].iter().filter(|&&t| Vocab::is_keyword_word(t - 1)).count();
            let inside = e.tgt[start..=end]
                .iter()
                .filter(|&&t| Vocab::is_keyword_word(s.inverse_word(vocab.target_word(t).unwrap())))
                .count();
            assert_eq!(inside, n);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(0.1, 0.1);
        let a = gen_bundle(TaskKind::Span, sizes(10, 3), &s, 8).unwrap();
        let b = gen_bundle(TaskKind::Span, sizes(10, 3), &s, 8).unwrap();
        assert_eq!(a, b);
        let c = gen_bundle(TaskKind::Span, sizes(10, 3), &s, 9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(gen_bundle(TaskKind::Span, sizes(0, 3), &spec(0.1, 0.1), 8).is_err());
    }

    #[test]
    fn test_pairs_are_real_targets() {
        let b = gen_bundle(TaskKind::Classification, sizes(2, 3), &spec(0.1, 0.1), 8).unwrap();
        assert!(b.test.iter().all(|e| e.provenance.tgt_is_real && !e.provenance.src_is_real && e.bt_src.is_none()));
        assert!(b.train.iter().all(|e| e.provenance.src_is_real && !e.provenance.tgt_is_real));
    }
}
