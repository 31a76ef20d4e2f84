//! Token streams for the trainer: a synthetic selective-copy task and
//! byte-level windows over local text files.
//!
//! # Selective copy
//!
//! Token ids: `0` is padding, `1` the end marker, then a small noise
//! alphabet, then the data alphabet (everything from
//! [`SelectiveCopySpec::first_data_token`] up). A sequence of length `T`
//! with `k` marked tokens is laid out as
//!
//! ```text
//! position  0 ........................ L-2   L-1   L ....... T-1
//! input     noise with k data tokens         END   PAD ..... PAD
//! ```
//!
//! where `L = T - k`. The data tokens are placed at distinct random
//! positions of the context, in increasing position order. Targets are the
//! next-token stream of the answer: `target[L-1+i]` is the `i`-th data
//! token for `i < k`, every other target is padding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const PAD: u32 = 0;
pub const END: u32 = 1;
/// Bytes occupy ids `0..256`; padding for text streams is `256`.
pub const BYTE_PAD: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid sizes: {0}")]
    InvalidSizes(String),
    #[error("cannot read `{path}`: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty stream: no full windows")]
    Empty,
}

/// One padded mini-batch. Rows past `valid` are padding rows that count
/// toward token totals but carry no loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub valid: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// A finite set of `(inputs, targets)` sequences served as shuffled
/// fixed-size batches, one permutation per epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    inputs: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
    vocab_size: usize,
    seed: u64,
    pad: u32,
}

impl BatchStream {
    pub fn new(
        inputs: Vec<Vec<u32>>,
        targets: Vec<Vec<u32>>,
        vocab_size: usize,
        seed: u64,
        pad: u32,
    ) -> Result<Self, DataError> {
        if inputs.len() != targets.len() {
            return Err(DataError::InvalidSizes(format!(
                "{} input rows but {} target rows",
                inputs.len(),
                targets.len()
            )));
        }
        let len = inputs.first().map_or(0, Vec::len);
        for (i, t) in inputs.iter().zip(&targets) {
            if i.len() != len || t.len() != len {
                return Err(DataError::InvalidSizes("ragged sequences".into()));
            }
            if let Some(bad) = i.iter().chain(t).find(|&&tok| tok as usize >= vocab_size) {
                return Err(DataError::InvalidSizes(format!(
                    "token {bad} outside vocab {vocab_size}"
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            vocab_size,
            seed,
            pad,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pad_token(&self) -> u32 {
        self.pad
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn sequence(&self, i: usize) -> (&[u32], &[u32]) {
        (&self.inputs[i], &self.targets[i])
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }

    /// Sequence order for `epoch`; epoch 0 keeps generation order.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if epoch > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        order
    }

    /// The `step`-th batch of an endless epoch cycle. A short final batch is
    /// filled with padding rows.
    pub fn batch(&self, step: usize, batch_size: usize) -> Batch {
        let per_epoch = self.batches_per_epoch(batch_size);
        let epoch = step / per_epoch;
        let order = self.epoch_order(epoch);
        let start = (step % per_epoch) * batch_size;
        let picked = &order[start..(start + batch_size).min(order.len())];
        let t = self.seq_len();
        let mut inputs: Vec<Vec<u32>> = picked.iter().map(|&i| self.inputs[i].clone()).collect();
        let mut targets: Vec<Vec<u32>> = picked.iter().map(|&i| self.targets[i].clone()).collect();
        let valid = inputs.len();
        inputs.resize(batch_size, vec![self.pad; t]);
        targets.resize(batch_size, vec![self.pad; t]);
        Batch { inputs, targets, valid }
    }

    /// All sequences in order, as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
            valid: self.len(),
        }
    }
}

/// Parameters of the selective-copy generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectiveCopySpec {
    pub seq_len: usize,
    pub vocab: usize,
    /// Number of marked tokens per sequence.
    pub marked: usize,
    pub n_sequences: usize,
}

/// Default count of marked tokens.
pub const DEFAULT_MARKED: usize = 1;

impl SelectiveCopySpec {
    pub fn new(seq_len: usize, vocab: usize, n_sequences: usize) -> Self {
        Self {
            seq_len,
            vocab,
            marked: DEFAULT_MARKED,
            n_sequences,
        }
    }

    pub fn with_marked(mut self, marked: usize) -> Self {
        self.marked = marked;
        self
    }

    /// Noise ids are `2..first_data_token()`.
    pub fn first_data_token(&self) -> u32 {
        let noise = ((self.vocab - 2) / 4).max(1);
        (2 + noise) as u32
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.seq_len < 8 {
            return Err(DataError::InvalidSizes(format!("T = {} is below 8", self.seq_len)));
        }
        if self.vocab < 4 {
            return Err(DataError::InvalidSizes(format!("vocab = {} is below 4", self.vocab)));
        }
        // the context holds the k data tokens plus END
        if 2 * self.marked + 1 > self.seq_len {
            return Err(DataError::InvalidSizes(format!(
                "{} marked tokens do not fit in T = {}",
                self.marked, self.seq_len
            )));
        }
        Ok(())
    }
}

/// `n_sequences` selective-copy sequences with [`DEFAULT_MARKED`] marked
/// tokens each.
pub fn gen_selective_copy(
    seed: u64,
    seq_len: usize,
    vocab: usize,
    n_sequences: usize,
) -> Result<BatchStream, DataError> {
    gen_selective_copy_with(&SelectiveCopySpec::new(seq_len, vocab, n_sequences), seed)
}

pub fn gen_selective_copy_with(spec: &SelectiveCopySpec, seed: u64) -> Result<BatchStream, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_data = spec.first_data_token();
    let context = spec.seq_len - spec.marked;
    let mut inputs = Vec::with_capacity(spec.n_sequences);
    let mut targets = Vec::with_capacity(spec.n_sequences);
    for _ in 0..spec.n_sequences {
        let mut seq = vec![PAD; spec.seq_len];
        for tok in seq.iter_mut().take(context - 1) {
            *tok = rng.random_range(2..first_data);
        }
        seq[context - 1] = END;
        let mut slots: Vec<usize> = rand::seq::index::sample(&mut rng, context - 1, spec.marked).into_vec();
        slots.sort_unstable();
        for slot in slots {
            seq[slot] = rng.random_range(first_data..spec.vocab as u32);
        }
        targets.push(label_selective_copy(&seq, first_data));
        inputs.push(seq);
    }
    BatchStream::new(inputs, targets, spec.vocab, seed, PAD)
}

/// Targets implied by an input sequence: the data tokens before `END`, in
/// order, starting at the `END` position.
pub fn label_selective_copy(inputs: &[u32], first_data: u32) -> Vec<u32> {
    let mut targets = vec![PAD; inputs.len()];
    if let Some(end) = inputs.iter().position(|&t| t == END) {
        let data = inputs[..end].iter().filter(|&&t| t >= first_data);
        for (slot, &tok) in targets[end..].iter_mut().zip(data) {
            *slot = tok;
        }
    }
    targets
}

/// Byte-level windows of `max_seq_len` with next-byte targets.
///
/// A file of `N` bytes yields `floor((N - 1) / max_seq_len)` windows;
/// window `i` covers bytes `[i·L, i·L + L]`.
pub fn load_text_corpus(path: impl AsRef<Path>, max_seq_len: usize) -> Result<BatchStream, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    corpus_from_bytes(&bytes, max_seq_len)
}

pub fn corpus_from_bytes(bytes: &[u8], max_seq_len: usize) -> Result<BatchStream, DataError> {
    if max_seq_len == 0 {
        return Err(DataError::InvalidSizes("max_seq_len must be positive".into()));
    }
    let windows = bytes.len().saturating_sub(1) / max_seq_len;
    let mut inputs = Vec::with_capacity(windows);
    let mut targets = Vec::with_capacity(windows);
    for w in 0..windows {
        let s = w * max_seq_len;
        inputs.push(bytes[s..s + max_seq_len].iter().map(|&b| b as u32).collect());
        targets.push(bytes[s + 1..s + max_seq_len + 1].iter().map(|&b| b as u32).collect());
    }
    BatchStream::new(inputs, targets, BYTE_VOCAB, 0, BYTE_PAD)
}

/// A held-out stream drawn with an independent seed.
pub fn held_out_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x5EED_0F_F5E7)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let spec = SelectiveCopySpec::new(16, 16, 20).with_marked(3);
        let s = gen_selective_copy_with(&spec, 5).unwrap();
        let first = spec.first_data_token();
        for i in 0..s.len() {
            let (inp, tgt) = s.sequence(i);
            assert_eq!(inp[12], END);
            assert!(inp[13..].iter().all(|&t| t == PAD));
            assert_eq!(inp[..12].iter().filter(|&&t| t >= first).count(), 3);
            assert!(tgt[..12].iter().all(|&t| t == PAD));
            assert!(tgt[12..15].iter().all(|&t| t >= first));
            assert_eq!(tgt[15], PAD);
        }
    }

    #[test]
    fn zero_marked_is_all_padding() {
        let spec = SelectiveCopySpec::new(8, 4, 10).with_marked(0);
        let s = gen_selective_copy_with(&spec, 1).unwrap();
        for i in 0..s.len() {
            assert!(s.sequence(i).1.iter().all(|&t| t == PAD));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gen_selective_copy(0, 7, 16, 1).is_err());
        assert!(gen_selective_copy(0, 8, 3, 1).is_err());
        let spec = SelectiveCopySpec::new(8, 16, 1).with_marked(4);
        assert!(gen_selective_copy_with(&spec, 0).is_err());
    }

    #[test]
    fn batches_cycle_and_pad() {
        let s = gen_selective_copy(3, 8, 8, 5).unwrap();
        assert_eq!(s.batches_per_epoch(2), 3);
        let last = s.batch(2, 2);
        assert_eq!(last.valid, 1);
        assert_eq!(last.inputs[1], vec![PAD; 8]);
        let first = s.batch(0, 2);
        assert_eq!(first.inputs[0], s.sequence(0).0);
        // epoch 1 is a permutation of epoch 0
        let mut seen: Vec<Vec<u32>> = (3..6)
            .flat_map(|k| {
                let b = s.batch(k, 2);
                b.inputs[..b.valid].to_vec()
            })
            .collect();
        let mut all: Vec<Vec<u32>> = (0..5).map(|i| s.sequence(i).0.to_vec()).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn corpus_windows() {
        let s = corpus_from_bytes(b"abcdefghij", 3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.sequence(1).0, &[100, 101, 102]);
        assert_eq!(s.sequence(1).1, &[101, 102, 103]);
        assert!(corpus_from_bytes(b"a", 4).unwrap().is_empty());
    }

    #[test]
    fn unreadable_path() {
        let err = load_text_corpus("/nonexistent/corpus.txt", 8).unwrap_err();
        assert!(err.to_string().starts_with("cannot read"));
    }
}
