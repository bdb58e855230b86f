//! Byte-level batches over an in-memory corpus, plus a seeded synthetic corpus.
//!
//! The corpus tail is reserved for evaluation; training windows are drawn
//! from the head. Batch `i` is a pure function of `(seed, i)`, so the only
//! sampler state worth snapshotting is the cursor.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Row-major `batch_size x seq_len` token ids with next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn new(batch_size: usize, seq_len: usize, inputs: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        let n = batch_size * seq_len;
        if inputs.len() != n {
            return Err(Error::DataLength { expected: n, got: inputs.len() });
        }
        if targets.len() != n {
            return Err(Error::DataLength { expected: n, got: targets.len() });
        }
        Ok(Batch { batch_size, seq_len, inputs, targets })
    }

    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }

    /// Build a batch from `batch_size` windows of `seq_len + 1` bytes each.
    fn from_windows<'a>(windows: impl Iterator<Item = &'a [u8]>, batch_size: usize, seq_len: usize) -> Self {
        let mut inputs = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for w in windows {
            inputs.extend(w[..seq_len].iter().map(|&b| b as u32));
            targets.extend(w[1..].iter().map(|&b| b as u32));
        }
        Batch { batch_size, seq_len, inputs, targets }
    }
}

#[derive(Clone, Debug)]
pub struct BatchStream {
    corpus: Arc<[u8]>,
    train_len: usize,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    eval_batches: usize,
    cursor: u64,
}

impl BatchStream {
    pub fn new(corpus: Arc<[u8]>, batch_size: usize, seq_len: usize, seed: u64, eval_batches: usize) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::InvalidConfig("batch_size and seq_len must be >= 1"));
        }
        let window = seq_len + 1;
        let eval_len = eval_batches * batch_size * window;
        if corpus.len() < eval_len + window {
            return Err(Error::InvalidConfig("corpus too small for the eval tail plus one window"));
        }
        Ok(BatchStream {
            train_len: corpus.len() - eval_len,
            corpus,
            batch_size,
            seq_len,
            seed,
            eval_batches,
            cursor: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    /// Training batch number `index`; independent of the cursor.
    pub fn batch_at(&self, index: u64) -> Batch {
        let window = self.seq_len + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let last = self.train_len - window;
        let offsets: Vec<usize> = (0..self.batch_size).map(|_| rng.random_range(0..=last)).collect();
        Batch::from_windows(
            offsets.iter().map(|&o| &self.corpus[o..o + window]),
            self.batch_size,
            self.seq_len,
        )
    }

    pub fn next_batch(&mut self) -> Batch {
        let b = self.batch_at(self.cursor);
        self.cursor += 1;
        b
    }

    /// Fixed held-out batches: consecutive windows of the corpus tail.
    pub fn eval_set(&self) -> Vec<Batch> {
        let window = self.seq_len + 1;
        let tail = &self.corpus[self.train_len..];
        tail.chunks_exact(window * self.batch_size)
            .take(self.eval_batches)
            .map(|chunk| Batch::from_windows(chunk.chunks_exact(window), self.batch_size, self.seq_len))
            .collect()
    }
}

/// Seeded pseudo-English text: a Zipf-distributed word list with sticky
/// bigram successors, so a small model has something to learn.
pub fn synthetic_corpus(seed: u64, len: usize) -> Vec<u8> {
    const WORDS: usize = 400;
    const LETTERS: &[u8] = b"eeeeettttaaaooooiinnnsssshhrrdddlluccmmwffggyppbvk";
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_0b5c_0001);

    let words: Vec<Vec<u8>> = (0..WORDS)
        .map(|_| {
            let n = 1 + rng.random_range(0..7usize);
            (0..n).map(|_| LETTERS[rng.random_range(0..LETTERS.len())]).collect()
        })
        .collect();
    let successors: Vec<[usize; 4]> = (0..WORDS)
        .map(|_| core::array::from_fn(|_| rng.random_range(0..WORDS)))
        .collect();
    let mut cumulative = Vec::with_capacity(WORDS);
    let mut acc = 0.0f64;
    for i in 0..WORDS {
        acc += 1.0 / (i + 1) as f64;
        cumulative.push(acc);
    }
    let zipf = |rng: &mut ChaCha8Rng| {
        let u = rng.random::<f64>() * acc;
        cumulative.partition_point(|&c| c < u).min(WORDS - 1)
    };

    let mut out = Vec::with_capacity(len + 16);
    let mut word = zipf(&mut rng);
    let mut in_sentence = 0usize;
    let mut sentence_len = 5 + rng.random_range(0..10usize);
    while out.len() < len {
        out.extend_from_slice(&words[word]);
        in_sentence += 1;
        if in_sentence >= sentence_len {
            out.extend_from_slice(if rng.random_range(0..4u8) == 0 { b".\n" } else { b". " });
            in_sentence = 0;
            sentence_len = 5 + rng.random_range(0..10usize);
            word = zipf(&mut rng);
        } else {
            out.push(b' ');
            word = if rng.random::<f64>() < 0.6 {
                successors[word][rng.random_range(0..4usize)]
            } else {
                zipf(&mut rng)
            };
        }
    }
    out.truncate(len);
    out
}
