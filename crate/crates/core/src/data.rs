//! Documents, padded batches, and the schedule-training word mask.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tape::PAD_ID;

/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

/// A token-id sequence with its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Document {
    pub tokens: Vec<u32>,
    pub label: usize,
}

impl Document {
    pub fn new(tokens: Vec<u32>, label: usize) -> Self {
        Document { tokens, label }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Documents padded with [`PAD_ID`] into a `[batch x max_len]` id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    ids: Vec<u32>,
    lengths: Vec<usize>,
    labels: Vec<usize>,
    max_len: usize,
}

impl Batch {
    pub fn from_documents<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a Document>,
    {
        let docs: Vec<&Document> = docs.into_iter().collect();
        let max_len = docs.iter().map(|d| d.len()).max().unwrap_or(0);
        let mut ids = vec![PAD_ID; docs.len() * max_len];
        for (b, doc) in docs.iter().enumerate() {
            ids[b * max_len..b * max_len + doc.len()].copy_from_slice(&doc.tokens);
        }
        Batch {
            ids,
            lengths: docs.iter().map(|d| d.len()).collect(),
            labels: docs.iter().map(|d| d.label).collect(),
            max_len,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn token(&self, doc: usize, t: usize) -> u32 {
        self.ids[doc * self.max_len + t]
    }

    pub fn row(&self, doc: usize) -> &[u32] {
        &self.ids[doc * self.max_len..(doc + 1) * self.max_len]
    }

    /// Ids laid out time-major: entry `t * size + b` is position `t` of
    /// document `b`.
    pub fn time_major_ids(&self) -> Vec<u32> {
        let n = self.size();
        let mut out = vec![PAD_ID; n * self.max_len];
        for b in 0..n {
            for t in 0..self.max_len {
                out[t * n + b] = self.ids[b * self.max_len + t];
            }
        }
        out
    }

    /// Number of non-padding tokens.
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Splits documents into batches of at most `batch_size`, shuffling first
/// when a generator is supplied. The final partial batch is kept.
pub fn make_batches<R: Rng + ?Sized>(
    docs: &[Document],
    batch_size: usize,
    shuffle: Option<&mut R>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..docs.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_documents(chunk.iter().map(|&i| &docs[i])))
        .collect()
}

/// Per-epoch deletion probability `max(0, r_m - i * beta)`.
///
/// Values within 1e-12 of zero snap to exactly zero so that the epoch where
/// the schedule runs out leaves documents untouched despite rounding.
pub fn mask_probability(r_m: f64, beta: f64, epoch: usize) -> f64 {
    let p = r_m - epoch as f64 * beta;
    if p < 1e-12 {
        0.0
    } else {
        p.min(1.0)
    }
}

/// Deletes each token independently with probability `p`, keeping order.
/// If every token would go, one uniformly chosen token survives.
pub fn schedule_mask<R: Rng + ?Sized>(doc: &Document, p: f64, rng: &mut R) -> Document {
    if p <= 0.0 || doc.is_empty() {
        return doc.clone();
    }
    let tokens: Vec<u32> = doc
        .tokens
        .iter()
        .copied()
        .filter(|_| !rng.gen_bool(p.min(1.0)))
        .collect();
    let tokens = if tokens.is_empty() {
        vec![doc.tokens[rng.gen_range(0..doc.len())]]
    } else {
        tokens
    };
    Document {
        tokens,
        label: doc.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(len: usize, label: usize) -> Document {
        Document::new((2..2 + len as u32).collect(), label)
    }

    #[test]
    fn mask_probability_schedule() {
        assert_eq!(mask_probability(0.45, 0.15, 0), 0.45);
        assert!((mask_probability(0.45, 0.15, 1) - 0.30).abs() < 1e-15);
        assert!((mask_probability(0.45, 0.15, 2) - 0.15).abs() < 1e-15);
        assert_eq!(mask_probability(0.45, 0.15, 3), 0.0);
        assert_eq!(mask_probability(0.45, 0.15, 7), 0.0);
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = doc(20, 1);
        assert_eq!(schedule_mask(&d, 0.0, &mut rng), d);
    }

    #[test]
    fn full_mask_retains_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = doc(10, 0);
        let m = schedule_mask(&d, 1.0, &mut rng);
        assert_eq!(m.len(), 1);
        assert!(d.tokens.contains(&m.tokens[0]));
    }

    #[test]
    fn surviving_tokens_keep_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = doc(200, 0);
        let m = schedule_mask(&d, 0.5, &mut rng);
        assert!(m.tokens.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m.label, 0);
    }

    #[test]
    fn partial_batch_and_padding() {
        let docs: Vec<Document> = (0..10).map(|i| doc(1 + i % 3, 0)).collect();
        let batches = make_batches::<ChaCha8Rng>(&docs, 32, None);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].size(), 10);

        let b = Batch::from_documents([&doc(3, 0), &doc(5, 1)]);
        assert_eq!(b.max_len(), 5);
        assert_eq!(b.row(0), &[2, 3, 4, PAD_ID, PAD_ID]);
        assert_eq!(b.row(1), &[2, 3, 4, 5, 6]);
        assert_eq!(b.token_count(), 8);
        let tm = b.time_major_ids();
        assert_eq!(&tm[6..10], &[PAD_ID, 5, PAD_ID, 6]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let docs: Vec<Document> = (0..50).map(|i| doc(1 + i % 7, i)).collect();
        let a = make_batches(&docs, 8, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        let b = make_batches(&docs, 8, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert_eq!(a.last().unwrap().size(), 2);
    }
}
