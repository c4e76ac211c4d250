//! Planted-keyword classification task.
//!
//! Every document is uniform noise over the non-keyword ids with one to
//! three keywords of its class written over random positions. The class is
//! fully determined by the keywords, so a model only needs to keep those.

use leap_core::data::{Document, UNK_ID};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::{Vocabulary, PAD_TOKEN, UNK_TOKEN};

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordTask {
    pub vocab_size: usize,
    pub classes: usize,
    pub length: usize,
    pub keywords_per_class: usize,
    pub min_planted: usize,
    pub max_planted: usize,
}

impl Default for KeywordTask {
    fn default() -> Self {
        KeywordTask {
            vocab_size: 200,
            classes: 2,
            length: 100,
            keywords_per_class: 5,
            min_planted: 1,
            max_planted: 3,
        }
    }
}

impl KeywordTask {
    /// First id after PAD and UNK.
    const FIRST: u32 = UNK_ID + 1;

    pub fn keywords(&self, class: usize) -> std::ops::Range<u32> {
        let start = Self::FIRST + (class * self.keywords_per_class) as u32;
        start..start + self.keywords_per_class as u32
    }

    pub fn is_keyword(&self, id: u32) -> bool {
        let end = Self::FIRST + (self.classes * self.keywords_per_class) as u32;
        (Self::FIRST..end).contains(&id)
    }

    fn noise_range(&self) -> std::ops::Range<u32> {
        Self::FIRST + (self.classes * self.keywords_per_class) as u32..self.vocab_size as u32
    }

    pub fn document<R: Rng + ?Sized>(&self, rng: &mut R) -> Document {
        let label = rng.gen_range(0..self.classes);
        let noise = self.noise_range();
        let mut tokens: Vec<u32> = (0..self.length).map(|_| rng.gen_range(noise.clone())).collect();
        let planted = rng.gen_range(self.min_planted..=self.max_planted);
        let mut positions: Vec<usize> = (0..self.length).collect();
        positions.shuffle(rng);
        for &pos in &positions[..planted] {
            tokens[pos] = rng.gen_range(self.keywords(label));
        }
        Document::new(tokens, label)
    }

    /// Names for every id: `kw{class}_{i}` for keywords, `w{id}` for noise.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for id in Self::FIRST..self.vocab_size as u32 {
            let offset = (id - Self::FIRST) as usize;
            tokens.push(if self.is_keyword(id) {
                let (c, i) = (offset / self.keywords_per_class, offset % self.keywords_per_class);
                format!("kw{c}_{i}")
            } else {
                format!("w{id}")
            });
        }
        Vocabulary::from_tokens(tokens).expect("synthetic names are distinct")
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<Document> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.document(&mut rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_carry_keywords_of_their_class_only() {
        let task = KeywordTask::default();
        for doc in task.generate(300, 5) {
            assert_eq!(doc.len(), 100);
            let kw: Vec<u32> = doc.tokens.iter().copied().filter(|&t| task.is_keyword(t)).collect();
            assert!((1..=3).contains(&kw.len()));
            assert!(kw.iter().all(|t| task.keywords(doc.label).contains(t)));
            assert!(doc.tokens.iter().all(|&t| t > UNK_ID && (t as usize) < 200));
        }
    }

    #[test]
    fn vocabulary_names_keywords() {
        let task = KeywordTask::default();
        let v = task.vocabulary();
        assert_eq!(v.len(), 200);
        assert_eq!(v.token(2), Some("kw0_0"));
        assert_eq!(v.token(7), Some("kw1_0"));
        assert_eq!(v.token(12), Some("w12"));
    }
}
