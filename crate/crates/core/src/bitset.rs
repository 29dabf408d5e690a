//! Fixed-length bitset used for kernel masks.

use alloc::vec;
use alloc::vec::Vec;

/// A fixed-length set of bits with set-algebra helpers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitset {
    len: usize,
    words: Vec<u64>,
}

impl Bitset {
    pub fn zeros(len: usize) -> Self {
        Bitset {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut bits = Bitset {
            len,
            words: vec![u64::MAX; len.div_ceil(64)],
        };
        bits.trim();
        bits
    }

    /// Zero out bits beyond `len` in the last word.
    fn trim(&mut self) {
        let used = self.len % 64;
        if used != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << used) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, idx: usize) -> bool {
        assert!(idx < self.len, "bit index {idx} out of range {}", self.len);
        self.words[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        assert!(idx < self.len, "bit index {idx} out of range {}", self.len);
        let mask = 1u64 << (idx % 64);
        if value {
            self.words[idx / 64] |= mask;
        } else {
            self.words[idx / 64] &= !mask;
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &Bitset) {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn intersect_with(&mut self, other: &Bitset) {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    pub fn complement(&self) -> Bitset {
        let mut out = Bitset {
            len: self.len,
            words: self.words.iter().map(|w| !w).collect(),
        };
        out.trim();
        out
    }

    pub fn is_subset_of(&self, other: &Bitset) -> bool {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    /// Raw 64-bit words, little-bit-endian, for serialization.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn from_words(len: usize, words: Vec<u64>) -> Option<Self> {
        if words.len() != len.div_ceil(64) {
            return None;
        }
        let mut bits = Bitset { len, words };
        let mut trimmed = bits.clone();
        trimmed.trim();
        if trimmed != bits {
            return None; // stray bits beyond len
        }
        bits.trim();
        Some(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_count() {
        let mut b = Bitset::zeros(70);
        assert_eq!(b.count(), 0);
        b.set(0, true);
        b.set(69, true);
        assert!(b.get(0) && b.get(69) && !b.get(35));
        assert_eq!(b.count(), 2);
        b.set(0, false);
        assert_eq!(b.count(), 1);
    }

    #[test]
    fn complement_respects_length() {
        let mut b = Bitset::zeros(65);
        b.set(3, true);
        let c = b.complement();
        assert_eq!(c.count(), 64);
        assert!(!c.get(3));
        assert!(c.get(64));
    }

    #[test]
    fn union_and_subset() {
        let mut a = Bitset::zeros(8);
        let mut b = Bitset::zeros(8);
        a.set(0, true);
        a.set(1, true);
        b.set(1, true);
        b.set(2, true);
        assert!(!a.is_subset_of(&b));
        let mut u = a.clone();
        u.union_with(&b);
        assert_eq!(u.iter_ones().collect::<alloc::vec::Vec<_>>(), [0, 1, 2]);
        assert!(a.is_subset_of(&u));
    }

    #[test]
    fn word_round_trip() {
        let mut a = Bitset::zeros(100);
        for i in [0, 17, 63, 64, 99] {
            a.set(i, true);
        }
        let b = Bitset::from_words(100, a.words().to_vec()).unwrap();
        assert_eq!(a, b);
        // stray high bits rejected
        let mut words = a.words().to_vec();
        words[1] |= 1u64 << 40; // bit 104 > len
        assert!(Bitset::from_words(100, words).is_none());
    }
}
