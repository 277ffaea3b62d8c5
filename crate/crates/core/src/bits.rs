//! Packed bit strings.
//!
//! Keys and diagonals are stored as `BitVec<u64, Lsb0>`: bit `i` lives in
//! word `i / 64` at position `i % 64`. Byte serialisation is MSB-first,
//! bit `i` of the string going to bit `7 - i % 8` of byte `i / 8`.

use bitvec::prelude::*;

pub type BitString = BitVec<u64, Lsb0>;

/// Words of `bits` with every bit past `bits.len()` cleared.
pub fn words(bits: &BitSlice<u64, Lsb0>) -> Vec<u64> {
    let mut out = vec![0u64; bits.len().div_ceil(64)];
    for (w, chunk) in out.iter_mut().zip(bits.chunks(64)) {
        *w = chunk.load_le::<u64>();
    }
    out
}

pub fn from_words(words: &[u64], len: usize) -> BitString {
    assert!(len <= words.len() * 64);
    let mut bv = BitString::from_slice(words);
    bv.truncate(len);
    bv
}

pub fn to_bytes(bits: &BitSlice<u64, Lsb0>) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for i in bits.iter_ones() {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

pub fn from_bytes(bytes: &[u8], len: usize) -> BitString {
    assert!(len <= bytes.len() * 8);
    let mut bv = BitString::repeat(false, len);
    for i in 0..len {
        if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
            bv.set(i, true);
        }
    }
    bv
}

pub fn from_bools<I: IntoIterator<Item = bool>>(it: I) -> BitString {
    it.into_iter().collect()
}

/// Number of positions where `a` and `b` differ. Lengths must match.
pub fn hamming_distance(a: &BitSlice<u64, Lsb0>, b: &BitSlice<u64, Lsb0>) -> usize {
    assert_eq!(a.len(), b.len(), "length mismatch");
    words(a)
        .iter()
        .zip(words(b))
        .map(|(x, y)| (x ^ y).count_ones() as usize)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn msb_first_bytes() {
        let bv = from_bools([true, false, false, false, false, false, false, true, true]);
        assert_eq!(to_bytes(&bv), vec![0x81, 0x80]);
    }

    #[test]
    fn tail_bits_are_masked() {
        let mut bv = BitString::repeat(true, 70);
        bv.truncate(3);
        assert_eq!(words(&bv), vec![0b111]);
    }

    proptest! {
        #[test]
        fn byte_and_word_round_trip(v in proptest::collection::vec(any::<bool>(), 0..300)) {
            let bv = from_bools(v.iter().copied());
            prop_assert_eq!(from_bytes(&to_bytes(&bv), bv.len()), bv.clone());
            prop_assert_eq!(from_words(&words(&bv), bv.len()), bv);
        }
    }
}
