//! Default-state lattice {0,1}^n.
//!
//! Bit `i` of the mask is set iff name `i` has defaulted. The PDE system is
//! triangular in this lattice: state `z` only depends on the states
//! `flip(z, i)` with `z_i = 0`, which carry one more default.

use crate::{Error, Result};
use std::fmt;

/// A default state `z` for `n` names.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct DefaultState {
    bits: u32,
    n: u8,
}

impl DefaultState {
    pub const MAX_NAMES: usize = 16;

    pub fn new(bits: u32, n: usize) -> Result<Self> {
        if n == 0 || n > Self::MAX_NAMES {
            return Err(Error::InvalidSpec(format!(
                "number of names must be in 1..={}, got {n}",
                Self::MAX_NAMES
            )));
        }
        if bits >> n != 0 {
            return Err(Error::InvalidSpec(format!(
                "state mask {bits:#b} has bits beyond {n} names"
            )));
        }
        Ok(Self { bits, n: n as u8 })
    }

    pub fn all_alive(n: usize) -> Result<Self> {
        Self::new(0, n)
    }

    pub fn all_defaulted(n: usize) -> Result<Self> {
        Self::new(((1u64 << n) - 1) as u32, n)
    }

    /// Parses `"z1 z2 ... zn"` written as a string of `0`/`1` characters,
    /// name 1 first.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let mut bits = 0u32;
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => bits |= 1 << i,
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "default state `{s}` must contain only 0 and 1"
                    )))
                }
            }
        }
        Self::new(bits, s.chars().count())
    }

    pub fn bitstring(&self) -> String {
        (0..self.n())
            .map(|i| if self.is_defaulted(i) { '1' } else { '0' })
            .collect()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Dense index of the state, `0 .. 2^n`.
    pub fn index(&self) -> usize {
        self.bits as usize
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn is_defaulted(&self, i: usize) -> bool {
        (self.bits >> i) & 1 == 1
    }

    pub fn is_alive(&self, i: usize) -> bool {
        !self.is_defaulted(i)
    }

    /// `1 - z_i` as a float.
    pub fn alive_factor(&self, i: usize) -> f64 {
        if self.is_alive(i) {
            1.0
        } else {
            0.0
        }
    }

    pub fn cardinality(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_all_defaulted(&self) -> bool {
        self.cardinality() == self.n()
    }

    pub fn alive_names(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(move |&i| self.is_alive(i))
    }

    /// The state obtained by toggling name `i`.
    pub fn flip(self, i: usize) -> Result<Self> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: i,
                n: self.n(),
            });
        }
        Ok(Self {
            bits: self.bits ^ (1 << i),
            n: self.n,
        })
    }

    /// The neighbour reached when alive name `i` defaults.
    pub fn with_default(self, i: usize) -> Self {
        debug_assert!(i < self.n());
        Self {
            bits: self.bits | (1 << i),
            n: self.n,
        }
    }

    /// All 2^n states in dense index order.
    pub fn all(n: usize) -> Result<Vec<Self>> {
        Self::new(0, n)?;
        Ok((0..(1u32 << n))
            .map(|bits| Self { bits, n: n as u8 })
            .collect())
    }
}

impl fmt::Display for DefaultState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.bitstring())
    }
}

/// States grouped by cardinality, from all-defaulted (`n` defaults) down to
/// all-alive. Each group only depends on earlier groups.
pub fn levels_by_cardinality_desc(n: usize) -> Result<Vec<Vec<DefaultState>>> {
    let mut levels = vec![Vec::new(); n + 1];
    for z in DefaultState::all(n)? {
        levels[n - z.cardinality()].push(z);
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(s: &str) -> DefaultState {
        DefaultState::from_bitstring(s).unwrap()
    }

    #[test]
    fn flip_examples() {
        assert_eq!(st("00").flip(0).unwrap(), st("10"));
        assert_eq!(st("11").flip(1).unwrap(), st("10"));
        let z = st("010");
        assert_eq!(z.flip(2).unwrap().flip(2).unwrap(), z);
    }

    #[test]
    fn flip_rejects_out_of_range() {
        assert!(matches!(
            st("01").flip(2),
            Err(Error::IndexOutOfRange { index: 2, n: 2 })
        ));
    }

    #[test]
    fn bitstring_round_trip_and_order() {
        let z = st("01");
        assert!(z.is_alive(0));
        assert!(z.is_defaulted(1));
        assert_eq!(z.bits(), 0b10);
        assert_eq!(z.bitstring(), "01");
        assert!(DefaultState::from_bitstring("0x").is_err());
        assert!(DefaultState::new(0, 17).is_err());
    }

    #[test]
    fn levels_start_at_all_defaulted() {
        let levels = levels_by_cardinality_desc(3).unwrap();
        assert_eq!(levels.len(), 4);
        assert_eq!(levels[0], vec![DefaultState::all_defaulted(3).unwrap()]);
        assert_eq!(levels[3], vec![DefaultState::all_alive(3).unwrap()]);
        assert_eq!(levels.iter().map(Vec::len).sum::<usize>(), 8);
    }

    proptest! {
        #[test]
        fn enumeration_is_topological(n in 1usize..=8) {
            let levels = levels_by_cardinality_desc(n).unwrap();
            let mut seen = vec![false; 1 << n];
            for (k, level) in levels.iter().enumerate() {
                for z in level {
                    prop_assert!(!seen[z.index()]);
                    seen[z.index()] = true;
                    prop_assert_eq!(z.cardinality(), n - k);
                    for i in z.alive_names() {
                        let child = z.flip(i).unwrap();
                        prop_assert_eq!(child.cardinality(), z.cardinality() + 1);
                        prop_assert!(seen[child.index()]);
                    }
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn flip_is_involution(n in 1usize..=16, bits in any::<u32>(), i in 0usize..16) {
            let z = DefaultState::new(bits & ((1u64 << n) - 1) as u32, n).unwrap();
            prop_assume!(i < n);
            let w = z.flip(i).unwrap();
            prop_assert_eq!((w.bits() ^ z.bits()).count_ones(), 1);
            prop_assert_eq!(w.flip(i).unwrap(), z);
        }
    }
}
