//! Finite real vectors and counter-based random streams.
//!
//! A stream is identified by its path `(master_seed, run_index, stage_tag)`.
//! The path is packed into a ChaCha8 key, so distinct paths are distinct
//! keys and never share keystream positions. Within one key, 2^64 further
//! substreams are available through [`RngStream::substream`].
//!
//! Draw accounting: the counter counts 64-bit words consumed. A `uniform01`
//! draw consumes one word; a `std_gaussian` draw consumes exactly two
//! (Box-Muller, cosine branch only), so stream positions never depend on the
//! values drawn.

use alloc::vec::Vec;
use core::fmt;
use core::ops::{Deref, Index};
use core::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// A nonempty vector of finite doubles with fixed dimension.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d > 0, "dimension must be positive");
        Self(alloc::vec![0.0; d])
    }

    pub fn filled(d: usize, value: f64) -> Self {
        assert!(d > 0 && value.is_finite());
        Self(alloc::vec![value; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    /// Builds a vector from raw entries known to be finite (internal hot paths).
    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        debug_assert!(!entries.is_empty() && entries.iter().all(|v| v.is_finite()));
        Self(entries)
    }
}

impl TryFrom<Vec<f64>> for RealVec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVec> for Vec<f64> {
    fn from(v: RealVec) -> Self {
        v.0
    }
}

impl Deref for RealVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for RealVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Debug for RealVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// FNV-1a, used to fold stage tags into the stream key.
fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

const KEY_DOMAIN: u64 = 0x6164_616d_7365_7031; // "adamsep1"

/// Standard stage tags.
pub mod stage {
    pub const NOISE: &str = "noise";
    pub const RESAMPLE: &str = "resample";
    pub const INIT: &str = "init";
}

/// Distribution selector for [`RngStream::draw`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Uniform01,
    StdGaussian,
}

impl FromStr for Dist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform01" => Ok(Dist::Uniform01),
            "std_gaussian" => Ok(Dist::StdGaussian),
            other => Err(config_err!("unknown distribution identifier {other:?}")),
        }
    }
}

#[derive(Clone)]
pub struct RngStream {
    master_seed: u64,
    run_index: u64,
    stage_hash: u64,
    substream: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("master_seed", &self.master_seed)
            .field("run_index", &self.run_index)
            .field("stage_hash", &format_args!("{:#018x}", self.stage_hash))
            .field("substream", &self.substream)
            .field("counter", &self.counter)
            .finish()
    }
}

impl RngStream {
    pub fn derive(master_seed: u64, run_index: u64, stage_tag: &str) -> Self {
        let stage_hash = fnv1a(stage_tag);
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&run_index.to_le_bytes());
        key[16..24].copy_from_slice(&stage_hash.to_le_bytes());
        key[24..32].copy_from_slice(&KEY_DOMAIN.to_le_bytes());
        Self {
            master_seed,
            run_index,
            stage_hash,
            substream: 0,
            counter: 0,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Fresh stream sharing this path's key but on ChaCha stream `index`.
    /// Substreams of one path are disjoint from each other and from the
    /// parent (which is substream 0).
    pub fn substream(&self, index: u64) -> Self {
        let mut child = Self::derive_keyed(self);
        child.substream = index;
        child.rng.set_stream(index);
        child
    }

    fn derive_keyed(other: &Self) -> Self {
        let mut s = other.clone();
        s.rng.set_stream(0);
        s.rng.set_word_pos(0);
        s.counter = 0;
        s
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn run_index(&self) -> u64 {
        self.run_index
    }

    /// 64-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution. One word.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch). Two words.
    #[inline]
    pub fn std_gaussian(&mut self) -> f64 {
        // 1 - u lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn draw(&mut self, dist: Dist) -> f64 {
        match dist {
            Dist::Uniform01 => self.uniform01(),
            Dist::StdGaussian => self.std_gaussian(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_draws() {
        let mut a = RngStream::derive(42, 0, stage::NOISE);
        let mut b = RngStream::derive(42, 0, stage::NOISE);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_paths_differ() {
        let first = |s: u64, r: u64, tag: &str| RngStream::derive(s, r, tag).uniform01();
        assert_ne!(first(42, 0, "noise"), first(42, 1, "noise"));
        assert_ne!(first(42, 0, "noise"), first(42, 0, "resample"));
        assert_ne!(first(42, 0, "noise"), first(43, 0, "noise"));
    }

    #[test]
    fn counters_advance_by_documented_amounts() {
        let mut s = RngStream::derive(1, 2, "init");
        s.draw(Dist::Uniform01);
        assert_eq!(s.counter(), 1);
        s.draw(Dist::StdGaussian);
        assert_eq!(s.counter(), 3);
    }

    #[test]
    fn substreams_are_distinct_and_replayable() {
        let base = RngStream::derive(7, 3, stage::RESAMPLE);
        let mut a = base.substream(5);
        let mut b = base.substream(5);
        let mut c = base.substream(6);
        let mut root = base.clone();
        let x = a.next_u64();
        assert_eq!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
        assert_ne!(x, root.next_u64());
    }

    #[test]
    fn unknown_dist_is_config_error() {
        assert!(matches!("cauchy".parse::<Dist>(), Err(Error::Config(_))));
        assert_eq!("uniform01".parse::<Dist>().unwrap(), Dist::Uniform01);
    }

    #[test]
    fn realvec_rejects_nonfinite_and_empty() {
        assert!(RealVec::new(alloc::vec![1.0, f64::NAN]).is_err());
        assert!(RealVec::new(alloc::vec![f64::INFINITY]).is_err());
        assert!(RealVec::new(Vec::new()).is_err());
        assert_eq!(RealVec::new(alloc::vec![3.0, 4.0]).unwrap().norm_sq(), 25.0);
    }
}
