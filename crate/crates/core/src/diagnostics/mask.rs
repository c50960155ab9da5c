use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{stream_key, uniform_at};
use crate::tensor::Checkpoint;

/// Words per parallel work item when filling masks.
const WORD_CHUNK: usize = 1 << 12;

/// Fixed-length bit vector packed into u64 words; bit `i` lives in word `i / 64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    len: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    /// Build a mask from a predicate over indices, filling words in parallel.
    pub fn from_fn<F>(len: usize, f: F) -> Self
    where
        F: Fn(usize) -> bool + Sync + Send,
    {
        let mut mask = Self::zeros(len);
        exec::for_each_chunk_mut(&mut mask.words, WORD_CHUNK, |ci, chunk| {
            for (wi, word) in chunk.iter_mut().enumerate() {
                let base = (ci * WORD_CHUNK + wi) * 64;
                let end = (base + 64).min(len);
                let mut w = 0u64;
                for i in base..end {
                    if f(i) {
                        w |= 1 << (i - base);
                    }
                }
                *word = w;
            }
        });
        mask
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range for mask of length {}", self.len);
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(())
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(Self {
            len: self.len,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }

    /// `(|a AND b|, |a OR b|)` in one pass.
    pub fn overlap_counts(&self, other: &Self) -> Result<(u64, u64)> {
        self.check_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .fold((0, 0), |(i, u), (a, b)| {
                (i + u64::from((a & b).count_ones()), u + u64::from((a | b).count_ones()))
            }))
    }

    /// Indices of set bits in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let b = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * 64 + b)
            })
        })
    }
}

/// Changed-weight masks of one fine-tuned checkpoint against its base.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub masks: BTreeMap<String, BitMask>,
    pub eta: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::param("eta", format!("{eta} is not a positive real")));
    }
    Ok(())
}

/// Bit `i` is set iff `|a - b| > eta * max(|a|, |b|)`, evaluated in f32.
pub fn changed_bits(rl: &[f32], sft: &[f32], eta: f64) -> Result<BitMask> {
    check_eta(eta)?;
    if rl.len() != sft.len() {
        return Err(Error::LengthMismatch {
            left: rl.len(),
            right: sft.len(),
        });
    }
    let eta = eta as f32;
    Ok(BitMask::from_fn(rl.len(), |i| {
        let (a, b) = (rl[i], sft[i]);
        (a - b).abs() > eta * a.abs().max(b.abs())
    }))
}

fn tensor_mask(rl: &Checkpoint, sft: &Checkpoint, name: &str, eta: f64) -> Result<BitMask> {
    let a = rl.tensor(name)?;
    let b = sft.tensor(name)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    changed_bits(&a.to_f32()?, &b.to_f32()?, eta)
}

/// Masks over every float tensor of `sft`.
pub fn changed_mask(rl: &Checkpoint, sft: &Checkpoint, eta: f64) -> Result<MaskMap> {
    let names = sft.compute_names();
    changed_mask_for(rl, sft, &names, eta)
}

/// Masks over the named tensors only.
pub fn changed_mask_for(rl: &Checkpoint, sft: &Checkpoint, names: &[&str], eta: f64) -> Result<MaskMap> {
    check_eta(eta)?;
    let masks = exec::map_slice(names, |name| tensor_mask(rl, sft, name, eta));
    Ok(MaskMap {
        masks: names
            .iter()
            .zip(masks)
            .map(|(n, m)| m.map(|m| (n.to_string(), m)))
            .collect::<Result<_>>()?,
        eta,
    })
}

/// `|a AND b| / |a OR b|`, or `None` when both masks are empty.
pub fn jaccard_checked(a: &BitMask, b: &BitMask) -> Result<Option<f64>> {
    let (inter, union) = a.overlap_counts(b)?;
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// `|a AND b| / |a OR b|`, with 0 for two empty masks.
pub fn jaccard(a: &BitMask, b: &BitMask) -> Result<f64> {
    Ok(jaccard_checked(a, b)?.unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomBaseline {
    pub empirical: f64,
    pub analytic: f64,
}

/// Jaccard overlap of two independent Bernoulli(`p`) masks of length `d`,
/// with the closed form `p / (2 - p)`.
pub fn random_jaccard_baseline(p: f64, d: usize, seed: u64) -> Result<RandomBaseline> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param("p", format!("{p} is outside (0, 1)")));
    }
    if d == 0 {
        return Err(Error::param("d", "must be at least 1"));
    }
    let (ka, kb) = (stream_key(seed, 0), stream_key(seed, 1));
    let a = BitMask::from_fn(d, |i| uniform_at(ka, i as u64) < p);
    let b = BitMask::from_fn(d, |i| uniform_at(kb, i as u64) < p);
    Ok(RandomBaseline {
        empirical: jaccard(&a, &b)?,
        analytic: p / (2.0 - p),
    })
}

/// Flattened `rl - sft` values of one tensor at the set bits of `region`, in
/// ascending index order.
pub fn shift_vector(rl: &Checkpoint, sft: &Checkpoint, tensor: &str, region: &BitMask) -> Result<Vec<f32>> {
    let a = rl.f32_values(tensor)?;
    let b = sft.f32_values(tensor)?;
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if region.len() != a.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: region.len(),
        });
    }
    Ok(region.ones().map(|i| a[i] - b[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    fn bits(s: &str) -> BitMask {
        BitMask::from_bools(&s.chars().map(|c| c == '1').collect::<Vec<_>>())
    }

    #[test]
    fn changed_examples() {
        let m = changed_bits(&[1.0005, 1.01, 0.0], &[1.0, 1.0, 0.0], 1e-3).unwrap();
        assert!(!m.get(0));
        assert!(m.get(1));
        assert!(!m.get(2));
        assert!(changed_bits(&[1.0], &[1.0], 0.0).is_err());
        assert!(changed_bits(&[1.0], &[1.0, 2.0], 1e-3).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert!((jaccard(&bits("1100"), &bits("1010")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&bits("0110"), &bits("0110")).unwrap(), 1.0);
        assert_eq!(jaccard(&bits("1100"), &bits("0011")).unwrap(), 0.0);
        assert_eq!(jaccard(&bits("0000"), &bits("0000")).unwrap(), 0.0);
        assert_eq!(jaccard_checked(&bits("0000"), &bits("0000")).unwrap(), None);
        assert!(jaccard(&bits("00"), &bits("000")).is_err());
    }

    #[test]
    fn bit_ops_across_word_boundaries() {
        let mut m = BitMask::zeros(130);
        for i in [0, 63, 64, 127, 129] {
            m.set(i, true);
        }
        assert_eq!(m.count_ones(), 5);
        assert_eq!(m.ones().collect::<Vec<_>>(), vec![0, 63, 64, 127, 129]);
        m.set(64, false);
        assert!(!m.get(64));
        assert!(!m.get(500));
    }

    #[test]
    fn baseline_small_p() {
        let r = random_jaccard_baseline(0.01, 1_000_000, 5).unwrap();
        assert!((r.analytic - 0.01 / 1.99).abs() < 1e-15);
        assert!((r.empirical - r.analytic).abs() < 0.001);
        assert!(random_jaccard_baseline(1.0, 10, 0).is_err());
        assert!(random_jaccard_baseline(0.5, 0, 0).is_err());
    }

    #[test]
    fn shift_vector_examples() {
        let mut sft = Checkpoint::new();
        sft.insert("w", Tensor::from_f32(DType::F32, vec![2], &[1.0, 1.0]).unwrap())
            .unwrap();
        let mut rl = Checkpoint::new();
        rl.insert("w", Tensor::from_f32(DType::F32, vec![2], &[1.5, 0.75]).unwrap())
            .unwrap();
        assert_eq!(shift_vector(&rl, &sft, "w", &bits("11")).unwrap(), vec![0.5, -0.25]);
        assert!(shift_vector(&rl, &sft, "w", &bits("00")).unwrap().is_empty());
        assert!(shift_vector(&rl, &sft, "w", &bits("1")).is_err());
        assert!(matches!(
            shift_vector(&rl, &sft, "v", &bits("11")),
            Err(Error::UnknownTensor(_))
        ));
    }
}
