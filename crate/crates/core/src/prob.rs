//! Finite and diagonal-Gaussian distributions, divergences and
//! mutual-information estimates.
//!
//! Everything here works in nats. Conversion to bits happens only in the
//! functions whose names say so (`*_bits`, [`to_bits`]).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Mass above which a zero in the reference distribution makes a KL infinite.
pub const SUPPORT_MASS: f64 = 1e-9;
/// Minimum variance of every [`DiagonalGaussian`] component.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Tolerance on the total mass of a [`Categorical`].
pub const MASS_TOLERANCE: f64 = 1e-9;

#[inline]
pub fn to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

#[inline]
pub(crate) fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Log-sum-exp with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seeded random stream. Identical `(seed, stream)` pairs always produce
/// identical sequences; [`RngStream::fork`] derives independent child streams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream keyed by `(self.seed, self.stream, key)`. Does not advance `self`.
    pub fn fork(&self, key: u64) -> RngStream {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5851_f42d)));
        RngStream::new(child_seed, key)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// A probability vector over `0..len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("total mass {total} != 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("cannot normalize weights {weights:?}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// Softmax of unnormalized log-weights, computed with max subtraction.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::NumericFault("non-finite logits".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        Self::from_weights(weights)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "categorical needs at least one outcome");
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        assert!(index < n);
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        safe_ln(self.probs[i])
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap at the top; take the last supported entry
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(self.probs.len() - 1)
    }

    /// Convex combination `keep * self + (1 - keep) * other`, renormalized.
    pub fn mix(&self, other: &Categorical, keep: f64) -> Result<Categorical> {
        check_dim(self.len(), other.len())?;
        let weights = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| keep * a + (1.0 - keep) * b)
            .collect();
        Categorical::from_weights(weights)
    }

    /// Mean of several distributions of equal length.
    pub fn average<'a>(items: impl IntoIterator<Item = &'a Categorical>) -> Result<Categorical> {
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for c in items {
            let sum = acc.get_or_insert_with(|| vec![0.0; c.len()]);
            check_dim(sum.len(), c.len())?;
            for (s, p) in sum.iter_mut().zip(&c.probs) {
                *s += p;
            }
            count += 1;
        }
        let sum = acc.ok_or_else(|| Error::contract("average of zero distributions"))?;
        Categorical::from_weights(sum.into_iter().map(|s| s / count as f64).collect())
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Categorical::new(value)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(value: Categorical) -> Self {
        value.probs
    }
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Product of independent normals, parameterized by mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagonalGaussian {
    /// Variances below [`VARIANCE_FLOOR`] are raised to it.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), variance.len())?;
        if mean.is_empty() {
            return Err(Error::InvalidDistribution("zero-dimensional gaussian".into()));
        }
        if mean.iter().chain(&variance).any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite gaussian parameters".into()));
        }
        let variance = variance.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], variance: vec![1.0; dim] }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(x)
            .map(|((m, v), x)| -0.5 * (ln_2pi + v.ln() + (x - m) * (x - m) / v))
            .sum())
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| m + v.sqrt() * rng.normal())
            .collect()
    }

    pub fn entropy(&self) -> f64 {
        let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        self.variance.iter().map(|v| c + 0.5 * v.ln()).sum()
    }
}

/// `KL(p || q)` in nats.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dim(p.len(), q.len())?;
    let mut total = 0.0;
    for (i, (pi, qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if *pi == 0.0 {
            continue;
        }
        if *qi < PROB_FLOOR && *pi >= SUPPORT_MASS {
            return Err(Error::DivergenceInfinite { index: i, mass: *pi });
        }
        total += pi * (safe_ln(*pi) - safe_ln(*qi));
    }
    Ok(total.max(0.0))
}

/// Closed-form `KL(p || q)` between diagonal Gaussians, in nats.
pub fn kl_gaussian(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let total: f64 = (0..p.dim())
        .map(|i| {
            let (vp, vq) = (p.variance[i], q.variance[i]);
            let dm = q.mean[i] - p.mean[i];
            0.5 * (vp / vq + dm * dm / vq - 1.0 + (vq / vp).ln())
        })
        .sum();
    Ok(total.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &Categorical) -> f64 {
    -p.probs.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Mutual information of a joint table `joint[s][x]`, in bits.
pub fn mutual_information_tabular(joint: &[Vec<f64>]) -> Result<f64> {
    mutual_information_nats(joint).map(to_bits)
}

pub(crate) fn mutual_information_nats(joint: &[Vec<f64>]) -> Result<f64> {
    let cols = joint.first().map(Vec::len).ok_or_else(|| Error::contract("empty joint"))?;
    let mut row_mass = Vec::with_capacity(joint.len());
    let mut col_mass = vec![0.0; cols];
    let mut total = 0.0;
    for row in joint {
        check_dim(cols, row.len())?;
        if row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidDistribution("negative joint entry".into()));
        }
        let r: f64 = row.iter().sum();
        row_mass.push(r);
        total += r;
        for (c, p) in col_mass.iter_mut().zip(row) {
            *c += p;
        }
    }
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidDistribution(format!("joint mass {total} != 1")));
    }
    let mut mi = 0.0;
    for (row, ps) in joint.iter().zip(&row_mass) {
        for (p, px) in row.iter().zip(&col_mass) {
            if *p > 0.0 {
                mi += p * (p.ln() - (ps * px).ln());
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Monte-Carlo estimate of `I(S;X)` in bits: the mean of
/// `KL(p(x|s_i) || p(x))` over sampled states.
pub fn mi_estimate_from_samples<'a>(
    posteriors: impl IntoIterator<Item = &'a Categorical>,
    marginal: &Categorical,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for post in posteriors {
        sum += kl_categorical(post, marginal)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("mutual-information estimate needs at least one sample"));
    }
    Ok(to_bits(sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::new(p.to_vec()).unwrap()
    }

    fn gauss(m: f64, v: f64) -> DiagonalGaussian {
        DiagonalGaussian::new(vec![m], vec![v]).unwrap()
    }

    #[test]
    fn kl_categorical_examples() {
        assert_eq!(kl_categorical(&cat(&[0.5, 0.5]), &cat(&[0.5, 0.5])).unwrap(), 0.0);
        let v = kl_categorical(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = kl_categorical(&cat(&[0.7, 0.3]), &cat(&[0.3, 0.7])).unwrap();
        let expected = 0.7 * (7.0f64 / 3.0).ln() + 0.3 * (3.0f64 / 7.0).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.33893).abs() < 1e-4);
    }

    #[test]
    fn kl_categorical_errors() {
        assert!(matches!(
            kl_categorical(&cat(&[0.5, 0.5]), &cat(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            kl_categorical(&cat(&[0.5, 0.5]), &cat(&[1.0, 0.0])),
            Err(Error::DivergenceInfinite { index: 1, .. })
        ));
        // dead-but-nonzero mass below the support threshold is tolerated
        let p = cat(&[1.0 - 1e-10, 1e-10]);
        assert!(kl_categorical(&p, &cat(&[1.0, 0.0])).unwrap().is_finite());
    }

    #[test]
    fn kl_gaussian_examples() {
        assert_eq!(kl_gaussian(&gauss(0.0, 1.0), &gauss(0.0, 1.0)).unwrap(), 0.0);
        assert!((kl_gaussian(&gauss(0.0, 1.0), &gauss(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let v = kl_gaussian(&gauss(0.0, 4.0), &gauss(0.0, 1.0)).unwrap();
        assert!((v - 0.5 * (3.0 + 0.25f64.ln())).abs() < 1e-12);
        assert!((v - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&cat(&[1.0, 0.0, 0.0])), 0.0);
        assert!((entropy(&Categorical::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        let h = entropy(&cat(&[0.5, 0.25, 0.25]));
        assert!((to_bits(h) - 1.5).abs() < 1e-12);
        assert!((h - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn tabular_mi_examples() {
        let indep = vec![vec![0.3 * 0.4, 0.3 * 0.6], vec![0.7 * 0.4, 0.7 * 0.6]];
        assert!(mutual_information_tabular(&indep).unwrap().abs() < 1e-12);
        let diag = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        assert!((mutual_information_tabular(&diag).unwrap() - 1.0).abs() < 1e-12);
        let j = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        // hand sum: 2*0.4*log2(1.6) + 2*0.1*log2(0.4)
        let expected = 0.8 * 1.6f64.log2() + 0.2 * 0.4f64.log2();
        let mi = mutual_information_tabular(&j).unwrap();
        assert!((mi - expected).abs() < 1e-12);
        assert!((mi - 0.2781).abs() < 1e-4);
    }

    #[test]
    fn sample_mi_examples() {
        let m = cat(&[0.5, 0.5]);
        let same = [m.clone(), m.clone()];
        assert_eq!(mi_estimate_from_samples(&same, &m).unwrap(), 0.0);
        let sharp = [cat(&[1.0, 0.0]), cat(&[0.0, 1.0])];
        assert!((mi_estimate_from_samples(&sharp, &m).unwrap() - 1.0).abs() < 1e-12);
        let soft = [cat(&[0.9, 0.1]), cat(&[0.1, 0.9])];
        let v = mi_estimate_from_samples(&soft, &m).unwrap();
        assert!((v - (1.0 - 0.4690)).abs() < 1e-3, "{v}");
        assert!(mi_estimate_from_samples(std::iter::empty(), &m).is_err());
    }

    #[test]
    fn categorical_construction_invariants() {
        assert!(Categorical::new(vec![]).is_err());
        assert!(Categorical::new(vec![0.5, 0.6]).is_err());
        assert!(Categorical::new(vec![-0.1, 1.1]).is_err());
        let c = Categorical::from_logits(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!((c.prob(0) - 1.0).abs() < 1e-12);
        assert!(Categorical::from_logits(&[f64::NAN]).is_err());
    }

    #[test]
    fn gaussian_log_prob_and_floor() {
        let g = DiagonalGaussian::standard(1);
        let lp = g.log_prob(&[0.0]).unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let tiny = DiagonalGaussian::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(tiny.variance()[0], VARIANCE_FLOOR);
        assert!(DiagonalGaussian::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let mut c = RngStream::new(7, 4);
        let xa: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_eq!(a.fork(1).uniform(), b.fork(1).uniform());
    }
}
