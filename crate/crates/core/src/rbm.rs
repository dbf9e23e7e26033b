//! Discrete ±1 Boltzmann machines.
//!
//! Energy `E(s) = -½ sᵀJs - hᵀs` with symmetric, zero-diagonal `J`. A bipartite
//! partition (visible/hidden) makes one side conditionally independent given
//! the other, which is what block Gibbs sweeps and PCD rely on.

use crate::autodiff::{logsumexp, sigmoid};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{self, Rng, StreamRng, StreamState};

/// Largest spin count accepted by exact enumeration.
pub const MAX_ENUM_SPINS: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct SpinModel {
    n: usize,
    j: Vec<f64>,
    h: Vec<f64>,
    /// `Some(side)` with `side[i] == false` for visible and `true` for hidden spins.
    partition: Option<Vec<bool>>,
}

impl SpinModel {
    /// General Boltzmann machine. `j` is a row-major `n×n` matrix.
    pub fn new(j: Vec<f64>, h: Vec<f64>, partition: Option<Vec<bool>>) -> Result<Self> {
        let n = h.len();
        if j.len() != n * n {
            return Err(Error::InvalidArgument(format!("J has {} entries, need {}", j.len(), n * n)));
        }
        for i in 0..n {
            if j[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!("J[{i},{i}] must be zero")));
            }
            for k in i + 1..n {
                if j[i * n + k] != j[k * n + i] {
                    return Err(Error::InvalidArgument(format!("J not symmetric at ({i},{k})")));
                }
            }
        }
        if let Some(side) = &partition {
            if side.len() != n {
                return Err(Error::InvalidArgument("partition length differs from n".into()));
            }
            for i in 0..n {
                for k in 0..n {
                    if side[i] == side[k] && j[i * n + k] != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "J[{i},{k}] couples two spins on the same side"
                        )));
                    }
                }
            }
        }
        Ok(Self { n, j, h, partition })
    }

    /// RBM with visible spins `0..nv` and hidden spins `nv..nv+nh`; `w` is `nv×nh`.
    pub fn bipartite(nv: usize, nh: usize, w: &[f64], h: Vec<f64>) -> Result<Self> {
        let n = nv + nh;
        if w.len() != nv * nh || h.len() != n {
            return Err(Error::InvalidArgument("bipartite: bad W or h size".into()));
        }
        let mut j = vec![0.0; n * n];
        for a in 0..nv {
            for b in 0..nh {
                let v = w[a * nh + b];
                j[a * n + nv + b] = v;
                j[(nv + b) * n + a] = v;
            }
        }
        let side = (0..n).map(|i| i >= nv).collect();
        Self::new(j, h, Some(side))
    }

    /// Independent spins (`J = 0`), still tagged bipartite so block sweeps apply.
    pub fn independent(h: Vec<f64>) -> Self {
        let n = h.len();
        let nv = n.div_ceil(2);
        Self {
            n,
            j: vec![0.0; n * n],
            h,
            partition: Some((0..n).map(|i| i >= nv).collect()),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn j(&self) -> &[f64] {
        &self.j
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn partition(&self) -> Option<&[bool]> {
        self.partition.as_deref()
    }

    pub fn is_bipartite(&self) -> bool {
        self.partition.is_some()
    }

    /// Same couplings with biases negated; used by the spin-flip symmetry check.
    pub fn with_h(&self, h: Vec<f64>) -> Self {
        Self { h, ..self.clone() }
    }

    /// Same biases with `J` scaled by `beta`.
    pub fn tempered(&self, beta: f64) -> Self {
        Self {
            j: self.j.iter().map(|v| v * beta).collect(),
            ..self.clone()
        }
    }

    fn check_spins(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.n {
            return Err(Error::InvalidSpin(format!("length {} != {}", s.len(), self.n)));
        }
        if let Some(bad) = s.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidSpin(format!("entry {bad} is not ±1")));
        }
        Ok(())
    }

    pub fn energy(&self, s: &[f64]) -> Result<f64> {
        self.check_spins(s)?;
        Ok(self.energy_unchecked(s))
    }

    pub(crate) fn energy_unchecked(&self, s: &[f64]) -> f64 {
        let n = self.n;
        let mut quad = 0.0;
        for i in 0..n {
            let row = &self.j[i * n..(i + 1) * n];
            quad += s[i] * row.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
        }
        let lin: f64 = self.h.iter().zip(s).map(|(a, b)| a * b).sum();
        -0.5 * quad - lin
    }

    /// `½ sᵀJs`, the part of `-E` that AIS anneals.
    pub(crate) fn coupling_term(&self, s: &[f64]) -> f64 {
        -(self.energy_unchecked(s) + self.h.iter().zip(s).map(|(a, b)| a * b).sum::<f64>())
    }

    /// `Σⱼ Jᵢⱼ sⱼ + hᵢ`.
    pub fn local_field(&self, i: usize, s: &[f64]) -> f64 {
        let n = self.n;
        self.j[i * n..(i + 1) * n].iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + self.h[i]
    }

    /// Visits every configuration in Gray-code order with its unnormalized
    /// log weight `-E(s)`.
    pub fn enumerate(&self, mut visit: impl FnMut(&[f64], f64)) -> Result<()> {
        let n = self.n;
        if n > MAX_ENUM_SPINS {
            return Err(Error::TooLarge { n, limit: MAX_ENUM_SPINS });
        }
        let mut s = vec![-1.0; n];
        let mut field: Vec<f64> = (0..n).map(|i| self.local_field(i, &s)).collect();
        let mut neg_e = -self.energy_unchecked(&s);
        visit(&s, neg_e);
        for step in 1u64..(1u64 << n) {
            let i = step.trailing_zeros() as usize;
            // flipping sᵢ changes -E by -2 sᵢ (Σⱼ Jᵢⱼ sⱼ + hᵢ)
            neg_e -= 2.0 * s[i] * field[i];
            let ds = -2.0 * s[i];
            s[i] = -s[i];
            for k in 0..n {
                field[k] += self.j[k * n + i] * ds;
            }
            visit(&s, neg_e);
        }
        Ok(())
    }

    /// Exact `log Z` by enumeration (n ≤ 24).
    pub fn exact_log_z(&self) -> Result<f64> {
        let mut m = f64::NEG_INFINITY;
        let mut acc = 0.0;
        self.enumerate(|_, w| {
            if w > m {
                acc = acc * (m - w).exp() + 1.0;
                m = w;
            } else {
                acc += (w - m).exp();
            }
        })?;
        Ok(m + acc.ln())
    }

    /// Exact `E[s]` and `E[s sᵀ]` (row-major) by enumeration.
    pub fn exact_moments(&self) -> Result<Moments> {
        let log_z = self.exact_log_z()?;
        let n = self.n;
        let mut mean = vec![0.0; n];
        let mut outer = vec![0.0; n * n];
        self.enumerate(|s, w| {
            let p = (w - log_z).exp();
            for i in 0..n {
                mean[i] += p * s[i];
                for k in 0..n {
                    outer[i * n + k] += p * s[i] * s[k];
                }
            }
        })?;
        Ok(Moments { n, mean, outer, mean_se: vec![0.0; n], outer_se: vec![0.0; n * n] })
    }

    /// `Σᵢ log(2 cosh hᵢ)`: exact `log Z` when `J = 0`.
    pub fn independent_log_z(&self) -> f64 {
        self.h.iter().map(|&h| log_2cosh(h)).sum()
    }

    /// Draws from the `J = 0` model with the same biases: `p(sᵢ = +1) = σ(2hᵢ)`.
    pub(crate) fn sample_independent(&self, rng: &mut StreamRng, s: &mut [f64]) {
        for (si, &h) in s.iter_mut().zip(&self.h) {
            *si = if rng::uniform(rng) < sigmoid(2.0 * h) { 1.0 } else { -1.0 };
        }
    }

    fn resample(&self, i: usize, s: &mut [f64], rng: &mut StreamRng) {
        let p = sigmoid(2.0 * self.local_field(i, s));
        s[i] = if rng::uniform(rng) < p { 1.0 } else { -1.0 };
    }

    /// One sweep on a single configuration: hidden block then visible block when
    /// bipartite, otherwise sequential single-site updates.
    pub fn sweep(&self, s: &mut [f64], rng: &mut StreamRng) -> SweepKind {
        match &self.partition {
            Some(side) => {
                for phase in [true, false] {
                    // spins within a side are conditionally independent, so in-place
                    // updates see only the other (fixed) side
                    for i in 0..self.n {
                        if side[i] == phase {
                            self.resample(i, s, rng);
                        }
                    }
                }
                SweepKind::Block
            }
            None => {
                for i in 0..self.n {
                    self.resample(i, s, rng);
                }
                SweepKind::Sequential
            }
        }
    }
}

pub fn log_2cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

/// Which Gibbs scheme a sweep used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Block,
    /// Model has no bipartite partition; single-site sequential updates were used.
    Sequential,
}

/// First and second moments of the spin distribution with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: usize,
    /// `E[sᵢ]`.
    pub mean: Vec<f64>,
    /// `E[sᵢ sⱼ]`, row-major `n×n`.
    pub outer: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub outer_se: Vec<f64>,
}

impl Moments {
    fn from_samples(n: usize, chains: &[f64]) -> Self {
        let c = chains.len() / n.max(1);
        let mut mean = vec![0.0; n];
        let mut outer = vec![0.0; n * n];
        let mut mean_sq = vec![0.0; n];
        let mut outer_sq = vec![0.0; n * n];
        for s in chains.chunks(n) {
            for i in 0..n {
                mean[i] += s[i];
                mean_sq[i] += s[i] * s[i];
                for k in 0..n {
                    let v = s[i] * s[k];
                    outer[i * n + k] += v;
                    outer_sq[i * n + k] += v * v;
                }
            }
        }
        let cf = c as f64;
        let se = |sum: f64, sq: f64| -> f64 {
            if c < 2 {
                return f64::INFINITY;
            }
            let m = sum / cf;
            let var = ((sq / cf - m * m) * cf / (cf - 1.0)).max(0.0);
            (var / cf).sqrt()
        };
        let mean_se = mean.iter().zip(&mean_sq).map(|(&a, &b)| se(a, b)).collect();
        let outer_se = outer.iter().zip(&outer_sq).map(|(&a, &b)| se(a, b)).collect();
        mean.iter_mut().for_each(|v| *v /= cf);
        outer.iter_mut().for_each(|v| *v /= cf);
        Self { n, mean, outer, mean_se, outer_se }
    }

    /// `∂ log Z / ∂Jᵢⱼ` treating every matrix entry as free: `½ E[sᵢ sⱼ]` off the
    /// diagonal, zero on it and wherever `mask` forbids a coupling.
    pub fn coupling_grad(&self, partition: Option<&[bool]>) -> Vec<f64> {
        let n = self.n;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let allowed = i != k && partition.is_none_or(|p| p[i] != p[k]);
                if allowed {
                    g[i * n + k] = 0.25 * (self.outer[i * n + k] + self.outer[k * n + i]);
                }
            }
        }
        g
    }
}

/// Persistent Gibbs chains, one counter-based stream each.
#[derive(Debug, Clone, PartialEq)]
pub struct PcdState {
    n: usize,
    seed: u64,
    /// `C×n`, entries ±1.
    chains: Vec<f64>,
    rngs: Vec<StreamRng>,
}

impl PcdState {
    /// `count` chains with uniformly random initial spins.
    pub fn new(n: usize, count: usize, seed: u64) -> Self {
        let mut rngs: Vec<StreamRng> = (0..count as u64).map(|c| rng::stream(seed, c)).collect();
        let mut chains = vec![0.0; n * count];
        for (s, r) in chains.chunks_mut(n.max(1)).zip(rngs.iter_mut()) {
            for v in s.iter_mut() {
                *v = if r.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
        Self { n, seed, chains, rngs }
    }

    /// Chains initialized from explicit configurations.
    pub fn from_chains(n: usize, chains: Vec<f64>, seed: u64) -> Result<Self> {
        if n == 0 || chains.len() % n != 0 {
            return Err(Error::InvalidArgument("chain buffer not a multiple of n".into()));
        }
        if chains.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidSpin("chain entry not ±1".into()));
        }
        let count = chains.len() / n;
        let rngs = (0..count as u64).map(|c| rng::stream(seed, c)).collect();
        Ok(Self { n, seed, chains, rngs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.rngs.len()
    }

    pub fn chains(&self) -> &[f64] {
        &self.chains
    }

    pub fn chain(&self, c: usize) -> &[f64] {
        &self.chains[c * self.n..(c + 1) * self.n]
    }

    pub fn stream_states(&self) -> Vec<StreamState> {
        self.rngs.iter().map(|r| StreamState::capture(self.seed, r)).collect()
    }

    /// Rebuilds from saved chains and stream positions.
    pub fn restore(n: usize, chains: Vec<f64>, states: &[StreamState]) -> Result<Self> {
        let mut st = Self::from_chains(n, chains, states.first().map_or(0, |s| s.seed))?;
        if states.len() != st.count() {
            return Err(Error::Malformed("PCD stream count mismatch".into()));
        }
        st.rngs = states
            .iter()
            .map(|s| s.restore().ok_or_else(|| Error::Malformed("bad stream state".into())))
            .collect::<Result<_>>()?;
        Ok(st)
    }

    /// Runs `k` sweeps on every chain.
    pub fn run(&mut self, m: &SpinModel, k: usize) -> Result<SweepKind> {
        if m.n() != self.n {
            return Err(Error::InvalidArgument(format!("model n {} vs chains n {}", m.n(), self.n)));
        }
        let kind = if m.is_bipartite() { SweepKind::Block } else { SweepKind::Sequential };
        let n = self.n;
        let mut work: Vec<(&mut [f64], &mut StreamRng)> =
            self.chains.chunks_mut(n).zip(self.rngs.iter_mut()).collect();
        parallel::for_each_mut(&mut work, |(s, r)| {
            for _ in 0..k {
                m.sweep(s, r);
            }
        });
        Ok(kind)
    }

    pub fn moments(&self) -> Moments {
        Moments::from_samples(self.n, &self.chains)
    }
}

/// One block Gibbs sweep on every chain.
pub fn gibbs_block_step(m: &SpinModel, state: &mut PcdState) -> Result<SweepKind> {
    state.run(m, 1)
}

/// Advances persistent chains `k` sweeps and returns their sufficient statistics.
pub fn pcd_negative_stats(m: &SpinModel, state: &mut PcdState, k: usize) -> Result<Moments> {
    if state.count() == 0 {
        return Err(Error::InvalidArgument("empty chain set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    state.run(m, k)?;
    Ok(state.moments())
}

/// Annealed importance sampling estimate of `log Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AisEstimate {
    pub log_z: f64,
    /// Bootstrap standard error of `log_z` over chains.
    pub stderr: f64,
}

const BOOTSTRAP_RESAMPLES: usize = 400;

/// AIS from the `J = 0` model (same biases, closed-form `log Z`) to `m` along
/// `β ↦ βJ` with `n_temps` equally spaced inverse temperatures.
pub fn ais_log_z(m: &SpinModel, n_temps: usize, n_chains: usize, seed: u64) -> Result<AisEstimate> {
    if n_temps < 2 {
        return Err(Error::InvalidArgument("n_temps must be at least 2".into()));
    }
    if n_chains < 2 {
        return Err(Error::InvalidArgument("AIS needs at least 2 chains".into()));
    }
    let n = m.n();
    let log_z0 = m.independent_log_z();
    let betas: Vec<f64> = (0..n_temps).map(|k| k as f64 / (n_temps - 1) as f64).collect();
    let tempered: Vec<SpinModel> = betas.iter().map(|&b| m.tempered(b)).collect();

    let mut log_w = vec![0.0; n_chains];
    let mut jobs: Vec<(usize, &mut f64)> = log_w.iter_mut().enumerate().collect();
    parallel::for_each_mut(&mut jobs, |(c, lw)| {
        let mut r = rng::stream(seed, *c as u64);
        let mut s = vec![0.0; n];
        m.sample_independent(&mut r, &mut s);
        let mut acc = 0.0;
        for k in 1..n_temps {
            acc += (betas[k] - betas[k - 1]) * m.coupling_term(&s);
            if k + 1 < n_temps {
                tempered[k].sweep(&mut s, &mut r);
            }
        }
        **lw = acc;
    });

    let est = |w: &[f64]| logsumexp(w) - (w.len() as f64).ln();
    let log_z = log_z0 + est(&log_w);

    let mut boot_rng = rng::stream(rng::derive_seed(seed, 0xB007), 0);
    let mut resample = vec![0.0; n_chains];
    let mut boots = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for v in resample.iter_mut() {
            *v = log_w[boot_rng.random_range(0..n_chains)];
        }
        boots.push(est(&resample));
    }
    let mean = boots.iter().sum::<f64>() / boots.len() as f64;
    let var = boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64;
    Ok(AisEstimate { log_z, stderr: var.sqrt() })
}
