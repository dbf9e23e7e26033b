//! Continuous base distributions `p(z)`.
//!
//! The RBM and D-Flow kinds smooth a ±1 spin model with Gaussians centred on
//! the spins, `z | s ~ N(s, J̃⁻¹)` with `J̃ = J + ΔI`. Summing the spins out
//! gives
//!
//! ```text
//! log p(z) = -½ zᵀJ̃z + Σᵢ log 2cosh(h̃ᵢ(z)) - log Z_z,   h̃(z) = J̃z + h
//! log Z_z  = log Z_s + (N/2) ln 2π - ½ log det J̃ + (N/2) Δ
//! ```
//!
//! The MultiCov kind is a zero-mean Gaussian with precision `J̃ = L Lᵀ` and the
//! Gaussian kind is a standard normal. All four share [`SmoothedBase`].

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rbm::{self, log_2cosh, Moments, PcdState, SpinModel};
use crate::rng;

/// Largest spin count for which `log Z` is computed by enumeration by default.
pub const EXACT_LOG_Z_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Rbm,
    Dflow,
    Multicov,
    Gaussian,
}

impl BaseKind {
    pub fn default_delta(self) -> f64 {
        match self {
            BaseKind::Dflow => 1.0,
            BaseKind::Gaussian => 1.0,
            BaseKind::Rbm | BaseKind::Multicov => 2.5,
        }
    }

    /// Whether the base carries discrete spins.
    pub fn has_spins(self) -> bool {
        matches!(self, BaseKind::Rbm | BaseKind::Dflow)
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Rbm => "rbm",
            BaseKind::Dflow => "dflow",
            BaseKind::Multicov => "multicov",
            BaseKind::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for BaseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbm" => Ok(BaseKind::Rbm),
            "dflow" => Ok(BaseKind::Dflow),
            "multicov" => Ok(BaseKind::Multicov),
            "gaussian" => Ok(BaseKind::Gaussian),
            other => Err(Error::Config(format!("unknown base kind '{other}'"))),
        }
    }
}

/// A log partition function value with its estimation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogZ {
    pub value: f64,
    pub stderr: f64,
}

impl LogZ {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }
}

/// How to obtain `log Z_s` for spin bases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogZMode {
    Exact,
    Ais { temps: usize, chains: usize, seed: u64 },
}

impl LogZMode {
    pub fn default_ais(seed: u64) -> Self {
        LogZMode::Ais { temps: 1000, chains: 256, seed }
    }
}

/// Immutable snapshot of a base distribution with its factorized precision.
#[derive(Debug, Clone)]
pub struct SmoothedBase {
    kind: BaseKind,
    n: usize,
    delta: f64,
    model: Option<SpinModel>,
    jtilde: Vec<f64>,
    chol: Cholesky,
    log_det: f64,
}

impl SmoothedBase {
    /// Builds an RBM or D-Flow base from a spin model (`J̃ = J + ΔI`), or a
    /// Gaussian base (`model` ignored).
    pub fn build(kind: BaseKind, model: Option<SpinModel>, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        match kind {
            BaseKind::Gaussian => {
                let n = model.map(|m| m.n()).ok_or_else(|| {
                    Error::InvalidArgument("gaussian base needs a dimension; use SmoothedBase::gaussian".into())
                })?;
                Self::gaussian(n)
            }
            BaseKind::Multicov => Err(Error::InvalidArgument(
                "multicov base is built from its Cholesky factor; use SmoothedBase::multicov".into(),
            )),
            BaseKind::Rbm | BaseKind::Dflow => {
                let model = model.ok_or_else(|| Error::InvalidArgument("spin model required".into()))?;
                if kind == BaseKind::Dflow && model.j().iter().any(|&v| v != 0.0) {
                    return Err(Error::InvalidArgument("dflow base requires J = 0".into()));
                }
                let n = model.n();
                let mut jtilde = model.j().to_vec();
                for i in 0..n {
                    jtilde[i * n + i] += delta;
                }
                let chol = Cholesky::new(&jtilde, n)?;
                let log_det = chol.log_det();
                Ok(Self { kind, n, delta, model: Some(model), jtilde, chol, log_det })
            }
        }
    }

    pub fn gaussian(n: usize) -> Result<Self> {
        let jtilde = Tensor::eye(n).into_data();
        let chol = Cholesky::new(&jtilde, n)?;
        Ok(Self { kind: BaseKind::Gaussian, n, delta: 1.0, model: None, jtilde, chol, log_det: 0.0 })
    }

    /// Zero-mean Gaussian with precision `L Lᵀ`. `raw` is `n×n`: strictly lower
    /// entries are taken as is, diagonal entries are log-scales, the rest is ignored.
    pub fn multicov(raw: &[f64], n: usize) -> Result<Self> {
        let l = multicov_factor(raw, n);
        let mut jtilde = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                jtilde[i * n + k] = (0..n).map(|m| l[i * n + m] * l[k * n + m]).sum();
            }
        }
        let chol = Cholesky::new(&jtilde, n)?;
        let log_det = 2.0 * (0..n).map(|i| raw[i * n + i]).sum::<f64>();
        Ok(Self { kind: BaseKind::Multicov, n, delta: 0.0, model: None, jtilde, chol, log_det })
    }

    pub fn kind(&self) -> BaseKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn model(&self) -> Option<&SpinModel> {
        self.model.as_ref()
    }

    /// `J̃`, row-major.
    pub fn jtilde(&self) -> &[f64] {
        &self.jtilde
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `log Z_z` from `log Z_s` via the Gaussian integral identity; for the
    /// Gaussian kinds `log_z_s` is ignored.
    pub fn log_z_continuous(&self, log_z_s: f64) -> f64 {
        let nf = self.n as f64;
        match self.kind {
            BaseKind::Gaussian => 0.5 * nf * (2.0 * PI).ln(),
            BaseKind::Multicov => 0.5 * nf * (2.0 * PI).ln() - 0.5 * self.log_det,
            BaseKind::Rbm | BaseKind::Dflow => {
                log_z_s + 0.5 * nf * (2.0 * PI).ln() - 0.5 * self.log_det + 0.5 * nf * self.delta
            }
        }
    }

    /// `log Z_s` of the spin model (zero for spin-free kinds).
    pub fn log_z_spins(&self, mode: LogZMode) -> Result<LogZ> {
        let Some(m) = &self.model else { return Ok(LogZ::exact(0.0)) };
        if self.kind == BaseKind::Dflow {
            return Ok(LogZ::exact(m.independent_log_z()));
        }
        match mode {
            LogZMode::Exact => {
                if m.n() > EXACT_LOG_Z_LIMIT {
                    return Err(Error::TooLarge { n: m.n(), limit: EXACT_LOG_Z_LIMIT });
                }
                Ok(LogZ::exact(m.exact_log_z()?))
            }
            LogZMode::Ais { temps, chains, seed } => {
                let est = rbm::ais_log_z(m, temps, chains, seed)?;
                Ok(LogZ { value: est.log_z, stderr: est.stderr })
            }
        }
    }

    /// `log Z_z` with the spin partition function obtained by `mode`.
    pub fn log_z(&self, mode: LogZMode) -> Result<LogZ> {
        let s = self.log_z_spins(mode)?;
        Ok(LogZ { value: self.log_z_continuous(s.value), stderr: s.stderr })
    }

    /// Exact where cheap (no spins, D-Flow, or n ≤ 20), AIS otherwise.
    pub fn log_z_auto(&self, seed: u64) -> Result<LogZ> {
        if self.n <= EXACT_LOG_Z_LIMIT {
            self.log_z(LogZMode::Exact)
        } else {
            self.log_z(LogZMode::default_ais(seed))
        }
    }

    /// `J̃ z`.
    fn jtilde_times(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| self.jtilde[i * n..(i + 1) * n].iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Log density without the `- log Z_z` term.
    pub fn unnormalized_log_prob(&self, z: &[f64]) -> f64 {
        let jz = self.jtilde_times(z);
        let quad: f64 = z.iter().zip(&jz).map(|(a, b)| a * b).sum();
        let mut lp = -0.5 * quad;
        if let Some(m) = &self.model {
            lp += jz.iter().zip(m.h()).map(|(a, h)| log_2cosh(a + h)).sum::<f64>();
        }
        lp
    }

    pub fn log_prob_z(&self, z: &[f64], log_z: &LogZ) -> Result<f64> {
        if z.len() != self.n {
            return Err(Error::shape("log_prob_z", format!("{} vs {}", z.len(), self.n)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("z must be finite".into()));
        }
        Ok(self.unnormalized_log_prob(z) - log_z.value)
    }

    /// `p(sᵢ = +1 | z) = σ(2 h̃ᵢ(z))`; exact inference for the spin kinds.
    pub fn spin_posterior(&self, z: &[f64]) -> Option<Vec<f64>> {
        let m = self.model.as_ref()?;
        let jz = self.jtilde_times(z);
        Some(jz.iter().zip(m.h()).map(|(a, h)| crate::autodiff::sigmoid(2.0 * (a + h))).collect())
    }

    /// `z = s + L⁻ᵀ ε` for a given conditioning vector `s`.
    pub fn smooth(&self, s: &[f64], rng: &mut rng::StreamRng) -> Vec<f64> {
        let mut eps: Vec<f64> = (0..self.n).map(|_| rng::normal(rng)).collect();
        self.chol.solve_upper(&mut eps);
        eps.iter().zip(s).map(|(e, si)| e + si).collect()
    }

    /// Draws `count` spin configurations (zeros for spin-free kinds).
    pub fn sample_spins(&self, count: usize, seed: u64, source: SpinSource<'_>) -> Result<Vec<f64>> {
        let n = self.n;
        match (&self.model, self.kind) {
            (None, _) => Ok(vec![0.0; count * n]),
            (Some(m), BaseKind::Dflow) => {
                let mut out = vec![0.0; count * n];
                for (c, s) in out.chunks_mut(n).enumerate() {
                    let mut r = rng::stream(seed, c as u64);
                    m.sample_independent(&mut r, s);
                }
                Ok(out)
            }
            (Some(m), _) => match source {
                SpinSource::BurnIn(sweeps) => {
                    let mut st = PcdState::new(n, count, seed);
                    st.run(m, sweeps.max(1))?;
                    Ok(st.chains().to_vec())
                }
                SpinSource::Chains(st, sweeps) => {
                    if st.count() < count {
                        return Err(Error::InvalidArgument(format!(
                            "{} chains cannot supply {count} samples",
                            st.count()
                        )));
                    }
                    st.run(m, sweeps)?;
                    Ok(st.chains()[..count * n].to_vec())
                }
            },
        }
    }

    /// Ancestral sampling: spins first, then `z | s`. Returns `(z, s)` as `count×n`.
    pub fn sample_z(&self, count: usize, seed: u64, source: SpinSource<'_>) -> Result<(Tensor, Tensor)> {
        let n = self.n;
        let spins = self.sample_spins(count, rng::derive_seed(seed, 1), source)?;
        let smooth_seed = rng::derive_seed(seed, 2);
        let mut z = Vec::with_capacity(count * n);
        for (c, s) in spins.chunks(n.max(1)).enumerate().take(count) {
            let mut r = rng::stream(smooth_seed, c as u64);
            z.extend(self.smooth(s, &mut r));
        }
        Ok((Tensor::matrix(count, n, z)?, Tensor::matrix(count, n, spins)?))
    }

    /// Gradient of the batch-mean `log p(z)` with respect to the base parameters.
    ///
    /// `negative` supplies `E[s]` and `E[s sᵀ]` under the spin model (from PCD
    /// or enumeration); D-Flow uses its closed form when `None`.
    pub fn base_grads(&self, z_batch: &Tensor, negative: Option<&Moments>) -> Result<BaseGrads> {
        let n = self.n;
        if z_batch.cols() != n {
            return Err(Error::shape("base_grads", format!("{:?} vs n={n}", z_batch.shape())));
        }
        let rows = z_batch.rows();
        let bf = rows as f64;
        match self.kind {
            BaseKind::Gaussian => Ok(BaseGrads::default()),
            BaseKind::Multicov => {
                let l = multicov_factor(&self.jtilde_cholesky_raw(), n);
                let mut g = vec![0.0; n * n];
                for z in z_batch.data().chunks(n) {
                    let y: Vec<f64> = (0..n).map(|j| (0..n).map(|i| l[i * n + j] * z[i]).sum()).collect();
                    for i in 0..n {
                        for j in 0..i {
                            g[i * n + j] -= y[j] * z[i] / bf;
                        }
                        g[i * n + i] += (1.0 - y[i] * z[i] * l[i * n + i]) / bf;
                    }
                }
                Ok(BaseGrads { chol: Some(g), ..Default::default() })
            }
            BaseKind::Rbm | BaseKind::Dflow => {
                let m = self.model.as_ref().expect("spin kinds carry a model");
                let neg_owned;
                let neg = match negative {
                    Some(mo) => mo,
                    None if self.kind == BaseKind::Dflow => {
                        let mean: Vec<f64> = m.h().iter().map(|h| h.tanh()).collect();
                        let mut outer = vec![0.0; n * n];
                        for i in 0..n {
                            for k in 0..n {
                                outer[i * n + k] = if i == k { 1.0 } else { mean[i] * mean[k] };
                            }
                        }
                        neg_owned = Moments { n, mean, outer, mean_se: vec![0.0; n], outer_se: vec![0.0; n * n] };
                        &neg_owned
                    }
                    None => {
                        return Err(Error::InvalidArgument("rbm base needs negative-phase statistics".into()))
                    }
                };
                let inv = self.chol.inverse();
                let mut gj = vec![0.0; n * n];
                let mut gh = vec![0.0; n];
                let mut gd = 0.0;
                for z in z_batch.data().chunks(n) {
                    let jz = self.jtilde_times(z);
                    let t: Vec<f64> = jz.iter().zip(m.h()).map(|(a, h)| (a + h).tanh()).collect();
                    for i in 0..n {
                        gh[i] += t[i];
                        for k in 0..n {
                            gj[i * n + k] += -z[i] * z[k] + t[i] * z[k] + t[k] * z[i];
                        }
                        gd += -0.5 * z[i] * z[i] + t[i] * z[i];
                    }
                }
                let trace_inv: f64 = (0..n).map(|i| inv[i * n + i]).sum();
                let partition = m.partition();
                for i in 0..n {
                    gh[i] = gh[i] / bf - neg.mean[i];
                    for k in 0..n {
                        let tied = i != k
                            && self.kind == BaseKind::Rbm
                            && partition.is_none_or(|p| p[i] != p[k]);
                        gj[i * n + k] = if tied {
                            gj[i * n + k] / bf - neg.outer[i * n + k] + inv[i * n + k]
                        } else {
                            0.0
                        };
                    }
                }
                gd = gd / bf + 0.5 * trace_inv - 0.5 * n as f64;
                Ok(BaseGrads { j: Some(gj), h: Some(gh), delta: Some(gd), chol: None })
            }
        }
    }

    /// Recovers the raw MultiCov parameterization from the stored factor.
    fn jtilde_cholesky_raw(&self) -> Vec<f64> {
        let n = self.n;
        let l = self.chol.factor();
        let mut raw = l.to_vec();
        for i in 0..n {
            raw[i * n + i] = l[i * n + i].ln();
        }
        raw
    }
}

/// Where RBM spin samples come from.
pub enum SpinSource<'a> {
    /// Fresh uniformly initialized chains, one per sample, run for this many sweeps.
    BurnIn(usize),
    /// Existing persistent chains advanced by this many sweeps.
    Chains(&'a mut PcdState, usize),
}

/// Gradients of the batch-mean `log p(z)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaseGrads {
    /// `n×n`; entry `(i, k)` is the derivative with respect to the tied pair
    /// `Jᵢₖ = Jₖᵢ`. Zero on the diagonal, within a bipartite side, and for D-Flow.
    pub j: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
    /// Derivative with respect to Δ; reported but not applied during training.
    pub delta: Option<f64>,
    /// MultiCov raw Cholesky parameters, `n×n` (lower triangle incl. log-diagonal).
    pub chol: Option<Vec<f64>>,
}

/// Lower-triangular factor from the raw MultiCov parameterization.
pub fn multicov_factor(raw: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..i {
            l[i * n + k] = raw[i * n + k];
        }
        l[i * n + i] = raw[i * n + i].exp();
    }
    l
}
