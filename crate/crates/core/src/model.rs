//! Flow on top of a smoothed base: `log p(x) = log p_Z(f(x)) + log|det ∂f/∂x|`.
//!
//! The composed energy is `E(x) = -u(f(x)) - log|det ∂f/∂x|` where `u` is the
//! unnormalized base log density, so `log p(x) = -E(x) - log Z_z`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::base::{BaseKind, LogZ, SmoothedBase, SpinSource};
use crate::error::{Error, Result};
use crate::flow::{CouplingKind, FlowConfig, FlowStack, PassCtx, Shape3};
use crate::rbm::{Moments, SpinModel};
use crate::rng::{self, StreamRng};

pub const PIXEL_LEVELS: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dequant {
    None,
    Uniform,
    Variational,
}

/// Dimensionality of the data, and the pixel layout for 8-bit images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub dim: usize,
    pub image: Option<Shape3>,
}

impl DataSpec {
    pub fn flat(dim: usize) -> Self {
        Self { dim, image: None }
    }

    pub fn image(shape: Shape3) -> Self {
        Self { dim: shape.len(), image: Some(shape) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base: BaseKind,
    /// Smoothing strength; the kind's default when absent.
    pub delta: Option<f64>,
    pub flow: FlowConfig,
    pub dequant: Dequant,
    /// Affine couplings in the variational noise flow.
    pub dequant_couplings: usize,
    /// Standard deviation of the initial RBM couplings.
    pub init_coupling_std: f64,
}

impl ModelConfig {
    pub fn new(base: BaseKind) -> Self {
        Self {
            base,
            delta: None,
            flow: FlowConfig::default(),
            dequant: Dequant::None,
            dequant_couplings: 4,
            init_coupling_std: 0.01,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or_else(|| self.base.default_delta())
    }
}

/// Negative-phase statistics of the spin model and its `log Z_s`, used as
/// the value and gradient of the base partition function.
#[derive(Debug, Clone)]
pub struct Negative {
    pub log_z_s: f64,
    pub moments: Moments,
}

/// Where the base parameters live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub kind: BaseKind,
    pub n: usize,
    pub nv: usize,
    pub delta: f64,
    /// RBM couplings, `nv×nh`; visible spins are the first `nv` latent entries.
    pub w: Option<ParamId>,
    pub h: Option<ParamId>,
    /// MultiCov raw Cholesky factor (strict lower part plus log-diagonal).
    pub chol: Option<ParamId>,
}

impl BaseParams {
    fn new(store: &mut ParamStore, kind: BaseKind, n: usize, delta: f64, std: f64, rng: &mut StreamRng) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        let nv = n.div_ceil(2);
        let mut p = Self { kind, n, nv, delta, w: None, h: None, chol: None };
        match kind {
            BaseKind::Rbm => {
                if n < 2 {
                    return Err(Error::InvalidArgument("rbm base needs at least two spins".into()));
                }
                let nh = n - nv;
                let w = (0..nv * nh).map(|_| std * rng::normal(rng)).collect();
                p.w = Some(store.add("base.w", Tensor::matrix(nv, nh, w)?));
                p.h = Some(store.add("base.h", Tensor::zeros(&[n])));
            }
            BaseKind::Dflow => {
                p.h = Some(store.add("base.h", Tensor::zeros(&[n])));
            }
            BaseKind::Multicov => {
                let mut raw = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    raw.set(i, i, 0.5 * delta.ln());
                }
                p.chol = Some(store.add("base.chol", raw));
            }
            BaseKind::Gaussian => {}
        }
        Ok(p)
    }

    pub fn spin_model(&self, store: &ParamStore) -> Result<Option<SpinModel>> {
        match self.kind {
            BaseKind::Rbm => {
                let w = store.get(self.w.expect("rbm couplings"));
                let h = store.get(self.h.expect("rbm biases")).data().to_vec();
                Ok(Some(SpinModel::bipartite(self.nv, self.n - self.nv, w.data(), h)?))
            }
            BaseKind::Dflow => Ok(Some(SpinModel::independent(store.get(self.h.expect("biases")).data().to_vec()))),
            _ => Ok(None),
        }
    }

    /// Factorizes the current parameters; fails with a PD error if `J̃` is not
    /// positive definite.
    pub fn snapshot(&self, store: &ParamStore) -> Result<SmoothedBase> {
        match self.kind {
            BaseKind::Gaussian => SmoothedBase::gaussian(self.n),
            BaseKind::Multicov => SmoothedBase::multicov(store.get(self.chol.expect("factor")).data(), self.n),
            _ => SmoothedBase::build(self.kind, self.spin_model(store)?, self.delta),
        }
    }

    /// Per-row `log p(z)` recorded on `g`, shape `[batch, 1]`.
    pub fn log_density_graph(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        z: Var,
        snapshot: &SmoothedBase,
        negative: Option<&Negative>,
    ) -> Result<Var> {
        let n = self.n;
        let nf = n as f64;
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        match self.kind {
            BaseKind::Gaussian => {
                let sq = g.square(z);
                let s = g.sum_cols(sq)?;
                let s = g.scale(s, -0.5);
                Ok(g.offset(s, -nf * half_log_2pi))
            }
            BaseKind::Multicov => {
                let raw = store.var(g, self.chol.expect("factor"));
                let mut lower = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for k in 0..i {
                        lower.set(i, k, 1.0);
                    }
                }
                let eye = Tensor::eye(n);
                let off = g.mul_const(raw, lower)?;
                let e = g.exp(raw);
                let diag = g.mul_const(e, eye.clone())?;
                let l = g.add(off, diag)?;
                let y = g.matmul(z, l)?;
                let sq = g.square(y);
                let u = g.sum_cols(sq)?;
                let u = g.scale(u, -0.5);
                let raw_diag = g.mul_const(raw, eye)?;
                let half_log_det = g.sum(raw_diag);
                // log p = u - (n/2) ln 2π + ½ log det
                let lp = g.add(u, half_log_det)?;
                Ok(g.offset(lp, -nf * half_log_2pi))
            }
            BaseKind::Rbm | BaseKind::Dflow => {
                let h = store.var(g, self.h.expect("biases"));
                let delta = self.delta;
                let (jz, w) = if self.kind == BaseKind::Rbm {
                    let w = store.var(g, self.w.expect("couplings"));
                    let zv = g.slice_cols(z, 0, self.nv)?;
                    let zh = g.slice_cols(z, self.nv, n)?;
                    let wt = g.transpose(w)?;
                    let a = g.matmul(zh, wt)?;
                    let b = g.matmul(zv, w)?;
                    (Some(g.concat_cols(&[a, b])?), Some(w))
                } else {
                    (None, None)
                };
                let dz = g.scale(z, delta);
                let mut field = g.add(dz, h)?;
                let zz = g.square(z);
                let mut quad = g.scale(zz, delta);
                if let Some(jz) = jz {
                    field = g.add(field, jz)?;
                    let zjz = g.mul(z, jz)?;
                    quad = g.add(quad, zjz)?;
                }
                let lc = g.log_2cosh(field)?;
                let q = g.scale(quad, -0.5);
                let terms = g.add(q, lc)?;
                let u = g.sum_cols(terms)?;
                let log_z = self.log_z_node(g, snapshot, w, h, negative)?;
                g.sub(u, log_z)
            }
        }
    }

    /// `log Z_z` as a scalar node whose gradient is the negative phase minus
    /// the log-determinant term.
    fn log_z_node(
        &self,
        g: &mut Graph,
        snapshot: &SmoothedBase,
        w: Option<Var>,
        h: Var,
        negative: Option<&Negative>,
    ) -> Result<Var> {
        let n = self.n;
        let nv = self.nv;
        let nh = n - nv;
        match (self.kind, w) {
            (BaseKind::Rbm, Some(w)) => {
                let neg = negative
                    .ok_or_else(|| Error::InvalidArgument("rbm base needs negative-phase statistics".into()))?;
                let inv = snapshot.cholesky().inverse();
                let mut gw = vec![0.0; nv * nh];
                for a in 0..nv {
                    for b in 0..nh {
                        gw[a * nh + b] = neg.moments.outer[a * n + nv + b] - inv[a * n + nv + b];
                    }
                }
                let gh = neg.moments.mean.clone();
                let value = Tensor::scalar(snapshot.log_z_continuous(neg.log_z_s));
                Ok(g.custom(&[w, h], value, move |up| {
                    let u = up.item();
                    vec![
                        Tensor::matrix(nv, nh, gw.iter().map(|v| u * v).collect()).unwrap(),
                        Tensor::vector(gh.iter().map(|v| u * v).collect()),
                    ]
                }))
            }
            _ => {
                let model = snapshot.model().expect("spin base");
                let gh: Vec<f64> = model.h().iter().map(|v| v.tanh()).collect();
                let value = Tensor::scalar(snapshot.log_z_continuous(model.independent_log_z()));
                Ok(g.custom(&[h], value, move |up| {
                    let u = up.item();
                    vec![Tensor::vector(gh.iter().map(|v| u * v).collect())]
                }))
            }
        }
    }

    /// Parameters that carry the L2 penalty (`J` and `h`).
    pub fn penalized(&self) -> Vec<ParamId> {
        self.w.iter().chain(self.h.iter()).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbmFlowModel {
    pub config: ModelConfig,
    pub spec: DataSpec,
    pub params: ParamStore,
    pub flow: FlowStack,
    pub base: BaseParams,
    pub dequant_flow: Option<FlowStack>,
}

/// Result of dequantizing a batch: continuous inputs and the per-row amount
/// to add to `-log p(x_cont)` to get the discrete negative log-likelihood bound.
#[derive(Debug, Clone)]
pub struct Dequantized {
    pub x: Tensor,
    pub correction: Vec<f64>,
}

fn log_std_normal_rows(eps: &Tensor) -> Vec<f64> {
    let d = eps.cols() as f64;
    (0..eps.rows())
        .map(|r| -0.5 * eps.row(r).iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * PI).ln())
        .collect()
}

impl EbmFlowModel {
    pub fn new(config: ModelConfig, spec: DataSpec, seed: u64) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::InvalidArgument("data dimension must be positive".into()));
        }
        if spec.image.is_none() && config.dequant != Dequant::None {
            return Err(Error::InvalidArgument("dequantization applies to image data only".into()));
        }
        let mut params = ParamStore::new();
        let flow = match spec.image {
            Some(shape) => FlowStack::image(&mut params, shape, &config.flow, rng::derive_seed(seed, 10))?,
            None => FlowStack::flat(&mut params, spec.dim, &config.flow, rng::derive_seed(seed, 10))?,
        };
        let mut r = rng::stream(rng::derive_seed(seed, 11), 0);
        let base = BaseParams::new(&mut params, config.base, spec.dim, config.delta(), config.init_coupling_std, &mut r)?;
        let dequant_flow = if config.dequant == Dequant::Variational {
            let cfg = FlowConfig {
                coupling: CouplingKind::Affine,
                hidden: config.flow.hidden,
                components: 1,
                couplings: config.dequant_couplings,
            };
            Some(FlowStack::conditional(&mut params, "dequant", spec.dim, spec.dim, &cfg, rng::derive_seed(seed, 12))?)
        } else {
            None
        };
        Ok(Self { config, spec, params, flow, base, dequant_flow })
    }

    pub fn snapshot_base(&self) -> Result<SmoothedBase> {
        self.base.snapshot(&self.params)
    }

    /// Records `log p(x)` per row and returns it with `z = f(x)`.
    pub fn log_likelihood_graph(
        &self,
        g: &mut Graph,
        x: Var,
        snapshot: &SmoothedBase,
        negative: Option<&Negative>,
        pass: &mut PassCtx,
    ) -> Result<(Var, Var)> {
        let (z, logdet) = self.flow.forward(&self.params, g, x, None, pass)?;
        let lp = self.base.log_density_graph(&self.params, g, z, snapshot, negative)?;
        Ok((g.add(lp, logdet)?, z))
    }

    /// `(z, logdet)` on plain values.
    pub fn to_latent(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (z, ld, _) = self.flow.forward_values(&self.params, x, None)?;
        Ok((z, ld))
    }

    /// Per-row `log p(x)` for continuous inputs.
    pub fn log_likelihood(&self, base: &SmoothedBase, log_z: &LogZ, x: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.to_latent(x)?;
        (0..z.rows()).map(|r| Ok(base.log_prob_z(z.row(r), log_z)? + ld[r])).collect()
    }

    /// Per-row composed energy `-u(f(x)) - log|det|`.
    pub fn energy_x(&self, base: &SmoothedBase, x: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.to_latent(x)?;
        Ok((0..z.rows()).map(|r| -base.unnormalized_log_prob(z.row(r)) - ld[r]).collect())
    }

    /// Ancestral samples `x = f⁻¹(z)` with their spins.
    pub fn sample(&self, count: usize, seed: u64, source: SpinSource<'_>) -> Result<(Tensor, Tensor)> {
        let base = self.snapshot_base()?;
        let (z, s) = base.sample_z(count, seed, source)?;
        if count == 0 {
            return Ok((Tensor::matrix(0, self.spec.dim, vec![])?, s));
        }
        Ok((self.flow.inverse(&self.params, &z, None)?, s))
    }

    /// For each spin vector, `per_column` samples of `f⁻¹(z)` with `z ~ N(s, J̃⁻¹)`.
    /// Row `c·per_column + r` is sample `r` of column `c`.
    pub fn conditional_grid(&self, spins: &[Vec<f64>], per_column: usize, seed: u64) -> Result<Tensor> {
        let base = self.snapshot_base()?;
        let n = self.spec.dim;
        let mut z = Vec::with_capacity(spins.len() * per_column * n);
        for (c, s) in spins.iter().enumerate() {
            if s.len() != n || s.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::InvalidSpin(format!("column {c}: {s:?}")));
            }
            for r in 0..per_column {
                let mut rr = rng::stream(seed, (c * per_column + r) as u64);
                z.extend(base.smooth(s, &mut rr));
            }
        }
        let z = Tensor::matrix(spins.len() * per_column, n, z)?;
        if z.rows() == 0 {
            return Ok(z);
        }
        self.flow.inverse(&self.params, &z, None)
    }

    fn check_pixels(x: &Tensor) -> Result<()> {
        if x.data().iter().any(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0) {
            return Err(Error::InvalidArgument("out-of-range pixel: expected integers in 0..=255".into()));
        }
        Ok(())
    }

    /// Context fed to the noise flow: pixels rescaled to roughly `[-½, ½]`.
    fn dequant_context(x: &Tensor) -> Tensor {
        x.map(|v| (v + 0.5) / PIXEL_LEVELS - 0.5)
    }

    /// Records dequantization on `g`: continuous inputs and per-row `log q(u|x)`.
    pub fn dequantize_graph(&self, g: &mut Graph, x: &Tensor, rng: &mut StreamRng, pass: &mut PassCtx) -> Result<(Var, Var)> {
        if self.config.dequant != Dequant::None {
            Self::check_pixels(x)?;
        }
        let rows = x.rows();
        match (self.config.dequant, &self.dequant_flow) {
            (Dequant::Variational, Some(df)) => {
                let eps = Tensor::matrix(rows, x.cols(), (0..x.len()).map(|_| rng::normal(rng)).collect())?;
                let log_n = Tensor::matrix(rows, 1, log_std_normal_rows(&eps))?;
                let ev = g.leaf(eps);
                let cv = g.leaf(Self::dequant_context(x));
                let (v, ld) = df.forward(&self.params, g, ev, Some(cv), pass)?;
                let u = g.sigmoid(v);
                let xv = g.leaf(x.clone());
                let xc = g.add(xv, u)?;
                let xc = g.scale(xc, 1.0 / PIXEL_LEVELS);
                let lp = g.log_sigmoid(v);
                let nv = g.neg(v);
                let lq = g.log_sigmoid(nv);
                let jac = g.add(lp, lq)?;
                let jac = g.sum_cols(jac)?;
                let ln = g.leaf(log_n);
                let log_q = g.sub(ln, ld)?;
                Ok((xc, g.sub(log_q, jac)?))
            }
            (Dequant::None, _) => Ok((g.leaf(x.clone()), g.leaf(Tensor::zeros(&[rows, 1])))),
            _ => {
                let data = x.data().iter().map(|v| (v + rng::uniform(rng)) / PIXEL_LEVELS).collect();
                Ok((g.leaf(Tensor::matrix(rows, x.cols(), data)?), g.leaf(Tensor::zeros(&[rows, 1]))))
            }
        }
    }

    /// Dequantizes on plain values. The correction is `D·ln 256 + log q(u|x)`
    /// (zero without dequantization).
    pub fn dequantize(&self, x: &Tensor, seed: u64) -> Result<Dequantized> {
        let mut g = Graph::new();
        let mut r = rng::stream(seed, 0);
        let (xc, log_q) = self.dequantize_graph(&mut g, x, &mut r, &mut PassCtx::eval())?;
        let scale = match self.config.dequant {
            Dequant::None => 0.0,
            _ => x.cols() as f64 * PIXEL_LEVELS.ln(),
        };
        Ok(Dequantized {
            x: g.value(xc).clone(),
            correction: g.value(log_q).data().iter().map(|v| v + scale).collect(),
        })
    }

    /// Per-row negative log-likelihood (nats), dequantized for image data.
    pub fn nll(&self, base: &SmoothedBase, log_z: &LogZ, x: &Tensor, seed: u64) -> Result<Vec<f64>> {
        let dq = self.dequantize(x, seed)?;
        let ll = self.log_likelihood(base, log_z, &dq.x)?;
        Ok(ll.iter().zip(&dq.correction).map(|(l, c)| c - l).collect())
    }

    /// Maps continuous image samples to pixel values.
    pub fn discretize(x: &Tensor) -> Tensor {
        x.map(|v| (v.clamp(0.0, 1.0 - 1e-9) * PIXEL_LEVELS).floor())
    }
}
