//! Affine and mixture-of-logistics coupling layers.
//!
//! The input is split into `part1` (passed through) and `part2`
//! (transformed elementwise with parameters computed from `part1`):
//!
//! ```text
//! affine:     y₂ = x₂ e^a + b                                 log|det| = Σ a
//! mixlogcdf:  y₂ = σ⁻¹(F(x₂)) e^a + b,  F = Σₖ πₖ σ((x₂-μₖ)e^{-sₖ})
//!             log|det| = Σ [log F'(x₂) - log F - log(1-F) + a]
//! ```
//!
//! `F` is clamped to `[1e-12, 1-1e-12]` before the logit. The mixlogcdf
//! inverse is found by bisection on the strictly increasing `F`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::conditioner::{Conditioner, PassCtx};
use crate::autodiff::{logsumexp, softplus, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const CDF_CLAMP: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Affine,
    Mixlogcdf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub components: usize,
    part1: Rc<[usize]>,
    part2: Rc<[usize]>,
    merge: Rc<[usize]>,
    context: usize,
    pub net: Conditioner,
}

/// Per-element parameters of the mixture transform for one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MixParams {
    pub logits: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_s: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

fn log_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

impl MixParams {
    pub fn identity() -> Self {
        Self { logits: vec![0.0], mu: vec![0.0], log_s: vec![0.0], a: 0.0, b: 0.0 }
    }

    /// `(log F(x), log(1 - F(x)), log F'(x))`, unclamped.
    pub fn log_cdf(&self, x: f64) -> (f64, f64, f64) {
        let norm = logsumexp(&self.logits);
        let mut lp = Vec::with_capacity(self.mu.len());
        let mut lq = Vec::with_capacity(self.mu.len());
        let mut ld = Vec::with_capacity(self.mu.len());
        for k in 0..self.mu.len() {
            let t = (x - self.mu[k]) * (-self.log_s[k]).exp();
            let lpi = self.logits[k] - norm;
            lp.push(lpi + log_sigmoid(t));
            lq.push(lpi + log_sigmoid(-t));
            ld.push(lpi + log_sigmoid(t) + log_sigmoid(-t) - self.log_s[k]);
        }
        (logsumexp(&lp), logsumexp(&lq), logsumexp(&ld))
    }

    /// `(y, log dy/dx, clamped)` for one element.
    pub fn forward(&self, x: f64) -> (f64, f64, bool) {
        let floor = CDF_CLAMP.ln();
        let (lp, lq, ld) = self.log_cdf(x);
        let clamped = lp < floor || lq < floor;
        let (lp, lq) = (lp.max(floor), lq.max(floor));
        let y = (lp - lq) * self.a.exp() + self.b;
        (y, ld - lp - lq + self.a, clamped)
    }

    pub fn inverse(&self, y: f64) -> Result<f64> {
        let target = (y - self.b) * (-self.a).exp();
        let f = |x: f64| {
            let (lp, lq, _) = self.log_cdf(x);
            lp - lq - target
        };
        let max_scale = self.log_s.iter().map(|s| s.exp()).fold(0.0, f64::max);
        let lo_mu = self.mu.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_mu = self.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = lo_mu - 30.0 * max_scale;
        let mut hi = hi_mu + 30.0 * max_scale;
        let mut widen = 0;
        while f(lo) > 0.0 || f(hi) < 0.0 {
            let w = hi - lo;
            if f(lo) > 0.0 {
                lo -= w;
            }
            if f(hi) < 0.0 {
                hi += w;
            }
            widen += 1;
            if widen > 60 || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Bracket(format!("no root for logit target {target}")));
            }
        }
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// `part1` indices and their complement, in increasing order.
pub fn split_by(dim: usize, in_part1: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<usize>) {
    (0..dim).partition(|&i| in_part1(i))
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: CouplingKind,
        part1: Vec<usize>,
        part2: Vec<usize>,
        context: usize,
        hidden: usize,
        components: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let dim = part1.len() + part2.len();
        let mut seen = vec![false; dim];
        for &i in part1.iter().chain(&part2) {
            if i >= dim || seen[i] {
                return Err(Error::InvalidArgument("coupling mask is not a partition".into()));
            }
            seen[i] = true;
        }
        if part2.is_empty() {
            return Err(Error::InvalidArgument("coupling transforms no dimensions".into()));
        }
        let k = match kind {
            CouplingKind::Affine => 1,
            CouplingKind::Mixlogcdf => components.max(1),
        };
        let d2 = part2.len();
        let bias = match kind {
            CouplingKind::Affine => vec![0.0; 2 * d2],
            CouplingKind::Mixlogcdf => {
                // spread the component locations so they do not stay tied
                let mut b = vec![0.0; 3 * d2 * k + 2 * d2];
                for j in 0..d2 {
                    for c in 0..k {
                        let loc = if k == 1 { 0.0 } else { -1.0 + 2.0 * c as f64 / (k - 1) as f64 };
                        b[d2 * k + j * k + c] = loc;
                    }
                }
                b
            }
        };
        let net = Conditioner::new(store, prefix, part1.len() + context, hidden, bias, rng);
        let order: Vec<usize> = part1.iter().chain(&part2).copied().collect();
        let merge = super::reshape::invert(&order);
        Ok(Self {
            kind,
            components: k,
            part1: part1.into(),
            part2: part2.into(),
            merge: merge.into(),
            context,
            net,
        })
    }

    pub fn part1(&self) -> &[usize] {
        &self.part1
    }

    pub fn part2(&self) -> &[usize] {
        &self.part2
    }

    fn net_input(&self, g: &mut Graph, x1: Var, ctx: Option<Var>) -> Result<Var> {
        match (self.context, ctx) {
            (0, _) => Ok(x1),
            (_, Some(c)) if self.part1.is_empty() => Ok(c),
            (_, Some(c)) => g.concat_cols(&[x1, c]),
            (_, None) => Err(Error::InvalidArgument("coupling expects a context input".into())),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: Var,
        ctx: Option<Var>,
        pass: &mut PassCtx,
    ) -> Result<(Var, Var)> {
        let d2 = self.part2.len();
        let x1 = g.gather_cols(x, self.part1.clone())?;
        let x2 = g.gather_cols(x, self.part2.clone())?;
        let input = self.net_input(g, x1, ctx)?;
        let out = self.net.forward(store, g, input, pass)?;
        let (y2, logdet) = match self.kind {
            CouplingKind::Affine => {
                let a = g.slice_cols(out, 0, d2)?;
                let b = g.slice_cols(out, d2, 2 * d2)?;
                let ea = g.exp(a);
                let s = g.mul(x2, ea)?;
                (g.add(s, b)?, g.sum_cols(a)?)
            }
            CouplingKind::Mixlogcdf => self.mix_forward(g, x2, out, pass)?,
        };
        let joined = if self.part1.is_empty() { y2 } else { g.concat_cols(&[x1, y2])? };
        Ok((g.gather_cols(joined, self.merge.clone())?, logdet))
    }

    fn mix_forward(&self, g: &mut Graph, x2: Var, out: Var, pass: &mut PassCtx) -> Result<(Var, Var)> {
        let d2 = self.part2.len();
        let k = self.components;
        let dk = d2 * k;
        let logits = g.slice_cols(out, 0, dk)?;
        let mu = g.slice_cols(out, dk, 2 * dk)?;
        let log_s = g.slice_cols(out, 2 * dk, 3 * dk)?;
        let a = g.slice_cols(out, 3 * dk, 3 * dk + d2)?;
        let b = g.slice_cols(out, 3 * dk + d2, 3 * dk + 2 * d2)?;

        let rep: Rc<[usize]> = (0..dk).map(|c| c / k).collect();
        let xr = g.gather_cols(x2, rep.clone())?;
        let diff = g.sub(xr, mu)?;
        let inv_s = g.neg(log_s);
        let inv_s = g.exp(inv_s);
        let t = g.mul(diff, inv_s)?;

        let norm = g.logsumexp_groups(logits, k)?;
        let norm = g.gather_cols(norm, rep)?;
        let log_pi = g.sub(logits, norm)?;

        let ls_pos = g.log_sigmoid(t);
        let neg_t = g.neg(t);
        let ls_neg = g.log_sigmoid(neg_t);

        let terms = g.add(log_pi, ls_pos)?;
        let log_p = g.logsumexp_groups(terms, k)?;
        let terms = g.add(log_pi, ls_neg)?;
        let log_q = g.logsumexp_groups(terms, k)?;
        let terms = g.add(log_pi, ls_pos)?;
        let terms = g.add(terms, ls_neg)?;
        let terms = g.sub(terms, log_s)?;
        let log_d = g.logsumexp_groups(terms, k)?;

        let floor = CDF_CLAMP.ln();
        pass.saturated += g.value(log_p).data().iter().filter(|&&v| v < floor).count();
        pass.saturated += g.value(log_q).data().iter().filter(|&&v| v < floor).count();
        let log_p = g.clamp_min(log_p, floor);
        let log_q = g.clamp_min(log_q, floor);

        let logit = g.sub(log_p, log_q)?;
        let ea = g.exp(a);
        let y = g.mul(logit, ea)?;
        let y = g.add(y, b)?;

        let ld = g.sub(log_d, log_p)?;
        let ld = g.sub(ld, log_q)?;
        let ld = g.add(ld, a)?;
        Ok((y, g.sum_cols(ld)?))
    }

    /// Unpacks the conditioner output of one row into per-dimension parameters.
    pub fn mix_params(&self, out: &[f64]) -> Vec<MixParams> {
        let d2 = self.part2.len();
        let k = self.components;
        let dk = d2 * k;
        (0..d2)
            .map(|j| MixParams {
                logits: out[j * k..(j + 1) * k].to_vec(),
                mu: out[dk + j * k..dk + (j + 1) * k].to_vec(),
                log_s: out[2 * dk + j * k..2 * dk + (j + 1) * k].to_vec(),
                a: out[3 * dk + j],
                b: out[3 * dk + d2 + j],
            })
            .collect()
    }

    fn conditioner_output(&self, store: &ParamStore, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let rows = x.rows();
        let p1: Vec<f64> = (0..rows)
            .flat_map(|r| self.part1.iter().map(move |&i| x.at(r, i)))
            .collect();
        let mut input = Tensor::matrix(rows, self.part1.len(), p1)?;
        if self.context > 0 {
            let c = ctx.ok_or_else(|| Error::InvalidArgument("coupling expects a context input".into()))?;
            let mut joined = Vec::with_capacity(rows * (self.part1.len() + c.cols()));
            for r in 0..rows {
                joined.extend_from_slice(input.row(r));
                joined.extend_from_slice(c.row(r));
            }
            input = Tensor::matrix(rows, self.part1.len() + c.cols(), joined)?;
        }
        self.net.eval(store, &input)
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let out = self.conditioner_output(store, y, ctx)?;
        let d2 = self.part2.len();
        let mut x = y.clone();
        for r in 0..y.rows() {
            let o = out.row(r);
            match self.kind {
                CouplingKind::Affine => {
                    for (j, &i) in self.part2.iter().enumerate() {
                        x.set(r, i, (y.at(r, i) - o[d2 + j]) * (-o[j]).exp());
                    }
                }
                CouplingKind::Mixlogcdf => {
                    for (p, &i) in self.mix_params(o).iter().zip(self.part2.iter()) {
                        x.set(r, i, p.inverse(y.at(r, i))?);
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "coupling inverse".into() });
        }
        Ok(x)
    }
}
