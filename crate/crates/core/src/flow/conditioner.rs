//! Gated residual MLP used by coupling layers to produce their parameters.
//!
//! ```text
//! h  = tanh(x W₁ + b₁)
//! h' = h + dropout(tanh(h W₂ + b₂)) ⊙ σ(h W_g + b_g)
//! y  = h' W_o + b_o
//! ```
//!
//! `W_o` starts at zero, so the output at initialization is the bias `b_o`.

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    wg: ParamId,
    bg: ParamId,
    wo: ParamId,
    bo: ParamId,
}

/// Per-pass settings shared by every layer of a forward evaluation.
pub struct PassCtx {
    pub dropout: f64,
    pub rng: Option<StreamRng>,
    /// Number of CDF values clamped before the logit.
    pub saturated: usize,
}

impl PassCtx {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None, saturated: 0 }
    }

    pub fn train(dropout: f64, rng: StreamRng) -> Self {
        Self { dropout, rng: Some(rng), saturated: 0 }
    }
}

fn init_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl Conditioner {
    /// Registers parameters under `prefix`; `output_bias` seeds `b_o`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output_bias: Vec<f64>,
        rng: &mut StreamRng,
    ) -> Self {
        let output = output_bias.len();
        let w1 = store.add(format!("{prefix}.w1"), init_matrix(input.max(1), hidden, rng));
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = store.add(format!("{prefix}.w2"), init_matrix(hidden, hidden, rng));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[hidden]));
        let wg = store.add(format!("{prefix}.wg"), init_matrix(hidden, hidden, rng));
        let bg = store.add(format!("{prefix}.bg"), Tensor::zeros(&[hidden]));
        let wo = store.add(format!("{prefix}.wo"), Tensor::zeros(&[hidden, output]));
        let bo = store.add(format!("{prefix}.bo"), Tensor::vector(output_bias));
        Self { input, hidden, output, w1, b1, w2, b2, wg, bg, wo, bo }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var, ctx: &mut PassCtx) -> Result<Var> {
        let w1 = store.var(g, self.w1);
        let b1 = store.var(g, self.b1);
        let w2 = store.var(g, self.w2);
        let b2 = store.var(g, self.b2);
        let wg = store.var(g, self.wg);
        let bg = store.var(g, self.bg);
        let wo = store.var(g, self.wo);
        let bo = store.var(g, self.bo);
        let rows = g.value(x).rows();
        let x = if self.input == 0 {
            // unconditional: a constant zero input leaves only the biases
            g.leaf(Tensor::zeros(&[rows, 1]))
        } else {
            x
        };
        let pre = g.matmul(x, w1)?;
        let pre = g.add(pre, b1)?;
        let h = g.tanh(pre);
        let r = g.matmul(h, w2)?;
        let r = g.add(r, b2)?;
        let mut r = g.tanh(r);
        if ctx.dropout > 0.0 {
            if let Some(rng) = ctx.rng.as_mut() {
                let keep = 1.0 - ctx.dropout;
                let mask = (0..rows * self.hidden)
                    .map(|_| if rng::uniform(rng) < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                r = g.mul_const(r, Tensor::matrix(rows, self.hidden, mask)?)?;
            }
        }
        let gate = g.matmul(h, wg)?;
        let gate = g.add(gate, bg)?;
        let gate = g.sigmoid(gate);
        let gated = g.mul(r, gate)?;
        let h = g.add(h, gated)?;
        let out = g.matmul(h, wo)?;
        g.add(out, bo)
    }

    /// Forward pass on plain values, without dropout.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = self.forward(store, &mut g, xv, &mut PassCtx::eval())?;
        Ok(g.value(out).clone())
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [self.w1, self.b1, self.w2, self.b2, self.wg, self.bg, self.wo, self.bo]
    }
}
