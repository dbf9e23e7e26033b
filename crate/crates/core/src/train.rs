//! Maximum-likelihood training, evaluation and the 2-D sample-quality measure.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::base::{BaseKind, LogZ, LogZMode, SmoothedBase, SpinSource, EXACT_LOG_Z_LIMIT};
use crate::config::{L2Mode, LogZChoice, NegativePhase, RunConfig, TrainingConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::PassCtx;
use crate::model::{DataSpec, Dequant, EbmFlowModel, Negative};
use crate::rbm::PcdState;
use crate::rng::{self, Rng, StreamRng};

/// Spin counts up to this size get an exact `log Z_s` every step.
pub const EXACT_STEP_LOG_Z_LIMIT: usize = 16;

const TAG_PCD: u64 = 13;
const TAG_DROPOUT: u64 = 20;
const TAG_DEQUANT: u64 = 21;
const TAG_EVAL_LOGZ: u64 = 30;
const TAG_SHUFFLE: u64 = 40;
const TAG_EVAL_DEQUANT: u64 = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<usize, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in grads {
            let p = &mut store.values_mut()[id];
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (k, (pk, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *pk -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One row of the metrics series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll_nats: f64,
    pub bpd: f64,
    pub logz: f64,
    pub logz_stderr: f64,
    pub pd_failures: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,nll_nats,bpd,logz,logz_stderr,pd_failures,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.3}",
            self.epoch, self.nll_nats, self.bpd, self.logz, self.logz_stderr, self.pd_failures, self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub accepted: bool,
    pub saturated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub nll_nats: f64,
    pub bpd: f64,
    pub logz: f64,
    pub logz_stderr: f64,
    pub count: usize,
}

/// Enumerated negative phase for the RBM base, `None` for the other kinds.
pub fn exact_negative(base: &SmoothedBase) -> Result<Option<Negative>> {
    match (base.kind(), base.model()) {
        (BaseKind::Rbm, Some(m)) => {
            if m.n() > EXACT_LOG_Z_LIMIT {
                return Err(Error::TooLarge { n: m.n(), limit: EXACT_LOG_Z_LIMIT });
            }
            Ok(Some(Negative { log_z_s: m.exact_log_z()?, moments: m.exact_moments()? }))
        }
        _ => Ok(None),
    }
}

/// Records the batch loss `mean(log q(u|x) - log p(x)) + λ(‖W‖² + ‖h‖²)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &EbmFlowModel,
    g: &mut Graph,
    x: &Tensor,
    base: &SmoothedBase,
    negative: Option<&Negative>,
    l2: f64,
    pass: &mut PassCtx,
    dequant_rng: &mut StreamRng,
) -> Result<Var> {
    let (xv, log_q) = if model.config.dequant == Dequant::None {
        (g.leaf(x.clone()), None)
    } else {
        let (xc, lq) = model.dequantize_graph(g, x, dequant_rng, pass)?;
        (xc, Some(lq))
    };
    let (logp, _) = model.log_likelihood_graph(g, xv, base, negative, pass)?;
    let per_row = match log_q {
        Some(lq) => g.sub(lq, logp)?,
        None => g.neg(logp),
    };
    let mut loss = g.mean(per_row);
    if l2 > 0.0 {
        for id in model.base.penalized() {
            let p = model.params.var(g, id);
            let sq = g.square(p);
            let s = g.sum(sq);
            let s = g.scale(s, l2);
            loss = g.add(loss, s)?;
        }
    }
    Ok(loss)
}

/// `log Z` for evaluation according to the configured choice.
pub fn eval_log_z(base: &SmoothedBase, t: &TrainingConfig, seed: u64) -> Result<LogZ> {
    match t.log_z {
        LogZChoice::Auto if base.n() <= EXACT_LOG_Z_LIMIT => base.log_z(LogZMode::Exact),
        LogZChoice::Exact => base.log_z(LogZMode::Exact),
        _ => base.log_z(LogZMode::Ais { temps: t.ais_temps, chains: t.ais_chains, seed }),
    }
}

/// Mean test NLL in nats and bits per dimension. Image data is dequantized
/// with a fixed noise seed.
pub fn eval_model(model: &EbmFlowModel, data: &Dataset, log_z: LogZ, seed: u64) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let base = model.snapshot_base()?;
    let nll = model.nll(&base, &log_z, &data.x, rng::derive_seed(seed, TAG_EVAL_DEQUANT))?;
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok(EvalMetrics {
        nll_nats: mean,
        bpd: mean / (model.spec.dim as f64 * std::f64::consts::LN_2),
        logz: log_z.value,
        logz_stderr: log_z.stderr,
        count: nll.len(),
    })
}

/// Evaluation with `log Z` from enumeration or AIS.
pub fn eval_with_mode(model: &EbmFlowModel, data: &Dataset, mode: LogZMode, seed: u64) -> Result<EvalMetrics> {
    let log_z = model.snapshot_base()?.log_z(mode)?;
    eval_model(model, data, log_z, seed)
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: EbmFlowModel,
    pub adam: Adam,
    pub pcd: Option<PcdState>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub pd_failures: usize,
    /// Most recent `log Z_s` for spin counts too large to enumerate each step.
    pub log_z_s: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: RunConfig, spec: DataSpec) -> Result<Self> {
        config.validate()?;
        let seed = config.training.seed;
        let model = EbmFlowModel::new(config.model_config(spec.image.is_some()), spec, seed)?;
        let adam = Adam::new(&model.params, config.training.learning_rate);
        let pcd = (model.base.kind == BaseKind::Rbm)
            .then(|| PcdState::new(spec.dim, config.training.pcd_chains, rng::derive_seed(seed, TAG_PCD)));
        Ok(Self { config, model, adam, pcd, epoch: 0, step: 0, pd_failures: 0, log_z_s: None, history: vec![] })
    }

    fn seed(&self) -> u64 {
        self.config.training.seed
    }

    fn negative(&mut self, base: &SmoothedBase) -> Result<Option<Negative>> {
        if base.kind() != BaseKind::Rbm {
            return Ok(None);
        }
        let t = &self.config.training;
        if t.negative_phase == NegativePhase::Exact {
            return exact_negative(base);
        }
        let m = base.model().expect("rbm spins");
        let pcd = self.pcd.as_mut().expect("rbm chains");
        let moments = crate::rbm::pcd_negative_stats(m, pcd, t.pcd_k)?;
        let log_z_s = if m.n() <= EXACT_STEP_LOG_Z_LIMIT {
            m.exact_log_z()?
        } else {
            match self.log_z_s {
                Some(v) => v,
                None => {
                    let v = base.log_z_spins(LogZMode::Ais {
                        temps: t.ais_temps,
                        chains: t.ais_chains,
                        seed: rng::derive_seed(self.seed(), TAG_EVAL_LOGZ),
                    })?;
                    self.log_z_s = Some(v.value);
                    v.value
                }
            }
        };
        Ok(Some(Negative { log_z_s, moments }))
    }

    fn clip_base(&mut self) {
        let ids = self.model.base.penalized();
        let norm = ids.iter().map(|&id| self.model.params.get(id).sq_norm()).sum::<f64>().sqrt();
        let limit = self.config.training.clip_norm;
        if norm > limit {
            let f = limit / norm;
            for id in ids {
                self.model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    /// One Adam step on a batch. A step that leaves `J̃` without a Cholesky
    /// factor is undone (parameters, optimizer and chains) and counted.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepMetrics> {
        let base = self.model.snapshot_base()?;
        let backup = (self.model.params.clone(), self.adam.clone(), self.pcd.clone());
        let negative = self.negative(&base)?;
        let t = &self.config.training;
        let seed = self.seed();
        let l2 = if t.l2_mode == L2Mode::Penalty { t.l2_coeff } else { 0.0 };
        let mut pass = PassCtx::train(t.dropout, rng::stream(rng::derive_seed(seed, TAG_DROPOUT), self.step));
        let mut dq = rng::stream(rng::derive_seed(seed, TAG_DEQUANT), self.step);
        let mut g = Graph::new();
        let loss = batch_loss(&self.model, &mut g, batch, &base, negative.as_ref(), l2, &mut pass, &mut dq)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss at epoch {} step {} (value {value})", self.epoch, self.step),
            });
        }
        let grads = g.backward(loss)?;
        if let Some((id, _)) = grads.params().iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of {} at step {}", self.model.params.name(crate::autodiff::ParamId(*id)), self.step),
            });
        }
        self.adam.step(&mut self.model.params, grads.params());
        if self.config.training.l2_mode == L2Mode::Clip {
            self.clip_base();
        }
        self.step += 1;
        match self.model.snapshot_base() {
            Ok(_) => Ok(StepMetrics { loss: value, accepted: true, saturated: pass.saturated }),
            Err(e) if e.is_pd_failure() => {
                (self.model.params, self.adam, self.pcd) = backup;
                self.pd_failures += 1;
                Ok(StepMetrics { loss: value, accepted: false, saturated: pass.saturated })
            }
            Err(e) => Err(e),
        }
    }

    /// One pass over `train` in a shuffled order determined by the seed and epoch.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut r = rng::stream(rng::derive_seed(self.seed(), TAG_SHUFFLE), self.epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let bs = self.config.training.batch_size;
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            total += self.train_step(&train.rows(chunk))?.loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    pub fn evaluate(&mut self, test: &Dataset) -> Result<EvalMetrics> {
        let base = self.model.snapshot_base()?;
        let log_z = eval_log_z(&base, &self.config.training, rng::derive_seed(self.seed(), TAG_EVAL_LOGZ + self.epoch as u64))?;
        if base.n() > EXACT_STEP_LOG_Z_LIMIT && base.kind() == BaseKind::Rbm {
            self.log_z_s = Some(log_z.value - base.log_z_continuous(0.0));
        }
        eval_model(&self.model, test, log_z, self.seed())
    }

    /// Trains until `epochs` epochs are complete, evaluating on `test` after
    /// each one. `after_epoch` sees the trainer once the epoch's metrics row is
    /// appended.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        epochs: usize,
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let start = Instant::now();
        while self.epoch < epochs {
            self.run_epoch(train)?;
            let ev = self.evaluate(test)?;
            let seconds = if self.config.training.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
            self.history.push(EpochMetrics {
                epoch: self.epoch,
                nll_nats: ev.nll_nats,
                bpd: ev.bpd,
                logz: ev.logz,
                logz_stderr: ev.logz_stderr,
                pd_failures: self.pd_failures,
                seconds,
            });
            after_epoch(self)?;
        }
        Ok(())
    }
}

/// Files written by [`train_loop`] inside the output directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ebmc";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.ebmc")
}

/// Trains `config` (or continues `resume`) to `config.training.epochs`,
/// rewriting the metrics CSV after every epoch and saving checkpoints at the
/// configured cadence plus `last.ebmc`. With zero epochs to run only the
/// current state is saved.
pub fn train_loop(config: &RunConfig, resume: Option<Trainer>) -> Result<Trainer> {
    let id = config.dataset_id()?;
    let (train, test) = crate::data::make_splits(&id, config.data.train_size, config.data.test_size, config.training.seed)?;
    let mut trainer = match resume {
        Some(mut t) => {
            crate::checkpoint::check_compatible(&t.config, config)?;
            t.config = config.clone();
            t.adam.lr = config.training.learning_rate;
            t
        }
        None => Trainer::new(config.clone(), train.spec)?,
    };
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let every = config.training.checkpoint_every;
    let write = |t: &Trainer| -> Result<()> {
        std::fs::write(dir.join(METRICS_FILE), metrics_csv(&t.history))?;
        if t.epoch % every == 0 {
            crate::checkpoint::save_checkpoint(&dir.join(checkpoint_name(t.epoch)), t)?;
        }
        crate::checkpoint::save_checkpoint(&dir.join(LAST_CHECKPOINT), t)
    };
    if trainer.epoch >= config.training.epochs {
        write(&trainer)?;
        return Ok(trainer);
    }
    trainer.fit(&train, &test, config.training.epochs, write)?;
    Ok(trainer)
}

/// Jeffreys divergence `KL(p‖q) + KL(q‖p)` between `grid×grid` histograms of
/// two 2-D point sets over the bounding box of `reference`. Each bin count is
/// incremented by one before normalizing; points outside the box fall in the
/// nearest edge bin.
pub fn histogram_kl(samples: &Tensor, reference: &Tensor, grid: usize) -> Result<f64> {
    if samples.rows() == 0 || reference.rows() == 0 {
        return Err(Error::InvalidArgument("histogram KL needs non-empty point sets".into()));
    }
    if samples.cols() != 2 || reference.cols() != 2 {
        return Err(Error::InvalidArgument("histogram KL is defined for 2-D points".into()));
    }
    if grid == 0 {
        return Err(Error::InvalidArgument("grid must be at least 1".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for i in 0..reference.rows() {
        for d in 0..2 {
            lo[d] = lo[d].min(reference.at(i, d));
            hi[d] = hi[d].max(reference.at(i, d));
        }
    }
    let bin = |v: f64, d: usize| -> usize {
        let w = (hi[d] - lo[d]).max(1e-12);
        let k = ((v - lo[d]) / w * grid as f64).floor();
        if k.is_nan() {
            0
        } else {
            (k.max(0.0) as usize).min(grid - 1)
        }
    };
    let hist = |t: &Tensor| -> Vec<f64> {
        let mut h = vec![1.0; grid * grid];
        for i in 0..t.rows() {
            h[bin(t.at(i, 0), 0) * grid + bin(t.at(i, 1), 1)] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter().map(|c| c / total).collect()
    };
    let p = hist(samples);
    let q = hist(reference);
    Ok(p.iter().zip(&q).map(|(a, b)| (a - b) * (a / b).ln()).sum())
}

/// Histogram KL between `count` model samples and `reference`.
pub fn sample_quality_2d(model: &EbmFlowModel, reference: &Dataset, grid: usize, count: usize, seed: u64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference dataset".into()));
    }
    let (x, _) = model.sample(count, seed, SpinSource::BurnIn(1000))?;
    histogram_kl(&x, &reference.x, grid)
}
