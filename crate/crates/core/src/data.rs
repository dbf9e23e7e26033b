//! Synthetic 2-D datasets and small 8-bit image sets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::Shape3;
use crate::io;
use crate::model::DataSpec;
use crate::rng::{self, Rng, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetId {
    /// Two interleaved half circles, noise σ = 0.1.
    Moons,
    /// Concentric rings of radius 1 and 2, noise σ = 0.08.
    Rings,
    /// Eight Gaussians (σ = 0.1) evenly spaced on a circle of radius 2.
    Gauss8,
    /// Uniform on the dark squares of a 4×4 board over `[-2, 2]²`.
    Checker,
    /// Images from a tensor file shaped `[N, H, W]` or `[N, H, W, C]`, pixels 0..=255.
    Binimg(PathBuf),
}

impl DatasetId {
    pub fn parse(name: &str, path: Option<&Path>) -> Result<Self> {
        match name {
            "moons" => Ok(Self::Moons),
            "rings" => Ok(Self::Rings),
            "gauss8" => Ok(Self::Gauss8),
            "checker" => Ok(Self::Checker),
            "binimg" => path
                .map(|p| Self::Binimg(p.to_path_buf()))
                .ok_or_else(|| Error::Config("dataset 'binimg' needs data.path".into())),
            other => Err(Error::Config(format!(
                "unknown dataset '{other}' (expected moons, rings, gauss8, checker or binimg)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Moons => "moons",
            Self::Rings => "rings",
            Self::Gauss8 => "gauss8",
            Self::Checker => "checker",
            Self::Binimg(_) => "binimg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub spec: DataSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows selected by `idx`, in that order.
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.x.cols();
        let data = idx.iter().flat_map(|&i| self.x.row(i).iter().copied()).collect();
        Tensor::matrix(idx.len(), d, data).expect("sized")
    }
}

fn point(id: &DatasetId, r: &mut StreamRng) -> [f64; 2] {
    let noise = |r: &mut StreamRng, s: f64| s * rng::normal(r);
    match id {
        DatasetId::Moons => {
            let t = PI * rng::uniform(r);
            let (x, y) = if r.random::<bool>() { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            [x + noise(r, 0.1), y + noise(r, 0.1)]
        }
        DatasetId::Rings => {
            let radius = if r.random::<bool>() { 1.0 } else { 2.0 };
            let t = 2.0 * PI * rng::uniform(r);
            [radius * t.cos() + noise(r, 0.08), radius * t.sin() + noise(r, 0.08)]
        }
        DatasetId::Gauss8 => {
            let k = r.random_range(0..8) as f64;
            let t = 2.0 * PI * k / 8.0;
            [2.0 * t.cos() + noise(r, 0.1), 2.0 * t.sin() + noise(r, 0.1)]
        }
        DatasetId::Checker => {
            let x = 4.0 * rng::uniform(r) - 2.0;
            let col = (x + 2.0).floor() as i64;
            let row = 2 * r.random_range(0..2) + (col % 2);
            let y = -2.0 + row as f64 + rng::uniform(r);
            [x, y]
        }
        DatasetId::Binimg(_) => unreachable!("images are loaded, not generated"),
    }
}

/// Gaussian-eight component centres.
pub fn gauss8_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / 8.0;
            [2.0 * t.cos(), 2.0 * t.sin()]
        })
        .collect()
}

/// `n` points (or the first `n` images) from `id`. Generated sets are a
/// deterministic function of `seed`.
pub fn make_dataset(id: &DatasetId, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    match id {
        DatasetId::Binimg(path) => {
            let all = load_images(path)?;
            let take = n.min(all.len());
            Ok(Dataset { x: all.rows(&(0..take).collect::<Vec<_>>()), spec: all.spec })
        }
        _ => {
            let mut r = rng::stream(seed, 0);
            let data = (0..n).flat_map(|_| point(id, &mut r)).collect();
            Ok(Dataset { x: Tensor::matrix(n, 2, data)?, spec: DataSpec::flat(2) })
        }
    }
}

/// Train and held-out sets. Images: the first `n_train` and the following
/// `n_test` rows of the file.
pub fn make_splits(id: &DatasetId, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    match id {
        DatasetId::Binimg(path) => {
            let all = load_images(path)?;
            if all.len() < 2 {
                return Err(Error::InvalidArgument("image file needs at least two images".into()));
            }
            let tr = n_train.min(all.len() - 1);
            let te = n_test.min(all.len() - tr);
            let train = all.rows(&(0..tr).collect::<Vec<_>>());
            let test = all.rows(&(tr..tr + te).collect::<Vec<_>>());
            Ok((Dataset { x: train, spec: all.spec }, Dataset { x: test, spec: all.spec }))
        }
        _ => Ok((
            make_dataset(id, n_train, rng::derive_seed(seed, 1))?,
            make_dataset(id, n_test, rng::derive_seed(seed, 2))?,
        )),
    }
}

pub fn load_images(path: &Path) -> Result<Dataset> {
    let t = io::read_tensor(path)?;
    let shape = match *t.shape() {
        [_, h, w] => Shape3::new(h, w, 1),
        [_, h, w, c] => Shape3::new(h, w, c),
        ref s => return Err(Error::Malformed(format!("image tensor must be [N,H,W] or [N,H,W,C], got {s:?}"))),
    };
    if t.data().iter().any(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0) {
        return Err(Error::Malformed("pixels must be integers in 0..=255".into()));
    }
    let n = t.shape()[0];
    let x = t.reshaped(vec![n, shape.len()])?;
    Ok(Dataset { x, spec: DataSpec::image(shape) })
}
