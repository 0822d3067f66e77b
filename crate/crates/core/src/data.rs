//! Seeded synthetic datasets and their binary file format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codebook::{read_exact, read_f64s, read_u64, write_f64s};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"DIVEQDS1";
/// Smallest dataset `generate` accepts.
pub const MIN_DATASET_SIZE: usize = 10;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetKind {
    /// Isotropic Gaussians with means evenly spaced on a circle in the first
    /// two coordinates.
    GaussianMixture,
    /// Points on a circle with radial (and off-plane) Gaussian noise.
    Ring,
    /// Flattened `side x side` grayscale bar and blob patterns.
    GridImages,
    /// Uniform on `[0, 1]^D`.
    UniformCube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dims: usize,
    pub size: usize,
    pub seed: u64,
    /// Mixture components.
    pub components: usize,
    /// Circle radius for the mixture and the ring.
    pub radius: f64,
    /// Component or radial standard deviation.
    pub noise: f64,
    /// Image side for `GRID_IMAGES`; `dims` must equal `side^2`.
    pub image_side: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture,
            dims: 2,
            size: 10_000,
            seed: 0,
            components: 8,
            radius: 5.0,
            noise: 0.3,
            image_side: 8,
        }
    }
}

/// Generated samples, their train/test split and mixture labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: Tensor,
    /// Mixture component per row; empty for other kinds.
    pub labels: Vec<usize>,
    pub train: Tensor,
    pub test: Tensor,
}

impl DatasetSpec {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.size < MIN_DATASET_SIZE {
            out.push(("size", format!("must be >= {MIN_DATASET_SIZE}, got {}", self.size)));
        }
        if self.dims == 0 {
            out.push(("dims", "must be >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            out.push(("noise", format!("must be finite and >= 0, got {}", self.noise)));
        }
        match self.kind {
            DatasetKind::GaussianMixture | DatasetKind::Ring => {
                if self.dims < 2 {
                    out.push(("dims", format!("{:?} needs dims >= 2", self.kind)));
                }
                if !(self.radius >= 0.0 && self.radius.is_finite()) {
                    out.push(("radius", format!("must be finite and >= 0, got {}", self.radius)));
                }
                if self.kind == DatasetKind::GaussianMixture && self.components == 0 {
                    out.push(("components", "must be >= 1".into()));
                }
            }
            DatasetKind::GridImages => {
                if self.image_side < 2 {
                    out.push(("image_side", "must be >= 2".into()));
                } else if self.dims != self.image_side * self.image_side {
                    out.push((
                        "dims",
                        format!("must equal image_side^2 = {}, got {}", self.image_side * self.image_side, self.dims),
                    ));
                }
            }
            DatasetKind::UniformCube => {}
        }
        out
    }

    /// Component means of the mixture, `components x dims`.
    pub fn mixture_means(&self) -> Tensor {
        let mut means = Tensor::zeros(&[self.components, self.dims]);
        for k in 0..self.components {
            let angle = 2.0 * PI * k as f64 / self.components as f64;
            let row = means.row_mut(k);
            row[0] = self.radius * angle.cos();
            row[1] = self.radius * angle.sin();
        }
        means
    }

    /// Deterministic in the spec alone.
    pub fn generate(&self) -> Result<Dataset> {
        if let Some((name, reason)) = self.violations().into_iter().next() {
            return Err(Error::param(name, reason));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, d) = (self.size, self.dims);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::new();
        match self.kind {
            DatasetKind::GaussianMixture => {
                let means = self.mixture_means();
                labels.reserve(n);
                for _ in 0..n {
                    let k = rng.random_range(0..self.components);
                    labels.push(k);
                    data.extend(means.row(k).iter().map(|m| m + self.noise * gauss(&mut rng)));
                }
            }
            DatasetKind::Ring => {
                for _ in 0..n {
                    let angle = rng.random_range(0.0..2.0 * PI);
                    let r = self.radius + self.noise * gauss(&mut rng);
                    data.push(r * angle.cos());
                    data.push(r * angle.sin());
                    data.extend((2..d).map(|_| self.noise * gauss(&mut rng)));
                }
            }
            DatasetKind::GridImages => {
                for _ in 0..n {
                    data.extend(grid_image(&mut rng, self.image_side, self.noise));
                }
            }
            DatasetKind::UniformCube => data.extend((0..n * d).map(|_| rng.random::<f64>())),
        }
        let data = Tensor::matrix(n, d, data)?;
        let (train, test) = split(&data, self.seed);
        Ok(Dataset {
            data,
            labels,
            train,
            test,
        })
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One bar (horizontal or vertical) or one blob on a dark background.
fn grid_image<R: Rng + ?Sized>(rng: &mut R, side: usize, noise: f64) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let intensity = rng.random_range(0.5..1.0);
    match rng.random_range(0..3) {
        0 => {
            let r = rng.random_range(0..side);
            img[r * side..(r + 1) * side].iter_mut().for_each(|p| *p = intensity);
        }
        1 => {
            let c = rng.random_range(0..side);
            (0..side).for_each(|r| img[r * side + c] = intensity);
        }
        _ => {
            let (cy, cx) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
            let width = rng.random_range(0.8..2.0);
            for r in 0..side {
                for c in 0..side {
                    let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
                    img[r * side + c] = intensity * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    // pixel noise is a tenth of the spec noise so patterns stay legible
    img.iter_mut().for_each(|p| *p += 0.1 * noise * gauss(rng));
    img
}

/// Seeded shuffle into `round(0.8 N)` training rows and the rest.
pub fn split(data: &Tensor, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    order.shuffle(&mut rng);
    let n_train = (data.rows() as f64 * TRAIN_FRACTION).round() as usize;
    (data.select_rows(&order[..n_train]), data.select_rows(&order[n_train..]))
}

/// Layout: magic, `N` and `D` as u64, then `N*D` f64 row-major. Little-endian.
pub fn write_dataset<W: Write>(w: &mut W, data: &Tensor) -> Result<()> {
    if data.ndim() != 2 {
        return Err(Error::param("data", format!("needs an N x D matrix, got {:?}", data.shape())));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(data.rows() as u64).to_le_bytes())?;
    w.write_all(&(data.shape()[1] as u64).to_le_bytes())?;
    write_f64s(w, data.data())
}

/// Reads the header and rows, leaving any trailing bytes unread.
pub(crate) fn read_dataset_body<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let n = read_u64(r, "N")? as usize;
    let d = read_u64(r, "D")? as usize;
    if d == 0 {
        return Err(Error::Format("dataset with D = 0".into()));
    }
    let len = n
        .checked_mul(d)
        .filter(|&len| len <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("dataset shape N={n}, D={d} too large")))?;
    Tensor::matrix(n, d, read_f64s(r, len, "rows")?)
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Tensor> {
    let data = read_dataset_body(r)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(data)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Tensor> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}
