//! Message perturbations used to probe what the actor reads from a latent
//! message: cross-task swaps, covariance-shaped and white noise,
//! covariance-matched Gaussian replacement, and moment-preserving random
//! rotation.

use crate::channel::{GeneratorTag, LatentMessage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Relative eigenvalue floor: eigenvalues are raised to at least
/// `EIGEN_FLOOR · trace(Σ̂) / d`.
pub const EIGEN_FLOOR: f64 = 1e-6;

/// Sample moments of a message's rows with a floored eigendecomposition.
#[derive(Clone, Debug)]
pub struct MessageMoments {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance, symmetric.
    pub cov: DMatrix<f64>,
    /// Floored eigenvalues, ascending as returned by the solver.
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub floor: f64,
}

impl MessageMoments {
    fn spectral(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * f(self.eigenvalues[j]));
        scaled * v.transpose()
    }

    /// Σ̂^{1/2} on floored eigenvalues.
    pub fn sqrt(&self) -> DMatrix<f64> {
        self.spectral(f64::sqrt)
    }

    /// Σ̂^{-1/2} on floored eigenvalues.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.spectral(|x| 1.0 / x.sqrt())
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j) as f64)
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut out = Tensor::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)] as f32);
        }
    }
    out
}

/// Row mean and (L−1)-normalized covariance of an L×d matrix.
pub fn sample_moments(h: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let l = h.nrows();
    if l < 2 {
        return Err(Error::InsufficientData(format!("covariance needs at least 2 rows, got {l}")));
    }
    let mean = h.row_mean().transpose();
    let mut centered = h.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (l - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

pub fn estimate_moments(msg: &LatentMessage) -> Result<MessageMoments> {
    let (mean, cov) = sample_moments(&to_matrix(&msg.values))?;
    let d = cov.nrows();
    let trace = cov.trace();
    // An all-constant message has zero trace; keep the floor strictly positive.
    let floor = if trace > 0.0 { EIGEN_FLOOR * trace / d as f64 } else { EIGEN_FLOOR };
    let eig = SymmetricEigen::new(cov.clone());
    let eigenvalues = eig.eigenvalues.map(|x| x.max(floor));
    Ok(MessageMoments { mean, cov, eigenvalues, eigenvectors: eig.eigenvectors, floor })
}

/// Haar-distributed d×d orthogonal matrix: QR of an i.i.d. standard normal
/// matrix with column signs fixed so that diag(R) > 0.
pub fn haar_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PerturbationKind {
    CrossTask,
    CovNoise { strength: f64 },
    WhiteNoise,
    CovGauss { with_mean: bool },
    RandomRot,
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationKind::CrossTask => f.write_str("CrossTask"),
            PerturbationKind::CovNoise { strength } => write!(f, "CovNoise-{strength:.1}x"),
            PerturbationKind::WhiteNoise => f.write_str("WhiteNoise"),
            PerturbationKind::CovGauss { with_mean: false } => f.write_str("CovGauss-0mu"),
            PerturbationKind::CovGauss { with_mean: true } => f.write_str("CovGauss-mu"),
            PerturbationKind::RandomRot => f.write_str("RandomRot"),
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "CrossTask" => PerturbationKind::CrossTask,
            "WhiteNoise" => PerturbationKind::WhiteNoise,
            "CovGauss-0mu" => PerturbationKind::CovGauss { with_mean: false },
            "CovGauss-mu" => PerturbationKind::CovGauss { with_mean: true },
            "RandomRot" => PerturbationKind::RandomRot,
            _ => {
                let strength = s
                    .strip_prefix("CovNoise-")
                    .and_then(|r| r.strip_suffix('x'))
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown perturbation {s:?}")))?;
                PerturbationKind::CovNoise { strength }
            }
        };
        Ok(kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if let PerturbationKind::CovNoise { strength } = self.kind {
            if !(strength > 0.0) {
                return Err(Error::Config(format!("noise strength must be positive, got {strength}")));
            }
        }
        Ok(())
    }

    /// Provenance tag: kind (with strength) followed by the seed.
    pub fn tag(&self) -> GeneratorTag {
        GeneratorTag::Perturbed(format!("{};seed={}", self.kind, self.seed))
    }
}

/// The variants compared in the perturbation table.
pub fn table_variants() -> Vec<PerturbationKind> {
    vec![
        PerturbationKind::CrossTask,
        PerturbationKind::CovNoise { strength: 0.5 },
        PerturbationKind::CovNoise { strength: 1.0 },
        PerturbationKind::WhiteNoise,
        PerturbationKind::CovGauss { with_mean: false },
        PerturbationKind::CovGauss { with_mean: true },
        PerturbationKind::RandomRot,
    ]
}

fn gaussian_rows(rng: &mut ChaCha8Rng, l: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l, d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// RandomRot transform H' = μ̂ + (H − μ̂) Σ̂^{-1/2} Q Σ̂^{1/2} for a given Q.
pub fn rotate_with(h: &DMatrix<f64>, m: &MessageMoments, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut centered = h.clone();
    for mut row in centered.row_iter_mut() {
        row -= m.mean.transpose();
    }
    let mut out = centered * m.inv_sqrt() * q * m.sqrt();
    for mut row in out.row_iter_mut() {
        row += m.mean.transpose();
    }
    out
}

/// Returns a new message; `msg` is untouched. `pool` holds other messages
/// from the same batch and is used only by CrossTask, which skips entries
/// from the same task.
pub fn apply_perturbation(msg: &LatentMessage, spec: &PerturbationSpec, pool: &[&LatentMessage]) -> Result<LatentMessage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values = match spec.kind {
        PerturbationKind::CrossTask => {
            let others: Vec<&&LatentMessage> = pool.iter().filter(|m| m.source_task_id != msg.source_task_id).collect();
            if others.is_empty() {
                return Err(Error::Config("cross-task swap needs a message from another task".into()));
            }
            others[rng.random_range(0..others.len())].values.clone()
        }
        PerturbationKind::WhiteNoise => {
            let noise = gaussian_rows(&mut rng, msg.len(), msg.dim());
            to_tensor(&(to_matrix(&msg.values) + noise))
        }
        PerturbationKind::CovNoise { strength } => {
            let m = estimate_moments(msg)?;
            let eps = gaussian_rows(&mut rng, msg.len(), msg.dim()) * m.sqrt();
            to_tensor(&(to_matrix(&msg.values) + eps * strength))
        }
        PerturbationKind::CovGauss { with_mean } => {
            let m = estimate_moments(msg)?;
            let mut out = gaussian_rows(&mut rng, msg.len(), msg.dim()) * m.sqrt();
            if with_mean {
                for mut row in out.row_iter_mut() {
                    row += m.mean.transpose();
                }
            }
            to_tensor(&out)
        }
        PerturbationKind::RandomRot => {
            let m = estimate_moments(msg)?;
            let q = haar_orthogonal(msg.dim(), rng.random());
            to_tensor(&rotate_with(&to_matrix(&msg.values), &m, &q))
        }
    };
    Ok(LatentMessage {
        values,
        source_task_id: msg.source_task_id.clone(),
        plan_tokens: msg.plan_tokens.clone(),
        generator_tag: spec.tag(),
    })
}
