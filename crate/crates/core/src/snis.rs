//! Self-normalized importance sampling over clean patches.
//!
//! A noisy patch `y` is matched against clean candidate patches `z_j` with
//! log-weights `-||y - z_j||^2 / (2 sigma^2)`. Weights below a hard threshold
//! are dropped (diversity control), the survivors are softmax-normalized with
//! max-subtraction, and the estimate is their weighted average: the empirical
//! posterior mean of the clean patch under the sampled prior.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::PreparedGaussian;
use crate::error::{CoreError, Result};
use crate::prior::ClusterModel;

/// Additive white Gaussian noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(CoreError::invalid_parameter("sigma", "must be finite and > 0"));
        }
        Ok(NoiseModel { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// What a patch estimate covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMode {
    /// Estimate every pixel of the patch.
    FullPatch,
    /// Estimate only the central pixel.
    CentralPixel,
}

impl std::str::FromStr for EstimateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full-patch" => Ok(EstimateMode::FullPatch),
            "central-pixel" => Ok(EstimateMode::CentralPixel),
            other => Err(format!(
                "unknown mode {other:?}, expected \"full-patch\" or \"central-pixel\""
            )),
        }
    }
}

impl std::fmt::Display for EstimateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimateMode::FullPatch => "full-patch",
            EstimateMode::CentralPixel => "central-pixel",
        })
    }
}

/// Index of the central pixel of a square patch stored row-major.
pub fn central_index(patch_dim: usize) -> Result<usize> {
    let side = patch_dim.isqrt();
    if side == 0 || side * side != patch_dim {
        return Err(CoreError::invalid_parameter(
            "patch_dim",
            format!("{patch_dim} is not a positive perfect square"),
        ));
    }
    Ok((side / 2) * side + side / 2)
}

/// Raw log-weights with threshold bookkeeping.
#[derive(Debug, Clone)]
pub struct WeightSet {
    log_weights: Vec<f64>,
    kept: Vec<bool>,
    ess: f64,
    fallback: bool,
}

impl WeightSet {
    /// Raw (unshifted) log-weights.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// Effective sample size `1 / sum(w_hat^2)` over the kept, normalized
    /// weights; between 1 and the kept count.
    pub fn ess(&self) -> f64 {
        self.ess
    }

    /// Whether everything fell below the threshold and only the best
    /// candidate was retained.
    pub fn fallback_fired(&self) -> bool {
        self.fallback
    }

    /// Softmax weights over the kept candidates (zero where dropped),
    /// computed with max-subtraction so the scale of the inputs cannot
    /// underflow.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self
            .log_weights
            .iter()
            .zip(&self.kept)
            .filter(|(_, &k)| k)
            .map(|(&lw, _)| lw)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; self.log_weights.len()];
        let mut total = 0.0;
        for (o, (&lw, &k)) in out.iter_mut().zip(self.log_weights.iter().zip(&self.kept)) {
            if k {
                *o = (lw - max).exp();
                total += *o;
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        out
    }
}

/// `-||y - z||^2 / (2 sigma^2)`, the Gaussian likelihood log-weight up to a
/// constant.
pub fn log_weight(y: &[f64], z: &[f64], noise: &NoiseModel) -> Result<f64> {
    if y.len() != z.len() {
        return Err(CoreError::DimensionMismatch {
            expected: y.len(),
            got: z.len(),
        });
    }
    let d2: f64 = y
        .iter()
        .zip(z.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(-d2 / (2.0 * noise.variance()))
}

/// Applies the hard threshold to raw log-weights: a candidate survives iff
/// its log-weight is at least `log_tau` (kept on equality). If nothing
/// survives, the single best candidate is kept and the fallback flag set.
pub fn threshold_weights(log_weights: &[f64], log_tau: f64) -> Result<WeightSet> {
    if log_weights.is_empty() {
        return Err(CoreError::EmptyInput("log_weights"));
    }
    if log_weights.iter().any(|v| v.is_nan()) {
        return Err(CoreError::NonFinite("log_weights"));
    }
    if log_tau.is_nan() {
        return Err(CoreError::invalid_parameter("log_tau", "must not be NaN"));
    }
    let mut kept: Vec<bool> = log_weights.iter().map(|&lw| lw >= log_tau).collect();
    let fallback = !kept.iter().any(|&k| k);
    if fallback {
        let best = log_weights
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.partial_cmp(b).expect("no NaN here").then(j.cmp(i)))
            .map(|(i, _)| i)
            .expect("non-empty");
        kept[best] = true;
    }
    let mut ws = WeightSet {
        log_weights: log_weights.to_vec(),
        kept,
        ess: 0.0,
        fallback,
    };
    let sum_sq: f64 = ws.normalized().iter().map(|w| w * w).sum();
    ws.ess = 1.0 / sum_sq;
    Ok(ws)
}

/// A patch estimate with its weight diagnostics.
#[derive(Debug, Clone)]
pub struct SnisEstimate {
    /// Full patch (row-major) or a single central-pixel value.
    pub values: Vec<f64>,
    pub weights: WeightSet,
}

/// Importance-sampling estimate of the clean patch behind `y` from clean
/// candidate rows.
pub fn snis_estimate(
    y: &[f64],
    samples: ArrayView2<f64>,
    noise: &NoiseModel,
    log_tau: f64,
    mode: EstimateMode,
) -> Result<SnisEstimate> {
    let (n, p) = samples.dim();
    if n == 0 {
        return Err(CoreError::EmptyInput("samples"));
    }
    if p != y.len() {
        return Err(CoreError::DimensionMismatch {
            expected: y.len(),
            got: p,
        });
    }
    let mut lws = Vec::with_capacity(n);
    for row in samples.rows() {
        lws.push(log_weight(y, row.to_slice().expect("standard layout"), noise)?);
    }
    let weights = threshold_weights(&lws, log_tau)?;
    let norm = weights.normalized();

    let values = match mode {
        EstimateMode::FullPatch => {
            let mut out = vec![0.0; p];
            for (row, &w) in samples.rows().into_iter().zip(norm.iter()) {
                if w > 0.0 {
                    for (o, z) in out.iter_mut().zip(row.iter()) {
                        *o += w * z;
                    }
                }
            }
            out
        }
        EstimateMode::CentralPixel => {
            let c = central_index(p)?;
            let mut v = 0.0;
            for (row, &w) in samples.rows().into_iter().zip(norm.iter()) {
                if w > 0.0 {
                    v += w * row[c];
                }
            }
            vec![v]
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("snis estimate"));
    }
    Ok(SnisEstimate { values, weights })
}

/// Noisy-patch to cluster assignment under the Gaussian approximations with
/// the noise variance added as a ridge.
#[derive(Debug, Clone)]
pub struct ClusterAssigner {
    gaussians: Vec<PreparedGaussian>,
}

impl ClusterAssigner {
    pub fn new(model: &ClusterModel, noise: &NoiseModel) -> Result<Self> {
        let gaussians = model
            .clusters()
            .iter()
            .map(|c| c.gauss().prepared(noise.variance()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterAssigner { gaussians })
    }

    /// Most likely cluster for `y`; ties go to the lowest index.
    pub fn assign(&self, y: &[f64]) -> Result<usize> {
        let mut best = 0usize;
        let mut best_ll = f64::NEG_INFINITY;
        for (k, g) in self.gaussians.iter().enumerate() {
            let ll = g.log_density(y)?;
            if ll > best_ll {
                best_ll = ll;
                best = k;
            }
        }
        Ok(best)
    }
}

/// One-shot cluster assignment; prefer [`ClusterAssigner`] in loops.
pub fn assign_patch(y: &[f64], model: &ClusterModel, noise: &NoiseModel) -> Result<usize> {
    ClusterAssigner::new(model, noise)?.assign(y)
}

/// Draws `n` distinct member slots (indices into a cluster's member list)
/// without replacement; all slots when `n` covers the whole cluster.
pub fn draw_sample_indices(member_count: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(CoreError::invalid_parameter("n_samples", "must be >= 1"));
    }
    if member_count == 0 {
        return Err(CoreError::EmptyInput("members"));
    }
    if n >= member_count {
        return Ok((0..member_count).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, member_count, n).into_vec())
}

/// Draws `n` clean patches without replacement from one cluster's members.
pub fn draw_samples(
    model: &ClusterModel,
    cluster: usize,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let c = model
        .clusters()
        .get(cluster)
        .ok_or(CoreError::ClusterOutOfRange {
            index: cluster,
            clusters: model.num_clusters(),
        })?;
    let slots = draw_sample_indices(c.members().len(), n, seed)?;
    let global: Vec<usize> = slots.iter().map(|&s| c.members()[s]).collect();
    Ok(model.patch_store().select(Axis(0), &global))
}
