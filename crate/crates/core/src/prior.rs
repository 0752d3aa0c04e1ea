//! Cluster-of-patches prior learning.
//!
//! Clean patches are grouped by k-means, then refined by hard maximum-
//! likelihood reassignment: alternate (1) assign every patch to the cluster
//! whose generalized Gaussian gives it the highest log-density and (2) refit
//! each cluster's scatter by fixed point, until assignments settle. Each
//! cluster also carries a Gaussian fit of its members for noisy-patch
//! assignment at denoising time.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::{fit_gg_fixed_point, FitOptions, GaussianParams, GgParams};
use crate::error::{CoreError, Result};
use crate::model_io::crc64;
use crate::seed;

use nalgebra::{DMatrix, DVector};

/// One mixture component: heavy-tailed fit, Gaussian approximation, and the
/// member patches it was fit from.
#[derive(Debug, Clone)]
pub struct Cluster {
    gg: GgParams,
    gauss: GaussianParams,
    members: Vec<usize>,
}

impl Cluster {
    pub fn new(gg: GgParams, gauss: GaussianParams, mut members: Vec<usize>) -> Result<Self> {
        if gg.dim() != gauss.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: gg.dim(),
                got: gauss.dim(),
            });
        }
        members.sort_unstable();
        Ok(Cluster { gg, gauss, members })
    }

    pub fn gg(&self) -> &GgParams {
        &self.gg
    }

    pub fn gauss(&self) -> &GaussianParams {
        &self.gauss
    }

    /// Global patch-store indices, ascending.
    pub fn members(&self) -> &[usize] {
        &self.members
    }
}

/// Bookkeeping recorded while learning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    /// CRC-64 of the training patch matrix bytes.
    pub dataset_hash: u64,
    /// Assignment rounds performed.
    pub outer_iterations: u32,
    /// Starving clusters refilled across all rounds.
    pub reseed_events: u32,
    /// Unix seconds; the learner leaves this at 0, callers may stamp it.
    pub created_unix: u64,
    /// Total best-cluster log-likelihood at each assignment round.
    pub ll_trace: Vec<f64>,
}

/// A learned patch prior: clusters plus the clean patches they index.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    clusters: Vec<Cluster>,
    patch_store: Array2<f64>,
    patch_side: usize,
    beta: f64,
    meta: TrainingMeta,
}

impl ClusterModel {
    /// Validates dimensions, the member partition, and minimum cluster sizes.
    pub fn new(
        clusters: Vec<Cluster>,
        patch_store: Array2<f64>,
        patch_side: usize,
        beta: f64,
        meta: TrainingMeta,
    ) -> Result<Self> {
        let (n, p) = patch_store.dim();
        if clusters.is_empty() {
            return Err(CoreError::EmptyInput("clusters"));
        }
        if patch_side * patch_side != p {
            return Err(CoreError::invalid_parameter(
                "patch_side",
                format!("side {patch_side} does not square to patch length {p}"),
            ));
        }
        let mut seen = vec![false; n];
        for cluster in &clusters {
            if cluster.gg.dim() != p {
                return Err(CoreError::DimensionMismatch {
                    expected: p,
                    got: cluster.gg.dim(),
                });
            }
            if cluster.members.len() < p + 1 {
                return Err(CoreError::InsufficientData {
                    needed: p + 1,
                    got: cluster.members.len(),
                });
            }
            for &idx in &cluster.members {
                if idx >= n || seen[idx] {
                    return Err(CoreError::invalid_parameter(
                        "members",
                        format!("index {idx} out of range or repeated"),
                    ));
                }
                seen[idx] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(CoreError::invalid_parameter(
                "members",
                "cluster members do not cover every patch",
            ));
        }
        Ok(ClusterModel {
            clusters,
            patch_store,
            patch_side,
            beta,
            meta,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn patch_store(&self) -> ArrayView2<'_, f64> {
        self.patch_store.view()
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn set_created_unix(&mut self, secs: u64) {
        self.meta.created_unix = secs;
    }

    /// Copies one cluster's member patches into a row matrix.
    pub fn member_patches(&self, cluster: usize) -> Result<Array2<f64>> {
        let c = self
            .clusters
            .get(cluster)
            .ok_or(CoreError::ClusterOutOfRange {
                index: cluster,
                clusters: self.clusters.len(),
            })?;
        Ok(self.patch_store.select(Axis(0), &c.members))
    }
}

/// Labels produced by k-means.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Lloyd's k-means with k-means++ seeding, deterministic for a given seed.
///
/// Distance ties go to the lowest cluster index. A cluster left empty after
/// an update is reseeded on the farthest member of the largest cluster.
pub fn init_kmeans(
    patches: ArrayView2<f64>,
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansResult> {
    let (n, p) = patches.dim();
    if n == 0 || p == 0 {
        return Err(CoreError::EmptyInput("patches"));
    }
    if m == 0 {
        return Err(CoreError::invalid_parameter("m", "must be >= 1"));
    }
    if n < m {
        return Err(CoreError::InsufficientData { needed: m, got: n });
    }
    if patches.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("patches"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| patches.row(i).to_slice().expect("standard layout");

    // k-means++: first centroid uniform, then proportional to squared
    // distance from the nearest chosen centroid.
    let mut centroids = Array2::<f64>::zeros((m, p));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&patches.row(first));
    let mut nearest_sq = vec![f64::INFINITY; n];
    for k in 1..m {
        let prev = centroids.row(k - 1).to_owned();
        let prev = prev.as_slice().expect("standard layout");
        for (i, d) in nearest_sq.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), prev));
        }
        let total: f64 = nearest_sq.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in nearest_sq.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(k).assign(&patches.row(pick));
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        // Assignment; ties to the lowest cluster index.
        let new_labels: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = row(i);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for k in 0..m {
                    let d = sq_dist(x, centroids.row(k).to_slice().expect("standard layout"));
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best
            })
            .collect();
        let changed = new_labels != labels;
        labels = new_labels;
        iterations += 1;
        if !changed && iterations > 1 {
            converged = true;
            break;
        }

        // Update step.
        let mut counts = vec![0usize; m];
        centroids.fill(0.0);
        for (i, &k) in labels.iter().enumerate() {
            counts[k] += 1;
            let mut c = centroids.row_mut(k);
            for (cv, xv) in c.iter_mut().zip(row(i).iter()) {
                *cv += xv;
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                let mut c = centroids.row_mut(k);
                c.mapv_inplace(|v| v / counts[k] as f64);
            }
        }
        // Reseed empty clusters on the farthest member of the largest one.
        for k in 0..m {
            if counts[k] == 0 {
                let largest = (0..m).max_by_key(|&j| counts[j]).expect("m >= 1");
                let centroid = centroids.row(largest).to_owned();
                let centroid = centroid.as_slice().expect("standard layout");
                let farthest = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == largest)
                    .max_by(|(i, _), (j, _)| {
                        sq_dist(row(*i), centroid)
                            .partial_cmp(&sq_dist(row(*j), centroid))
                            .expect("finite distances")
                            .then(j.cmp(i))
                    })
                    .map(|(i, _)| i)
                    .expect("largest cluster is non-empty");
                centroids.row_mut(k).assign(&patches.row(farthest));
            }
        }
    }

    Ok(KmeansResult {
        labels,
        iterations,
        converged,
    })
}

/// Options for [`learn_prior`].
#[derive(Debug, Clone)]
pub struct LearnOptions {
    /// Maximum assignment rounds.
    pub max_outer_iters: usize,
    /// Stop once fewer than this fraction of patches change cluster.
    pub stop_frac: f64,
    /// Lloyd iteration cap for the k-means initialization.
    pub kmeans_max_iters: usize,
    /// Fixed-point options for every scatter fit.
    pub fit: FitOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions {
            max_outer_iters: 30,
            stop_frac: 0.001,
            kmeans_max_iters: 100,
            fit: FitOptions::default(),
        }
    }
}

fn members_from_labels(labels: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); m];
    for (i, &k) in labels.iter().enumerate() {
        members[k].push(i);
    }
    members
}

fn fit_all_clusters(
    patches: &Array2<f64>,
    members: &[Vec<usize>],
    beta: f64,
    fit: &FitOptions,
) -> Result<Vec<GgParams>> {
    members
        .par_iter()
        .map(|idx| {
            let rows = patches.select(Axis(0), idx);
            Ok(fit_gg_fixed_point(rows.view(), beta, fit)?.params)
        })
        .collect()
}

/// Moves members into starving clusters (below `p + 1`) from the largest
/// clusters, worst-fitting first under the donor's own density; `score`
/// gives the fit of one member under a donor cluster.
fn repair_starvation(
    members: &mut [Vec<usize>],
    min_size: usize,
    mut score: impl FnMut(usize, usize) -> f64,
) -> Result<u32> {
    let mut events = 0;
    loop {
        let Some(starving) = (0..members.len()).find(|&k| members[k].len() < min_size) else {
            return Ok(events);
        };
        events += 1;
        while members[starving].len() < min_size {
            let donor = (0..members.len())
                .filter(|&k| members[k].len() > min_size)
                .max_by_key(|&k| (members[k].len(), usize::MAX - k))
                .ok_or(CoreError::InsufficientData {
                    needed: min_size * members.len(),
                    got: members.iter().map(Vec::len).sum(),
                })?;
            let take = (min_size - members[starving].len()).min(members[donor].len() - min_size);
            // Worst-fitting members of the donor, lowest score first.
            let mut scored: Vec<(f64, usize)> = members[donor]
                .iter()
                .map(|&i| (score(donor, i), i))
                .collect();
            scored.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            let moved: Vec<usize> = scored[..take].iter().map(|&(_, i)| i).collect();
            members[donor].retain(|i| !moved.contains(i));
            members[starving].extend(moved);
            members[starving].sort_unstable();
        }
    }
}

/// Learns a cluster-of-patches prior from clean patches.
///
/// `patches` is the `(N, patch_side^2)` training matrix; it is retained in
/// the model as the sampling store. Requires `N >= m * (patch_dim + 1)`.
pub fn learn_prior(
    patches: Array2<f64>,
    patch_side: usize,
    m: usize,
    beta: f64,
    rng_seed: u64,
    opts: &LearnOptions,
) -> Result<ClusterModel> {
    let (n, p) = patches.dim();
    if patch_side * patch_side != p {
        return Err(CoreError::invalid_parameter(
            "patch_side",
            format!("side {patch_side} does not square to patch length {p}"),
        ));
    }
    if m == 0 {
        return Err(CoreError::invalid_parameter("m", "must be >= 1"));
    }
    if n < m * (p + 1) {
        return Err(CoreError::InsufficientData {
            needed: m * (p + 1),
            got: n,
        });
    }
    if !(0.0..=f64::INFINITY).contains(&opts.stop_frac) {
        return Err(CoreError::invalid_parameter("stop_frac", "must be >= 0"));
    }
    if opts.max_outer_iters == 0 {
        return Err(CoreError::invalid_parameter("max_outer_iters", "must be >= 1"));
    }

    let min_size = p + 1;
    let kmeans = init_kmeans(
        patches.view(),
        m,
        seed::mix(rng_seed, 0x6b6d_6561_6e73),
        opts.kmeans_max_iters,
    )?;
    let mut members = members_from_labels(&kmeans.labels, m);

    // Initial starvation repair has no density fits yet; use Euclidean
    // distance to the donor centroid as the fit score.
    let mut reseed_events = 0;
    {
        let centroid_of: Vec<Vec<f64>> = members
            .iter()
            .map(|idx| {
                let mut c = vec![0.0; p];
                for &i in idx {
                    for (cv, xv) in c.iter_mut().zip(patches.row(i).iter()) {
                        *cv += xv;
                    }
                }
                let len = idx.len().max(1) as f64;
                c.iter_mut().for_each(|v| *v /= len);
                c
            })
            .collect();
        reseed_events += repair_starvation(&mut members, min_size, |donor, i| {
            -sq_dist(
                patches.row(i).to_slice().expect("standard layout"),
                &centroid_of[donor],
            )
        })?;
    }

    let mut ggs = fit_all_clusters(&patches, &members, beta, &opts.fit)?;
    let mut labels: Vec<usize> = {
        let mut l = vec![0usize; n];
        for (k, idx) in members.iter().enumerate() {
            for &i in idx {
                l[i] = k;
            }
        }
        l
    };

    let mut ll_trace = Vec::new();
    let mut outer_iterations = 0u32;
    loop {
        // Assignment: argmax log-density, ties to the lowest cluster index.
        let per_patch: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = patches.row(i).to_slice().expect("standard layout");
                let mut best = 0usize;
                let mut best_ll = f64::NEG_INFINITY;
                for (k, gg) in ggs.iter().enumerate() {
                    let ll = gg.log_density(x).expect("dimensions match by construction");
                    if ll > best_ll {
                        best_ll = ll;
                        best = k;
                    }
                }
                (best, best_ll)
            })
            .collect();

        let changed = per_patch
            .iter()
            .zip(labels.iter())
            .filter(|((new, _), old)| new != *old)
            .count();
        let total_ll: f64 = per_patch.iter().map(|&(_, ll)| ll).sum();
        ll_trace.push(total_ll);
        for (l, &(k, _)) in labels.iter_mut().zip(per_patch.iter()) {
            *l = k;
        }
        members = members_from_labels(&labels, m);
        reseed_events += repair_starvation(&mut members, min_size, |donor, i| {
            ggs[donor]
                .log_density(patches.row(i).to_slice().expect("standard layout"))
                .expect("dimensions match by construction")
        })?;
        outer_iterations += 1;

        let changed_frac = changed as f64 / n as f64;
        if changed_frac < opts.stop_frac || outer_iterations as usize >= opts.max_outer_iters {
            break;
        }
        ggs = fit_all_clusters(&patches, &members, beta, &opts.fit)?;
    }

    // Gaussian approximations from the final members: sample mean and
    // maximum-likelihood covariance.
    let gausses: Vec<GaussianParams> = members
        .par_iter()
        .map(|idx| {
            let len = idx.len() as f64;
            let mut mean = DVector::<f64>::zeros(p);
            for &i in idx {
                for (mv, xv) in mean.iter_mut().zip(patches.row(i).iter()) {
                    *mv += xv;
                }
            }
            mean /= len;
            let mut cov = DMatrix::<f64>::zeros(p, p);
            let mut d = DVector::<f64>::zeros(p);
            for &i in idx {
                for (dv, (xv, mv)) in d.iter_mut().zip(patches.row(i).iter().zip(mean.iter())) {
                    *dv = xv - mv;
                }
                cov.ger(1.0 / len, &d, &d, 1.0);
            }
            GaussianParams::new(mean, cov)
        })
        .collect::<Result<_>>()?;

    let dataset_hash = {
        let mut bytes = Vec::with_capacity(n * p * 8);
        for v in patches.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crc64(&bytes)
    };

    let clusters: Vec<Cluster> = ggs
        .into_iter()
        .zip(gausses)
        .zip(members)
        .map(|((gg, gauss), idx)| Cluster::new(gg, gauss, idx))
        .collect::<Result<_>>()?;

    ClusterModel::new(
        clusters,
        patches,
        patch_side,
        beta,
        TrainingMeta {
            dataset_hash,
            outer_iterations,
            reseed_events,
            created_unix: 0,
            ll_trace,
        },
    )
}
