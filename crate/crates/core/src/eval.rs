//! Fréchet feature distance, retrieval score and the ablation runner.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayD, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editor::{Model, Variant};
use crate::error::{Error, Result};
use crate::routing::{route_records, RouteRecord};
use crate::scenegen::{EditSample, Image};
use crate::training::{train, TrainConfig, TrainOutcome};

/// Added to both covariances before the matrix square root.
pub const COVARIANCE_REGULARIZATION: f64 = 1e-6;
/// Eigenvalues below zero but above this are rounding noise and clamp to 0.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = -1e-8;

/// Feature rows with an id per row. Ids decide which distractors are
/// excluded from a query's pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub rows: Array2<f64>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, rows: Array2<f64>) -> Result<Self> {
        if ids.len() != rows.nrows() {
            return Err(Error::Shape(format!("{} ids for {} feature rows", ids.len(), rows.nrows())));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature set contains non-finite values".into()));
        }
        Ok(FeatureSet { ids, rows })
    }

    /// Rows labelled `0..n`.
    pub fn anonymous(rows: Array2<f64>) -> Result<Self> {
        Self::new((0..rows.nrows()).map(|i| i.to_string()).collect(), rows)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }
}

fn moments(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let mut cov = DMatrix::from_fn(f, f, |i, j| cov[[i, j]]);
    for i in 0..f {
        cov[(i, i)] += COVARIANCE_REGULARIZATION;
    }
    (DVector::from_iterator(f, mean.iter().copied()), cov)
}

fn psd_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&worst) = eig.eigenvalues.iter().find(|&&v| v < NEGATIVE_EIGEN_TOLERANCE) {
        return Err(Error::Numerical(format!("{what} has eigenvalue {worst:.3e}, it is not positive semi-definite")));
    }
    Ok((eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors))
}

/// Squared Fréchet distance between Gaussians fitted to the rows of `a` and `b`.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Shape("each feature set needs at least two rows".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature".into()));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let (vals, vecs) = psd_eigenvalues(cov_a.clone(), "covariance")?;
    let sqrt_a = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    let (product, _) = psd_eigenvalues(&sqrt_a * &cov_b * &sqrt_a, "covariance product")?;
    let trace_sqrt: f64 = product.iter().map(|v| v.sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt)
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let denom = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(&b) / denom
    }
}

/// Indices of the distractors drawn for each query; `pool_size - 1` per
/// query, or every eligible distractor when fewer remain.
pub fn draw_pools(targets: &FeatureSet, distractors: &FeatureSet, pool_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if pool_size == 0 {
        return Err(Error::Config("pool size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets
        .ids
        .iter()
        .enumerate()
        .map(|(q, id)| {
            let eligible: Vec<usize> = (0..distractors.len()).filter(|&j| distractors.ids[j] != *id).collect();
            if eligible.is_empty() && pool_size > 1 {
                return Err(Error::EmptyPool(q));
            }
            let k = (pool_size - 1).min(eligible.len());
            Ok(sample(&mut rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect())
        })
        .collect()
}

/// 1-based rank of each query's target in its pool. The target sits at pool
/// index 0, so it wins similarity ties.
pub fn retrieval_ranks(queries: &FeatureSet, targets: &FeatureSet, distractors: &FeatureSet, pools: &[Vec<usize>]) -> Result<Vec<usize>> {
    if queries.len() != targets.len() || pools.len() != queries.len() {
        return Err(Error::Shape(format!(
            "{} queries, {} targets, {} pools",
            queries.len(),
            targets.len(),
            pools.len()
        )));
    }
    if queries.width() != targets.width() || (!distractors.is_empty() && distractors.width() != queries.width()) {
        return Err(Error::Shape("query, target and distractor widths differ".into()));
    }
    Ok(pools
        .iter()
        .enumerate()
        .map(|(q, pool)| {
            let query = queries.rows.row(q);
            let target = cosine(query, targets.rows.row(q));
            1 + pool
                .iter()
                .filter(|&&j| cosine(query, distractors.rows.row(j)) > target)
                .count()
        })
        .collect())
}

pub fn recall_at(ranks: &[usize], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64
}

/// RS@N for each `n` in `ns`.
pub fn retrieval_score(
    queries: &FeatureSet,
    targets: &FeatureSet,
    distractors: &FeatureSet,
    ns: &[usize],
    pool_size: usize,
    seed: u64,
) -> Result<BTreeMap<usize, f64>> {
    let pools = draw_pools(targets, distractors, pool_size, seed)?;
    let ranks = retrieval_ranks(queries, targets, distractors, &pools)?;
    Ok(ns.iter().map(|&n| (n, recall_at(&ranks, n))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub ns: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_size: 100,
            ns: vec![1, 5],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub n_queries: usize,
    pub rs: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub frechet: f64,
    pub rs: BTreeMap<String, f64>,
    pub per_op: BTreeMap<String, OpReport>,
    pub pool_size: usize,
    pub n_queries: usize,
    pub seed: u64,
    pub covariance_regularization: f64,
    /// Mean routing weights `[layer][block]` per edit operation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alpha_by_op: BTreeMap<String, Vec<Vec<f64>>>,
}

impl EvalReport {
    pub fn rs_at(&self, n: usize) -> Option<f64> {
        self.rs.get(&n.to_string()).copied()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("evaluation report", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

const CHUNK: usize = 16;

/// Encoder features of `images`: flattened `[n, C·h·w]` maps and their
/// spatial averages `[n, C]`.
pub fn image_features(model: &Model<f32>, images: &[&Image]) -> Result<(Array2<f64>, Array2<f64>)> {
    let (c, f) = (model.config.channels, model.config.feature_size());
    let mut flat = Array2::zeros((images.len(), c * f * f));
    let mut pooled = Array2::zeros((images.len(), c));
    for (k, chunk) in images.chunks(CHUNK).enumerate() {
        let phi: ArrayD<f32> = model.encode_images(chunk)?;
        for (b, map) in phi.outer_iter().enumerate() {
            let row = k * CHUNK + b;
            for (dst, &v) in flat.row_mut(row).iter_mut().zip(map.iter()) {
                *dst = v as f64;
            }
            for ch in 0..c {
                pooled[[row, ch]] = map.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum::<f64>() / (f * f) as f64;
            }
        }
    }
    Ok((flat, pooled))
}

/// Runs every edit of `samples` deterministically (no Gumbel noise).
pub fn generate(model: &Model<f32>, samples: &[EditSample]) -> Result<Vec<crate::editor::EditOutput>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let xs: Vec<&Image> = chunk.iter().map(|s| &s.x).collect();
        let texts: Vec<String> = chunk.iter().map(|s| s.instruction.text()).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        out.extend(model.edit_batch(&xs, &refs, None)?);
    }
    Ok(out)
}

/// Real images a query can be confused with: every target, plus each
/// distinct input image once, labelled `<scene input>#x`.
fn distractor_images(samples: &[EditSample]) -> (Vec<String>, Vec<&Image>) {
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut images: Vec<&Image> = samples.iter().map(|s| &s.y).collect();
    let mut seen = HashSet::new();
    for s in samples {
        let key: Vec<u32> = s.x.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            ids.push(format!("{}#x", s.id));
            images.push(&s.x);
        }
    }
    (ids, images)
}

/// Scores already generated images against the targets of `samples`.
pub fn evaluate_images(model: &Model<f32>, generated: &[&Image], samples: &[EditSample], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() || generated.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} generated images for {} samples",
            generated.len(),
            samples.len()
        )));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (gen_flat, gen_pooled) = image_features(model, generated)?;
    let targets: Vec<&Image> = samples.iter().map(|s| &s.y).collect();
    let (real_flat, real_pooled) = image_features(model, &targets)?;
    let (distractor_ids, distractor_imgs) = distractor_images(samples);
    let (distractor_flat, _) = image_features(model, &distractor_imgs)?;

    let frechet = frechet_distance(&gen_pooled, &real_pooled)?;
    let queries = FeatureSet::new(ids.clone(), gen_flat)?;
    let targets = FeatureSet::new(ids, real_flat)?;
    let distractors = FeatureSet::new(distractor_ids, distractor_flat)?;
    let pools = draw_pools(&targets, &distractors, cfg.pool_size, cfg.seed)?;
    let ranks = retrieval_ranks(&queries, &targets, &distractors, &pools)?;
    let rs_map = |ranks: &[usize]| -> BTreeMap<String, f64> {
        cfg.ns.iter().map(|&n| (n.to_string(), recall_at(ranks, n))).collect()
    };

    let mut by_op: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (s, &r) in samples.iter().zip(&ranks) {
        by_op.entry(s.instruction.op().as_str().to_string()).or_default().push(r);
    }
    let per_op = by_op
        .into_iter()
        .map(|(op, r)| {
            (
                op,
                OpReport {
                    n_queries: r.len(),
                    rs: rs_map(&r),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        variant: model.config.variant,
        frechet,
        rs: rs_map(&ranks),
        per_op,
        pool_size: cfg.pool_size,
        n_queries: samples.len(),
        seed: cfg.seed,
        covariance_regularization: COVARIANCE_REGULARIZATION,
        alpha_by_op: BTreeMap::new(),
    })
}

/// Edits every sample and scores the results.
pub fn evaluate(model: &Model<f32>, samples: &[EditSample], cfg: &EvalConfig) -> Result<EvalReport> {
    let outputs = generate(model, samples)?;
    let images: Vec<&Image> = outputs.iter().map(|o| &o.image).collect();
    let mut report = evaluate_images(model, &images, samples, cfg)?;
    let mut sums: BTreeMap<String, (Array2<f64>, usize)> = BTreeMap::new();
    for (s, o) in samples.iter().zip(&outputs) {
        if let Some(route) = &o.route {
            let entry = sums
                .entry(s.instruction.op().as_str().to_string())
                .or_insert_with(|| (Array2::zeros(route.alpha.raw_dim()), 0));
            entry.0 += &route.alpha.mapv(|v| v as f64);
            entry.1 += 1;
        }
    }
    report.alpha_by_op = sums
        .into_iter()
        .map(|(op, (sum, n))| (op, (sum / n as f64).outer_iter().map(|r| r.to_vec()).collect()))
        .collect();
    Ok(report)
}

/// Routing parameters of every sample, one record per (layer, block).
pub fn export_routes(model: &Model<f32>, samples: &[EditSample]) -> Result<Vec<RouteRecord>> {
    if model.config.variant == Variant::NoHow {
        return Err(Error::Config("the no_how variant has no routing to export".into()));
    }
    let outputs = generate(model, samples)?;
    Ok(samples
        .iter()
        .zip(&outputs)
        .flat_map(|(s, o)| route_records(&s.id, s.instruction.op().as_str(), o.route.as_ref().expect("routed variant")))
        .collect())
}

/// Trains `variant` from the shared pretrained autoencoder under `cfg`, then
/// evaluates it on `test`.
pub fn run_ablation(
    variant: Variant,
    train_samples: &[EditSample],
    test_samples: &[EditSample],
    cfg: &TrainConfig,
    pretrained: &Model<f32>,
    eval: &EvalConfig,
    out: Option<&Path>,
) -> Result<(TrainOutcome, EvalReport)> {
    let mut cfg = cfg.clone();
    cfg.model.variant = variant;
    let outcome = train(train_samples, &cfg, pretrained, out)?;
    let report = evaluate(&outcome.model, test_samples, eval)?;
    if let Some(dir) = out {
        report.write(&dir.join("report.json"))?;
    }
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], sd: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((n, mean.len()), |(_, j)| {
            let z: f64 = StandardNormal.sample(rng);
            mean[j] + sd[j] * z
        })
    }

    #[test]
    fn frechet_identical_sets_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal(&mut rng, 40, &[0.0, 1.0, -2.0], &[1.0, 0.5, 2.0]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        // Unit variance (n - 1 denominator) and means 0 and 1.
        let a = array![[-1.0], [1.0], [0.0], [0.0]];
        let scale = (3.0f64 / 2.0).sqrt();
        let a = a * scale;
        let b = &a + 1.0;
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn frechet_commuting_covariances_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = normal(&mut rng, 50_000, &[0.0; 3], &[1.0; 3]);
        let b = normal(&mut rng, 50_000, &[1.0, 0.0, 0.0], &[1.0, 2.0, 1.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 0.05, "{d}");
    }

    #[test]
    fn frechet_rejects_bad_input() {
        let a = Array2::<f64>::zeros((3, 2));
        assert!(matches!(frechet_distance(&a, &Array2::zeros((3, 3))), Err(Error::Shape(_))));
        assert!(matches!(frechet_distance(&a, &Array2::zeros((1, 2))), Err(Error::Shape(_))));
        let mut bad = a.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(frechet_distance(&a, &bad).is_err());
    }

    fn set(rows: Array2<f64>) -> FeatureSet {
        FeatureSet::anonymous(rows).unwrap()
    }

    #[test]
    fn retrieval_constructed_cases() {
        let q = set(array![[1.0, 0.0, 0.0]]);
        let d = set(array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 2.0, 0.0]]);
        let rs = retrieval_score(&q, &q, &d, &[1], 4, 0).unwrap();
        assert_eq!(rs[&1], 1.0);

        let t = set(array![[0.0, 1.0, 0.0]]);
        let d = FeatureSet::new(vec!["a".into(), "b".into()], array![[2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let rs = retrieval_score(&q, &t, &d, &[1, 2, 3], 3, 0).unwrap();
        // The target ties the orthogonal distractor and wins on pool index.
        assert_eq!((rs[&1], rs[&2], rs[&3]), (0.0, 1.0, 1.0));
    }

    #[test]
    fn distractors_sharing_the_target_id_are_excluded() {
        let q = set(array![[1.0, 0.0]]);
        let t = set(array![[0.0, 1.0]]);
        let d = FeatureSet::new(vec!["0".into()], array![[1.0, 0.0]]).unwrap();
        assert!(matches!(retrieval_score(&q, &t, &d, &[1], 5, 0), Err(Error::EmptyPool(0))));
        assert_eq!(retrieval_score(&q, &t, &d, &[1], 1, 0).unwrap()[&1], 1.0);
    }

    /// Independent oracle: score every pool member, sort by descending
    /// similarity with the pool index breaking ties, and find the target.
    fn brute_force_rank(q: &[f64], target: &[f64], pool: &[Vec<f64>]) -> usize {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na * nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        let mut scored: Vec<(usize, f64)> = std::iter::once(target)
            .chain(pool.iter().map(Vec::as_slice))
            .map(|v| cos(q, v))
            .enumerate()
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.iter().position(|&(i, _)| i == 0).unwrap() + 1
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100;
        let mut draw = |rows: usize| Array2::from_shape_fn((rows, 6), |_| (rng.random_range(-2i32..=2)) as f64);
        let queries = set(draw(n));
        let targets = set(draw(n));
        let distractors = FeatureSet::anonymous(draw(300)).unwrap();
        let pools = draw_pools(&targets, &distractors, 30, 9).unwrap();
        let ranks = retrieval_ranks(&queries, &targets, &distractors, &pools).unwrap();
        for q in 0..n {
            let pool: Vec<Vec<f64>> = pools[q].iter().map(|&j| distractors.rows.row(j).to_vec()).collect();
            let oracle = brute_force_rank(&queries.rows.row(q).to_vec(), &targets.rows.row(q).to_vec(), &pool);
            assert_eq!(ranks[q], oracle, "query {q}");
            assert!(!pools[q].iter().any(|&j| distractors.ids[j] == targets.ids[q]));
        }
        assert_eq!(recall_at(&ranks, 30), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = normal(&mut rng, 12, &[0.0; 4], &[1.0; 4]);
            let b = normal(&mut rng, 9, &[0.5; 4], &[2.0, 1.0, 0.5, 1.0]);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-8);
            proptest::prop_assert!(ab >= -1e-8);
        }

        #[test]
        fn retrieval_ignores_positive_rescaling(seed in 0u64..100, factor in 0.01f64..100.0, row in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |rows: usize| Array2::from_shape_fn((rows, 5), |_| rng.random_range(-1.0..1.0));
            let (q, t, d) = (set(draw(20)), set(draw(20)), set(draw(60)));
            let base = retrieval_score(&q, &t, &d, &[1, 3, 10], 10, 3).unwrap();
            let mut scaled = q.clone();
            scaled.rows.row_mut(row).mapv_inplace(|v| v * factor);
            let rs = retrieval_score(&scaled, &t, &d, &[1, 3, 10], 10, 3).unwrap();
            proptest::prop_assert_eq!(&base, &rs);
            proptest::prop_assert!(base[&1] <= base[&3] && base[&3] <= base[&10]);
        }
    }
}
