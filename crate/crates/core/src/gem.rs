//! Bipartite k-nearest-neighbor geometric entropy minimization.
//!
//! Each class is split into candidate and reference points. A point's
//! score `d_n` is its k-th nearest-neighbor distance to the reference
//! part of its class. The minimal-entropy set keeps the `round(β̂ n_z)`
//! lowest-scoring points of each class; its score mass bounds the entropy
//! constraint used by the trainer.

use serde::{Deserialize, Serialize};

use crate::dataset::{BipartiteSplit, Dataset, Label};
use crate::error::{Error, Result};

/// How per-sample distances are scaled before entering the entropy
/// constraint. The same divisor is applied to `γ̂_z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyNorm {
    /// Divide by the size of the sample's class.
    #[default]
    ClassSize,
    /// Divide by the training-set size.
    Training,
    /// No scaling.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemConfig {
    /// Neighbor order.
    pub k: usize,
    /// Target coverage: fraction of each class kept in the ME set.
    pub beta_hat: f64,
    /// Slack added to the entropy bound; `None` uses 1e-3 of the bound.
    pub epsilon: Option<f64>,
    pub norm: EntropyNorm,
}

impl Default for GemConfig {
    fn default() -> Self {
        GemConfig {
            k: 5,
            beta_hat: 0.8,
            epsilon: None,
            norm: EntropyNorm::ClassSize,
        }
    }
}

impl GemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        if !(self.beta_hat > 0.0 && self.beta_hat < 1.0) {
            return Err(Error::config("beta_hat must lie in (0, 1)"));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::config("epsilon must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Nominal,
    Anomalous,
}

impl Verdict {
    pub fn is_anomalous(self) -> bool {
        self == Verdict::Anomalous
    }
}

#[inline]
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn kth_smallest(mut d: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *kth
}

/// k-th smallest Euclidean distance from `query` to `reference`.
pub fn knn_distance<P: AsRef<[f64]>>(query: &[f64], reference: &[P], k: usize) -> Result<f64> {
    if k == 0 || k > reference.len() {
        return Err(Error::config(format!(
            "k = {k} needs between 1 and {} reference points",
            reference.len()
        )));
    }
    let d: Vec<f64> = reference.iter().map(|r| euclidean(query, r.as_ref())).collect();
    Ok(kth_smallest(d, k))
}

/// k-th nearest-neighbor distance of `points[i]` to the other points, for every `i`.
pub fn loo_distances<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<Vec<f64>> {
    if k == 0 || points.len() < k + 1 {
        return Err(Error::degenerate(format!(
            "leave-one-out k = {k} needs at least {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    Ok((0..points.len())
        .map(|i| {
            let d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| euclidean(points[i].as_ref(), p.as_ref()))
                .collect();
            kth_smallest(d, k)
        })
        .collect())
}

/// The `count` indices with the smallest distances, ties to the lower
/// index, returned in ascending index order. This minimizes the selected
/// distance sum over all subsets of size `count`.
pub fn me_set_select(distances: &[f64], count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > distances.len() {
        return Err(Error::config(format!(
            "ME-set size {count} outside 1..={}",
            distances.len()
        )));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    Ok(order)
}

/// Nearest-rank `p`-quantile: `sorted[ceil(p n) - 1]`, clamped to the sample.
pub fn nearest_rank_quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// `(1 - alpha)`-quantile of the leave-one-out k-NN distances over the
/// whole dataset. `alpha = 0` yields the largest distance.
pub fn loo_threshold(ds: &Dataset, k: usize, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config("alpha must lie in [0, 1)"));
    }
    let d = loo_distances(&ds.points(), k)?;
    Ok(nearest_rank_quantile(&d, 1.0 - alpha))
}

fn verdict(d: f64, threshold: f64) -> Verdict {
    if d > threshold {
        Verdict::Anomalous
    } else {
        Verdict::Nominal
    }
}

/// Shared detection rule: with a known class compare against that class;
/// otherwise the query is anomalous only if it is anomalous for both.
fn detect_against(
    references: &[Vec<Vec<f64>>; 2],
    threshold: &[f64; 2],
    k: usize,
    query: &[f64],
    class: Option<Label>,
) -> Result<Verdict> {
    let classes: &[Label] = match class {
        Some(ref c) => std::slice::from_ref(c),
        None => &Label::BOTH,
    };
    for &z in classes {
        let d = knn_distance(query, &references[z.index()], k)?;
        if verdict(d, threshold[z.index()]) == Verdict::Nominal {
            return Ok(Verdict::Nominal);
        }
    }
    Ok(Verdict::Anomalous)
}

/// Fitted BP-kNN model for one training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemModel {
    pub k: usize,
    /// `d_n` for every training sample.
    pub distances: Vec<f64>,
    /// Membership in the per-class ME-set estimate.
    pub selected: Vec<bool>,
    pub labels: Vec<Label>,
    /// Upper bound on the scaled selected distance mass, per class.
    pub gamma_hat: [f64; 2],
    pub beta_hat: f64,
    pub epsilon: [f64; 2],
    /// Largest selected distance per class.
    pub threshold: [f64; 2],
    pub class_size: [usize; 2],
    pub norm: EntropyNorm,
    /// Reference points per class, kept for scoring new queries.
    pub references: [Vec<Vec<f64>>; 2],
}

impl GemModel {
    /// Builds the selection, bounds and thresholds from precomputed
    /// distances. The references are what later queries are scored against.
    pub fn from_distances(
        labels: Vec<Label>,
        distances: Vec<f64>,
        references: [Vec<Vec<f64>>; 2],
        cfg: &GemConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if labels.len() != distances.len() {
            return Err(Error::Dimension {
                expected: labels.len(),
                got: distances.len(),
            });
        }
        if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::degenerate("distances must be finite and nonnegative"));
        }
        let n_total = labels.len();
        let mut selected = vec![false; n_total];
        let mut gamma_hat = [0.0; 2];
        let mut epsilon = [0.0; 2];
        let mut threshold = [0.0; 2];
        let mut class_size = [0; 2];
        for z in Label::BOTH {
            let idx: Vec<usize> = (0..n_total).filter(|&i| labels[i] == z).collect();
            class_size[z.index()] = idx.len();
            if idx.is_empty() {
                continue;
            }
            let d: Vec<f64> = idx.iter().map(|&i| distances[i]).collect();
            let count = ((cfg.beta_hat * idx.len() as f64).round() as usize).clamp(1, idx.len());
            let chosen = me_set_select(&d, count)?;
            let mut mass = 0.0;
            let mut largest: f64 = 0.0;
            for &c in &chosen {
                selected[idx[c]] = true;
                mass += d[c];
                largest = largest.max(d[c]);
            }
            let divisor = match cfg.norm {
                EntropyNorm::ClassSize => idx.len() as f64,
                EntropyNorm::Training => n_total as f64,
                EntropyNorm::Raw => 1.0,
            };
            let bound = mass / divisor;
            let eps = cfg.epsilon.unwrap_or((1e-3 * bound).max(1e-12));
            gamma_hat[z.index()] = bound + eps;
            epsilon[z.index()] = eps;
            threshold[z.index()] = largest;
        }
        Ok(GemModel {
            k: cfg.k,
            distances,
            selected,
            labels,
            gamma_hat,
            beta_hat: cfg.beta_hat,
            epsilon,
            threshold,
            class_size,
            norm: cfg.norm,
            references,
        })
    }

    /// Divisor applied to `d_n` for samples of class `z`.
    pub fn divisor(&self, z: Label) -> f64 {
        match self.norm {
            EntropyNorm::ClassSize => self.class_size[z.index()] as f64,
            EntropyNorm::Training => self.labels.len() as f64,
            EntropyNorm::Raw => 1.0,
        }
    }

    /// Per-sample weights `h_n` of the entropy constraint.
    pub fn entropy_weights(&self) -> Vec<f64> {
        self.distances
            .iter()
            .zip(&self.labels)
            .map(|(d, &z)| d / self.divisor(z))
            .collect()
    }

    pub fn selected_count(&self, z: Label) -> usize {
        self.selected
            .iter()
            .zip(&self.labels)
            .filter(|&(&s, &l)| s && l == z)
            .count()
    }

    /// Score of a query against the references of class `z`.
    pub fn score(&self, query: &[f64], z: Label) -> Result<f64> {
        knn_distance(query, &self.references[z.index()], self.k)
    }

    pub fn detect(&self, query: &[f64], class: Option<Label>) -> Result<Verdict> {
        detect_against(&self.references, &self.threshold, self.k, query, class)
    }
}

/// Scores every training sample and selects the per-class ME sets.
///
/// Candidates are scored against the reference part of their class;
/// reference points against the other reference points of their class.
pub fn fit_gem(ds: &Dataset, split: &BipartiteSplit, cfg: &GemConfig) -> Result<GemModel> {
    cfg.validate()?;
    let mut distances = vec![f64::NAN; ds.len()];
    let mut references: [Vec<Vec<f64>>; 2] = Default::default();
    for z in Label::BOTH {
        let refs = split.references(z);
        if refs.len() < cfg.k + 1 {
            return Err(Error::degenerate(format!(
                "class {z} has {} reference points; k = {} needs at least {}",
                refs.len(),
                cfg.k,
                cfg.k + 1
            )));
        }
        let ref_points: Vec<Vec<f64>> = refs.iter().map(|&i| ds.features(i).to_vec()).collect();
        for &i in split.candidates(z) {
            distances[i] = knn_distance(ds.features(i), &ref_points, cfg.k)?;
        }
        let loo = loo_distances(&ref_points, cfg.k)?;
        for (&i, d) in refs.iter().zip(loo) {
            distances[i] = d;
        }
        references[z.index()] = ref_points;
    }
    if let Some(i) = distances.iter().position(|d| d.is_nan()) {
        return Err(Error::degenerate(format!("sample {i} is in neither part of the split")));
    }
    GemModel::from_distances(ds.labels(), distances, references, cfg)
}

/// Per-class detector with leave-one-out calibrated thresholds. Every
/// class sample is a reference; the threshold is the `(1 - alpha)`
/// nearest-rank quantile of the class's leave-one-out distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooDetector {
    pub k: usize,
    pub alpha: f64,
    pub threshold: [f64; 2],
    /// Leave-one-out distance of every training sample within its class.
    pub training_distances: Vec<f64>,
    pub references: [Vec<Vec<f64>>; 2],
}

impl LooDetector {
    pub fn fit(ds: &Dataset, k: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::config("alpha must lie in [0, 1)"));
        }
        let mut threshold = [0.0; 2];
        let mut training_distances = vec![0.0; ds.len()];
        let mut references: [Vec<Vec<f64>>; 2] = Default::default();
        for z in Label::BOTH {
            let idx = ds.class_indices(z);
            let pts: Vec<Vec<f64>> = idx.iter().map(|&i| ds.features(i).to_vec()).collect();
            let d = loo_distances(&pts, k)?;
            threshold[z.index()] = nearest_rank_quantile(&d, 1.0 - alpha);
            for (&i, v) in idx.iter().zip(d) {
                training_distances[i] = v;
            }
            references[z.index()] = pts;
        }
        Ok(LooDetector {
            k,
            alpha,
            threshold,
            training_distances,
            references,
        })
    }

    /// Training samples whose leave-one-out distance exceeds their class threshold.
    pub fn training_flags(&self, ds: &Dataset) -> Vec<bool> {
        self.training_distances
            .iter()
            .zip(ds.samples())
            .map(|(&d, s)| d > self.threshold[s.label.index()])
            .collect()
    }

    pub fn detect(&self, query: &[f64], class: Option<Label>) -> Result<Verdict> {
        detect_against(&self.references, &self.threshold, self.k, query, class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{bipartite_split, generate_synthetic, SyntheticConfig};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn knn_on_a_line() {
        assert_eq!(knn_distance(&[0.0], &line(&[1.0, 3.0, 5.0]), 2).unwrap(), 3.0);
        assert_eq!(knn_distance(&[3.0], &line(&[1.0, 3.0, 5.0]), 1).unwrap(), 0.0);
        assert!(knn_distance(&[0.0], &line(&[1.0]), 2).is_err());
    }

    #[test]
    fn knn_matches_full_sort() {
        let mut r = rng::from_seed(31);
        for _ in 0..50 {
            let pts: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
            let q = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let mut all: Vec<f64> = pts.iter().map(|p| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(knn_distance(&q, &pts, 3).unwrap(), all[2]);
        }
    }

    #[test]
    fn me_set_small_cases() {
        let s = me_set_select(&[5.0, 1.0, 3.0], 2).unwrap();
        assert_eq!(s, vec![1, 2]);
        assert_eq!(me_set_select(&[2.0, 1.0, 4.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(me_set_select(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(me_set_select(&[1.0], 0).is_err());
        assert!(me_set_select(&[1.0], 2).is_err());
    }

    fn brute_force_min(d: &[f64], count: usize) -> f64 {
        let n = d.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != count {
                continue;
            }
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| d[i]).sum();
            best = best.min(s);
        }
        best
    }

    proptest! {
        #[test]
        fn me_set_is_optimal(d in proptest::collection::vec(0.0f64..10.0, 1..=12), frac in 0.0f64..1.0) {
            let count = ((frac * d.len().min(6) as f64) as usize).max(1).min(d.len());
            let chosen = me_set_select(&d, count).unwrap();
            prop_assert_eq!(chosen.len(), count);
            let value: f64 = chosen.iter().map(|&i| d[i]).sum();
            prop_assert_eq!(value, brute_force_min(&d, count));
        }

        #[test]
        fn appending_a_far_point_keeps_selection(d in proptest::collection::vec(0.0f64..10.0, 2..20), count in 1usize..10) {
            let count = count.min(d.len());
            let before = me_set_select(&d, count).unwrap();
            let mut extended = d.clone();
            extended.push(11.0);
            prop_assert_eq!(me_set_select(&extended, count).unwrap(), before);
        }
    }

    fn two_clusters(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_per_class: n,
            corruption_rate: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn identical_points_give_symmetric_bound() {
        let mut feats = vec![vec![1.0, 1.0]; 10];
        feats.extend(vec![vec![-1.0, -1.0]; 10]);
        let labels: Vec<Label> = (0..20).map(|i| if i < 10 { Label::Pos } else { Label::Neg }).collect();
        let ds = Dataset::from_parts(feats, labels).unwrap();
        let split = bipartite_split(&ds, 0.5, 0).unwrap();
        let cfg = GemConfig {
            k: 2,
            beta_hat: 0.7,
            epsilon: Some(0.01),
            norm: EntropyNorm::Training,
        };
        let m = fit_gem(&ds, &split, &cfg).unwrap();
        assert!(m.distances.iter().all(|&d| d == 0.0));
        assert_eq!(m.gamma_hat, [0.01, 0.01]);
        assert_eq!(m.selected_count(Label::Pos), 7);
    }

    #[test]
    fn full_selection_limit() {
        let ds = two_clusters(30, 2);
        let split = bipartite_split(&ds, 0.5, 3).unwrap();
        let cfg = GemConfig {
            k: 3,
            beta_hat: 0.999,
            epsilon: Some(1e-300),
            norm: EntropyNorm::Training,
        };
        let m = fit_gem(&ds, &split, &cfg).unwrap();
        for z in Label::BOTH {
            let idx = ds.class_indices(z);
            let mean = idx.iter().map(|&i| m.distances[i]).sum::<f64>() / idx.len() as f64;
            let expected = mean * idx.len() as f64 / ds.len() as f64;
            assert!((m.gamma_hat[z.index()] - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn bound_dominates_selected_mass() {
        let ds = two_clusters(40, 5);
        let split = bipartite_split(&ds, 0.5, 6).unwrap();
        let m = fit_gem(&ds, &split, &GemConfig::default()).unwrap();
        let h = m.entropy_weights();
        for z in Label::BOTH {
            let mass: f64 = (0..ds.len()).filter(|&i| m.labels[i] == z && m.selected[i]).map(|i| h[i]).sum();
            assert!(m.gamma_hat[z.index()] > mass);
            assert_eq!(m.selected_count(z), 32);
        }
        assert_eq!(m, fit_gem(&ds, &split, &GemConfig::default()).unwrap());
    }

    #[test]
    fn too_few_references() {
        let ds = two_clusters(6, 1);
        let split = bipartite_split(&ds, 0.5, 0).unwrap();
        let cfg = GemConfig { k: 5, ..Default::default() };
        assert!(matches!(fit_gem(&ds, &split, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn detect_extremes() {
        let ds = two_clusters(50, 8);
        let split = bipartite_split(&ds, 0.5, 8).unwrap();
        let m = fit_gem(&ds, &split, &GemConfig::default()).unwrap();
        let r = m.references[Label::Pos.index()][0].clone();
        assert_eq!(m.detect(&r, Some(Label::Pos)).unwrap(), Verdict::Nominal);
        assert_eq!(m.detect(&[1e6, 1e6], None).unwrap(), Verdict::Anomalous);
        assert_eq!(m.detect(&[1e6, 1e6], Some(Label::Neg)).unwrap(), Verdict::Anomalous);
    }

    #[test]
    fn ring_anomalies_score_high() {
        let mut good = 0;
        for seed in 0..20 {
            let ds = generate_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
            let split = bipartite_split(&ds, 0.5, seed).unwrap();
            let m = fit_gem(&ds, &split, &GemConfig::default()).unwrap();
            let truth = ds.anomaly_truth().unwrap();
            let mut total = 0;
            let mut above = 0;
            for z in Label::BOTH {
                let mut nominal: Vec<f64> = (0..ds.len()).filter(|&i| ds.label(i) == z && !truth[i]).map(|i| m.distances[i]).collect();
                nominal.sort_by(|a, b| a.total_cmp(b));
                let median = nominal[nominal.len() / 2];
                for i in (0..ds.len()).filter(|&i| ds.label(i) == z && truth[i]) {
                    total += 1;
                    above += usize::from(m.distances[i] > median);
                }
            }
            if above == total {
                good += 1;
            }
        }
        assert!(good >= 19, "{good}/20 seeds separated every ring point");
    }

    #[test]
    fn loo_threshold_cases() {
        let ds = Dataset::from_parts(line(&[0.0, 1.0, 2.0]), vec![Label::Pos; 3]).unwrap();
        for alpha in [0.0, 0.1, 0.5, 0.9] {
            assert_eq!(loo_threshold(&ds, 1, alpha).unwrap(), 1.0);
        }
        assert!(loo_threshold(&ds, 3, 0.1).is_err());

        let mut r = rng::from_seed(4);
        let xs: Vec<f64> = (0..100).map(|_| r.random::<f64>()).collect();
        let ds = Dataset::from_parts(line(&xs), vec![Label::Pos; 100]).unwrap();
        let mut loo = Vec::new();
        for i in 0..100 {
            let mut d: Vec<f64> = (0..100).filter(|&j| j != i).map(|j| (xs[i] - xs[j]).abs()).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            loo.push(d[1]);
        }
        loo.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(loo_threshold(&ds, 2, 0.5).unwrap(), loo[49]);
        assert_eq!(loo_threshold(&ds, 2, 0.0).unwrap(), loo[99]);
    }

    #[test]
    fn nominal_false_alarms_follow_coverage() {
        // flagged fraction <= (1 - beta_hat) + 0.03 on nominal-only data
        let mut flagged = 0;
        let mut total = 0;
        for seed in 0..5 {
            let train = two_clusters(200, 100 + seed);
            let test = two_clusters(500, 200 + seed);
            let split = bipartite_split(&train, 0.5, seed).unwrap();
            let cfg = GemConfig { beta_hat: 0.9, ..Default::default() };
            let m = fit_gem(&train, &split, &cfg).unwrap();
            for s in test.samples() {
                total += 1;
                flagged += usize::from(m.detect(&s.features, Some(s.label)).unwrap().is_anomalous());
            }
        }
        let rate = flagged as f64 / total as f64;
        assert!(rate <= 0.1 + 0.03, "false alarm {rate}");
    }

    #[test]
    fn loo_detector_alpha_zero_flags_nothing() {
        let ds = two_clusters(40, 12);
        let det = LooDetector::fit(&ds, 5, 0.0).unwrap();
        assert!(det.training_flags(&ds).iter().all(|&f| !f));
    }
}
