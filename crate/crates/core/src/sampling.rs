//! Active-learning item selection.
//!
//! Diversity sampling clusters the numeric trajectory encodings with k-means
//! and returns the member closest to each centroid. Uncertainty sampling asks
//! the reward model about every candidate and queries the one it is least sure
//! about, where certainty is `|p(pos) − p(neg)|` at the answer token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_ascii, encode_numeric, Legend};
use crate::env::{Trajectory, TrajectoryPool};
use crate::error::{RewardError, SamplingError};
use crate::llm::LanguageModel;
use crate::reward::{classify, FeedbackRecord, RewardModelContext, Stage};

pub const DEFAULT_EPSILON: f64 = 0.8;
pub const DEFAULT_UNCERTAINTY_SUBSET: usize = 20;
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub max_iter: usize,
    /// Stop when the relative inertia change falls to or below this value.
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step, initial assignment included.
    pub inertia_history: Vec<f64>,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == cluster)
            .map(|(i, _)| i)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding landing on an already-chosen zero-weight point.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // All remaining points coincide with a centre; take any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Nearest-centroid assignment, then reseeds each empty cluster with the point
/// farthest from its current centroid (taken from a cluster with ≥ 2 members).
fn assign(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> (Vec<usize>, f64) {
    let k = centroids.len();
    let mut assignment = Vec::with_capacity(points.len());
    let mut dist = Vec::with_capacity(points.len());
    for p in points {
        let (j, d) = nearest(p, centroids);
        assignment.push(j);
        dist.push(d);
    }
    let mut sizes = vec![0usize; k];
    for a in &assignment {
        sizes[*a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|i| sizes[assignment[*i]] >= 2)
            .max_by(|a, b| dist[*a].total_cmp(&dist[*b]).then(b.cmp(a)))
            .expect("k <= n guarantees a cluster with two members");
        sizes[assignment[donor]] -= 1;
        sizes[empty] = 1;
        assignment[donor] = empty;
        dist[donor] = 0.0;
        centroids[empty] = points[donor].clone();
    }
    (assignment, dist.iter().sum())
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, a) in points.iter().zip(assignment) {
        counts[*a] += 1;
        for (s, v) in sums[*a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *c as f64);
    }
    sums
}

/// Lloyd iterations from a k-means++ start.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, config: KmeansConfig) -> Result<ClusterResult, SamplingError> {
    if k == 0 {
        return Err(SamplingError::ZeroClusters);
    }
    if points.len() < k {
        return Err(SamplingError::TooFewPoints { points: points.len(), k });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(SamplingError::DimensionMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let (mut assignment, mut inertia) = assign(points, &mut centroids);
    let mut history = vec![inertia];
    for _ in 0..config.max_iter {
        let mut next_centroids = means(points, &assignment, k);
        let (next_assignment, next_inertia) = assign(points, &mut next_centroids);
        history.push(next_inertia);
        let unchanged = next_assignment == assignment;
        let rel = if inertia > 0.0 { (inertia - next_inertia).abs() / inertia } else { 0.0 };
        centroids = next_centroids;
        assignment = next_assignment;
        inertia = next_inertia;
        if unchanged || rel <= config.tol {
            break;
        }
    }
    Ok(ClusterResult {
        assignments: assignment,
        centroids,
        inertia,
        inertia_history: history,
    })
}

/// Per cluster, the id closest to its centroid; ties go to the smallest id.
/// Output is ordered by cluster index.
pub fn representatives(ids: &[String], points: &[Vec<f64>], clusters: &ClusterResult) -> Vec<String> {
    (0..clusters.centroids.len())
        .map(|c| {
            clusters
                .members(c)
                .map(|i| (squared_distance(&points[i], &clusters.centroids[c]), &ids[i]))
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
                .map(|(_, id)| id.clone())
                .expect("clusters are non-empty")
        })
        .collect()
}

/// Diversity sampling over arbitrary feature vectors.
pub fn diversity_sample_points(ids: &[String], points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<String>, SamplingError> {
    let clusters = kmeans(points, k, seed, KmeansConfig::default())?;
    Ok(representatives(ids, points, &clusters))
}

pub fn diversity_sample(pool: &TrajectoryPool, k: usize, seed: u64) -> Result<Vec<String>, SamplingError> {
    let ids: Vec<String> = pool.ids().map(str::to_string).collect();
    let points: Vec<Vec<f64>> = pool.trajectories.iter().map(|t| encode_numeric(t).flat).collect();
    diversity_sample_points(&ids, &points, k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    pub value: f64,
    pub pos_prob: f64,
    pub neg_prob: f64,
}

pub fn confidence_from_probs(pos_prob: f64, neg_prob: f64) -> Result<Confidence, SamplingError> {
    for p in [pos_prob, neg_prob] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SamplingError::OutOfRange(p));
        }
    }
    Ok(Confidence {
        value: (pos_prob - neg_prob).abs(),
        pos_prob,
        neg_prob,
    })
}

/// Classifies every candidate and returns the least confident; ties go to the smallest id.
pub fn select_most_uncertain(
    ctx: &RewardModelContext,
    subset: &[&Trajectory],
    llm: &dyn LanguageModel,
) -> Result<(String, Confidence), SamplingError> {
    let mut sorted: Vec<&Trajectory> = subset.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut best: Option<(String, Confidence)> = None;
    for t in sorted {
        let c = classify(ctx, t, llm)
            .map_err(|e| SamplingError::Classification { id: t.id.clone(), source: Box::new(e) })?
            .confidence;
        if best.as_ref().is_none_or(|(_, b)| c.value < b.value) {
            best = Some((t.id.clone(), c));
        }
    }
    best.ok_or(SamplingError::EmptySubset)
}

/// Resumable state of the uncertainty-reduction loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyLoop {
    /// Candidates not yet shown to the user, sorted by id.
    pub candidates: Vec<String>,
    pub epsilon: f64,
    /// `None` runs until the threshold is met or candidates run out.
    pub max_rounds: Option<usize>,
    pub rounds: usize,
}

impl UncertaintyLoop {
    pub fn new(mut candidates: Vec<String>, epsilon: f64, max_rounds: Option<usize>) -> Result<Self, SamplingError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(SamplingError::BadThreshold(epsilon));
        }
        candidates.sort();
        candidates.dedup();
        Ok(Self { candidates, epsilon, max_rounds, rounds: 0 })
    }

    pub fn exhausted(&self) -> bool {
        self.candidates.is_empty() || self.max_rounds.is_some_and(|m| self.rounds >= m) || self.epsilon <= 0.0
    }

    /// The next trajectory to ask about, or `None` once the loop is over.
    pub fn next_query(
        &self,
        ctx: &RewardModelContext,
        pool: &TrajectoryPool,
        llm: &dyn LanguageModel,
    ) -> Result<Option<(String, Confidence)>, SamplingError> {
        if self.exhausted() {
            return Ok(None);
        }
        let subset = self
            .candidates
            .iter()
            .map(|id| pool.get(id).ok_or_else(|| SamplingError::UnknownTrajectory(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let (id, conf) = select_most_uncertain(ctx, &subset, llm)?;
        Ok((conf.value < self.epsilon).then_some((id, conf)))
    }

    pub fn record_answer(&mut self, id: &str) {
        self.candidates.retain(|c| c != id);
        self.rounds += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub rounds: usize,
    pub queried: Vec<String>,
}

/// Runs the loop to completion, appending one uncertainty record per answer.
/// `answer` returns the user's label and explanation for a trajectory.
pub fn uncertainty_loop<F>(
    ctx: &mut RewardModelContext,
    pool: &TrajectoryPool,
    state: &mut UncertaintyLoop,
    llm: &dyn LanguageModel,
    mut answer: F,
) -> Result<LoopOutcome, SamplingError>
where
    F: FnMut(&Trajectory) -> Result<(u8, String), String>,
{
    let mut queried = Vec::new();
    while let Some((id, _)) = state.next_query(ctx, pool, llm)? {
        let traj = pool.get(&id).ok_or_else(|| SamplingError::UnknownTrajectory(id.clone()))?;
        let (label, explanation) =
            answer(traj).map_err(|message| SamplingError::AnswerSource { id: id.clone(), message })?;
        let ascii = encode_ascii(traj, &Legend::default()).map_err(|e| SamplingError::Classification {
            id: id.clone(),
            source: Box::new(RewardError::from(e)),
        })?;
        ctx.feedback.push(FeedbackRecord {
            trajectory_id: id.clone(),
            ascii_text: ascii.text,
            user_label: label,
            user_explanation: explanation,
            stage: Stage::Uncertainty,
        });
        state.record_answer(&id);
        queried.push(id);
    }
    Ok(LoopOutcome { rounds: state.rounds, queried })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![centre[0] + rng.random_range(-1.0..1.0), centre[1] + rng.random_range(-1.0..1.0)]);
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]];
        let r = kmeans(&pts, 1, 0, KmeansConfig::default()).unwrap();
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-12 && (r.centroids[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_point_per_cluster_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert_eq!(kmeans(&pts, 5, 3, KmeansConfig::default()).unwrap().inertia, 0.0);
    }

    #[test]
    fn recovers_blobs_up_to_permutation() {
        let (pts, labels) = blobs(1, 30);
        let r = kmeans(&pts, 3, 7, KmeansConfig::default()).unwrap();
        let mut map = [usize::MAX; 3];
        for (a, l) in r.assignments.iter().zip(&labels) {
            if map[*l] == usize::MAX {
                map[*l] = *a;
            }
            assert_eq!(map[*l], *a);
        }
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = vec![vec![1.0]; 4];
        let r = kmeans(&pts, 3, 0, KmeansConfig::default()).unwrap();
        for c in 0..3 {
            assert!(r.members(c).count() >= 1);
        }
    }

    #[test]
    fn kmeans_errors() {
        assert_eq!(kmeans(&[vec![1.0]], 2, 0, KmeansConfig::default()), Err(SamplingError::TooFewPoints { points: 1, k: 2 }));
        assert_eq!(kmeans(&[vec![1.0]], 0, 0, KmeansConfig::default()), Err(SamplingError::ZeroClusters));
        assert_eq!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, 0, KmeansConfig::default()), Err(SamplingError::DimensionMismatch));
    }

    #[test]
    fn representative_ties_go_to_smallest_id() {
        let ids = vec!["b".to_string(), "a".to_string()];
        let pts = vec![vec![1.0], vec![-1.0]];
        let clusters = ClusterResult {
            assignments: vec![0, 0],
            centroids: vec![vec![0.0]],
            inertia: 2.0,
            inertia_history: vec![2.0],
        };
        assert_eq!(representatives(&ids, &pts, &clusters), vec!["a".to_string()]);
    }

    #[test]
    fn confidence_values() {
        assert_eq!(confidence_from_probs(0.99, 0.01).unwrap().value, 0.98);
        assert_eq!(confidence_from_probs(0.5, 0.5).unwrap().value, 0.0);
        assert_eq!(confidence_from_probs(0.0, 1.0).unwrap().value, 1.0);
        assert_eq!(confidence_from_probs(1.5, 0.0), Err(SamplingError::OutOfRange(1.5)));
    }

    #[test]
    fn loop_threshold_validation() {
        assert_eq!(UncertaintyLoop::new(vec![], 1.5, None), Err(SamplingError::BadThreshold(1.5)));
        let l = UncertaintyLoop::new(vec!["b".into(), "a".into(), "a".into()], 0.0, None).unwrap();
        assert_eq!(l.candidates, vec!["a".to_string(), "b".to_string()]);
        assert!(l.exhausted());
    }
}
