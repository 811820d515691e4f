//! Expert guidance propagation.
//!
//! Demonstrations only cover the states the expert happened to visit. To
//! guide learning anywhere else, the expert policy is estimated at
//! arbitrary query states, either non-parametrically (k nearest
//! demonstration states under Euclidean distance, blended by locally
//! weighted regression with an exponential kernel) or parametrically (a
//! behavior-cloned network). The query key is the concatenation of the
//! observation and the desired goal, so neighbors must match in goal
//! space too.

pub mod kdtree;

pub use kdtree::{scan_knn, squared_distance, KdIndex};

use rand::seq::SliceRandom;

use crate::env::demo::DemoSet;
use crate::error::{Error, Result};
use crate::nn::{adam_step, mlp_forward_batch, AdamState, MlpSpec, ParameterVector};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::Scalar;

/// Demonstration state-action pairs, rows aligned.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    env_name: String,
    state_dim: usize,
    action_dim: usize,
    rows: usize,
    states: Vec<Scalar>,
    actions: Vec<Scalar>,
}

impl DemoDataset {
    pub fn new(
        env_name: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
        states: Vec<Scalar>,
        actions: Vec<Scalar>,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::config("dataset dimensions must be >= 1"));
        }
        if states.is_empty() || states.len() % state_dim != 0 {
            return Err(Error::config(
                "state buffer is empty or not a whole number of rows",
            ));
        }
        let rows = states.len() / state_dim;
        if actions.len() != rows * action_dim {
            return Err(Error::config(format!(
                "actions hold {} rows, states hold {rows}",
                actions.len() / action_dim
            )));
        }
        if actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::config("demo actions must lie in [-1, 1]"));
        }
        Ok(DemoDataset {
            env_name: env_name.into(),
            state_dim,
            action_dim,
            rows,
            states,
            actions,
        })
    }

    /// Flattens a demonstration set into query-keyed rows: each
    /// transition contributes (observation ++ desired goal, action).
    pub fn from_demo_set(demos: &DemoSet) -> Result<Self> {
        let header = &demos.header;
        let state_dim = header.obs_dim + header.goal_dim;
        let mut states = Vec::with_capacity(demos.num_transitions() * state_dim);
        let mut actions = Vec::with_capacity(demos.num_transitions() * header.action_dim);
        for episode in &demos.episodes {
            for t in episode {
                states.extend_from_slice(&t.state.observation);
                states.extend_from_slice(&t.state.desired_goal);
                actions.extend_from_slice(&t.action);
            }
        }
        Self::new(
            header.env.as_str(),
            state_dim,
            header.action_dim,
            states,
            actions,
        )
    }

    pub fn env_name(&self) -> &str {
        &self.env_name
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, row: usize) -> &[Scalar] {
        &self.states[row * self.state_dim..(row + 1) * self.state_dim]
    }

    pub fn action(&self, row: usize) -> &[Scalar] {
        &self.actions[row * self.action_dim..(row + 1) * self.action_dim]
    }

    pub fn states_flat(&self) -> &[Scalar] {
        &self.states
    }

    /// Builds the spatial index over the state rows.
    pub fn build_index(&self) -> Result<KdIndex<Scalar>> {
        KdIndex::build(self.states.clone(), self.state_dim)
    }
}

/// Spec-named k-NN entry point; see [`KdIndex::knn`].
pub fn knn<F: Real>(index: &KdIndex<F>, query: &[F], k: usize) -> Result<Vec<(usize, F)>> {
    index.knn(query, k)
}

/// Normalized exponential-kernel weights for a set of neighbor
/// distances: `w_i = exp(-d_i) / sum_j exp(-d_j)`.
///
/// Computed in shifted form (softmax of `-(d_i - d_min)`), which is
/// algebraically identical and cannot underflow to a zero denominator.
pub fn lwr_weights<F: Real>(distances: &[F]) -> Vec<F> {
    debug_assert!(!distances.is_empty());
    let min = distances
        .iter()
        .copied()
        .fold(F::infinity(), |a, b| a.min(b));
    let raw: Vec<F> = distances.iter().map(|&d| (-(d - min)).exp()).collect();
    let total: F = raw.iter().copied().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Locally weighted regression over neighbors given as
/// (state, action, distance) triples: the weighted mean of the neighbor
/// actions under exponential-kernel weights.
pub fn lwr_estimate<F: Real>(neighbors: &[(&[F], &[F], F)]) -> Result<Vec<F>> {
    if neighbors.is_empty() {
        return Err(Error::usage("lwr_estimate needs at least one neighbor"));
    }
    let action_dim = neighbors[0].1.len();
    let distances: Vec<F> = neighbors.iter().map(|n| n.2).collect();
    let weights = lwr_weights(&distances);
    let mut out = vec![F::zero(); action_dim];
    for ((_, action, _), &w) in neighbors.iter().zip(&weights) {
        debug_assert_eq!(action.len(), action_dim);
        for (o, &a) in out.iter_mut().zip(*action) {
            *o = w.mul_add(a, *o);
        }
    }
    Ok(out)
}

/// How expert actions are estimated away from demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagatorKind {
    NonparametricLwr,
    ParametricBc,
}

/// A fitted (or configured) guidance propagator.
#[derive(Debug, Clone)]
pub struct Propagator {
    kind: PropagatorKind,
    k: usize,
    candidate_pool: Option<usize>,
    bc: Option<(MlpSpec, ParameterVector<Scalar>)>,
}

impl Propagator {
    /// Non-parametric propagation with `k` neighbors; `candidate_pool`
    /// restricts each query batch to a uniform row subsample.
    pub fn lwr(k: usize, candidate_pool: Option<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if let Some(pool) = candidate_pool {
            if pool < k {
                return Err(Error::config(format!(
                    "candidate pool {pool} is smaller than k = {k}"
                )));
            }
        }
        Ok(Propagator {
            kind: PropagatorKind::NonparametricLwr,
            k,
            candidate_pool,
            bc: None,
        })
    }

    pub fn kind(&self) -> PropagatorKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bc_params(&self) -> Option<&(MlpSpec, ParameterVector<Scalar>)> {
        self.bc.as_ref()
    }
}

/// Estimates expert actions for a batch of query states (batch-major,
/// `state_dim` wide). Outputs are clipped to [-1, 1].
pub fn propagate(
    propagator: &Propagator,
    dataset: &DemoDataset,
    index: Option<&KdIndex<Scalar>>,
    queries: &[Scalar],
    rng: &mut Rng,
) -> Result<Vec<Scalar>> {
    let sd = dataset.state_dim();
    if queries.is_empty() || queries.len() % sd != 0 {
        return Err(Error::config(
            "query buffer is empty or not a whole number of rows",
        ));
    }
    let nq = queries.len() / sd;
    match propagator.kind {
        PropagatorKind::ParametricBc => {
            let (spec, params) = propagator
                .bc
                .as_ref()
                .ok_or_else(|| Error::usage("BC propagator has not been fit"))?;
            let (mut out, _) = mlp_forward_batch(spec, params, queries)?;
            for a in &mut out {
                *a = a.clamp(-1.0, 1.0);
            }
            Ok(out)
        }
        PropagatorKind::NonparametricLwr => {
            let k = propagator.k;
            if k > dataset.len() {
                return Err(Error::usage(format!(
                    "k = {k} exceeds dataset size {}",
                    dataset.len()
                )));
            }
            let pool: Option<Vec<usize>> = match propagator.candidate_pool {
                Some(size) => {
                    let size = size.min(dataset.len());
                    let mut rows: Vec<usize> = (0..dataset.len()).collect();
                    rows.shuffle(rng);
                    rows.truncate(size);
                    Some(rows)
                }
                None => None,
            };
            let mut out = Vec::with_capacity(nq * dataset.action_dim());
            for q in 0..nq {
                let query = &queries[q * sd..(q + 1) * sd];
                let hits = match &pool {
                    Some(rows) => scan_knn(dataset.states_flat(), sd, rows, query, k)?,
                    None => {
                        let index = index.ok_or_else(|| {
                            Error::config("non-parametric propagation needs a kd index")
                        })?;
                        index.knn(query, k)?
                    }
                };
                let neighbors: Vec<(&[Scalar], &[Scalar], Scalar)> = hits
                    .iter()
                    .map(|&(row, dist)| (dataset.state(row), dataset.action(row), dist))
                    .collect();
                let action = lwr_estimate(&neighbors)?;
                out.extend(action.into_iter().map(|a| a.clamp(-1.0, 1.0)));
            }
            Ok(out)
        }
    }
}

/// Fits a behavior-cloned propagator by minimizing mean squared error
/// between network outputs and demonstration actions with Adam.
///
/// Returns the frozen propagator and the mean training loss per epoch
/// (empty when `epochs` is zero, in which case the returned parameters
/// are the untouched initialization).
pub fn fit_bc_propagator(
    dataset: &DemoDataset,
    hidden_dims: &[usize],
    epochs: usize,
    batch_size: usize,
    learning_rate: Scalar,
    rng: &mut Rng,
) -> Result<(Propagator, Vec<Scalar>)> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot fit a BC propagator on an empty dataset"));
    }
    let spec = MlpSpec::policy(dataset.state_dim(), dataset.action_dim(), hidden_dims)?;
    let mut params = ParameterVector::<Scalar>::init(&spec, rng);
    let mut adam = AdamState::new(params.len(), learning_rate);
    let batch_size = batch_size.max(1).min(dataset.len());
    let action_dim = dataset.action_dim();

    let mut losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len() * dataset.state_dim());
            let mut targets = Vec::with_capacity(chunk.len() * action_dim);
            for &row in chunk {
                inputs.extend_from_slice(dataset.state(row));
                targets.extend_from_slice(dataset.action(row));
            }
            let (out, cache) = mlp_forward_batch(&spec, &params, &inputs)?;
            let n = (chunk.len() * action_dim) as Scalar;
            let mut upstream = Vec::with_capacity(out.len());
            let mut loss = 0.0;
            for (&y, &t) in out.iter().zip(&targets) {
                let r = y - t;
                loss += r * r;
                upstream.push(2.0 * r / n);
            }
            loss /= n;
            let (grads, _) = crate::nn::mlp_backward(&cache, &upstream)?;
            adam_step(&mut params, &grads, &mut adam)?;
            epoch_loss += loss;
            batches += 1;
        }
        losses.push(epoch_loss / batches as Scalar);
    }

    Ok((
        Propagator {
            kind: PropagatorKind::ParametricBc,
            k: 1,
            candidate_pool: None,
            bc: Some((spec, params)),
        },
        losses,
    ))
}

/// Mean squared error of a fitted BC propagator on a dataset; the same
/// quantity `fit_bc_propagator` reports per epoch.
pub fn bc_loss(propagator: &Propagator, dataset: &DemoDataset) -> Result<Scalar> {
    let (spec, params) = propagator
        .bc
        .as_ref()
        .ok_or_else(|| Error::usage("not a BC propagator"))?;
    let (out, _) = mlp_forward_batch(spec, params, dataset.states_flat())?;
    let mut loss = 0.0;
    let mut count = 0usize;
    for row in 0..dataset.len() {
        for (o, t) in out[row * dataset.action_dim()..(row + 1) * dataset.action_dim()]
            .iter()
            .zip(dataset.action(row))
        {
            let r = o - t;
            loss += r * r;
            count += 1;
        }
    }
    Ok(loss / count as Scalar)
}

/// A dataset, its index, and a propagator bundled for the training loop.
#[derive(Debug, Clone)]
pub struct GuidanceModel {
    dataset: DemoDataset,
    index: Option<KdIndex<Scalar>>,
    propagator: Propagator,
}

impl GuidanceModel {
    pub fn nonparametric(dataset: DemoDataset, k: usize, pool: Option<usize>) -> Result<Self> {
        if k > dataset.len() {
            return Err(Error::config(format!(
                "k = {k} exceeds dataset size {}",
                dataset.len()
            )));
        }
        let index = dataset.build_index()?;
        Ok(GuidanceModel {
            dataset,
            index: Some(index),
            propagator: Propagator::lwr(k, pool)?,
        })
    }

    pub fn parametric(dataset: DemoDataset, propagator: Propagator) -> Result<Self> {
        if propagator.kind != PropagatorKind::ParametricBc {
            return Err(Error::config("parametric guidance needs a BC propagator"));
        }
        Ok(GuidanceModel {
            dataset,
            index: None,
            propagator,
        })
    }

    pub fn dataset(&self) -> &DemoDataset {
        &self.dataset
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn estimate(&self, queries: &[Scalar], rng: &mut Rng) -> Result<Vec<Scalar>> {
        propagate(
            &self.propagator,
            &self.dataset,
            self.index.as_ref(),
            queries,
            rng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::demo::generate_demonstrations;
    use crate::env::EnvName;
    use crate::rng::derive_rng;
    use rand::Rng as _;

    fn small_dataset() -> DemoDataset {
        let (demos, _) = generate_demonstrations(EnvName::PointReach, 4, 5).unwrap();
        DemoDataset::from_demo_set(&demos).unwrap()
    }

    #[test]
    fn dataset_rows_align_with_transitions() {
        let (demos, _) = generate_demonstrations(EnvName::PointPickPlace, 3, 9).unwrap();
        let dataset = DemoDataset::from_demo_set(&demos).unwrap();
        assert_eq!(dataset.len(), demos.num_transitions());
        assert_eq!(
            dataset.state_dim(),
            demos.header.obs_dim + demos.header.goal_dim
        );
        let t = &demos.episodes[1][4];
        let row = demos.header.horizon + 4;
        let mut key = t.state.observation.clone();
        key.extend_from_slice(&t.state.desired_goal);
        assert_eq!(dataset.state(row), key.as_slice());
        assert_eq!(dataset.action(row), t.action.as_slice());
    }

    #[test]
    fn lwr_weights_are_positive_and_normalized() {
        let mut rng = derive_rng(1, "lwr-w", &[]);
        for _ in 0..100 {
            let n = rng.gen_range(1..=9);
            let distances: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let weights = lwr_weights(&distances);
            assert!(weights.iter().all(|&w| w > 0.0));
            let total: f64 = weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_neighbor_actions_are_returned_verbatim() {
        let s = [0.0f64, 0.0];
        let a = [0.3f64, -0.7];
        let neighbors: Vec<(&[f64], &[f64], f64)> =
            vec![(&s, &a, 0.1), (&s, &a, 1.0), (&s, &a, 2.5)];
        let out = lwr_estimate(&neighbors).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
        assert!((out[1] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn single_neighbor_is_exact_regardless_of_distance() {
        let s = [1.0f64, 2.0];
        let a = [0.25f64, -0.5];
        let out = lwr_estimate(&[(&s[..], &a[..], 7.3)]).unwrap();
        assert_eq!(out, vec![0.25, -0.5]);
    }

    #[test]
    fn hand_evaluated_two_neighbor_blend() {
        // Neighbors at distances 0 and 1 from the query: weights 1 and
        // exp(-1), normalized.
        let s1 = [0.0, 0.0];
        let a1 = [1.0, 0.0];
        let s2 = [0.0, 1.0];
        let a2 = [0.0, 1.0];
        let out = lwr_estimate(&[(&s1[..], &a1[..], 0.0), (&s2[..], &a2[..], 1.0)]).unwrap();
        let w2 = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        let w1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out[0] - w1).abs() < 1e-12);
        assert!((out[1] - w2).abs() < 1e-12);
        assert!((out[0] - 0.7311).abs() < 1e-4);
        assert!((out[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn estimate_is_invariant_to_neighbor_order() {
        let s1 = [0.0f64, 0.0];
        let a1 = [0.9, 0.1];
        let s2 = [0.0, 1.0];
        let a2 = [-0.4, 0.6];
        let s3 = [1.0, 0.0];
        let a3 = [0.2, -0.8];
        let fwd = lwr_estimate(&[
            (&s1[..], &a1[..], 0.2),
            (&s2[..], &a2[..], 0.7),
            (&s3[..], &a3[..], 1.1),
        ])
        .unwrap();
        let rev = lwr_estimate(&[
            (&s3[..], &a3[..], 1.1),
            (&s1[..], &a1[..], 0.2),
            (&s2[..], &a2[..], 0.7),
        ])
        .unwrap();
        for (x, y) in fwd.iter().zip(&rev) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn estimate_is_locally_continuous_in_the_query() {
        let dataset = small_dataset();
        let index = dataset.build_index().unwrap();
        let query = dataset.state(7).to_vec();
        let hits = index.knn(&query, 3).unwrap();
        let neighbors: Vec<(&[f64], &[f64], f64)> = hits
            .iter()
            .map(|&(row, d)| (dataset.state(row), dataset.action(row), d))
            .collect();
        let base = lwr_estimate(&neighbors).unwrap();

        let mut nudged = query.clone();
        nudged[0] += 1e-8;
        let hits2 = index.knn(&nudged, 3).unwrap();
        let rows: Vec<usize> = hits2.iter().map(|h| h.0).collect();
        assert_eq!(
            rows,
            hits.iter().map(|h| h.0).collect::<Vec<_>>(),
            "neighbor set changed under a 1e-8 nudge"
        );
        let neighbors2: Vec<(&[f64], &[f64], f64)> = hits2
            .iter()
            .map(|&(row, d)| (dataset.state(row), dataset.action(row), d))
            .collect();
        let nudged_out = lwr_estimate(&neighbors2).unwrap();
        for (a, b) in base.iter().zip(&nudged_out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn propagation_at_demo_states_with_k1_recovers_stored_actions() {
        let dataset = small_dataset();
        let model = GuidanceModel::nonparametric(dataset, 1, None).unwrap();
        let mut rng = derive_rng(2, "prop", &[]);
        for row in [0usize, 13, 77] {
            let out = model
                .estimate(model.dataset().state(row).to_vec().as_slice(), &mut rng)
                .unwrap();
            assert_eq!(out.as_slice(), model.dataset().action(row));
        }
    }

    #[test]
    fn propagated_actions_stay_in_neighbor_envelope() {
        let dataset = small_dataset();
        let index = dataset.build_index().unwrap();
        let propagator = Propagator::lwr(5, None).unwrap();
        let mut rng = derive_rng(3, "prop-env", &[]);
        for trial in 0..50 {
            let query: Vec<f64> = (0..dataset.state_dim())
                .map(|i| ((trial * 13 + i * 7) as f64 * 0.29).sin())
                .collect();
            let out = propagate(&propagator, &dataset, Some(&index), &query, &mut rng).unwrap();
            let hits = index.knn(&query, 5).unwrap();
            for dim in 0..dataset.action_dim() {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &(row, _) in &hits {
                    lo = lo.min(dataset.action(row)[dim]);
                    hi = hi.max(dataset.action(row)[dim]);
                }
                assert!(out[dim] >= lo - 1e-12 && out[dim] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn exhaustive_pool_matches_full_index() {
        let dataset = small_dataset();
        let n = dataset.len();
        let full = GuidanceModel::nonparametric(dataset.clone(), 5, None).unwrap();
        let pooled = GuidanceModel::nonparametric(dataset, 5, Some(n)).unwrap();
        let queries: Vec<f64> = (0..3 * full.dataset().state_dim())
            .map(|i| (i as f64 * 0.17).cos())
            .collect();
        let mut rng_a = derive_rng(4, "pool", &[]);
        let mut rng_b = derive_rng(4, "pool", &[]);
        let a = full.estimate(&queries, &mut rng_a).unwrap();
        let b = pooled.estimate(&queries, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_smaller_than_k_is_rejected() {
        assert!(Propagator::lwr(5, Some(3)).is_err());
    }

    #[test]
    fn bc_overfits_a_single_pair() {
        let dataset = DemoDataset::new(
            "point_reach",
            2,
            2,
            vec![0.25, -0.5],
            vec![0.6, -0.3],
        )
        .unwrap();
        let mut rng = derive_rng(5, "bc-overfit", &[]);
        let (prop, losses) =
            fit_bc_propagator(&dataset, &[16, 16], 400, 1, 1e-2, &mut rng).unwrap();
        assert_eq!(losses.len(), 400);
        let mut rng2 = derive_rng(6, "bc-eval", &[]);
        let out = propagate(&prop, &dataset, None, &[0.25, -0.5], &mut rng2).unwrap();
        assert!((out[0] - 0.6).abs() < 0.05);
        assert!((out[1] + 0.3).abs() < 0.05);
    }

    #[test]
    fn zero_epochs_returns_untouched_initialization() {
        let dataset = small_dataset();
        let mut rng = derive_rng(7, "bc-zero", &[]);
        let (prop, losses) =
            fit_bc_propagator(&dataset, &[8], 0, 64, 1e-3, &mut rng).unwrap();
        assert!(losses.is_empty());
        let (spec, params) = prop.bc_params().unwrap();
        let mut rng_replay = derive_rng(7, "bc-zero", &[]);
        let expect = ParameterVector::<f64>::init(spec, &mut rng_replay);
        assert_eq!(params.as_slice(), expect.as_slice());
    }

    #[test]
    fn bc_training_reduces_loss_over_epochs() {
        let (demos, _) = generate_demonstrations(EnvName::PointReach, 20, 13).unwrap();
        let dataset = DemoDataset::from_demo_set(&demos).unwrap();
        let mut rng = derive_rng(8, "bc-mono", &[]);
        let (prop, losses) =
            fit_bc_propagator(&dataset, &[32, 32], 50, 128, 1e-3, &mut rng).unwrap();
        assert!(
            losses.last().unwrap() <= &losses[0],
            "loss went up: {:?} -> {:?}",
            losses[0],
            losses.last().unwrap()
        );
        let final_loss = bc_loss(&prop, &dataset).unwrap();
        assert!(final_loss < losses[0]);
    }

    #[test]
    fn unfit_bc_propagation_fails() {
        let dataset = small_dataset();
        let bare = Propagator {
            kind: PropagatorKind::ParametricBc,
            k: 1,
            candidate_pool: None,
            bc: None,
        };
        let mut rng = derive_rng(9, "bc-unfit", &[]);
        let err = propagate(&bare, &dataset, None, &vec![0.0; dataset.state_dim()], &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
