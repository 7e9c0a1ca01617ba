//! Masked top-k routing with a semantic and a contextual pathway.
//!
//! Logits for expert `i` at a layer are
//!
//! ```text
//! z_i = (h W_g + b_g)_i + beta * <u_r(i), h W_k> + bias(t)     (universal i)
//! z_i = (h W_g + b_g)_i                                        (local i)
//! ```
//!
//! where `u_r(i)` is the fast-weight row aligned with the position of `i` in the
//! layer's universal window and `bias(t)` sums the active schedules. Unreachable
//! experts get `-inf`.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::numerics::{dot, softmax_finite, top_k_select, Matrix};
use crate::topology::ConnectivityMap;
use crate::{Error, Result};

/// Per-layer router weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `d x E` projection over the global expert space.
    pub w_gate: Matrix,
    /// `1 x E` bias.
    pub b_gate: Matrix,
    /// `d x d_k` key projection of the contextual pathway.
    pub w_key: Matrix,
    /// Weight of the contextual pathway; zero gives the stateless router.
    pub beta: f64,
}

impl RouterParams {
    pub fn init(
        d_model: usize,
        num_experts: usize,
        d_key: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 1.0 / libm::sqrt(d_model as f64);
        Self {
            w_gate: Matrix::uniform(d_model, num_experts, scale, rng),
            b_gate: Matrix::zeros(1, num_experts),
            w_key: Matrix::uniform(d_model, d_key, scale, rng),
            beta,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn d_key(&self) -> usize {
        self.w_key.cols()
    }
}

/// Fast-weight matrix of one connectivity state slot: one row per universal
/// expert in the slot's window (window order), `d_k` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FastWeightState {
    pub u: Matrix,
}

impl FastWeightState {
    pub fn zeros(window: usize, d_key: usize) -> Self {
        Self { u: Matrix::zeros(window, d_key) }
    }
}

/// All fast-weight states of a model, indexed by [`ConnectivityMap::state_of`].
#[derive(Debug, Clone, PartialEq)]
pub struct FastWeights {
    pub states: Vec<FastWeightState>,
}

impl FastWeights {
    pub fn zeros(map: &ConnectivityMap, d_key: usize) -> Self {
        let states = (0..map.num_states())
            .map(|s| FastWeightState::zeros(map.state_window(s).len(), d_key))
            .collect();
        Self { states }
    }

    pub fn for_layer(&self, map: &ConnectivityMap, layer: usize) -> Result<&FastWeightState> {
        let state = self.states.get(map.state_of(layer));
        state.ok_or(Error::MissingFastWeightState { layer })
    }
}

/// Time-dependent bias on universal-branch logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasSchedule {
    /// Subtracts `beta0 * max(0, 1 - t / t_end)`.
    Suppression { beta0: f64, t_end: f64 },
    /// Adds `b0 * max(0, 1 - t / r)`, i.e. `ln rho(t)` with `rho >= 1`.
    Warmup { b0: f64, r: f64 },
}

impl BiasSchedule {
    /// Magnitude of the schedule at training progress `t` in `[0, 1]`.
    pub fn value_at(&self, t: f64) -> f64 {
        let anneal = |scale: f64, end: f64| {
            if end <= 0.0 {
                if t <= 0.0 { scale } else { 0.0 }
            } else {
                scale * (1.0 - t / end).max(0.0)
            }
        };
        match *self {
            BiasSchedule::Suppression { beta0, t_end } => anneal(beta0, t_end),
            BiasSchedule::Warmup { b0, r } => anneal(b0, r),
        }
    }

    /// Signed contribution to universal logits.
    pub fn logit_offset(&self, t: f64) -> f64 {
        match self {
            BiasSchedule::Suppression { .. } => -self.value_at(t),
            BiasSchedule::Warmup { .. } => self.value_at(t),
        }
    }
}

pub fn schedule_value(schedule: &BiasSchedule, t: f64) -> f64 {
    schedule.value_at(t)
}

/// Total bias added to universal logits at progress `t`.
pub fn universal_bias(schedules: &[BiasSchedule], t: f64) -> f64 {
    schedules.iter().map(|s| s.logit_offset(t)).sum()
}

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub expert_ids: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Logits and the projected key for one token at one layer.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    pub logits: Vec<f64>,
    pub key: Vec<f64>,
}

/// Logits over the global expert space plus the contextual key `h W_k`.
pub fn route_logits(
    h: &[f64],
    layer: usize,
    params: &RouterParams,
    fast: &FastWeights,
    map: &ConnectivityMap,
    bias: f64,
) -> Result<RouterOutput> {
    if h.len() != params.d_model() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "hidden size {} vs router input {}",
            h.len(),
            params.d_model()
        )));
    }
    let state = fast.for_layer(map, layer)?;
    let key = params.w_key.left_mul(h);
    let mut logits = vec![f64::NEG_INFINITY; map.num_experts()];
    let bias_row = params.b_gate.row(0);
    let semantic = |id: usize| {
        let mut acc = bias_row[id];
        for (r, &x) in h.iter().enumerate() {
            acc += x * params.w_gate.get(r, id);
        }
        acc
    };
    for id in map.local_block(layer) {
        logits[id] = semantic(id);
    }
    for (row, id) in map.universal_ids(layer).into_iter().enumerate() {
        let contextual =
            if params.beta == 0.0 { 0.0 } else { params.beta * dot(state.u.row(row), &key) };
        logits[id] = semantic(id) + contextual + bias;
    }
    Ok(RouterOutput { logits, key })
}

/// Routing logits for one token; see the module docs for the formula.
pub fn compute_logits(
    h: &[f64],
    layer: usize,
    params: &RouterParams,
    fast: &FastWeights,
    map: &ConnectivityMap,
    schedules: &[BiasSchedule],
    t: f64,
) -> Result<Vec<f64>> {
    let bias = universal_bias(schedules, t);
    Ok(route_logits(h, layer, params, fast, map, bias)?.logits)
}

/// Top-k by logit; gates are the masked softmax renormalized over the selection.
pub fn select_experts(logits: &[f64], k: usize) -> Result<Selection> {
    let expert_ids = top_k_select(logits, k)?;
    // Renormalizing the full softmax over the selection cancels the shared
    // denominator, so the gates are a softmax over the selected logits.
    let top = expert_ids.first().map_or(0.0, |&i| logits[i]);
    let mut gates: Vec<f64> = expert_ids.iter().map(|&i| libm::exp(logits[i] - top)).collect();
    let sum: f64 = gates.iter().sum();
    gates.iter_mut().for_each(|g| *g /= sum);
    Ok(Selection { expert_ids, gates })
}

/// Detached target for the fast-weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetKind {
    /// Router probabilities restricted to the universal window and renormalized.
    #[default]
    Soft,
    /// Selected universal experts, row-normalized. Tokens that picked no
    /// universal expert get an all-zero row; callers drop those tokens from
    /// the update.
    Hard,
}

/// Fast-weight target row for one token over `window_ids` (window order).
pub fn fast_weight_target(
    kind: TargetKind,
    logits: &[f64],
    selection: &Selection,
    window_ids: &[usize],
) -> Result<Vec<f64>> {
    match kind {
        TargetKind::Soft => {
            // softmax of the universal logits == masked probabilities renormalized
            let z: Vec<f64> = window_ids.iter().map(|&i| logits[i]).collect();
            softmax_finite(&z)
        }
        TargetKind::Hard => {
            let mut row: Vec<f64> = window_ids
                .iter()
                .map(|id| f64::from(u8::from(selection.expert_ids.contains(id))))
                .collect();
            let n: f64 = row.iter().sum();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
            Ok(row)
        }
    }
}

/// Contextual prediction `row-softmax(K U^T)`.
pub fn contextual_prediction(state: &FastWeightState, keys: &Matrix) -> Result<Matrix> {
    let window = state.u.rows();
    if keys.cols() != state.u.cols() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "keys have {} columns, state has {}",
            keys.cols(),
            state.u.cols()
        )));
    }
    let mut out = Matrix::zeros(keys.rows(), window);
    for t in 0..keys.rows() {
        let scores = state.u.right_mul(keys.row(t));
        let p = softmax_finite(&scores)?;
        out.row_mut(t).copy_from_slice(&p);
    }
    Ok(out)
}

/// One forward-only update `U <- U - eta * (p_hat - p_star)^T K / N_tok`.
pub fn fast_weight_update(
    state: &mut FastWeightState,
    keys: &Matrix,
    p_star: &Matrix,
    eta: f64,
) -> Result<()> {
    let (n_tok, window) = (keys.rows(), state.u.rows());
    if p_star.rows() != n_tok || p_star.cols() != window {
        return Err(Error::DimensionMismatch(alloc::format!(
            "p_star is {}x{}, expected {n_tok}x{window}",
            p_star.rows(),
            p_star.cols()
        )));
    }
    if n_tok == 0 || window == 0 || eta == 0.0 {
        return Ok(());
    }
    let p_hat = contextual_prediction(state, keys)?;
    let mut step = Matrix::zeros(window, keys.cols());
    for t in 0..n_tok {
        let delta: Vec<f64> =
            p_hat.row(t).iter().zip(p_star.row(t)).map(|(a, b)| a - b).collect();
        step.add_outer(&delta, keys.row(t), 1.0);
    }
    state.u.axpy(-eta / n_tok as f64, &step);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Seed;
    use crate::topology::{build_staggered, build_variant, TopologyConfig, TopologyKind};
    use rand::Rng;

    fn topo() -> TopologyConfig {
        TopologyConfig {
            num_layers: 4,
            group_size: 2,
            num_universal: 6,
            window: 3,
            stride: 1,
            locals_per_layer: 2,
            top_k: 2,
        }
    }

    #[test]
    fn stateless_control_is_plain_affine() {
        let map = build_staggered(&topo()).unwrap();
        let mut rng = Seed(3).rng();
        let params = RouterParams::init(5, map.num_experts(), 3, 0.0, &mut rng);
        let mut fast = FastWeights::zeros(&map, 3);
        fast.states[0].u = Matrix::uniform(3, 3, 1.0, &mut rng);
        let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = compute_logits(&h, 1, &params, &fast, &map, &[], 0.3).unwrap();
        let affine = params.w_gate.left_mul(&h);
        for id in 0..map.num_experts() {
            if map.is_reachable(1, id) {
                assert_eq!(z[id], affine[id] + params.b_gate.get(0, id));
            } else {
                assert_eq!(z[id], f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn zero_state_has_no_contextual_term() {
        let map = build_staggered(&topo()).unwrap();
        let mut rng = Seed(4).rng();
        let params = RouterParams::init(5, map.num_experts(), 3, 0.0, &mut rng);
        let fast = FastWeights::zeros(&map, 3);
        let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = params;
        params.beta = 0.7;
        let with = compute_logits(&h, 2, &params, &fast, &map, &[], 0.0).unwrap();
        params.beta = 0.0;
        let without = compute_logits(&h, 2, &params, &fast, &map, &[], 0.0).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn contextual_term_uses_window_aligned_rows() {
        let map = build_staggered(&topo()).unwrap();
        let mut rng = Seed(5).rng();
        let mut params = RouterParams::init(4, map.num_experts(), 2, 0.4, &mut rng);
        let mut fast = FastWeights::zeros(&map, 2);
        let s = map.state_of(2);
        fast.states[s].u = Matrix::uniform(3, 2, 1.0, &mut rng);
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta = 0.4;
        let z = compute_logits(&h, 2, &params, &fast, &map, &[], 0.0).unwrap();
        params.beta = 0.0;
        let z0 = compute_logits(&h, 2, &params, &fast, &map, &[], 0.0).unwrap();
        let key = params.w_key.left_mul(&h);
        for (row, id) in map.universal_ids(2).into_iter().enumerate() {
            let expect = beta * dot(fast.states[s].u.row(row), &key);
            assert!((z[id] - z0[id] - expect).abs() < 1e-14);
        }
        for id in map.local_block(2) {
            assert_eq!(z[id], z0[id]);
        }
    }

    #[test]
    fn missing_state_is_an_error() {
        let map = build_staggered(&topo()).unwrap();
        let mut rng = Seed(6).rng();
        let params = RouterParams::init(4, map.num_experts(), 2, 0.1, &mut rng);
        let fast = FastWeights { states: vec![] };
        let err = compute_logits(&[0.0; 4], 0, &params, &fast, &map, &[], 0.0).unwrap_err();
        assert_eq!(err, Error::MissingFastWeightState { layer: 0 });
    }

    #[test]
    fn suppression_masks_universal_branch() {
        let map = build_staggered(&topo()).unwrap();
        let mut rng = Seed(8).rng();
        let params = RouterParams::init(6, map.num_experts(), 3, 0.1, &mut rng);
        let fast = FastWeights::zeros(&map, 3);
        let schedule = [BiasSchedule::Suppression { beta0: 1e4, t_end: 0.5 }];
        for _ in 0..200 {
            let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let layer = rng.gen_range(0..4);
            let z = compute_logits(&h, layer, &params, &fast, &map, &schedule, 0.0).unwrap();
            let p = softmax_finite(&z).unwrap();
            let local_min = map.local_block(layer).map(|i| z[i]).fold(f64::INFINITY, f64::min);
            let mass: f64 = map.universal_ids(layer).iter().map(|&i| p[i]).sum();
            for id in map.universal_ids(layer) {
                assert!(z[id] <= local_min);
            }
            assert!(mass < 1e-40);
        }
    }

    #[test]
    fn selection_examples() {
        let ninf = f64::NEG_INFINITY;
        let s = select_experts(&[ninf, 0.3, 0.3], 2).unwrap();
        assert_eq!(s.expert_ids, vec![1, 2]);
        assert_eq!(s.gates, vec![0.5, 0.5]);

        let s = select_experts(&[6f64.ln(), 3f64.ln(), 0.0], 2).unwrap();
        assert_eq!(s.expert_ids, vec![0, 1]);
        assert!((s.gates[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.gates[1] - 1.0 / 3.0).abs() < 1e-15);

        let z = [0.2, ninf, -1.0, 1.5];
        let s = select_experts(&z, 3).unwrap();
        let p = softmax_finite(&z).unwrap();
        for (id, g) in s.expert_ids.iter().zip(&s.gates) {
            assert!((p[*id] - g).abs() < 1e-15);
        }

        assert!(select_experts(&[ninf, 1.0], 2).is_err());
    }

    #[test]
    fn schedule_examples() {
        let sup = BiasSchedule::Suppression { beta0: 1e4, t_end: 0.5 };
        assert_eq!(schedule_value(&sup, 0.0), 1e4);
        assert_eq!(schedule_value(&sup, 0.5), 0.0);
        assert_eq!(schedule_value(&sup, 0.9), 0.0);
        assert!((schedule_value(&sup, 0.25) - 5e3).abs() < 1e-9);

        let warm = BiasSchedule::Warmup { b0: 0.75, r: 0.05 };
        assert_eq!(schedule_value(&warm, 0.05), 0.0);
        assert!((schedule_value(&warm, 0.025) - 0.375).abs() < 1e-15);
        assert_eq!(warm.logit_offset(0.0), 0.75);
        assert_eq!(sup.logit_offset(0.0), -1e4);
    }

    #[test]
    fn schedules_are_monotone() {
        let sup = BiasSchedule::Suppression { beta0: 1e4, t_end: 0.5 };
        let warm = BiasSchedule::Warmup { b0: 0.75, r: 0.05 };
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let cur = (sup.value_at(t), warm.value_at(t));
            assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
            assert!(cur.1 >= 0.0);
            prev = cur;
        }
    }

    #[test]
    fn fast_weight_one_step_by_hand() {
        let mut state = FastWeightState::zeros(2, 1);
        let keys = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let p_star = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        fast_weight_update(&mut state, &keys, &p_star, 1.0).unwrap();
        // p_hat = [0.5, 0.5], delta = [-0.5, 0.5]
        assert_eq!(state.u.data(), &[0.5, -0.5]);
    }

    #[test]
    fn fast_weight_fixed_points() {
        let mut rng = Seed(11).rng();
        let mut state = FastWeightState { u: Matrix::uniform(3, 2, 1.0, &mut rng) };
        let keys = Matrix::uniform(5, 2, 1.0, &mut rng);
        let p_hat = contextual_prediction(&state, &keys).unwrap();
        let before = state.clone();
        fast_weight_update(&mut state, &keys, &p_hat, 0.5).unwrap();
        assert_eq!(state, before);

        let other = Matrix::uniform(5, 3, 1.0, &mut rng);
        fast_weight_update(&mut state, &keys, &other, 0.0).unwrap();
        assert_eq!(state, before);

        let wrong = Matrix::zeros(4, 3);
        assert!(matches!(
            fast_weight_update(&mut state, &keys, &wrong, 0.1),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn targets() {
        let map = build_variant(TopologyKind::AllToAll, &topo()).unwrap();
        let window = map.universal_ids(0);
        let mut z = vec![f64::NEG_INFINITY; map.num_experts()];
        for (i, &id) in window.iter().enumerate() {
            z[id] = i as f64 * 0.1;
        }
        z[0] = 2.0;
        z[1] = 2.5;
        let sel = Selection { expert_ids: vec![1, window[5]], gates: vec![0.6, 0.4] };
        let soft = fast_weight_target(TargetKind::Soft, &z, &sel, &window).unwrap();
        assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let hard = fast_weight_target(TargetKind::Hard, &z, &sel, &window).unwrap();
        assert_eq!(hard, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let none = Selection { expert_ids: vec![0, 1], gates: vec![0.5, 0.5] };
        let hard = fast_weight_target(TargetKind::Hard, &z, &none, &window).unwrap();
        assert!(hard.iter().all(|&x| x == 0.0));
    }
}
