//! Tiny trainable language model over a universal-expert topology.
//!
//! Per layer: a fixed causal mean-pooling mixer `x = mix(h)` feeds the router
//! and the experts, and the residual update is
//! `h <- h + sum_{i in top-k} gate_i E_i(x)` over the layer's allow-list.
//! Experts are two-matrix SiLU FFNs stored once per global ID, so a universal
//! expert reached from several layers has a single parameter copy and
//! accumulates gradient from every exposure.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::balance::{accumulate_stats, aux_objective, AlphaConfig, LoadStats, Objective};
use crate::numerics::{silu, silu_grad, softmax_finite, Matrix, Seed};
use crate::routing::{
    fast_weight_target, fast_weight_update, route_logits, select_experts, universal_bias,
    BiasSchedule, FastWeights, RouterParams, Selection, TargetKind,
};
use crate::topology::{build_variant, ConnectivityMap, ModelDims, TopologyConfig, TopologyKind};
use crate::{Error, Result};

/// Two-matrix expert FFN: `down(silu(up(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `d x d_ffn`
    pub up: Matrix,
    /// `d_ffn x d`
    pub down: Matrix,
}

impl ExpertParams {
    pub fn init(d_model: usize, d_ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Matrix::uniform(d_model, d_ffn, 1.0 / libm::sqrt(d_model as f64), rng),
            down: Matrix::uniform(d_ffn, d_model, 0.5 / libm::sqrt(d_ffn as f64), rng),
        }
    }

    pub fn zeros(d_model: usize, d_ffn: usize) -> Self {
        Self { up: Matrix::zeros(d_model, d_ffn), down: Matrix::zeros(d_ffn, d_model) }
    }
}

/// Expert output for one token.
pub fn expert_forward(e: &ExpertParams, x: &[f64]) -> Vec<f64> {
    let act: Vec<f64> = e.up.left_mul(x).into_iter().map(silu).collect();
    e.down.left_mul(&act)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub topology: TopologyConfig,
    pub variant: TopologyKind,
    /// Contextual pathway weight; zero disables the pathway and its updates.
    pub router_beta: f64,
    pub fast_weight_eta: f64,
    /// Use `eta / (1 + g)` for the state slot first reached at group `g`.
    pub eta_depth_decay: bool,
    pub target: TargetKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let d = &self.dims;
        if d.vocab == 0 || d.d_model == 0 || d.d_ffn == 0 || d.d_key == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !(self.router_beta >= 0.0) || !(self.fast_weight_eta >= 0.0) {
            return Err(Error::InvalidConfig("router beta and eta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Provenance of a model produced by warm-start conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartInfo {
    /// `(layer, local index)` of the source expert cloned into each ring position.
    pub sources: Vec<(usize, usize)>,
    pub suppression: BiasSchedule,
    /// Training progress reached under the suppression schedule, in `[0, 1]`.
    pub progress: f64,
}

/// Every trainable tensor. Also used as the gradient and momentum container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab x d`
    pub embedding: Matrix,
    /// `d x vocab`
    pub readout: Matrix,
    /// Indexed by global expert ID.
    pub experts: Vec<ExpertParams>,
    /// One per layer.
    pub routers: Vec<RouterParams>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Params {
            embedding: z(&self.embedding),
            readout: z(&self.readout),
            experts: self
                .experts
                .iter()
                .map(|e| ExpertParams { up: z(&e.up), down: z(&e.down) })
                .collect(),
            routers: self
                .routers
                .iter()
                .map(|r| RouterParams {
                    w_gate: z(&r.w_gate),
                    b_gate: z(&r.b_gate),
                    w_key: z(&r.w_key),
                    beta: r.beta,
                })
                .collect(),
        }
    }

    /// Tensor names in a fixed order shared by [`Params::tensors`] and
    /// [`Params::tensors_mut`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![String::from("embedding"), String::from("readout")];
        for id in 0..self.experts.len() {
            out.push(alloc::format!("expert.{id}.up"));
            out.push(alloc::format!("expert.{id}.down"));
        }
        for l in 0..self.routers.len() {
            out.push(alloc::format!("router.{l}.w_gate"));
            out.push(alloc::format!("router.{l}.b_gate"));
            out.push(alloc::format!("router.{l}.w_key"));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding, &self.readout];
        for e in &self.experts {
            out.push(&e.up);
            out.push(&e.down);
        }
        for r in &self.routers {
            out.push(&r.w_gate);
            out.push(&r.b_gate);
            out.push(&r.w_key);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding, &mut self.readout];
        for e in &mut self.experts {
            out.push(&mut e.up);
            out.push(&mut e.down);
        }
        for r in &mut self.routers {
            out.push(&mut r.w_gate);
            out.push(&mut r.b_gate);
            out.push(&mut r.w_key);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoueModel {
    pub config: ModelConfig,
    pub map: ConnectivityMap,
    pub params: Params,
    pub fast: FastWeights,
    pub warm_start: Option<WarmStartInfo>,
}

impl MoueModel {
    pub fn new(config: ModelConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let map = build_variant(config.variant, &config.topology)?;
        let ModelDims { vocab, d_model, d_ffn, d_key } = config.dims;
        let embedding = Matrix::uniform(vocab, d_model, 1.0, &mut seed.derive(1).rng());
        let readout =
            Matrix::uniform(d_model, vocab, 1.0 / libm::sqrt(d_model as f64), &mut seed.derive(2).rng());
        let mut rng = seed.derive(3).rng();
        let experts = (0..map.num_experts()).map(|_| ExpertParams::init(d_model, d_ffn, &mut rng)).collect();
        let mut rng = seed.derive(4).rng();
        let routers = (0..map.num_layers())
            .map(|_| RouterParams::init(d_model, map.num_experts(), d_key, config.router_beta, &mut rng))
            .collect();
        let fast = FastWeights::zeros(&map, d_key);
        Ok(Self {
            config,
            map,
            params: Params { embedding, readout, experts, routers },
            fast,
            warm_start: None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.map.num_layers()
    }

    pub fn d_model(&self) -> usize {
        self.config.dims.d_model
    }

    pub fn vocab(&self) -> usize {
        self.config.dims.vocab
    }

    /// Local experts of `layer` followed by the universal experts it reaches.
    pub fn layer_experts(&self, layer: usize) -> Vec<&ExpertParams> {
        self.map.allow_list(layer).into_iter().map(|id| &self.params.experts[id]).collect()
    }

    /// Fast-weight learning rate of a state slot.
    pub fn eta_for_state(&self, state: usize) -> f64 {
        let eta = self.config.fast_weight_eta;
        if !self.config.eta_depth_decay {
            return eta;
        }
        let first = self.map.layers_of_state(state).first().copied().unwrap_or(0);
        eta / (1 + self.map.group_of(first)) as f64
    }

    /// Schedules that always apply to this model (the suppression anneal of a
    /// converted model) followed by `extra`.
    pub fn schedules_with(&self, extra: &[BiasSchedule]) -> Vec<BiasSchedule> {
        let mut out: Vec<BiasSchedule> = self.warm_start.iter().map(|w| w.suppression).collect();
        out.extend_from_slice(extra);
        out
    }
}

/// Causal mean pooling within each sequence: `0.5 h_t + 0.5 mean_{s<=t} h_s`.
pub fn mix_tokens(h: &Matrix, seq_len: usize) -> Matrix {
    let d = h.cols();
    let mut out = Matrix::zeros(h.rows(), d);
    let mut running = vec![0.0; d];
    for row in 0..h.rows() {
        let t = row % seq_len;
        if t == 0 {
            running.iter_mut().for_each(|x| *x = 0.0);
        }
        for (acc, v) in running.iter_mut().zip(h.row(row)) {
            *acc += v;
        }
        let inv = 1.0 / (t + 1) as f64;
        for ((o, &x), &r) in out.row_mut(row).iter_mut().zip(h.row(row)).zip(&running) {
            *o = 0.5 * x + 0.5 * r * inv;
        }
    }
    out
}

fn mix_tokens_backward(dout: &Matrix, seq_len: usize) -> Matrix {
    let d = dout.cols();
    let mut dh = Matrix::zeros(dout.rows(), d);
    let seqs = dout.rows() / seq_len;
    for b in 0..seqs {
        let mut suffix = vec![0.0; d];
        for t in (0..seq_len).rev() {
            let row = b * seq_len + t;
            let inv = 1.0 / (t + 1) as f64;
            for (s, g) in suffix.iter_mut().zip(dout.row(row)) {
                *s += g * inv;
            }
            for ((o, &g), &s) in dh.row_mut(row).iter_mut().zip(dout.row(row)).zip(&suffix) {
                *o = 0.5 * g + 0.5 * s;
            }
        }
    }
    dh
}

/// Everything a layer's backward pass and the fast-weight update need.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Matrix,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub keys: Matrix,
    pub selections: Vec<Selection>,
    /// Pre-activation `x up` per token and selected slot.
    pre_act: Vec<Vec<Vec<f64>>>,
    /// Expert output per token and selected slot.
    expert_out: Vec<Vec<Vec<f64>>>,
}

/// Output of one routed layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub h_next: Matrix,
    pub trace: LayerTrace,
}

impl LayerOutput {
    pub fn selections(&self) -> &[Selection] {
        &self.trace.selections
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.trace.probs
    }
}

/// One routed layer over a token matrix (`N_tok x d`), `h + sum gate_i E_i(h)`.
/// The fast-weight state is read, not updated; see [`update_fast_weights`].
pub fn moue_layer_forward(
    model: &MoueModel,
    h: &Matrix,
    layer: usize,
    schedules: &[BiasSchedule],
    t: f64,
) -> Result<LayerOutput> {
    routed_block(model, h, h.clone(), layer, schedules, t)
}

/// Routes and mixes experts on `x`, adding their outputs to `residual`.
fn routed_block(
    model: &MoueModel,
    x: &Matrix,
    residual: Matrix,
    layer: usize,
    schedules: &[BiasSchedule],
    t: f64,
) -> Result<LayerOutput> {
    if layer >= model.num_layers() {
        return Err(Error::InvalidConfig(alloc::format!("layer {layer} out of range")));
    }
    let k = model.map.top_k();
    let bias = universal_bias(schedules, t);
    let router = &model.params.routers[layer];
    let n_tok = x.rows();
    let mut h_next = residual;
    let mut trace = LayerTrace {
        input: x.clone(),
        logits: Vec::with_capacity(n_tok),
        probs: Vec::with_capacity(n_tok),
        keys: Matrix::zeros(n_tok, router.d_key()),
        selections: Vec::with_capacity(n_tok),
        pre_act: Vec::with_capacity(n_tok),
        expert_out: Vec::with_capacity(n_tok),
    };
    for tok in 0..n_tok {
        let xt = x.row(tok);
        if xt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence);
        }
        let out = route_logits(xt, layer, router, &model.fast, &model.map, bias)?;
        if out.logits.iter().any(|z| z.is_nan() || *z == f64::INFINITY) {
            return Err(Error::Divergence);
        }
        let probs = softmax_finite(&out.logits)?;
        let sel = select_experts(&out.logits, k)?;
        let mut pre = Vec::with_capacity(k);
        let mut outs = Vec::with_capacity(k);
        for (&id, &gate) in sel.expert_ids.iter().zip(&sel.gates) {
            let e = &model.params.experts[id];
            let a = e.up.left_mul(xt);
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let y = e.down.left_mul(&act);
            for (o, v) in h_next.row_mut(tok).iter_mut().zip(&y) {
                *o += gate * v;
            }
            pre.push(a);
            outs.push(y);
        }
        trace.keys.row_mut(tok).copy_from_slice(&out.key);
        trace.logits.push(out.logits);
        trace.probs.push(probs);
        trace.selections.push(sel);
        trace.pre_act.push(pre);
        trace.expert_out.push(outs);
    }
    Ok(LayerOutput { h_next, trace })
}

/// Full forward pass with traces.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub seq_len: usize,
    pub layers: Vec<LayerTrace>,
    pub final_hidden: Matrix,
    /// `N_tok x vocab`
    pub logits: Matrix,
    pub task_loss: f64,
    pub stats: Vec<LoadStats>,
}

impl ForwardPass {
    pub fn selections(&self, layer: usize) -> &[Selection] {
        &self.layers[layer].selections
    }
}

fn check_batch(model: &MoueModel, batch: &[Vec<usize>]) -> Result<usize> {
    let seq_len = batch.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
    if seq_len == 0 {
        return Err(Error::EmptyBatch);
    }
    for seq in batch {
        if seq.len() != seq_len {
            return Err(Error::DimensionMismatch("ragged batch".into()));
        }
        if let Some(&bad) = seq.iter().find(|&&tok| tok >= model.vocab()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "token {bad} outside vocabulary of {}",
                model.vocab()
            )));
        }
    }
    Ok(seq_len)
}

/// Forward over a batch of equal-length sequences at training progress `t`.
pub fn forward(
    model: &MoueModel,
    batch: &[Vec<usize>],
    schedules: &[BiasSchedule],
    t: f64,
) -> Result<ForwardPass> {
    let seq_len = check_batch(model, batch)?;
    let n_tok = batch.len() * seq_len;
    let d = model.d_model();
    let mut h = Matrix::zeros(n_tok, d);
    for (row, &tok) in batch.iter().flatten().enumerate() {
        h.row_mut(row).copy_from_slice(model.params.embedding.row(tok));
    }
    let mut layers = Vec::with_capacity(model.num_layers());
    let mut stats = Vec::with_capacity(model.num_layers());
    for layer in 0..model.num_layers() {
        let mixed = mix_tokens(&h, seq_len);
        let out = routed_block(model, &mixed, h, layer, schedules, t)?;
        stats.push(accumulate_stats(&out.trace.selections, &out.trace.probs, &model.map, layer)?);
        h = out.h_next;
        layers.push(out.trace);
    }
    let logits = h.matmul(&model.params.readout)?;
    let mut loss = 0.0;
    let mut count = 0usize;
    for (b, seq) in batch.iter().enumerate() {
        for pos in 0..seq_len - 1 {
            let row = logits.row(b * seq_len + pos);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|z| libm::exp(z - max)).sum::<f64>());
            loss += lse - row[seq[pos + 1]];
            count += 1;
        }
    }
    let task_loss = if count == 0 { 0.0 } else { loss / count as f64 };
    Ok(ForwardPass { seq_len, layers, final_hidden: h, logits, task_loss, stats })
}

/// Next-token cross-entropy and per-layer load statistics.
pub fn forward_loss(
    model: &MoueModel,
    batch: &[Vec<usize>],
    schedules: &[BiasSchedule],
    t: f64,
) -> Result<(f64, Vec<LoadStats>)> {
    let pass = forward(model, batch, schedules, t)?;
    Ok((pass.task_loss, pass.stats))
}

/// Optimization settings for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: Seed,
    pub aux_coef: f64,
    pub objective: Objective,
    pub alphas: AlphaConfig,
    /// Schedules applied on top of the model's own (e.g. the warmup bias).
    pub schedules: Vec<BiasSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            batch: 8,
            steps: 2000,
            lr: 0.05,
            momentum: 0.9,
            seed: Seed(0),
            aux_coef: 1e-3,
            objective: Objective::Uelb,
            alphas: AlphaConfig::default(),
            schedules: vec![BiasSchedule::Warmup { b0: 0.75, r: 0.05 }],
        }
    }
}

/// Training objective value and gradients.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub pass: ForwardPass,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub grads: Params,
}

/// `task + aux_coef * aux` and its gradient with respect to every parameter.
/// Fast-weight state is treated as a constant.
pub fn loss_and_grad(
    model: &MoueModel,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
    t: f64,
) -> Result<Evaluation> {
    let schedules = model.schedules_with(&cfg.schedules);
    let pass = forward(model, batch, &schedules, t)?;
    let aux = aux_objective(&pass.stats, &model.map, cfg.alphas, cfg.objective)?;
    let total_loss = pass.task_loss + cfg.aux_coef * aux.value;
    let mut grads = model.params.zeros_like();

    let seq_len = pass.seq_len;
    let n_tok = pass.logits.rows();
    let vocab = model.vocab();
    let count = batch.len() * (seq_len - 1);
    let mut dlogits = Matrix::zeros(n_tok, vocab);
    if count > 0 {
        let inv = 1.0 / count as f64;
        for (b, seq) in batch.iter().enumerate() {
            for pos in 0..seq_len - 1 {
                let row = b * seq_len + pos;
                let p = softmax_finite(pass.logits.row(row))?;
                let out = dlogits.row_mut(row);
                for (o, pi) in out.iter_mut().zip(p) {
                    *o = pi * inv;
                }
                out[seq[pos + 1]] -= inv;
            }
        }
    }
    grads.readout = pass.final_hidden.transpose().matmul(&dlogits)?;
    let mut dh = dlogits.matmul(&model.params.readout.transpose())?;

    for layer in (0..model.num_layers()).rev() {
        let trace = &pass.layers[layer];
        let aux_scale = cfg.aux_coef / trace.input.rows() as f64;
        let aux_grad: Vec<f64> = aux.grad[layer].iter().map(|g| g * aux_scale).collect();
        let dmix = layer_backward(model, layer, trace, &dh, &aux_grad, &mut grads);
        let through_mixer = mix_tokens_backward(&dmix, seq_len);
        for (a, b) in dh.data_mut().iter_mut().zip(through_mixer.data()) {
            *a += b;
        }
    }
    for (row, &tok) in batch.iter().flatten().enumerate() {
        for (g, v) in grads.embedding.row_mut(tok).iter_mut().zip(dh.row(row)) {
            *g += v;
        }
    }
    Ok(Evaluation { pass, aux_loss: aux.value, total_loss, grads })
}

/// Backward through one routed layer to its router and expert input,
/// excluding the residual path. `aux_grad[i]` is the gradient of the scaled
/// auxiliary loss with respect to each token's probability of expert `i`.
fn layer_backward(
    model: &MoueModel,
    layer: usize,
    trace: &LayerTrace,
    dout: &Matrix,
    aux_grad: &[f64],
    grads: &mut Params,
) -> Matrix {
    let router = &model.params.routers[layer];
    let allow = model.map.allow_list(layer);
    let universal = model.map.universal_ids(layer);
    let state = &model.fast.states[model.map.state_of(layer)];
    let mut dx = Matrix::zeros(dout.rows(), dout.cols());
    let mut dz = vec![0.0; model.map.num_experts()];
    for tok in 0..trace.input.rows() {
        let x = trace.input.row(tok);
        let g_out = dout.row(tok);
        let sel = &trace.selections[tok];
        let mut dx_tok = vec![0.0; x.len()];

        // experts and gates
        let mut dgate = vec![0.0; sel.expert_ids.len()];
        for (slot, (&id, &gate)) in sel.expert_ids.iter().zip(&sel.gates).enumerate() {
            let y = &trace.expert_out[tok][slot];
            let a = &trace.pre_act[tok][slot];
            dgate[slot] = y.iter().zip(g_out).map(|(u, v)| u * v).sum();
            let dy: Vec<f64> = g_out.iter().map(|v| gate * v).collect();
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let e = &model.params.experts[id];
            let ge = &mut grads.experts[id];
            ge.down.add_outer(&act, &dy, 1.0);
            let dact = e.down.right_mul(&dy);
            let da: Vec<f64> = dact.iter().zip(a).map(|(g, &v)| g * silu_grad(v)).collect();
            ge.up.add_outer(x, &da, 1.0);
            for (o, v) in dx_tok.iter_mut().zip(e.up.right_mul(&da)) {
                *o += v;
            }
        }

        // gate softmax over the selection, aux softmax over the reachable set
        dz.iter_mut().for_each(|v| *v = 0.0);
        let weighted: f64 = sel.gates.iter().zip(&dgate).map(|(g, d)| g * d).sum();
        for ((&id, &gate), &dg) in sel.expert_ids.iter().zip(&sel.gates).zip(&dgate) {
            dz[id] += gate * (dg - weighted);
        }
        let probs = &trace.probs[tok];
        let mean_aux: f64 = allow.iter().map(|&i| probs[i] * aux_grad[i]).sum();
        for &i in &allow {
            dz[i] += probs[i] * (aux_grad[i] - mean_aux);
        }

        // semantic pathway
        let gr = &mut grads.routers[layer];
        for &i in &allow {
            let g = dz[i];
            if g == 0.0 {
                continue;
            }
            gr.b_gate.add_at(0, i, g);
            for (r, &xr) in x.iter().enumerate() {
                gr.w_gate.add_at(r, i, xr * g);
                dx_tok[r] += g * router.w_gate.get(r, i);
            }
        }

        // contextual pathway through the key projection
        if router.beta != 0.0 && !universal.is_empty() {
            let mut dkey = vec![0.0; router.d_key()];
            for (row, &id) in universal.iter().enumerate() {
                let g = router.beta * dz[id];
                for (dk, u) in dkey.iter_mut().zip(state.u.row(row)) {
                    *dk += g * u;
                }
            }
            gr.w_key.add_outer(x, &dkey, 1.0);
            for (o, v) in dx_tok.iter_mut().zip(router.w_key.right_mul(&dkey)) {
                *o += v;
            }
        }

        for (o, v) in dx.row_mut(tok).iter_mut().zip(dx_tok) {
            *o += v;
        }
    }
    dx
}

/// One forward-only fast-weight update per state slot, pooling the tokens of
/// every layer that shares the slot. Skipped when the contextual pathway is off.
pub fn update_fast_weights(model: &mut MoueModel, layers: &[LayerTrace]) -> Result<()> {
    if model.config.router_beta == 0.0 {
        return Ok(());
    }
    for state in 0..model.map.num_states() {
        let window: Vec<usize> =
            model.map.state_window(state).iter().map(|&p| model.map.universal_id(p)).collect();
        if window.is_empty() {
            continue;
        }
        let members = model.map.layers_of_state(state);
        let d_key = model.config.dims.d_key;
        let mut keys = Vec::new();
        let mut targets = Vec::new();
        let mut rows = 0;
        for &l in &members {
            let trace = &layers[l];
            for tok in 0..trace.input.rows() {
                let target = fast_weight_target(
                    model.config.target,
                    &trace.logits[tok],
                    &trace.selections[tok],
                    &window,
                )?;
                if target.iter().all(|&v| v == 0.0) {
                    continue;
                }
                keys.extend_from_slice(trace.keys.row(tok));
                targets.extend(target);
                rows += 1;
            }
        }
        if rows == 0 {
            continue;
        }
        let keys = Matrix::from_vec(rows, d_key, keys)?;
        let targets = Matrix::from_vec(rows, window.len(), targets)?;
        let eta = model.eta_for_state(state);
        fast_weight_update(&mut model.fast.states[state], &keys, &targets, eta)?;
    }
    Ok(())
}

/// Per-step training metrics.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub stats: Vec<LoadStats>,
    pub selections: Vec<Vec<Selection>>,
}

/// SGD (with optional momentum) on `task + aux_coef * aux`, then the
/// forward-only fast-weight update from the same batch.
pub fn backward_step(
    model: &mut MoueModel,
    velocity: &mut Option<Params>,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
    t: f64,
) -> Result<StepMetrics> {
    let eval = loss_and_grad(model, batch, cfg, t)?;
    if !eval.total_loss.is_finite() || !eval.grads.is_finite() {
        return Err(Error::Divergence);
    }
    if cfg.lr != 0.0 {
        let grads = if cfg.momentum > 0.0 {
            let v = velocity.get_or_insert_with(|| model.params.zeros_like());
            for (vm, gm) in v.tensors_mut().into_iter().zip(eval.grads.tensors()) {
                for (a, b) in vm.data_mut().iter_mut().zip(gm.data()) {
                    *a = cfg.momentum * *a + b;
                }
            }
            &*v
        } else {
            &eval.grads
        };
        for (p, g) in model.params.tensors_mut().into_iter().zip(grads.tensors()) {
            p.axpy(-cfg.lr, g);
        }
        if !model.params.is_finite() {
            return Err(Error::Divergence);
        }
    }
    update_fast_weights(model, &eval.pass.layers)?;
    Ok(StepMetrics {
        task_loss: eval.pass.task_loss,
        aux_loss: eval.aux_loss,
        total_loss: eval.total_loss,
        stats: eval.pass.stats,
        selections: eval.pass.layers.into_iter().map(|l| l.selections).collect(),
    })
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed some top-k set.
    pub skipped: usize,
    /// Coordinates where both gradients were exactly zero.
    pub exact_zero: usize,
}

/// Relative error with an absolute floor so vanishing gradients compare on
/// an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn same_routing(a: &ForwardPass, b: &ForwardPass) -> bool {
    a.layers.iter().zip(&b.layers).all(|(x, y)| {
        x.selections.iter().zip(&y.selections).all(|(s, t)| s.expert_ids == t.expert_ids)
    })
}

/// Central differences of `task + aux_coef * aux` against the analytic gradient.
///
/// Tensors with at most `per_tensor` entries are checked exhaustively; larger
/// ones at `per_tensor` coordinates drawn from `seed`. Coordinates whose
/// perturbation flips any routing decision are skipped.
pub fn grad_check(
    model: &MoueModel,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
    t: f64,
    epsilon: f64,
    per_tensor: usize,
    seed: Seed,
) -> Result<GradCheckReport> {
    use rand::Rng;

    let eval = loss_and_grad(model, batch, cfg, t)?;
    let schedules = model.schedules_with(&cfg.schedules);
    let objective = |m: &MoueModel| -> Result<(f64, ForwardPass)> {
        let pass = forward(m, batch, &schedules, t)?;
        let aux = aux_objective(&pass.stats, &m.map, cfg.alphas, cfg.objective)?;
        Ok((pass.task_loss + cfg.aux_coef * aux.value, pass))
    };
    let mut rng = seed.rng();
    let mut report =
        GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, skipped: 0, exact_zero: 0 };
    let mut probe = model.clone();
    let analytic = eval.grads.tensors();
    for (ti, grad) in analytic.iter().enumerate() {
        let len = grad.data().len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for c in coords {
            let orig = model.params.tensors()[ti].data()[c];
            probe.params.tensors_mut()[ti].data_mut()[c] = orig + epsilon;
            let (plus, pass_plus) = objective(&probe)?;
            probe.params.tensors_mut()[ti].data_mut()[c] = orig - epsilon;
            let (minus, pass_minus) = objective(&probe)?;
            probe.params.tensors_mut()[ti].data_mut()[c] = orig;
            if !same_routing(&eval.pass, &pass_plus) || !same_routing(&eval.pass, &pass_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[c];
            if a == 0.0 && numeric == 0.0 {
                report.exact_zero += 1;
            }
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
