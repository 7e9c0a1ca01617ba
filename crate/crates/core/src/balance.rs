//! Routing-load statistics and auxiliary balance losses.
//!
//! Dispatch fractions are normalized by `tokens * k`, so they sum to one over
//! a layer's reachable set for any `k` and a uniform router gives `1 / n`.
//! Dispatch fractions are treated as constants (stop-gradient); mean router
//! probabilities carry the gradient.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::routing::Selection;
use crate::topology::{exposure_degrees, ConnectivityMap};
use crate::{Error, Result};

/// Load statistics of one layer, or of several layers concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    /// Reachability over the global expert space.
    pub reachable: Vec<bool>,
    /// Tokens whose selection includes each expert.
    pub counts: Vec<usize>,
    /// Sum over tokens of each expert's masked-softmax probability.
    pub prob_sums: Vec<f64>,
    pub tokens: usize,
    pub top_k: usize,
}

impl LoadStats {
    /// Dispatch fraction `f_i = counts_i / (tokens * k)`.
    pub fn dispatch(&self) -> Vec<f64> {
        let denom = (self.tokens * self.top_k) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }

    /// Mean router probability `P_i`.
    pub fn mean_probs(&self) -> Vec<f64> {
        let n = self.tokens as f64;
        self.prob_sums.iter().map(|s| s / n).collect()
    }

    pub fn num_reachable(&self) -> usize {
        self.reachable.iter().filter(|&&r| r).count()
    }

    /// Pools the tokens of several layers into one set of statistics.
    pub fn concat(parts: &[&LoadStats]) -> Result<LoadStats> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let width = first.counts.len();
        let mut out = LoadStats {
            reachable: vec![false; width],
            counts: vec![0; width],
            prob_sums: vec![0.0; width],
            tokens: 0,
            top_k: first.top_k,
        };
        for part in parts {
            if part.counts.len() != width || part.top_k != first.top_k {
                return Err(Error::DimensionMismatch("concatenating incompatible stats".into()));
            }
            for i in 0..width {
                out.reachable[i] |= part.reachable[i];
                out.counts[i] += part.counts[i];
                out.prob_sums[i] += part.prob_sums[i];
            }
            out.tokens += part.tokens;
        }
        Ok(out)
    }
}

/// Counts selections and sums masked-softmax probabilities for one layer.
pub fn accumulate_stats(
    selections: &[Selection],
    probs: &[Vec<f64>],
    map: &ConnectivityMap,
    layer: usize,
) -> Result<LoadStats> {
    if selections.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if selections.len() != probs.len() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} selections for {} probability rows",
            selections.len(),
            probs.len()
        )));
    }
    let width = map.num_experts();
    let top_k = selections[0].expert_ids.len();
    let mut stats = LoadStats {
        reachable: map.mask(layer),
        counts: vec![0; width],
        prob_sums: vec![0.0; width],
        tokens: selections.len(),
        top_k,
    };
    for (sel, p) in selections.iter().zip(probs) {
        if sel.expert_ids.len() != top_k || p.len() != width {
            return Err(Error::DimensionMismatch("ragged routing batch".into()));
        }
        for &id in &sel.expert_ids {
            stats.counts[id] += 1;
        }
        for (acc, &pi) in stats.prob_sums.iter_mut().zip(p) {
            *acc += pi;
        }
    }
    Ok(stats)
}

/// Switch load-balancing loss `n * sum_i f_i P_i` over the `n` reachable experts.
pub fn standard_lbl(stats: &LoadStats) -> f64 {
    let n = stats.num_reachable() as f64;
    let f = stats.dispatch();
    let p = stats.mean_probs();
    n * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Weights of the local and universal branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaConfig {
    pub alpha_loc: f64,
    pub alpha_u: f64,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self { alpha_loc: 1.0, alpha_u: 0.5 }
    }
}

/// Rescales `base` so the concatenated loss of a group of `group_layers`
/// layers equals the single-layer loss under a uniform router.
///
/// Concatenating `G` layers counts every token `G` times against a per-layer
/// normalization, which multiplies the uniform-router loss by `G`; the
/// correction divides it back out. With `k`-normalized dispatch fractions the
/// uniform value depends on neither `top_k` nor the number of shared experts,
/// so those only need to be valid.
pub fn calibrate_alphas(
    group_layers: usize,
    shared_experts: usize,
    top_k: usize,
    base: AlphaConfig,
) -> Result<AlphaConfig> {
    if group_layers == 0 || shared_experts == 0 || top_k == 0 {
        return Err(Error::InvalidConfig("calibration counts must be at least 1".into()));
    }
    let scale = 1.0 / group_layers as f64;
    Ok(AlphaConfig { alpha_loc: base.alpha_loc * scale, alpha_u: base.alpha_u * scale })
}

/// Switch-style loss of layers sharing one reachable set, estimated by
/// concatenating their tokens: `n * sum_i (counts_i / (N k)) (prob_sums_i / (G N))`
/// with `N` tokens per layer. A uniform router gives `G`.
pub fn concatenated_switch_loss(layers: &[&LoadStats]) -> Result<f64> {
    let first = layers.first().ok_or(Error::EmptyBatch)?;
    if layers.iter().any(|s| s.reachable != first.reachable || s.tokens != first.tokens) {
        return Err(Error::InvalidConfig(
            "concatenated loss needs layers with one reachable set and token count".into(),
        ));
    }
    let group = LoadStats::concat(layers)?;
    let g = layers.len() as f64;
    let per_layer_tokens = first.tokens as f64;
    let n = first.num_reachable() as f64;
    let k = first.top_k as f64;
    Ok(n * group
        .counts
        .iter()
        .zip(&group.prob_sums)
        .map(|(&c, &s)| (c as f64 / (per_layer_tokens * k)) * (s / (g * per_layer_tokens)))
        .sum::<f64>())
}

/// The two branches of the connectivity-normalized balance loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UelbTerms {
    pub local: f64,
    pub universal: f64,
}

impl UelbTerms {
    pub fn total(&self) -> f64 {
        self.local + self.universal
    }
}

fn check_layers(stats: &[LoadStats], map: &ConnectivityMap) -> Result<()> {
    if stats.len() != map.num_layers() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} layer stats for {} layers",
            stats.len(),
            map.num_layers()
        )));
    }
    Ok(())
}

/// Per-layer form of the balance loss:
///
/// ```text
/// alpha_loc * sum_l sum_{i local to l} f_i P_i
///   + alpha_u * sum_j (1 / c_j) * sum_{l reaching j} f_j^(l) P_j^(l)
/// ```
///
/// Universal experts no layer reaches contribute nothing.
pub fn uelb_terms(stats: &[LoadStats], map: &ConnectivityMap, alphas: AlphaConfig) -> Result<UelbTerms> {
    check_layers(stats, map)?;
    let degrees = exposure_degrees(map);
    let mut local = 0.0;
    let mut per_expert = vec![0.0; map.num_universal()];
    for (layer, s) in stats.iter().enumerate() {
        let (f, p) = (s.dispatch(), s.mean_probs());
        for id in map.local_block(layer) {
            local += f[id] * p[id];
        }
        for &pos in map.universal_window(layer) {
            let id = map.universal_id(pos);
            per_expert[pos] += f[id] * p[id];
        }
    }
    let universal = per_expert
        .iter()
        .zip(&degrees)
        .filter(|(_, &c)| c > 0)
        .map(|(v, &c)| v / c as f64)
        .sum::<f64>();
    Ok(UelbTerms { local: alphas.alpha_loc * local, universal: alphas.alpha_u * universal })
}

pub fn uelb_loss(stats: &[LoadStats], map: &ConnectivityMap, alphas: AlphaConfig) -> Result<f64> {
    Ok(uelb_terms(stats, map, alphas)?.total())
}

/// `sum_l f_j^(l) P_j^(l)` for every universal expert: the cross-layer
/// aggregate a layer-agnostic balance loss sees, without the `1 / c_j`
/// normalization.
pub fn universal_cross_layer_sums(stats: &[LoadStats], map: &ConnectivityMap) -> Result<Vec<f64>> {
    check_layers(stats, map)?;
    let mut out = vec![0.0; map.num_universal()];
    for (layer, s) in stats.iter().enumerate() {
        let (f, p) = (s.dispatch(), s.mean_probs());
        for &pos in map.universal_window(layer) {
            let id = map.universal_id(pos);
            out[pos] += f[id] * p[id];
        }
    }
    Ok(out)
}

/// Max/Mean skew of dispatch fractions over the reachable set.
pub fn max_mean_ratio(stats: &LoadStats) -> Result<f64> {
    let f = stats.dispatch();
    let reach: Vec<f64> = f
        .iter()
        .zip(&stats.reachable)
        .filter(|(_, &r)| r)
        .map(|(&v, _)| v)
        .collect();
    if reach.is_empty() || stats.tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    let mean = reach.iter().sum::<f64>() / reach.len() as f64;
    let max = reach.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max / mean)
}

/// Skew of a connectivity group: the mean of its layers' Max/Mean ratios,
/// each taken over that layer's own reachable set.
pub fn group_max_mean_ratio(stats: &[LoadStats], layers: Range<usize>) -> Result<f64> {
    let n = layers.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for l in layers {
        acc += max_mean_ratio(&stats[l])?;
    }
    Ok(acc / n as f64)
}

/// Auxiliary objective used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Switch loss on cross-layer aggregated dispatch: every expert is
    /// charged with its usage summed over all layers that reach it. Reduces
    /// to the mean per-layer Switch loss when no expert is shared.
    StandardLbl,
    /// Connectivity-normalized loss with group-wise estimation of the
    /// universal branch.
    #[default]
    Uelb,
}

/// Objective value and its gradient with respect to every layer's mean
/// router probabilities (`grad[l][i] = d loss / d P_i^(l)`).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLoss {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

/// Training-time auxiliary loss, Switch-scaled by each layer's reachable
/// count and averaged over layers.
///
/// `StandardLbl`: `(1/L) sum_l n_l sum_{i in A_l} F_i P_i^(l)` with
/// `F_i = sum_l f_i^(l)`.
///
/// `Uelb`: `(1/L) [alpha_loc sum_l n_l sum_{i local} f_i^(l) P_i^(l)
///   + alpha_u sum_j (1/c_j) sum_{groups g reaching j} n_g G_g f_j^g P_j^g]`,
/// where `f^g`, `P^g` pool the tokens of the group's layers, so
/// `G_g f_j^g P_j^g` estimates `sum_{l in g} f_j^(l) P_j^(l)` without the
/// `1/G` shrinkage of a plain pooled loss.
pub fn aux_objective(
    stats: &[LoadStats],
    map: &ConnectivityMap,
    alphas: AlphaConfig,
    objective: Objective,
) -> Result<AuxLoss> {
    check_layers(stats, map)?;
    let num_layers = map.num_layers();
    let width = map.num_experts();
    let inv_l = 1.0 / num_layers as f64;
    let mut grad = vec![vec![0.0; width]; num_layers];
    let mut value = 0.0;
    match objective {
        Objective::StandardLbl => {
            let mut total_f = vec![0.0; width];
            for s in stats {
                for (acc, v) in total_f.iter_mut().zip(s.dispatch()) {
                    *acc += v;
                }
            }
            for (layer, s) in stats.iter().enumerate() {
                let n = map.reachable_count(layer) as f64;
                let p = s.mean_probs();
                for id in map.allow_list(layer) {
                    value += inv_l * n * total_f[id] * p[id];
                    grad[layer][id] = inv_l * n * total_f[id];
                }
            }
        }
        Objective::Uelb => {
            for (layer, s) in stats.iter().enumerate() {
                let n = map.reachable_count(layer) as f64;
                let (f, p) = (s.dispatch(), s.mean_probs());
                for id in map.local_block(layer) {
                    value += inv_l * alphas.alpha_loc * n * f[id] * p[id];
                    grad[layer][id] = inv_l * alphas.alpha_loc * n * f[id];
                }
            }
            let degrees = exposure_degrees(map);
            for group in map.groups() {
                // one pooled estimate per distinct universal window in the group
                let mut windows: Vec<Vec<usize>> = Vec::new();
                for l in group.clone() {
                    let w = map.universal_window(l).to_vec();
                    if !windows.contains(&w) {
                        windows.push(w);
                    }
                }
                for window in windows {
                    let members: Vec<usize> =
                        group.clone().filter(|&l| map.universal_window(l) == window.as_slice()).collect();
                    let parts: Vec<&LoadStats> = members.iter().map(|&l| &stats[l]).collect();
                    let pooled = LoadStats::concat(&parts)?;
                    let (f, p) = (pooled.dispatch(), pooled.mean_probs());
                    let g = members.len() as f64;
                    let n = map.reachable_count(members[0]) as f64;
                    for &pos in &window {
                        let id = map.universal_id(pos);
                        let scale = inv_l * alphas.alpha_u * n / degrees[pos] as f64;
                        value += scale * g * f[id] * p[id];
                        // P^g is the mean of the members' P^(l)
                        for &l in &members {
                            grad[l][id] = scale * f[id];
                        }
                    }
                }
            }
        }
    }
    Ok(AuxLoss { value, grad })
}
