//! Connectivity between layers and the global expert space.
//!
//! Global expert IDs are laid out as one contiguous local block per layer
//! (layer 0 first) followed by the universal block of `num_universal` experts.
//! Universal experts sit on a ring; a layer reaches a window of `window`
//! consecutive ring positions. Layers are 0-indexed in code, so the group of
//! layer `l` is `l / group_size` (the same as `floor((l' - 1) / G)` for the
//! 1-indexed layer `l' = l + 1`).

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use crate::numerics::{binomial, log_binomial};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopologyConfig {
    pub num_layers: usize,
    pub group_size: usize,
    pub num_universal: usize,
    pub window: usize,
    pub stride: usize,
    pub locals_per_layer: usize,
    pub top_k: usize,
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.group_size == 0 || self.group_size > self.num_layers {
            return bad(alloc::format!(
                "group_size {} must lie in [1, {}]",
                self.group_size, self.num_layers
            ));
        }
        if self.window > self.num_universal {
            return Err(Error::WindowExceedsRing { window: self.window, ring: self.num_universal });
        }
        if self.num_universal > 0 && self.window == 0 {
            return bad("window must be at least 1 when the universal pool is non-empty".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.top_k > self.window + self.locals_per_layer {
            return bad(alloc::format!(
                "top_k {} exceeds the {} experts reachable per layer",
                self.top_k,
                self.window + self.locals_per_layer
            ));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.num_layers.div_ceil(self.group_size)
    }

    pub fn num_experts(&self) -> usize {
        self.num_layers * self.locals_per_layer + self.num_universal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopologyKind {
    #[default]
    Staggered,
    /// The window moves by the stride at every layer instead of every group.
    ForwardWindow,
    /// Staggered, but the window walks the ring downwards.
    ReverseOrder,
    /// The first and last groups share one window; middle groups share the
    /// window shifted by the stride.
    Sandwich,
    /// Every layer reaches the whole universal pool.
    AllToAll,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 5] = [
        TopologyKind::Staggered,
        TopologyKind::ForwardWindow,
        TopologyKind::ReverseOrder,
        TopologyKind::Sandwich,
        TopologyKind::AllToAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Staggered => "staggered",
            TopologyKind::ForwardWindow => "forward_window",
            TopologyKind::ReverseOrder => "reverse_order",
            TopologyKind::Sandwich => "sandwich",
            TopologyKind::AllToAll => "all_to_all",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TopologyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown topology variant `{s}`")))
    }
}

/// Per-layer reachability over global expert IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMap {
    config: TopologyConfig,
    kind: TopologyKind,
    /// Universal ring positions reachable at each layer, in window order.
    universal: Vec<Vec<usize>>,
    /// Fast-weight state slot of each layer; layers with the same universal
    /// allow-list share a slot.
    state_of_layer: Vec<usize>,
    state_lists: Vec<Vec<usize>>,
}

impl ConnectivityMap {
    fn from_windows(config: TopologyConfig, kind: TopologyKind, universal: Vec<Vec<usize>>) -> Self {
        let mut state_lists: Vec<Vec<usize>> = Vec::new();
        let state_of_layer = universal
            .iter()
            .map(|list| match state_lists.iter().position(|s| s == list) {
                Some(i) => i,
                None => {
                    state_lists.push(list.clone());
                    state_lists.len() - 1
                }
            })
            .collect();
        Self { config, kind, universal, state_of_layer, state_lists }
    }

    pub fn config(&self) -> &TopologyConfig {
        &self.config
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn num_universal(&self) -> usize {
        self.config.num_universal
    }

    pub fn locals_per_layer(&self) -> usize {
        self.config.locals_per_layer
    }

    pub fn top_k(&self) -> usize {
        self.config.top_k
    }

    /// Size of the global expert ID space.
    pub fn num_experts(&self) -> usize {
        self.config.num_experts()
    }

    pub fn group_of(&self, layer: usize) -> usize {
        layer / self.config.group_size
    }

    /// Layer ranges of the connectivity groups.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let g = self.config.group_size;
        (0..self.config.num_groups())
            .map(|i| i * g..((i + 1) * g).min(self.config.num_layers))
            .collect()
    }

    pub fn local_block(&self, layer: usize) -> Range<usize> {
        let n = self.config.locals_per_layer;
        layer * n..(layer + 1) * n
    }

    pub fn universal_offset(&self) -> usize {
        self.config.num_layers * self.config.locals_per_layer
    }

    pub fn universal_id(&self, ring_pos: usize) -> usize {
        self.universal_offset() + ring_pos
    }

    pub fn is_universal(&self, id: usize) -> bool {
        id >= self.universal_offset()
    }

    /// Ring position of a universal expert ID.
    pub fn ring_pos(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.universal_offset()).filter(|&p| p < self.config.num_universal)
    }

    /// Layer owning a local expert ID.
    pub fn owner_layer(&self, id: usize) -> Option<usize> {
        match self.config.locals_per_layer {
            0 => None,
            n if id < self.universal_offset() => Some(id / n),
            _ => None,
        }
    }

    /// Universal ring positions reachable at `layer`, in window order.
    pub fn universal_window(&self, layer: usize) -> &[usize] {
        &self.universal[layer]
    }

    /// Universal global IDs reachable at `layer`, in window order.
    pub fn universal_ids(&self, layer: usize) -> Vec<usize> {
        self.universal[layer].iter().map(|&p| self.universal_id(p)).collect()
    }

    /// Global IDs reachable at `layer`: the local block, then the universal window.
    pub fn allow_list(&self, layer: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.local_block(layer).collect();
        out.extend(self.universal_ids(layer));
        out
    }

    pub fn reachable_count(&self, layer: usize) -> usize {
        self.config.locals_per_layer + self.universal[layer].len()
    }

    pub fn mask(&self, layer: usize) -> Vec<bool> {
        let mut mask = alloc::vec![false; self.num_experts()];
        for id in self.allow_list(layer) {
            mask[id] = true;
        }
        mask
    }

    pub fn is_reachable(&self, layer: usize, id: usize) -> bool {
        if self.local_block(layer).contains(&id) {
            return true;
        }
        self.ring_pos(id).is_some_and(|p| self.universal[layer].contains(&p))
    }

    pub fn num_states(&self) -> usize {
        self.state_lists.len()
    }

    pub fn state_of(&self, layer: usize) -> usize {
        self.state_of_layer[layer]
    }

    /// Universal ring positions tracked by a fast-weight state slot.
    pub fn state_window(&self, state: usize) -> &[usize] {
        &self.state_lists[state]
    }

    pub fn layers_of_state(&self, state: usize) -> Vec<usize> {
        (0..self.num_layers()).filter(|&l| self.state_of_layer[l] == state).collect()
    }

    /// Dense 0/1 reachability, one row per layer, one column per global ID.
    pub fn dense(&self) -> Vec<Vec<u8>> {
        (0..self.num_layers())
            .map(|l| self.mask(l).into_iter().map(u8::from).collect())
            .collect()
    }
}

fn ring_window(start: usize, len: usize, ring: usize) -> Vec<usize> {
    (0..len).map(|i| (start + i) % ring).collect()
}

/// Staggered rotational topology: group `g` reaches ring positions
/// `(g * stride + i) mod N_u` for `i < window`.
pub fn build_staggered(cfg: &TopologyConfig) -> Result<ConnectivityMap> {
    build_variant(TopologyKind::Staggered, cfg)
}

pub fn build_variant(kind: TopologyKind, cfg: &TopologyConfig) -> Result<ConnectivityMap> {
    cfg.validate()?;
    let n_u = cfg.num_universal;
    let (w, s) = (cfg.window, cfg.stride);
    let num_groups = cfg.num_groups();
    let start_for = |layer: usize| -> usize {
        if n_u == 0 {
            return 0;
        }
        let g = layer / cfg.group_size;
        match kind {
            TopologyKind::Staggered => (g * s) % n_u,
            TopologyKind::ForwardWindow => (layer * s) % n_u,
            TopologyKind::ReverseOrder => (n_u - (g * s) % n_u) % n_u,
            TopologyKind::Sandwich => {
                if g == 0 || g + 1 == num_groups {
                    0
                } else {
                    s % n_u
                }
            }
            TopologyKind::AllToAll => 0,
        }
    };
    let universal = (0..cfg.num_layers)
        .map(|layer| {
            let len = if kind == TopologyKind::AllToAll { n_u } else { w };
            if n_u == 0 {
                Vec::new()
            } else {
                ring_window(start_for(layer), len, n_u)
            }
        })
        .collect();
    Ok(ConnectivityMap::from_windows(*cfg, kind, universal))
}

/// Exposure degree `c_j`: number of layers reaching universal expert `j`.
pub fn exposure_degrees(map: &ConnectivityMap) -> Vec<usize> {
    let mut c = alloc::vec![0usize; map.num_universal()];
    for layer in 0..map.num_layers() {
        for &p in map.universal_window(layer) {
            c[p] += 1;
        }
    }
    c
}

fn check_path_k(map: &ConnectivityMap, k: usize) -> Result<()> {
    for layer in 0..map.num_layers() {
        let w = map.universal_window(layer).len();
        if k > w {
            return Err(Error::InsufficientReachable { requested: k, available: w });
        }
    }
    Ok(())
}

/// Natural log of the number of depth-L universal expert paths, `sum_l ln C(W_l, k)`.
pub fn path_count_log(map: &ConnectivityMap, k: usize) -> Result<f64> {
    check_path_k(map, k)?;
    (0..map.num_layers())
        .map(|l| log_binomial(map.universal_window(l).len(), k))
        .sum()
}

/// Exact path count `prod_l C(W_l, k)`, or `None` when it does not fit in u64.
pub fn path_count_exact(map: &ConnectivityMap, k: usize) -> Result<Option<u64>> {
    check_path_k(map, k)?;
    let mut acc: u64 = 1;
    for l in 0..map.num_layers() {
        let Some(c) = binomial(map.universal_window(l).len(), k) else {
            return Ok(None);
        };
        match acc.checked_mul(c) {
            Some(v) => acc = v,
            None => return Ok(None),
        }
    }
    Ok(Some(acc))
}

/// Model dimensions that enter the parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub d_key: usize,
}

impl ModelDims {
    /// Up and down projection of one two-matrix expert.
    pub fn per_expert(&self) -> u64 {
        2 * (self.d_model * self.d_ffn) as u64
    }

    /// Embedding, readout, and per-layer routers (`W_g`, `b_g` over the global
    /// space plus the key projection).
    pub fn non_expert(&self, topo: &TopologyConfig) -> u64 {
        let (d, v) = (self.d_model as u64, self.vocab as u64);
        let router = (d + 1) * topo.num_experts() as u64 + d * self.d_key as u64;
        2 * v * d + topo.num_layers as u64 * router
    }
}

/// Activated, total physical and virtual parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterBudget {
    pub activated: u64,
    pub total_physical: u64,
    pub virtual_params: u64,
}

/// Parameter budgets for a model laid out on `map`.
///
/// * activated: non-expert parameters plus the distinct expert parameters one
///   token can touch, `min(L * k, L * locals + N_u)` experts.
/// * total physical: every stored expert once.
/// * virtual: universal experts counted once per exposed layer (and once if
///   never exposed), local experts once.
pub fn parameter_budget(dims: &ModelDims, map: &ConnectivityMap) -> ParameterBudget {
    let cfg = map.config();
    let base = dims.non_expert(cfg);
    let per = dims.per_expert();
    let locals = (cfg.num_layers * cfg.locals_per_layer) as u64;
    let physical = locals + cfg.num_universal as u64;
    let activated = ((cfg.num_layers * cfg.top_k) as u64).min(physical);
    let exposures: u64 = exposure_degrees(map).iter().map(|&c| c.max(1) as u64).sum();
    ParameterBudget {
        activated: base + activated * per,
        total_physical: base + physical * per,
        virtual_params: base + (locals + exposures) * per,
    }
}

impl ParameterBudget {
    pub fn describe(&self) -> String {
        alloc::format!(
            "act={} tp={} vp={}",
            self.activated, self.total_physical, self.virtual_params
        )
        .to_string()
    }
}
