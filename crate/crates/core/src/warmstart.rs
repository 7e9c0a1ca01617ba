//! Checkpoints, MoE to universal-expert conversion, and expert-weight CKA.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::model::{forward, MoueModel, ModelConfig, WarmStartInfo};
use crate::numerics::{Matrix, Seed};
use crate::routing::{BiasSchedule, TargetKind};
use crate::topology::{ModelDims, TopologyConfig, TopologyKind};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOUE";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn metadata(model: &MoueModel) -> String {
    let c = &model.config;
    let t = &c.topology;
    let mut lines: Vec<(String, String)> = vec![
        ("vocab".into(), c.dims.vocab.to_string()),
        ("d_model".into(), c.dims.d_model.to_string()),
        ("d_ffn".into(), c.dims.d_ffn.to_string()),
        ("d_key".into(), c.dims.d_key.to_string()),
        ("num_layers".into(), t.num_layers.to_string()),
        ("group_size".into(), t.group_size.to_string()),
        ("num_universal".into(), t.num_universal.to_string()),
        ("window".into(), t.window.to_string()),
        ("stride".into(), t.stride.to_string()),
        ("locals_per_layer".into(), t.locals_per_layer.to_string()),
        ("top_k".into(), t.top_k.to_string()),
        ("variant".into(), c.variant.as_str().into()),
        ("router_beta".into(), format!("{:?}", c.router_beta)),
        ("fast_weight_eta".into(), format!("{:?}", c.fast_weight_eta)),
        ("eta_depth_decay".into(), c.eta_depth_decay.to_string()),
        (
            "target".into(),
            match c.target {
                TargetKind::Soft => "soft".into(),
                TargetKind::Hard => "hard".into(),
            },
        ),
        ("converted".into(), model.warm_start.is_some().to_string()),
    ];
    if let Some(ws) = &model.warm_start {
        if let BiasSchedule::Suppression { beta0, t_end } = ws.suppression {
            lines.push(("suppression_beta0".into(), format!("{beta0:?}")));
            lines.push(("suppression_t_end".into(), format!("{t_end:?}")));
        }
        lines.push(("warmstart_progress".into(), format!("{:?}", ws.progress)));
        let sources: Vec<String> = ws.sources.iter().map(|(l, e)| format!("{l}:{e}")).collect();
        lines.push(("ue_sources".into(), sources.join(",")));
    }
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(&k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

fn named_tensors(model: &MoueModel) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> =
        model.params.names().into_iter().zip(model.params.tensors()).collect();
    for (s, state) in model.fast.states.iter().enumerate() {
        out.push((format!("fast.{s}.u"), &state.u));
    }
    out
}

/// Serializes a model. All integers and floats are little-endian.
pub fn save_checkpoint(model: &MoueModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = metadata(model);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let tensors = named_tensors(model);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        core::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::MalformedCheckpoint("invalid UTF-8".into()))
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedCheckpoint(msg.into())
}

struct Meta<'a>(BTreeMap<&'a str, &'a str>);

impl<'a> Meta<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| malformed(format!("bad line {line:?}")))?;
            if map.insert(k, v).is_some() {
                return Err(malformed(format!("duplicate key {k}")));
            }
        }
        Ok(Self(map))
    }

    fn str(&self, key: &str) -> Result<&'a str> {
        self.0.get(key).copied().ok_or_else(|| malformed(format!("missing key {key}")))
    }

    fn get<T: core::str::FromStr>(&self, key: &str) -> Result<T> {
        self.str(key)?.parse().map_err(|_| malformed(format!("bad value for {key}")))
    }
}

fn parse_sources(text: &str) -> Result<Vec<(usize, usize)>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|pair| {
            let (l, e) = pair.split_once(':').ok_or_else(|| malformed("bad ue_sources"))?;
            Ok((l.parse().map_err(|_| malformed("bad ue_sources"))?, e.parse().map_err(|_| malformed("bad ue_sources"))?))
        })
        .collect()
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint(bytes: &[u8]) -> Result<MoueModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let meta_len = r.u32()? as usize;
    let meta = Meta::parse(r.utf8(meta_len)?)?;
    let target = match meta.str("target")? {
        "soft" => TargetKind::Soft,
        "hard" => TargetKind::Hard,
        other => return Err(malformed(format!("unknown target {other}"))),
    };
    let config = ModelConfig {
        dims: ModelDims {
            vocab: meta.get("vocab")?,
            d_model: meta.get("d_model")?,
            d_ffn: meta.get("d_ffn")?,
            d_key: meta.get("d_key")?,
        },
        topology: TopologyConfig {
            num_layers: meta.get("num_layers")?,
            group_size: meta.get("group_size")?,
            num_universal: meta.get("num_universal")?,
            window: meta.get("window")?,
            stride: meta.get("stride")?,
            locals_per_layer: meta.get("locals_per_layer")?,
            top_k: meta.get("top_k")?,
        },
        variant: meta.get::<TopologyKind>("variant")?,
        router_beta: meta.get("router_beta")?,
        fast_weight_eta: meta.get("fast_weight_eta")?,
        eta_depth_decay: meta.get("eta_depth_decay")?,
        target,
    };
    let mut model = MoueModel::new(config, Seed(0))?;
    if meta.get::<bool>("converted")? {
        model.warm_start = Some(WarmStartInfo {
            sources: parse_sources(meta.str("ue_sources")?)?,
            suppression: BiasSchedule::Suppression {
                beta0: meta.get("suppression_beta0")?,
                t_end: meta.get("suppression_t_end")?,
            },
            progress: meta.get("warmstart_progress")?,
        });
    }

    let expected: Vec<(String, (usize, usize))> =
        named_tensors(&model).into_iter().map(|(n, m)| (n, m.shape())).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(malformed(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut loaded: BTreeMap<String, Matrix> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.utf8(name_len)?.to_string();
        if r.take(1)?[0] != DTYPE_F64 {
            return Err(malformed(format!("unsupported dtype for {name}")));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| malformed("dimension overflow"))?);
        }
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [a, b] => (a, b),
            _ => return Err(malformed(format!("unsupported rank {rank} for {name}"))),
        };
        let len = rows.checked_mul(cols).ok_or_else(|| malformed("dimension overflow"))?;
        let raw = r.take(len.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if loaded.insert(name.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
            return Err(malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }

    let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
        let m = loaded.remove(name).ok_or_else(|| malformed(format!("missing tensor {name}")))?;
        if m.shape() != shape {
            return Err(malformed(format!("shape mismatch for {name}")));
        }
        Ok(m)
    };
    let mut values = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        values.push(take(name, *shape)?);
    }
    let n_params = model.params.names().len();
    let mut values = values.into_iter();
    for slot in model.params.tensors_mut().into_iter().take(n_params) {
        *slot = values.next().unwrap();
    }
    for state in &mut model.fast.states {
        state.u = values.next().unwrap();
    }
    Ok(model)
}

/// Per layer, the fraction of routed slots each reachable expert received.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    /// `rates[layer][j]` for the `j`-th entry of the layer's allow-list.
    pub rates: Vec<Vec<f64>>,
}

/// Routes the calibration batch and records dispatch fractions.
pub fn collect_activation_profile(model: &MoueModel, batch: &[Vec<usize>]) -> Result<ActivationProfile> {
    let schedules = model.schedules_with(&[]);
    let pass = forward(model, batch, &schedules, 0.0)?;
    let rates = pass
        .stats
        .iter()
        .enumerate()
        .map(|(layer, s)| {
            let dispatch = s.dispatch();
            model.map.allow_list(layer).into_iter().map(|id| dispatch[id]).collect()
        })
        .collect();
    Ok(ActivationProfile { rates })
}

/// Middle third of the layer stack.
pub fn default_band(num_layers: usize) -> Range<usize> {
    num_layers / 3..(2 * num_layers).div_ceil(3)
}

/// Highest-rate experts inside `band`, ties broken by `(layer, expert)`.
/// The result is in ring order: entry `p` initializes ring position `p`.
pub fn select_universal_experts(
    profile: &ActivationProfile,
    n_u: usize,
    band: Range<usize>,
) -> Result<Vec<(usize, usize)>> {
    let band = band.start..band.end.min(profile.rates.len());
    if band.is_empty() {
        return Err(Error::EmptyBand);
    }
    let mut candidates: Vec<(f64, usize, usize)> = band
        .flat_map(|l| profile.rates[l].iter().enumerate().map(move |(e, &r)| (r, l, e)))
        .collect();
    if n_u > candidates.len() {
        return Err(Error::InsufficientReachable { requested: n_u, available: candidates.len() });
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(candidates.into_iter().take(n_u).map(|(_, l, e)| (l, e)).collect())
}

/// Target shape and schedule of a conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConversionConfig {
    pub topology: TopologyConfig,
    pub variant: TopologyKind,
    pub router_beta: f64,
    pub fast_weight_eta: f64,
    /// Scale of the uniform noise added to copied router columns.
    pub noise: f64,
    pub beta0: f64,
    pub t_end: f64,
    pub seed: Seed,
}

impl ConversionConfig {
    pub fn new(topology: TopologyConfig, seed: Seed) -> Self {
        Self {
            topology,
            variant: TopologyKind::Staggered,
            router_beta: 0.1,
            fast_weight_eta: 0.1,
            noise: 1e-3,
            beta0: 1e4,
            t_end: 0.5,
            seed,
        }
    }
}

/// Builds a universal-expert model from a layer-local MoE.
///
/// Local experts, embeddings, readout, and every local router column and bias
/// are copied unchanged. Ring position `p` receives a clone of `selection[p]`
/// (the source stays local), and every layer's router column for it starts
/// from the source layer's column plus seeded noise. Fast-weight state starts
/// at zero and universal logits are suppressed by an annealed bias.
pub fn convert_to_moue(
    source: &MoueModel,
    selection: &[(usize, usize)],
    conv: &ConversionConfig,
) -> Result<MoueModel> {
    if source.warm_start.is_some() {
        return Err(Error::AlreadyConverted);
    }
    let src = source.map.config();
    if src.num_universal != 0 {
        return Err(Error::InvalidConfig("source must be a layer-local MoE".into()));
    }
    let topo = conv.topology;
    if topo.num_layers != src.num_layers
        || topo.locals_per_layer != src.locals_per_layer
        || topo.top_k != src.top_k
    {
        return Err(Error::DimensionMismatch(
            "target topology must keep layers, locals per layer and top-k".into(),
        ));
    }
    if selection.len() != topo.num_universal {
        return Err(Error::DimensionMismatch(format!(
            "selection has {} experts for a pool of {}",
            selection.len(),
            topo.num_universal
        )));
    }
    for &(l, e) in selection {
        if l >= src.num_layers || e >= src.locals_per_layer {
            return Err(Error::InvalidConfig(format!("source expert ({l}, {e}) does not exist")));
        }
    }
    let config = ModelConfig {
        topology: topo,
        variant: conv.variant,
        router_beta: conv.router_beta,
        fast_weight_eta: conv.fast_weight_eta,
        ..source.config
    };
    let mut model = MoueModel::new(config, conv.seed)?;
    model.params.embedding = source.params.embedding.clone();
    model.params.readout = source.params.readout.clone();
    let n_local = topo.num_layers * topo.locals_per_layer;
    model.params.experts[..n_local].clone_from_slice(&source.params.experts[..n_local]);
    let local_id = |l: usize, e: usize| source.map.local_block(l).start + e;
    for (p, &(l, e)) in selection.iter().enumerate() {
        model.params.experts[model.map.universal_id(p)] = source.params.experts[local_id(l, e)].clone();
    }

    let mut rng = conv.seed.derive(5).rng();
    for layer in 0..topo.num_layers {
        let src_router = &source.params.routers[layer];
        let router = &mut model.params.routers[layer];
        for id in 0..n_local {
            for r in 0..router.d_model() {
                router.w_gate.set(r, id, src_router.w_gate.get(r, id));
            }
            router.b_gate.set(0, id, src_router.b_gate.get(0, id));
        }
        for (p, &(l, e)) in selection.iter().enumerate() {
            let uid = model.map.universal_id(p);
            let column = &source.params.routers[l];
            let sid = local_id(l, e);
            for r in 0..router.d_model() {
                let jitter = Matrix::uniform(1, 1, conv.noise, &mut rng).get(0, 0);
                router.w_gate.set(r, uid, column.w_gate.get(r, sid) + jitter);
            }
            router.b_gate.set(0, uid, column.b_gate.get(0, sid));
        }
    }
    model.warm_start = Some(WarmStartInfo {
        sources: selection.to_vec(),
        suppression: BiasSchedule::Suppression { beta0: conv.beta0, t_end: conv.t_end },
        progress: 0.0,
    });
    Ok(model)
}

/// `[up | down^T]`, one row per model dimension.
fn expert_features(e: &crate::model::ExpertParams) -> Matrix {
    let (d, f) = e.up.shape();
    let mut x = Matrix::zeros(d, 2 * f);
    for r in 0..d {
        for c in 0..f {
            x.set(r, c, e.up.get(r, c));
            x.set(r, f + c, e.down.get(c, r));
        }
    }
    x
}

/// Linear CKA between two feature matrices with matching row counts, after
/// centering each column.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch("CKA inputs need equal row counts".into()));
    }
    let gram = |m: &Matrix| -> Result<Matrix> {
        let mut c = m.clone();
        for col in 0..c.cols() {
            let mean = c.column(col).iter().sum::<f64>() / c.rows() as f64;
            for row in 0..c.rows() {
                c.add_at(row, col, -mean);
            }
        }
        c.matmul(&c.transpose())
    };
    let (gx, gy) = (gram(x)?, gram(y)?);
    let cross: f64 = gx.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
    let norm = libm::sqrt(gx.frobenius_sq()) * libm::sqrt(gy.frobenius_sq());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateNorm);
    }
    Ok((cross / norm).clamp(0.0, 1.0))
}

/// Linear CKA between the weights of two experts.
pub fn cka_similarity(a: &crate::model::ExpertParams, b: &crate::model::ExpertParams) -> Result<f64> {
    if a.up.shape() != b.up.shape() || a.down.shape() != b.down.shape() {
        return Err(Error::DimensionMismatch("experts differ in shape".into()));
    }
    linear_cka(&expert_features(a), &expert_features(b))
}

/// Pairwise CKA over every expert of a model, indexed by global ID.
pub fn cka_matrix(model: &MoueModel) -> Result<Matrix> {
    let feats: Vec<Matrix> = model.params.experts.iter().map(expert_features).collect();
    let n = feats.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = linear_cka(&feats[i], &feats[j])?;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}
