//! `key=value` experiment configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use moue_core::balance::{AlphaConfig, Objective};
use moue_core::model::{ModelConfig, TrainConfig};
use moue_core::routing::{BiasSchedule, TargetKind};
use moue_core::topology::{ModelDims, TopologyConfig, TopologyKind};
use moue_core::Seed;

use crate::error::HarnessError;

/// Every recognized key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; every stream is derived from it"),
    ("output.dir", "out", "directory for reports and checkpoints"),
    ("topology.variant", "staggered", "staggered | forward_window | reverse_order | sandwich | all_to_all"),
    ("topology.num_layers", "10", "number of layers L"),
    ("topology.group_size", "5", "layers per connectivity group G"),
    ("topology.num_universal", "8", "universal pool size N_u"),
    ("topology.window", "4", "universal experts reachable per layer W"),
    ("topology.stride", "2", "window shift between adjacent groups s"),
    ("topology.locals_per_layer", "4", "layer-local experts per layer"),
    ("topology.top_k", "2", "experts activated per token k"),
    ("model.vocab", "32", "vocabulary size (at most 64)"),
    ("model.d_model", "16", "hidden width d"),
    ("model.d_ffn", "32", "expert hidden width"),
    ("model.d_key", "8", "router key width d_k"),
    ("train.steps", "2000", "optimizer steps"),
    ("train.batch", "8", "sequences per step"),
    ("train.seq_len", "16", "tokens per sequence"),
    ("train.lr", "0.05", "learning rate"),
    ("train.momentum", "0.9", "heavy-ball momentum, 0 disables"),
    ("train.aux_coef", "0.001", "weight of the auxiliary balance loss"),
    ("train.log_every", "10", "steps between skew_trace rows"),
    ("train.domains", "4", "Markov domains in the synthetic corpus"),
    ("balance.objective", "uelb", "uelb | standard_lbl"),
    ("balance.alpha_loc", "1.0", "local-branch balance weight"),
    ("balance.alpha_u", "0.5", "universal-branch balance weight"),
    ("balance.calibrate", "false", "divide both alphas by the group size"),
    ("router.beta", "0.1", "contextual pathway weight, 0 disables it"),
    ("router.eta", "0.1", "fast-weight learning rate"),
    ("router.eta_depth_decay", "false", "use eta / (1 + g) for group g"),
    ("router.target", "soft", "soft | hard fast-weight target"),
    ("schedule.warmup_b0", "0.75", "initial universal warmup bias"),
    ("schedule.warmup_r", "0.05", "fraction of training over which the warmup bias decays"),
    ("schedule.suppression_beta0", "10000", "initial suppression bias of a converted model"),
    ("schedule.suppression_t_end", "0.5", "fraction of training over which suppression decays"),
    ("warmstart.band_start", "", "first layer of the selection band (empty: middle third)"),
    ("warmstart.band_end", "", "end of the selection band, exclusive (empty: middle third)"),
    ("warmstart.noise", "0.001", "noise scale on copied router columns"),
    ("warmstart.calibration_batch", "32", "sequences routed to build the activation profile"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variant: TopologyKind,
    pub topology: TopologyConfig,
    pub dims: ModelDims,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub momentum: f64,
    pub aux_coef: f64,
    pub log_every: usize,
    pub domains: usize,
    pub objective: Objective,
    pub alphas: AlphaConfig,
    pub calibrate: bool,
    pub router_beta: f64,
    pub eta: f64,
    pub eta_depth_decay: bool,
    pub target: TargetKind,
    pub warmup_b0: f64,
    pub warmup_r: f64,
    pub suppression_beta0: f64,
    pub suppression_t_end: f64,
    pub band: Option<(usize, usize)>,
    pub noise: f64,
    pub calibration_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("invalid value {value:?} for {key}")))
}

impl ExperimentConfig {
    /// Parses config text. Unset keys take their defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut values: Vec<(&str, String)> =
            KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let slot = values
                .iter_mut()
                .find(|(k, _)| *k == key)
                .ok_or_else(|| HarnessError::Config(format!("unknown key {key}")))?;
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!("duplicate key {key}")));
            }
            slot.1 = value.to_string();
        }
        let get = |key: &str| -> &str {
            &values.iter().find(|(k, _)| *k == key).expect("known key").1
        };
        macro_rules! num {
            ($key:expr) => {
                parse_value($key, get($key))?
            };
        }
        let objective = match get("balance.objective") {
            "uelb" => Objective::Uelb,
            "standard_lbl" => Objective::StandardLbl,
            other => return Err(HarnessError::Config(format!("unknown objective {other}"))),
        };
        let target = match get("router.target") {
            "soft" => TargetKind::Soft,
            "hard" => TargetKind::Hard,
            other => return Err(HarnessError::Config(format!("unknown target {other}"))),
        };
        let band = match (get("warmstart.band_start"), get("warmstart.band_end")) {
            ("", "") => None,
            (a, b) => Some((parse_value("warmstart.band_start", a)?, parse_value("warmstart.band_end", b)?)),
        };
        let cfg = Self {
            seed: num!("seed"),
            output_dir: PathBuf::from(get("output.dir")),
            variant: TopologyKind::from_str(get("topology.variant"))
                .map_err(|e| HarnessError::Config(e.to_string()))?,
            topology: TopologyConfig {
                num_layers: num!("topology.num_layers"),
                group_size: num!("topology.group_size"),
                num_universal: num!("topology.num_universal"),
                window: num!("topology.window"),
                stride: num!("topology.stride"),
                locals_per_layer: num!("topology.locals_per_layer"),
                top_k: num!("topology.top_k"),
            },
            dims: ModelDims {
                vocab: num!("model.vocab"),
                d_model: num!("model.d_model"),
                d_ffn: num!("model.d_ffn"),
                d_key: num!("model.d_key"),
            },
            steps: num!("train.steps"),
            batch: num!("train.batch"),
            seq_len: num!("train.seq_len"),
            lr: num!("train.lr"),
            momentum: num!("train.momentum"),
            aux_coef: num!("train.aux_coef"),
            log_every: num!("train.log_every"),
            domains: num!("train.domains"),
            objective,
            alphas: AlphaConfig { alpha_loc: num!("balance.alpha_loc"), alpha_u: num!("balance.alpha_u") },
            calibrate: num!("balance.calibrate"),
            router_beta: num!("router.beta"),
            eta: num!("router.eta"),
            eta_depth_decay: num!("router.eta_depth_decay"),
            target,
            warmup_b0: num!("schedule.warmup_b0"),
            warmup_r: num!("schedule.warmup_r"),
            suppression_beta0: num!("schedule.suppression_beta0"),
            suppression_t_end: num!("schedule.suppression_t_end"),
            band,
            noise: num!("warmstart.noise"),
            calibration_batch: num!("warmstart.calibration_batch"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.dims.vocab == 0 || self.dims.vocab > 64 {
            return bad("model.vocab must lie in [1, 64]");
        }
        if self.seq_len < 2 || self.batch == 0 {
            return bad("train.seq_len must be at least 2 and train.batch at least 1");
        }
        if self.log_every == 0 || self.domains == 0 || self.calibration_batch == 0 {
            return bad("train.log_every, train.domains and warmstart.calibration_batch must be positive");
        }
        self.model_config().validate().map_err(HarnessError::Core)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dims: self.dims,
            topology: self.topology,
            variant: self.variant,
            router_beta: self.router_beta,
            fast_weight_eta: self.eta,
            eta_depth_decay: self.eta_depth_decay,
            target: self.target,
        }
    }

    pub fn alphas(&self) -> AlphaConfig {
        if self.calibrate {
            let g = self.topology.group_size as f64;
            AlphaConfig { alpha_loc: self.alphas.alpha_loc / g, alpha_u: self.alphas.alpha_u / g }
        } else {
            self.alphas
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seq_len: self.seq_len,
            batch: self.batch,
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            seed: Seed(self.seed),
            aux_coef: self.aux_coef,
            objective: self.objective,
            alphas: self.alphas(),
            schedules: vec![BiasSchedule::Warmup { b0: self.warmup_b0, r: self.warmup_r }],
        }
    }

    /// Renders the config with every key, in documentation order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let band = |i: usize| self.band.map(|b| if i == 0 { b.0 } else { b.1 }.to_string()).unwrap_or_default();
        let value = |key: &str| -> String {
            match key {
                "seed" => self.seed.to_string(),
                "output.dir" => self.output_dir.display().to_string(),
                "topology.variant" => self.variant.to_string(),
                "topology.num_layers" => self.topology.num_layers.to_string(),
                "topology.group_size" => self.topology.group_size.to_string(),
                "topology.num_universal" => self.topology.num_universal.to_string(),
                "topology.window" => self.topology.window.to_string(),
                "topology.stride" => self.topology.stride.to_string(),
                "topology.locals_per_layer" => self.topology.locals_per_layer.to_string(),
                "topology.top_k" => self.topology.top_k.to_string(),
                "model.vocab" => self.dims.vocab.to_string(),
                "model.d_model" => self.dims.d_model.to_string(),
                "model.d_ffn" => self.dims.d_ffn.to_string(),
                "model.d_key" => self.dims.d_key.to_string(),
                "train.steps" => self.steps.to_string(),
                "train.batch" => self.batch.to_string(),
                "train.seq_len" => self.seq_len.to_string(),
                "train.lr" => self.lr.to_string(),
                "train.momentum" => self.momentum.to_string(),
                "train.aux_coef" => self.aux_coef.to_string(),
                "train.log_every" => self.log_every.to_string(),
                "train.domains" => self.domains.to_string(),
                "balance.objective" => match self.objective {
                    Objective::Uelb => "uelb".into(),
                    Objective::StandardLbl => "standard_lbl".into(),
                },
                "balance.alpha_loc" => self.alphas.alpha_loc.to_string(),
                "balance.alpha_u" => self.alphas.alpha_u.to_string(),
                "balance.calibrate" => self.calibrate.to_string(),
                "router.beta" => self.router_beta.to_string(),
                "router.eta" => self.eta.to_string(),
                "router.eta_depth_decay" => self.eta_depth_decay.to_string(),
                "router.target" => match self.target {
                    TargetKind::Soft => "soft".into(),
                    TargetKind::Hard => "hard".into(),
                },
                "schedule.warmup_b0" => self.warmup_b0.to_string(),
                "schedule.warmup_r" => self.warmup_r.to_string(),
                "schedule.suppression_beta0" => self.suppression_beta0.to_string(),
                "schedule.suppression_t_end" => self.suppression_t_end.to_string(),
                "warmstart.band_start" => band(0),
                "warmstart.band_end" => band(1),
                "warmstart.noise" => self.noise.to_string(),
                "warmstart.calibration_batch" => self.calibration_batch.to_string(),
                _ => unreachable!("undocumented key {key}"),
            }
        };
        for (key, _, _) in KEYS {
            out.push_str(&format!("{key}={}\n", value(key)));
        }
        out
    }
}
