//! The `train`, `convert`, `topo` and `analyze` runs and their reports.

use std::fs;
use std::path::Path;

use moue_core::balance::group_max_mean_ratio;
use moue_core::model::{backward_step, forward, ForwardPass, MoueModel};
use moue_core::routing::BiasSchedule;
use moue_core::topology::{
    build_variant, exposure_degrees, parameter_budget, path_count_exact, path_count_log,
    ConnectivityMap, ModelDims,
};
use moue_core::warmstart::{
    cka_matrix, collect_activation_profile, convert_to_moue, default_band,
    select_universal_experts, ConversionConfig,
};
use moue_core::{Error as CoreError, Seed};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::ExperimentConfig;
use crate::corpus::{Batch, SyntheticCorpus};
use crate::error::HarnessError;

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Seed streams derived from the master seed.
const MODEL_STREAM: u64 = 10;
const CORPUS_STREAM: u64 = 20;
const CONVERT_STREAM: u64 = 30;

/// Corpus streams.
const TRAIN_DATA: u64 = 0;
const EVAL_DATA: u64 = 1;
const CALIBRATION_DATA: u64 = 2;

/// Number of trailing skew rows averaged into the terminal skew.
pub const TERMINAL_WINDOW: usize = 10;

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
}

pub fn corpus_for(cfg: &ExperimentConfig, vocab: usize) -> SyntheticCorpus {
    SyntheticCorpus::new(vocab, cfg.domains, Seed(cfg.seed).derive(CORPUS_STREAM))
}

pub fn eval_batch(cfg: &ExperimentConfig, corpus: &SyntheticCorpus) -> Batch {
    corpus.batch(EVAL_DATA, 0, 4 * cfg.batch, cfg.seq_len)
}

/// Progress at which a stored model is evaluated: where its suppression
/// anneal stopped, or the end of training otherwise.
pub fn eval_progress(model: &MoueModel) -> f64 {
    model.warm_start.as_ref().map_or(1.0, |w| w.progress)
}

fn write_budget(dir: &Path, dims: &ModelDims, map: &ConnectivityMap) -> Result<()> {
    let b = parameter_budget(dims, map);
    let mut w = writer(dir, "budget.csv")?;
    w.write_record(["metric", "value"])?;
    w.write_record(["activated", &b.activated.to_string()])?;
    w.write_record(["total_physical", &b.total_physical.to_string()])?;
    w.write_record(["virtual", &b.virtual_params.to_string()])?;
    w.flush().map_err(|e| HarnessError::io(&dir.join("budget.csv"), e))?;
    Ok(())
}

fn flush(w: &mut csv::Writer<fs::File>, dir: &Path, name: &str) -> Result<()> {
    w.flush().map_err(|e| HarnessError::io(&dir.join(name), e))
}

/// Dispatch fraction of every (layer, global expert) pair on `pass`.
fn write_heatmap(dir: &Path, model: &MoueModel, pass: &ForwardPass) -> Result<()> {
    let mut w = writer(dir, "heatmap.csv")?;
    w.write_record(["layer", "expert", "universal", "reachable", "dispatch"])?;
    for (layer, stats) in pass.stats.iter().enumerate() {
        for (id, f) in stats.dispatch().iter().enumerate() {
            w.write_record([
                layer.to_string(),
                id.to_string(),
                u8::from(model.map.is_universal(id)).to_string(),
                u8::from(model.map.is_reachable(layer, id)).to_string(),
                f.to_string(),
            ])?;
        }
    }
    flush(&mut w, dir, "heatmap.csv")
}

/// Share of routed gate mass that lands on universal experts, per layer,
/// restricted to the tokens selected by `keep`.
pub fn ue_ratio(model: &MoueModel, pass: &ForwardPass, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    pass.layers
        .iter()
        .map(|trace| {
            let mut mass = 0.0;
            let mut tokens = 0usize;
            for (tok, sel) in trace.selections.iter().enumerate() {
                if !keep(tok) {
                    continue;
                }
                tokens += 1;
                mass += sel
                    .expert_ids
                    .iter()
                    .zip(&sel.gates)
                    .filter(|(&id, _)| model.map.is_universal(id))
                    .map(|(_, g)| g)
                    .sum::<f64>();
            }
            if tokens == 0 { 0.0 } else { mass / tokens as f64 }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_task_loss: f64,
    /// Mean over groups of the group Max/Mean ratio, averaged over the last
    /// [`TERMINAL_WINDOW`] skew rows.
    pub terminal_skew: f64,
    /// Universal-expert selections per step.
    pub ue_selections: Vec<usize>,
    pub model: MoueModel,
}

/// Trains from scratch, or from `init` when given, and writes
/// `loss_curve.csv`, `skew_trace.csv`, `ue_trace.csv`, `heatmap.csv`,
/// `budget.csv`, `config.txt` and the final checkpoint.
pub fn run_train(cfg: &ExperimentConfig, init: Option<MoueModel>) -> Result<TrainSummary> {
    let dir = cfg.output_dir.as_path();
    ensure_dir(dir)?;
    let mut model = match init {
        Some(m) => m,
        None => MoueModel::new(cfg.model_config(), Seed(cfg.seed).derive(MODEL_STREAM))?,
    };
    let corpus = corpus_for(cfg, model.vocab());
    let tc = cfg.train_config();
    let groups = model.map.groups();
    let mut velocity = None;

    let mut loss_w = writer(dir, "loss_curve.csv")?;
    loss_w.write_record(["step", "task_loss", "aux_loss"])?;
    let mut skew_w = writer(dir, "skew_trace.csv")?;
    skew_w.write_record(["step", "group", "max_mean_ratio"])?;
    let mut ue_w = writer(dir, "ue_trace.csv")?;
    ue_w.write_record(["step", "ue_selections"])?;

    let mut skew_rows: Vec<f64> = Vec::new();
    let mut ue_selections = Vec::with_capacity(cfg.steps);
    let mut final_task_loss = f64::NAN;
    for step in 0..cfg.steps {
        let t = step as f64 / cfg.steps as f64;
        let batch = corpus.batch(TRAIN_DATA, step as u64, cfg.batch, cfg.seq_len);
        let m = backward_step(&mut model, &mut velocity, &batch.tokens, &tc, t).map_err(|e| match e {
            CoreError::Divergence => HarnessError::Diverged { step },
            e => e.into(),
        })?;
        final_task_loss = m.task_loss;
        loss_w.write_record([step.to_string(), m.task_loss.to_string(), m.aux_loss.to_string()])?;
        let ue: usize = m
            .selections
            .iter()
            .flatten()
            .flat_map(|s| &s.expert_ids)
            .filter(|&&id| model.map.is_universal(id))
            .count();
        ue_selections.push(ue);
        ue_w.write_record([step.to_string(), ue.to_string()])?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let mut total = 0.0;
            for (g, range) in groups.iter().enumerate() {
                let r = group_max_mean_ratio(&m.stats, range.clone())?;
                total += r;
                skew_w.write_record([step.to_string(), g.to_string(), r.to_string()])?;
            }
            skew_rows.push(total / groups.len() as f64);
        }
    }
    flush(&mut loss_w, dir, "loss_curve.csv")?;
    flush(&mut skew_w, dir, "skew_trace.csv")?;
    flush(&mut ue_w, dir, "ue_trace.csv")?;

    if let Some(ws) = model.warm_start.as_mut() {
        ws.progress = 1.0;
    }
    let eval = eval_batch(cfg, &corpus);
    let schedules = model.schedules_with(&tc.schedules);
    let pass = forward(&model, &eval.tokens, &schedules, 1.0)?;
    write_heatmap(dir, &model, &pass)?;
    write_budget(dir, &model.config.dims, &model.map)?;
    write_text(dir, "config.txt", &cfg.render())?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;

    let tail = &skew_rows[skew_rows.len().saturating_sub(TERMINAL_WINDOW)..];
    let terminal_skew = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    Ok(TrainSummary { final_task_loss, terminal_skew, ue_selections, model })
}

/// One row of the conversion selection table.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedExpert {
    pub ring_pos: usize,
    pub source_layer: usize,
    pub source_expert: usize,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct ConvertSummary {
    pub selection: Vec<SelectedExpert>,
    pub model: MoueModel,
    /// True when the pool was empty and the source was copied through.
    pub passthrough: bool,
}

/// Profiles the source on calibration data, picks the universal pool from the
/// band and converts. Writes `selection.csv` and the converted checkpoint.
pub fn run_convert(cfg: &ExperimentConfig, source_path: &Path) -> Result<ConvertSummary> {
    let source = read_checkpoint(source_path)?;
    let dir = cfg.output_dir.as_path();
    ensure_dir(dir)?;
    let n_u = cfg.topology.num_universal;
    if n_u == 0 {
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &source)?;
        let mut w = writer(dir, "selection.csv")?;
        w.write_record(["ring_pos", "expert", "source_layer", "source_expert", "rate"])?;
        flush(&mut w, dir, "selection.csv")?;
        return Ok(ConvertSummary { selection: Vec::new(), model: source, passthrough: true });
    }
    let corpus = corpus_for(cfg, source.vocab());
    let calib = corpus.batch(CALIBRATION_DATA, 0, cfg.calibration_batch, cfg.seq_len);
    let profile = collect_activation_profile(&source, &calib.tokens)?;
    let band = match cfg.band {
        Some((a, b)) => a..b,
        None => default_band(source.num_layers()),
    };
    let picked = select_universal_experts(&profile, n_u, band)?;
    let conv = ConversionConfig {
        topology: cfg.topology,
        variant: cfg.variant,
        router_beta: cfg.router_beta,
        fast_weight_eta: cfg.eta,
        noise: cfg.noise,
        beta0: cfg.suppression_beta0,
        t_end: cfg.suppression_t_end,
        seed: Seed(cfg.seed).derive(CONVERT_STREAM),
    };
    let model = convert_to_moue(&source, &picked, &conv)?;
    let selection: Vec<SelectedExpert> = picked
        .iter()
        .enumerate()
        .map(|(p, &(l, e))| SelectedExpert {
            ring_pos: p,
            source_layer: l,
            source_expert: e,
            rate: profile.rates[l][e],
        })
        .collect();
    let mut w = writer(dir, "selection.csv")?;
    w.write_record(["ring_pos", "expert", "source_layer", "source_expert", "rate"])?;
    for s in &selection {
        w.write_record([
            s.ring_pos.to_string(),
            model.map.universal_id(s.ring_pos).to_string(),
            s.source_layer.to_string(),
            s.source_expert.to_string(),
            s.rate.to_string(),
        ])?;
    }
    flush(&mut w, dir, "selection.csv")?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;
    Ok(ConvertSummary { selection, model, passthrough: false })
}

/// Writes `connectivity.csv`, `exposure.csv`, `pathcount.txt` and `budget.csv`.
pub fn run_topo(cfg: &ExperimentConfig) -> Result<ConnectivityMap> {
    let dir = cfg.output_dir.as_path();
    ensure_dir(dir)?;
    let map = build_variant(cfg.variant, &cfg.topology)?;

    let mut w = writer(dir, "connectivity.csv")?;
    let mut header = vec!["layer".to_string()];
    header.extend((0..map.num_experts()).map(|id| format!("e{id}")));
    w.write_record(&header)?;
    for (layer, row) in map.dense().iter().enumerate() {
        let mut rec = vec![layer.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    flush(&mut w, dir, "connectivity.csv")?;

    let mut w = writer(dir, "exposure.csv")?;
    w.write_record(["ring_pos", "expert", "exposure"])?;
    for (p, c) in exposure_degrees(&map).iter().enumerate() {
        w.write_record([p.to_string(), map.universal_id(p).to_string(), c.to_string()])?;
    }
    flush(&mut w, dir, "exposure.csv")?;

    let k = cfg.topology.top_k;
    let ln = path_count_log(&map, k)?;
    let exact = match path_count_exact(&map, k)? {
        Some(n) if n < 1 << 63 => n.to_string(),
        _ => "overflow".to_string(),
    };
    write_text(dir, "pathcount.txt", &format!("ln_paths={ln}\nexact={exact}\n"))?;
    write_budget(dir, &cfg.dims, &map)?;
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub cka: moue_core::Matrix,
    pub ue_ratio: Vec<f64>,
}

/// Writes `cka_matrix.csv`, `ue_ratio_per_layer.csv`, `domain_ue_ratio.csv`
/// and `heatmap.csv` for a stored model on the seeded evaluation batch.
pub fn run_analyze(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<AnalyzeSummary> {
    let model = read_checkpoint(checkpoint)?;
    let dir = cfg.output_dir.as_path();
    ensure_dir(dir)?;

    let cka = cka_matrix(&model)?;
    let mut w = writer(dir, "cka_matrix.csv")?;
    let mut header = vec!["expert".to_string()];
    header.extend((0..cka.cols()).map(|id| id.to_string()));
    w.write_record(&header)?;
    for i in 0..cka.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(cka.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    flush(&mut w, dir, "cka_matrix.csv")?;

    let corpus = corpus_for(cfg, model.vocab());
    let eval = eval_batch(cfg, &corpus);
    let schedules: Vec<BiasSchedule> = model.schedules_with(&[]);
    let pass = forward(&model, &eval.tokens, &schedules, eval_progress(&model))?;

    let ratio = ue_ratio(&model, &pass, |_| true);
    let mut w = writer(dir, "ue_ratio_per_layer.csv")?;
    w.write_record(["layer", "ue_ratio"])?;
    for (l, r) in ratio.iter().enumerate() {
        w.write_record([l.to_string(), r.to_string()])?;
    }
    flush(&mut w, dir, "ue_ratio_per_layer.csv")?;

    let mut w = writer(dir, "domain_ue_ratio.csv")?;
    w.write_record(["domain", "layer", "ue_ratio"])?;
    for d in 0..corpus.num_domains() {
        let per = ue_ratio(&model, &pass, |tok| eval.domains[tok / cfg.seq_len] == d);
        for (l, r) in per.iter().enumerate() {
            w.write_record([d.to_string(), l.to_string(), r.to_string()])?;
        }
    }
    flush(&mut w, dir, "domain_ue_ratio.csv")?;

    write_heatmap(dir, &model, &pass)?;
    Ok(AnalyzeSummary { cka, ue_ratio: ratio })
}
