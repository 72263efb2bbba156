//! driftscope: train a desk-scale transformer under a configurable
//! optimizer suite and analyze the geometry of its parameter trajectory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use driftscope::backbone::{
    decompose, find_extrema, fit_power_law, pearson, switch_direction,
    update_alignment,
};
use driftscope::checkpoint::{
    build_drift_matrix, read_checkpoint, Checkpoint, TrunkSelector,
};
use driftscope::curvature::anisotropy;
use driftscope::direction::{read_direction, write_direction};
use driftscope::model::{Model, ModelConfig};
use driftscope::optim::{lambda_at, DecayCoupling, OptKind, OptimizerConfig};
use driftscope::pca::{phase_backbones, rolling_backbones, uncentered_svd, TrajectorySpectrum};
use driftscope::task::TaskConfig;
use driftscope::train::{
    gradient_rows, reheat, sig17, train, write_reheat_csv, ReheatConfig, TrainConfig,
};
use driftscope::{Error, Result};

#[derive(Parser)]
#[command(name = "driftscope", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and record checkpoints plus evaluation series.
    Train(TrainArgs),
    /// Trajectory-geometry analyses over a run's checkpoints.
    Analyze {
        #[command(subcommand)]
        sub: AnalyzeCmd,
    },
    /// Fisher Rayleigh quotients and anisotropy along a direction.
    Rayleigh(RayleighArgs),
    /// Resume from a checkpoint with a fresh optimizer and raised lambda.
    Reheat(ReheatArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "adamw")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.95)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 0.5)]
    wd: f64,
    /// Momentum coefficient; only valid for sgd-momentum / sgdw-nesterov.
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.15)]
    warmup_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    floor_frac: f64,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 40)]
    ckpt_every: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    grad_accum: usize,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    /// Lambda doubles at this fraction of total steps.
    #[arg(long, default_value_t = 0.4)]
    switch_frac: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.10)]
    p_probe: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct CommonAnalyze {
    /// Run directory containing config.json and ckpt_*.dsck.
    #[arg(long)]
    run: PathBuf,
    /// Restrict the trunk to one block (default: all blocks).
    #[arg(long)]
    block: Option<usize>,
    /// Normalize each drift row before the SVD.
    #[arg(long)]
    row_normalize: bool,
    /// Restrict checkpoints to steps lo,hi inclusive.
    #[arg(long, value_parser = parse_pair)]
    window: Option<(u64, u64)>,
    /// Output path (default: <run>/analysis/<subcommand>.{json,csv}).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Uncentered trajectory PCA: spectrum, variance fractions, k95/k99.
    Pca {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long)]
        anchor: u64,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Write the leading direction to a DVEC file.
        #[arg(long)]
        save_backbone: Option<PathBuf>,
    },
    /// Rolling-window backbones and adjacent/global alignment.
    Rolling {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long, default_value_t = 5)]
        rolling_window: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Early/late phase backbones, overlap, A_E/A_L series.
    Phases {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long, value_parser = parse_pair)]
        early: (u64, u64),
        #[arg(long, value_parser = parse_pair)]
        late: (u64, u64),
        #[arg(long, default_value_t = 5)]
        rolling_window: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Backbone coordinate, residual norm and backbone fraction per step.
    Decompose {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long)]
        anchor: u64,
        /// "global" (PC1 of the same checkpoints) or a DVEC file path.
        #[arg(long, default_value = "global")]
        backbone: String,
    },
    /// Log-log power-law fit of a decomposition series.
    Powerlaw {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long)]
        anchor: u64,
        #[arg(long, default_value = "global")]
        backbone: String,
        /// Series to fit: a | r_norm | drift_norm.
        #[arg(long, default_value = "a")]
        series: String,
        /// Fit window lo,hi in steps.
        #[arg(long, value_parser = parse_pair)]
        fit_window: (u64, u64),
    },
    /// Alignment of multi-checkpoint updates with a backbone.
    Align {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long, default_value = "global")]
        backbone: String,
        /// Anchor for the global backbone (ignored for DVEC backbones).
        #[arg(long)]
        anchor: Option<u64>,
        /// Checkpoint spacing of the updates (default: run's ckpt-every).
        #[arg(long)]
        interval: Option<u64>,
    },
    /// Switching direction between a probe-accuracy peak and trough.
    Switch {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long)]
        anchor: u64,
        #[arg(long, default_value = "global")]
        backbone: String,
        /// Peak checkpoint step; detected from eval.csv p_ood when absent.
        #[arg(long)]
        peak: Option<u64>,
        #[arg(long)]
        trough: Option<u64>,
        #[arg(long, default_value_t = 6)]
        top_k: usize,
        #[arg(long, default_value_t = 3)]
        radius: usize,
        #[arg(long, default_value_t = 0.05)]
        prominence: f64,
        #[arg(long)]
        save_direction: Option<PathBuf>,
    },
    /// Pearson correlation of a decomposition series with probe accuracy.
    Correlate {
        #[command(flatten)]
        common: CommonAnalyze,
        #[arg(long)]
        anchor: u64,
        #[arg(long, default_value = "global")]
        backbone: String,
        /// Series to correlate with p_ood: a | r_norm | f_b | drift_norm.
        #[arg(long, default_value = "a")]
        series: String,
    },
}

#[derive(Args)]
struct RayleighArgs {
    #[arg(long)]
    run: PathBuf,
    /// DVEC direction file to probe.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Gradient batches per probed checkpoint.
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Comma-separated checkpoint steps (default: all).
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReheatArgs {
    /// Source checkpoint (ckpt_<step>.dsck inside a run directory).
    #[arg(long)]
    from: PathBuf,
    /// Run directory with config.json (default: the checkpoint's parent).
    #[arg(long)]
    run: Option<PathBuf>,
    /// Comma-separated learning-rate sweep; 0 freezes parameters.
    #[arg(long, default_value = "1e-3,6e-4,3e-4")]
    lrs: String,
    #[arg(long, default_value_t = 4.0)]
    lambda: f64,
    #[arg(long, default_value_t = 400)]
    steps: u64,
    #[arg(long, default_value_t = 40)]
    eval_every: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Optional DVEC backbone to track a(t) and |r(t)| against.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Checkpoint to anchor a(t)/|r(t)| drift at (default: the --from
    /// checkpoint itself). Use the original run's anchor checkpoint to
    /// continue its accumulated backbone coordinate.
    #[arg(long)]
    origin: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn parse_pair(s: &str) -> std::result::Result<(u64, u64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected lo,hi — got {s:?}"));
    }
    let lo = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let hi = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err(format!("window lo {lo} > hi {hi}"));
    }
    Ok((lo, hi))
}

/// Exclusive lock on a run directory; removed on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    run_id: String,
    config_hash: String,
    tool_version: String,
    checkpoints: Vec<String>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn path(run: &Path) -> PathBuf {
        run.join("manifest.json")
    }

    fn create(run: &Path) -> Result<Self> {
        let config = fs::read(run.join("config.json"))?;
        let hash = hex(&Sha256::digest(&config));
        let mut checkpoints: Vec<String> = fs::read_dir(run)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("ckpt_") && n.ends_with(".dsck"))
            .collect();
        checkpoints.sort_by_key(|n| ckpt_step(n).unwrap_or(u64::MAX));
        Ok(RunManifest {
            run_id: hash[..16].to_string(),
            config_hash: hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoints,
            outputs: vec!["config.json".into(), "eval.csv".into()],
        })
    }

    fn load(run: &Path) -> Result<Self> {
        let text = fs::read_to_string(Self::path(run))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn record_output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
            self.outputs.sort();
        }
    }

    fn save(&self, run: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(Self::path(run), text)?;
        Ok(())
    }
}

fn ckpt_step(name: &str) -> Option<u64> {
    name.strip_prefix("ckpt_")?.strip_suffix(".dsck")?.parse().ok()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn invocation() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn load_config(run: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(run.join("config.json"))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_checkpoints(run: &Path, window: Option<(u64, u64)>) -> Result<Vec<Checkpoint>> {
    let mut steps: Vec<u64> = fs::read_dir(run)?
        .filter_map(|e| e.ok())
        .filter_map(|e| ckpt_step(&e.file_name().to_string_lossy()))
        .filter(|&s| window.map_or(true, |(lo, hi)| s >= lo && s <= hi))
        .collect();
    steps.sort_unstable();
    if steps.len() < 2 {
        return Err(Error::TooFewCheckpoints {
            need: 2,
            got: steps.len(),
        });
    }
    steps
        .iter()
        .map(|s| read_checkpoint(&run.join(format!("ckpt_{s}.dsck"))))
        .collect()
}

fn selector(block: Option<usize>) -> TrunkSelector {
    match block {
        Some(i) => TrunkSelector::block(i),
        None => TrunkSelector::trunk(),
    }
}

/// steps and p_ood columns of a run's eval.csv.
fn load_eval_pood(run: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let text = fs::read_to_string(run.join("eval.csv"))?;
    let mut steps = Vec::new();
    let mut pood = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            continue;
        }
        steps.push(cols[0].parse().map_err(|_| {
            Error::InvalidConfig(format!("bad eval.csv line: {line}"))
        })?);
        pood.push(cols[3].parse().map_err(|_| {
            Error::InvalidConfig(format!("bad eval.csv line: {line}"))
        })?);
    }
    Ok((steps, pood))
}

fn prepare_out(common_out: &Option<PathBuf>, run: &Path, default_name: &str, force: bool) -> Result<PathBuf> {
    let path = match common_out {
        Some(p) => p.clone(),
        None => run.join("analysis").join(default_name),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    if path.exists() && !force {
        return Err(Error::InvalidConfig(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(path)
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn record_in_manifest(run: &Path, out: &Path) {
    if let Ok(mut m) = RunManifest::load(run) {
        if let Ok(rel) = out.strip_prefix(run) {
            m.record_output(&rel.to_string_lossy());
            let _ = m.save(run);
        }
    }
}

/// The global backbone for a run: PC1 of the drift over the given
/// checkpoints, or a direction loaded from a DVEC file.
fn resolve_backbone(
    spec: &str,
    ckpts: &[Checkpoint],
    anchor: u64,
    sel: &TrunkSelector,
    row_normalize: bool,
) -> Result<Vec<f64>> {
    if spec == "global" {
        let refs: Vec<&Checkpoint> = ckpts.iter().collect();
        let x = build_drift_matrix(&refs, anchor, sel, row_normalize)?;
        let s = uncentered_svd(&x, 1)?;
        Ok(s.vectors[0].clone())
    } else {
        read_direction(Path::new(spec))
    }
}

fn spectrum_json(s: &TrajectorySpectrum) -> serde_json::Value {
    serde_json::json!({
        "sigma": s.sigma,
        "rho": s.rho,
        "rho1": s.rho[0],
        "k95": s.k95,
        "k99": s.k99,
        "pc1_unstable": s.pc1_unstable,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let kind: OptKind = a.optimizer.parse()?;
    let coupling = match kind {
        OptKind::Adamw | OptKind::SgdwNesterov => DecayCoupling::Decoupled,
        OptKind::Sgd | OptKind::SgdMomentum => DecayCoupling::L2,
    };
    let optimizer = OptimizerConfig {
        kind,
        lr: a.lr,
        warmup_frac: a.warmup_frac,
        floor_frac: a.floor_frac,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        weight_decay: a.wd,
        decay_coupling: coupling,
        momentum: a.momentum.unwrap_or(0.0),
        clip: a.clip,
    };
    let model = ModelConfig {
        layers: a.layers,
        d_model: a.d_model,
        heads: a.heads,
        d_ff: a.d_ff,
        vocab: a.vocab,
        seq_len: a.seq_len,
    };
    let mut task = TaskConfig::desk_for(&model);
    task.p_probe = a.p_probe;
    let cfg = TrainConfig {
        model,
        task,
        optimizer,
        total_steps: a.steps,
        ckpt_every: a.ckpt_every,
        batch_size: a.batch_size,
        grad_accum: a.grad_accum,
        lambda_initial: a.lambda,
        switch_frac: a.switch_frac,
        seed: a.seed,
        ..TrainConfig::desk(a.seed)
    };
    cfg.validate()?;
    // An existing lock always wins: --force may wipe stale outputs but must
    // never pull a run directory out from under a live writer.
    if a.out.join(".lock").exists() {
        return Err(Error::Locked(a.out.display().to_string()));
    }
    if a.out.exists() && a.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !a.force {
            return Err(Error::InvalidConfig(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        fs::remove_dir_all(&a.out)?;
    }
    fs::create_dir_all(&a.out)?;
    let _lock = DirLock::acquire(&a.out)?;
    train(&cfg, &a.out)?;
    RunManifest::create(&a.out)?.save(&a.out)?;
    Ok(())
}

fn cmd_analyze(sub: AnalyzeCmd) -> Result<()> {
    match sub {
        AnalyzeCmd::Pca {
            common,
            anchor,
            top_k,
            save_backbone,
        } => {
            let out = prepare_out(&common.out, &common.run, "pca.json", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let x = build_drift_matrix(&refs, anchor, &sel, common.row_normalize)?;
            let spec = uncentered_svd(&x, top_k)?;
            if let Some(p) = &save_backbone {
                write_direction(spec.pc1(), p)?;
            }
            let mut v = spectrum_json(&spec);
            v["flags"] = invocation().into();
            v["anchor"] = anchor.into();
            v["row_normalize"] = common.row_normalize.into();
            write_json(&out, v)?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Rolling {
            common,
            rolling_window,
            stride,
        } => {
            let out = prepare_out(&common.out, &common.run, "rolling.csv", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let anchor = refs.iter().map(|c| c.step).min().unwrap();
            let global = resolve_backbone("global", &ckpts, anchor, &sel, common.row_normalize)?;
            let series = rolling_backbones(
                &refs,
                &sel,
                rolling_window,
                stride,
                common.row_normalize,
                Some(&global),
            )?;
            let mut text = format!("# flags: {}\n", invocation());
            text.push_str("center,anchor,adjacent_cos,global_cos\n");
            for (i, (&c, &a)) in series.centers.iter().zip(&series.anchors).enumerate() {
                let adj = if i == 0 {
                    String::new()
                } else {
                    sig17(series.adjacent[i - 1])
                };
                let glob = sig17(series.global_alignment.as_ref().unwrap()[i]);
                text.push_str(&format!("{c},{a},{adj},{glob}\n"));
            }
            fs::write(&out, text)?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Phases {
            common,
            early,
            late,
            rolling_window,
            stride,
        } => {
            let out = prepare_out(&common.out, &common.run, "phases.json", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let rolling = rolling_backbones(
                &refs,
                &sel,
                rolling_window,
                stride,
                common.row_normalize,
                None,
            )
            .ok();
            let phases =
                phase_backbones(&refs, &sel, early, late, common.row_normalize, rolling.as_ref())?;
            let alignment: Vec<serde_json::Value> = phases
                .alignment
                .iter()
                .map(|&(c, ae, al)| serde_json::json!({"center": c, "a_early": ae, "a_late": al}))
                .collect();
            write_json(
                &out,
                serde_json::json!({
                    "flags": invocation(),
                    "early": phases.early_interval,
                    "late": phases.late_interval,
                    "early_anchor": phases.early_anchor,
                    "late_anchor": phases.late_anchor,
                    "overlap": phases.overlap,
                    "alignment": alignment,
                }),
            )?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Decompose {
            common,
            anchor,
            backbone,
        } => {
            let out = prepare_out(&common.out, &common.run, "decompose.csv", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let v_b = resolve_backbone(&backbone, &ckpts, anchor, &sel, common.row_normalize)?;
            // the decomposition itself always uses raw drift rows
            let x = build_drift_matrix(&refs, anchor, &sel, false)?;
            let d = decompose(&x, &v_b)?;
            let mut text = format!("# flags: {}\n", invocation());
            text.push_str("step,a,r_norm,f_b,drift_norm\n");
            for i in 0..d.steps.len() {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    d.steps[i],
                    sig17(d.coordinate[i]),
                    sig17(d.residual_norm[i]),
                    sig17(d.backbone_fraction[i]),
                    sig17(d.drift_norm[i]),
                ));
            }
            fs::write(&out, text)?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Powerlaw {
            common,
            anchor,
            backbone,
            series,
            fit_window,
        } => {
            let out = prepare_out(&common.out, &common.run, "powerlaw.json", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let v_b = resolve_backbone(&backbone, &ckpts, anchor, &sel, common.row_normalize)?;
            let x = build_drift_matrix(&refs, anchor, &sel, false)?;
            let d = decompose(&x, &v_b)?;
            let values = match series.as_str() {
                "a" => &d.coordinate,
                "r_norm" => &d.residual_norm,
                "drift_norm" => &d.drift_norm,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown series {other}")))
                }
            };
            let fit = fit_power_law(&d.steps, values, fit_window)?;
            write_json(
                &out,
                serde_json::json!({
                    "flags": invocation(),
                    "series": series,
                    "window": fit.window,
                    "gamma": fit.gamma,
                    "coefficient": fit.coefficient,
                    "r_squared": fit.r_squared,
                    "samples": fit.samples,
                }),
            )?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Align {
            common,
            backbone,
            anchor,
            interval,
        } => {
            let out = prepare_out(&common.out, &common.run, "align.csv", common.force)?;
            let cfg = load_config(&common.run)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let anchor = anchor.unwrap_or_else(|| refs.iter().map(|c| c.step).min().unwrap());
            let v_b = resolve_backbone(&backbone, &ckpts, anchor, &sel, common.row_normalize)?;
            let interval = interval.unwrap_or(cfg.ckpt_every);
            let series = update_alignment(&refs, &sel, &v_b, interval)?;
            let mut text = format!("# flags: {}\n", invocation());
            text.push_str("step,signed_cos,abs_cos,noise_floor\n");
            for i in 0..series.steps.len() {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    series.steps[i],
                    sig17(series.signed_cos[i]),
                    sig17(series.abs_cos[i]),
                    sig17(series.noise_floor),
                ));
            }
            fs::write(&out, text)?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Switch {
            common,
            anchor,
            backbone,
            peak,
            trough,
            top_k,
            radius,
            prominence,
            save_direction,
        } => {
            let out = prepare_out(&common.out, &common.run, "switch.json", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let (peak_step, trough_step) = match (peak, trough) {
                (Some(p), Some(t)) => (p, t),
                _ => {
                    let (steps, pood) = load_eval_pood(&common.run)?;
                    let (peaks, troughs) = find_extrema(&pood, radius, prominence);
                    let pi = *peaks.first().ok_or_else(|| {
                        Error::InvalidConfig("no probe-accuracy peak found".into())
                    })?;
                    let ti = troughs
                        .iter()
                        .find(|&&t| t > pi)
                        .copied()
                        .or_else(|| troughs.first().copied())
                        .ok_or_else(|| {
                            Error::InvalidConfig("no probe-accuracy trough found".into())
                        })?;
                    (steps[pi], steps[ti])
                }
            };
            let v_b = resolve_backbone(&backbone, &ckpts, anchor, &sel, common.row_normalize)?;
            let x = build_drift_matrix(&refs, anchor, &sel, common.row_normalize)?;
            let spec = uncentered_svd(&x, top_k.max(6))?;
            let peak_ck = refs
                .iter()
                .find(|c| c.step == peak_step)
                .ok_or(Error::AnchorMissing(peak_step))?;
            let trough_ck = refs
                .iter()
                .find(|c| c.step == trough_step)
                .ok_or(Error::AnchorMissing(trough_step))?;
            let sw = switch_direction(peak_ck, trough_ck, &sel, &v_b, &spec)?;
            if let Some(p) = &save_direction {
                write_direction(&sw.switch_direction, p)?;
            }
            write_json(
                &out,
                serde_json::json!({
                    "flags": invocation(),
                    "peak_step": sw.peak_step,
                    "trough_step": sw.trough_step,
                    "backbone_overlap": sw.backbone_overlap,
                    "has_transverse": sw.transverse.is_some(),
                    "residual_capture": sw.residual_capture,
                    "capture_components": sw.capture_components,
                }),
            )?;
            record_in_manifest(&common.run, &out);
        }
        AnalyzeCmd::Correlate {
            common,
            anchor,
            backbone,
            series,
        } => {
            let out = prepare_out(&common.out, &common.run, "correlate.json", common.force)?;
            let ckpts = load_checkpoints(&common.run, common.window)?;
            let refs: Vec<&Checkpoint> = ckpts.iter().collect();
            let sel = selector(common.block);
            let v_b = resolve_backbone(&backbone, &ckpts, anchor, &sel, common.row_normalize)?;
            let x = build_drift_matrix(&refs, anchor, &sel, false)?;
            let d = decompose(&x, &v_b)?;
            let values = match series.as_str() {
                "a" => &d.coordinate,
                "r_norm" => &d.residual_norm,
                "f_b" => &d.backbone_fraction,
                "drift_norm" => &d.drift_norm,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown series {other}")))
                }
            };
            let (steps, pood) = load_eval_pood(&common.run)?;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (i, &s) in d.steps.iter().enumerate() {
                if let Some(j) = steps.iter().position(|&e| e == s) {
                    xs.push(values[i]);
                    ys.push(pood[j]);
                }
            }
            let r = pearson(&xs, &ys)?;
            write_json(
                &out,
                serde_json::json!({
                    "flags": invocation(),
                    "series": series,
                    "against": "p_ood",
                    "r": r,
                    "n": xs.len(),
                }),
            )?;
            record_in_manifest(&common.run, &out);
        }
    }
    Ok(())
}

fn cmd_rayleigh(a: RayleighArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::InvalidConfig("--k must be >= 1".into()));
    }
    if a.m == 0 {
        return Err(Error::InvalidConfig("--m must be >= 1".into()));
    }
    let out = match &a.out {
        Some(p) => p.clone(),
        None => a.run.join("analysis").join("rayleigh.csv"),
    };
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    if out.exists() && !a.force {
        return Err(Error::InvalidConfig(format!(
            "{} exists; pass --force to overwrite",
            out.display()
        )));
    }
    let cfg = load_config(&a.run)?;
    let sel = selector(a.block);
    let v = read_direction(&a.dir)?;
    let steps: Vec<u64> = match &a.steps {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad step {s:?}")))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut all: Vec<u64> = fs::read_dir(&a.run)?
                .filter_map(|e| e.ok())
                .filter_map(|e| ckpt_step(&e.file_name().to_string_lossy()))
                .collect();
            all.sort_unstable();
            all
        }
    };
    let switch_step = cfg.switch_step();
    let mut text = format!("# flags: {}\n", invocation());
    text.push_str("step,quotient,mean_random,anisotropy,degenerate\n");
    for step in steps {
        let ck = read_checkpoint(&a.run.join(format!("ckpt_{step}.dsck")))?;
        let model: Model<f32> = Model::from_checkpoint(cfg.model.clone(), &ck)?;
        let lambda = lambda_at(cfg.lambda_initial, switch_step, step);
        let g = gradient_rows(&model, &cfg.task, lambda, a.m, cfg.batch_size, a.seed, &sel)?;
        let res = anisotropy(&g, &v, a.k, a.seed, "cli")?;
        let mean_random =
            res.random_quotients.iter().sum::<f64>() / res.random_quotients.len() as f64;
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            step,
            sig17(res.quotient),
            sig17(mean_random),
            sig17(res.anisotropy),
            res.degenerate_divisor,
        ));
    }
    fs::write(&out, text)?;
    record_in_manifest(&a.run, &out);
    Ok(())
}

fn cmd_reheat(a: ReheatArgs) -> Result<()> {
    if !a.from.exists() {
        return Err(Error::InvalidConfig(format!(
            "source checkpoint {} does not exist",
            a.from.display()
        )));
    }
    let run = match &a.run {
        Some(r) => r.clone(),
        None => a
            .from
            .parent()
            .map(|p| p.to_path_buf())
            .ok_or_else(|| Error::InvalidConfig("cannot infer run directory".into()))?,
    };
    let cfg = load_config(&run)?;
    let ck = read_checkpoint(&a.from)?;
    let sel = TrunkSelector::trunk();
    let backbone = a.backbone.as_ref().map(|p| read_direction(p)).transpose()?;
    let origin_ck = a.origin.as_ref().map(|p| read_checkpoint(p)).transpose()?;
    let lrs: Vec<f64> = a
        .lrs
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad lr {s:?}")))
        })
        .collect::<Result<_>>()?;
    if lrs.is_empty() {
        return Err(Error::InvalidConfig("empty lr sweep".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| run.join("reheat"));
    if out.join(".lock").exists() {
        return Err(Error::Locked(out.display().to_string()));
    }
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !a.force {
            return Err(Error::InvalidConfig(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        fs::remove_dir_all(&out)?;
    }
    fs::create_dir_all(&out)?;
    let _lock = DirLock::acquire(&out)?;
    for lr in &lrs {
        let rh = ReheatConfig {
            optimizer: cfg.optimizer.clone(),
            lambda_new: a.lambda,
            steps: a.steps,
            lr: *lr,
            eval_every: a.eval_every,
            seed: a.seed,
        };
        let records = reheat(&ck, &cfg, &rh, backbone.as_deref(), &sel, origin_ck.as_ref())?;
        let sub = out.join(format!("lr_{lr:e}"));
        fs::create_dir_all(&sub)?;
        write_reheat_csv(&sub.join("eval.csv"), &records)?;
    }
    let summary = serde_json::json!({
        "flags": invocation(),
        "from": a.from.display().to_string(),
        "lambda": a.lambda,
        "steps": a.steps,
        "lrs": lrs,
    });
    write_json(&out.join("reheat.json"), summary)?;
    Ok(())
}

fn main() {
    if let Ok(threads) = std::env::var("DRIFTSCOPE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Analyze { sub } => cmd_analyze(sub),
        Cmd::Rayleigh(a) => cmd_rayleigh(a),
        Cmd::Reheat(a) => cmd_reheat(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
