//! Training loop: composite LM+probe objective with the lambda switch,
//! gradient clipping, warmup+cosine learning rate, checkpointing at a fixed
//! cadence, and periodic evaluation. Also the reheating protocol (resume
//! from a checkpoint with a fresh optimizer and raised lambda) and gradient
//! sampling for the curvature probes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_checkpoint, Checkpoint, TrunkSelector};
use crate::curvature::GradientMatrix;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{dot, norm, Real};
use crate::optim::{clip_global_norm, lambda_at, lr_at, Optimizer, OptimizerConfig};
use crate::task::{generate_batch, Batch, BatchMode, TaskConfig};

/// Distinct RNG streams per purpose, all keyed off the master seed, so
/// evaluation never consumes draws from the training stream.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_GRADS: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Decimal with 17 significant digits, enough to round-trip any f64.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
    pub total_steps: u64,
    pub ckpt_every: u64,
    pub batch_size: usize,
    /// Micro-batches accumulated (averaged) per optimizer step.
    pub grad_accum: usize,
    pub lambda_initial: f64,
    /// Lambda doubles at round(switch_frac * total_steps).
    pub switch_frac: f64,
    pub seed: u64,
    /// Evaluation set sizes: OOD probes / in-distribution probes / LM
    /// validation sequences.
    pub eval_ood: usize,
    pub eval_id: usize,
    pub eval_lm: usize,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        let model = ModelConfig::desk();
        let task = TaskConfig::desk_for(&model);
        TrainConfig {
            model,
            task,
            optimizer: OptimizerConfig::adamw_desk(),
            total_steps: 2000,
            ckpt_every: 40,
            batch_size: 8,
            grad_accum: 1,
            lambda_initial: 2.0,
            switch_frac: 0.4,
            seed,
            eval_ood: 512,
            eval_id: 256,
            eval_lm: 64,
        }
    }

    pub fn switch_step(&self) -> u64 {
        (self.switch_frac * self.total_steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(&self.model)?;
        self.optimizer.validate()?;
        if self.total_steps == 0 || self.ckpt_every == 0 {
            return Err(Error::InvalidConfig("steps and ckpt-every must be >= 1".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig("batch size and accumulation must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.switch_frac) {
            return Err(Error::InvalidConfig("switch_frac must be in [0,1]".into()));
        }
        if self.lambda_initial < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.eval_ood == 0 || self.eval_id == 0 || self.eval_lm == 0 {
            return Err(Error::InvalidConfig("eval set sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub val_loss: f64,
    pub p_id: f64,
    pub p_ood: f64,
    pub lambda: f64,
    pub lr: f64,
}

struct EvalSets {
    ood: Batch,
    id: Batch,
    lm: Batch,
}

impl EvalSets {
    fn build(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, STREAM_EVAL);
        let ood = generate_batch(&cfg.task, &cfg.model, &mut rng, BatchMode::EvalOod, cfg.eval_ood)?;
        let id = generate_batch(&cfg.task, &cfg.model, &mut rng, BatchMode::EvalId, cfg.eval_id)?;
        let mut lm_task = cfg.task.clone();
        lm_task.p_probe = 0.0;
        let lm = generate_batch(&lm_task, &cfg.model, &mut rng, BatchMode::Train, cfg.eval_lm)?;
        Ok(EvalSets { ood, id, lm })
    }

    fn evaluate<T: Real>(&self, model: &Model<T>) -> Result<(f64, f64, f64)> {
        let val_loss = model.forward_loss(&self.lm, 0.0)?.lm;
        let (ci, ti) = model.probe_accuracy(&self.id)?;
        let (co, to) = model.probe_accuracy(&self.ood)?;
        Ok((val_loss, ci as f64 / ti as f64, co as f64 / to as f64))
    }
}

fn write_eval_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from("step,val_loss,p_id,p_ood,lambda,lr\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            sig17(r.val_loss),
            sig17(r.p_id),
            sig17(r.p_ood),
            sig17(r.lambda),
            sig17(r.lr),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_divergence(out_dir: &Path, step: u64, what: &str) {
    let diag = serde_json::json!({ "step": step, "what": what });
    let _ = fs::write(
        out_dir.join("divergence.json"),
        serde_json::to_string_pretty(&diag).unwrap_or_default(),
    );
}

/// Runs training to completion: checkpoint at step 0 and every
/// `ckpt_every` steps, evaluation at every checkpoint, eval.csv and
/// config.json in the run directory. Fully deterministic in the seed.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut model: Model<f32> = Model::init(cfg.model.clone(), &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model)?;
    let mut train_rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let eval_sets = EvalSets::build(cfg)?;
    let switch_step = cfg.switch_step();

    let mut records = Vec::new();
    let mut checkpoint_and_eval = |model: &Model<f32>, step: u64, lr: f64| -> Result<()> {
        let ckpt = model.to_checkpoint(step);
        write_checkpoint(&ckpt, &out_dir.join(format!("ckpt_{step}.dsck")))?;
        let (val_loss, p_id, p_ood) = eval_sets.evaluate(model)?;
        records.push(EvalRecord {
            step,
            val_loss,
            p_id,
            p_ood,
            lambda: lambda_at(cfg.lambda_initial, switch_step, step),
            lr,
        });
        Ok(())
    };

    checkpoint_and_eval(&model, 0, 0.0)?;
    for t in 1..=cfg.total_steps {
        let lambda = lambda_at(cfg.lambda_initial, switch_step, t);
        let mut grads = model.zeros_like();
        for _ in 0..cfg.grad_accum {
            let batch = generate_batch(
                &cfg.task,
                &cfg.model,
                &mut train_rng,
                BatchMode::Train,
                cfg.batch_size,
            )?;
            let step_result = model.backward(&batch, lambda);
            let (_, g) = match step_result {
                Ok(v) => v,
                Err(Error::NonFinite { what, .. }) => {
                    write_divergence(out_dir, t, &what);
                    write_eval_csv(&out_dir.join("eval.csv"), &records)?;
                    return Err(Error::NonFinite { what, step: t });
                }
                Err(e) => return Err(e),
            };
            for (acc, gi) in grads.iter_mut().zip(&g) {
                let scale = 1.0 / cfg.grad_accum as f32;
                for (a, &x) in acc.iter_mut().zip(gi) {
                    *a += x * scale;
                }
            }
        }
        clip_global_norm(&mut grads, cfg.optimizer.clip);
        let lr = lr_at(&cfg.optimizer, t, cfg.total_steps);
        opt.step(&mut model, &grads, lr);
        if model
            .params
            .iter()
            .any(|p| p.data.iter().any(|x| !x.is_finite()))
        {
            write_divergence(out_dir, t, "parameters");
            write_eval_csv(&out_dir.join("eval.csv"), &records)?;
            return Err(Error::NonFinite {
                what: "parameters".into(),
                step: t,
            });
        }
        if t % cfg.ckpt_every == 0 {
            checkpoint_and_eval(&model, t, lr)?;
        }
    }
    write_eval_csv(&out_dir.join("eval.csv"), &records)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReheatRecord {
    pub step: u64,
    pub val_loss: f64,
    pub p_id: f64,
    pub p_ood: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Backbone coordinate of the drift from the drift origin (the reheat
    /// start unless an earlier anchor checkpoint was supplied), when a
    /// backbone direction was given.
    pub a: Option<f64>,
    /// Residual norm of that drift.
    pub r_norm: Option<f64>,
}

pub fn write_reheat_csv(path: &Path, records: &[ReheatRecord]) -> Result<()> {
    let mut out = String::from("step,val_loss,p_id,p_ood,lambda,lr,a,r_norm\n");
    for r in records {
        let opt_fmt = |v: Option<f64>| v.map(sig17).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            sig17(r.val_loss),
            sig17(r.p_id),
            sig17(r.p_ood),
            sig17(r.lambda),
            sig17(r.lr),
            opt_fmt(r.a),
            opt_fmt(r.r_norm),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct ReheatConfig {
    pub optimizer: OptimizerConfig,
    pub lambda_new: f64,
    pub steps: u64,
    pub lr: f64,
    pub eval_every: u64,
    pub seed: u64,
}

/// Resumes from a checkpoint with zeroed optimizer state, lambda raised to
/// `lambda_new`, and a fresh cosine schedule over the reheat horizon.
/// When a backbone direction is supplied, each evaluation also records the
/// backbone coordinate a(t) and residual norm of the drift from the drift
/// origin (the reheat start, unless an earlier anchor checkpoint is passed
/// so the accumulated coordinate continues from the original run). lr = 0
/// freezes the parameters exactly.
pub fn reheat(
    start: &Checkpoint,
    cfg: &TrainConfig,
    rh: &ReheatConfig,
    backbone: Option<&[f64]>,
    sel: &TrunkSelector,
    drift_origin: Option<&Checkpoint>,
) -> Result<Vec<ReheatRecord>> {
    if rh.lambda_new <= 0.0 {
        return Err(Error::InvalidConfig("reheat lambda must be > 0".into()));
    }
    if rh.steps == 0 || rh.eval_every == 0 {
        return Err(Error::InvalidConfig("reheat steps and eval-every must be >= 1".into()));
    }
    if rh.lr < 0.0 {
        return Err(Error::InvalidConfig("reheat lr must be >= 0".into()));
    }
    let mut model: Model<f32> = Model::from_checkpoint(cfg.model.clone(), start)?;
    // a(t)/r(t) anchor: the original run's anchor when supplied (so the
    // records continue the accumulated backbone coordinate), otherwise the
    // reheat start itself.
    let origin = match drift_origin {
        Some(c) => {
            let o = crate::checkpoint::flatten_trunk(c, sel)?;
            let here = model.flatten_trunk_params(sel)?;
            if o.len() != here.len() {
                return Err(Error::DimensionMismatch {
                    expected: here.len(),
                    got: o.len(),
                });
            }
            o
        }
        None => model.flatten_trunk_params(sel)?,
    };
    if let Some(v) = backbone {
        if v.len() != origin.len() {
            return Err(Error::DimensionMismatch {
                expected: origin.len(),
                got: v.len(),
            });
        }
    }
    let eval_cfg = TrainConfig {
        seed: rh.seed,
        ..cfg.clone()
    };
    let eval_sets = EvalSets::build(&eval_cfg)?;
    let mut sched = rh.optimizer.clone();
    sched.warmup_frac = 0.0;
    let frozen = rh.lr == 0.0;
    if !frozen {
        sched.lr = rh.lr;
    }
    let mut opt = if frozen {
        None
    } else {
        Some(Optimizer::new(sched.clone(), &model)?)
    };
    let mut train_rng = stream_rng(rh.seed, STREAM_TRAIN);
    let mut records = Vec::new();
    let mut record = |model: &Model<f32>, step: u64, lr: f64| -> Result<()> {
        let (val_loss, p_id, p_ood) = eval_sets.evaluate(model)?;
        let (a, r_norm) = match backbone {
            Some(v) => {
                let drift: Vec<f64> = model
                    .flatten_trunk_params(sel)?
                    .iter()
                    .zip(&origin)
                    .map(|(x, o)| x - o)
                    .collect();
                let a = dot(&drift, v);
                let r: Vec<f64> = drift.iter().zip(v).map(|(d, b)| d - a * b).collect();
                (Some(a), Some(norm(&r)))
            }
            None => (None, None),
        };
        records.push(ReheatRecord {
            step,
            val_loss,
            p_id,
            p_ood,
            lambda: rh.lambda_new,
            lr,
            a,
            r_norm,
        });
        Ok(())
    };
    record(&model, 0, 0.0)?;
    if frozen {
        // parameters cannot move; replicate the step-0 evaluation
        let base = records[0];
        let mut t = rh.eval_every;
        while t <= rh.steps {
            records.push(ReheatRecord { step: t, lr: 0.0, ..base });
            t += rh.eval_every;
        }
        return Ok(records);
    }
    for t in 1..=rh.steps {
        let batch = generate_batch(
            &cfg.task,
            &cfg.model,
            &mut train_rng,
            BatchMode::Train,
            cfg.batch_size,
        )?;
        let (_, mut grads) = model.backward(&batch, rh.lambda_new)?;
        clip_global_norm(&mut grads, sched.clip);
        let lr = lr_at(&sched, t, rh.steps);
        opt.as_mut().unwrap().step(&mut model, &grads, lr);
        if t % rh.eval_every == 0 {
            record(&model, t, lr)?;
        }
    }
    Ok(records)
}

/// Samples M per-batch trunk gradients of the composite loss at the given
/// parameters, for the curvature probes. The batch mixture matches
/// training (same task config and probe probability).
pub fn gradient_rows<T: Real>(
    model: &Model<T>,
    task: &TaskConfig,
    lambda: f64,
    m_batches: usize,
    batch_size: usize,
    seed: u64,
    sel: &TrunkSelector,
) -> Result<GradientMatrix> {
    if m_batches == 0 {
        return Err(Error::InvalidConfig("need at least one gradient batch".into()));
    }
    let mut rng = stream_rng(seed, STREAM_GRADS);
    let mut rows = Vec::with_capacity(m_batches);
    for _ in 0..m_batches {
        let batch = generate_batch(task, &model.cfg, &mut rng, BatchMode::Train, batch_size)?;
        let (_, grads) = model.backward(&batch, lambda)?;
        rows.push(model.flatten_trunk_grads(&grads, sel)?);
    }
    GradientMatrix::new(rows)
}
