//! SGD training of the two-branch model on the combined objective.

mod checkpoint;
mod metrics;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use metrics::{read_metrics, write_metrics, EpochRecord, MetricsRecord, StepRecord};

use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::datagen::{make_batch, steps_per_epoch, Batch, DatasetSplit, Scene};
use crate::error::{param_err, CcvcError, Result};
use crate::eval::{evaluate, evaluate_miou};
use crate::losses::{
    conflict_partition_with, consistency_loss_cpl_grad, cosine_discrepancy_grad,
    supervised_loss_grad, total_loss, ConsistencyTerm, LossBreakdown, LossComponents,
};
use crate::model::{BranchId, BranchOutput, BranchTape, MapTape, TwoBranchModel};
use crate::rng::{self, TAG_DROPOUT};
use crate::tensor::{softmax_channels, Tensor};

/// `base_lr * (1 - step / total_steps)^power`.
pub fn poly_lr(base_lr: f64, step: u64, total_steps: u64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return param_err("total_steps", "must be positive");
    }
    if step > total_steps {
        return param_err("step", format!("{step} > total_steps {total_steps}"));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub model: TwoBranchModel<f32>,
    /// Optimisation steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Length of the poly schedule.
    pub total_steps: u64,
    /// SGD momentum buffers in parameter visiting order.
    pub momentum: Vec<Vec<f32>>,
    pub history: Vec<StepRecord>,
    pub epoch_log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let model = TwoBranchModel::init(&config.arch(), config.seed)?;
        let mut momentum = Vec::new();
        model.visit_params(&mut |p| momentum.push(vec![0.0; p.len()]));
        Ok(Self {
            config: config.clone(),
            model,
            step: 0,
            epoch: 0,
            total_steps,
            momentum,
            history: Vec::new(),
            epoch_log: Vec::new(),
        })
    }

    /// Step and epoch records in log order.
    pub fn metrics(&self) -> Vec<MetricsRecord> {
        let mut out = Vec::with_capacity(self.history.len() + self.epoch_log.len());
        let mut steps = self.history.iter().peekable();
        for e in &self.epoch_log {
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                out.push(MetricsRecord::Step(s.clone()));
            }
            out.push(MetricsRecord::Epoch(e.clone()));
        }
        out.extend(steps.map(|s| MetricsRecord::Step(s.clone())));
        out
    }
}

/// Knobs that are not part of the experiment itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    /// Channel dropout in the mapping head.
    pub map_dropout: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self { map_dropout: true }
    }
}

type Taped = (BranchOutput<f32>, BranchTape<f32>);

/// Branch-1 feature gradient, branch-2 feature (or mapped feature)
/// gradient, and the map-head tape when the map head was used.
type DisGrads = (Tensor<f32>, Tensor<f32>, Option<MapTape<f32>>);

/// Forward tapes plus the loss gradients that feed the backward pass.
struct Pass {
    breakdown: LossBreakdown,
    labelled: [Taped; 2],
    unlabelled: Option<[Taped; 2]>,
    /// Per stream (labelled, unlabelled).
    dis_grads: [Option<DisGrads>; 2],
    d_logits_l: [Tensor<f32>; 2],
    d_logits_u: Option<[Tensor<f32>; 2]>,
}

fn forward_pair(model: &TwoBranchModel<f32>, x: &Tensor<f32>) -> Result<[Taped; 2]> {
    Ok([
        model.forward_branch_taped(BranchId::First, x, true)?,
        model.forward_branch_taped(BranchId::Second, x, true)?,
    ])
}

fn scaled(t: &Tensor<f64>, s: f64) -> Tensor<f32> {
    let mut t = t.clone();
    t.scale(s);
    Tensor::from_f64(&t)
}

/// Runs the forward pass and every enabled loss term. Terms with zero
/// weight are neither evaluated nor differentiated and report 0.
fn objective(
    model: &TwoBranchModel<f32>,
    batch: &Batch,
    cfg: &ExperimentConfig,
    step: u64,
    opts: StepOptions,
) -> Result<Pass> {
    let w = cfg.loss_weights();
    let use_con = w.lambda2 > 0.0;
    let use_dis = w.lambda3 > 0.0;
    let labelled = forward_pair(model, &batch.labelled_images)?;
    let unlabelled = if use_con || use_dis {
        Some(forward_pair(model, &batch.unlabelled_images)?)
    } else {
        None
    };
    let mut c = LossComponents::default();

    let (sup, g_sup) = supervised_loss_grad(
        &labelled[0].0.logits.to_f64(),
        &labelled[1].0.logits.to_f64(),
        &batch.labelled_labels,
    )?;
    c.sup = sup.value;
    let d_logits_l = [scaled(&g_sup[0], w.lambda1), scaled(&g_sup[1], w.lambda1)];

    let mut d_logits_u = None;
    if let (true, Some(u)) = (use_con, &unlabelled) {
        let l1 = u[0].0.logits.to_f64();
        let l2 = u[1].0.logits.to_f64();
        let part = conflict_partition_with(
            &softmax_channels(&l1),
            &softmax_channels(&l2),
            cfg.gamma,
            cfg.confidence_source(),
        )?;
        let weights = cfg.mask_cutout.then(|| batch.unlabelled_cutout_weights());
        let (con, g) = consistency_loss_cpl_grad(
            &l1,
            &l2,
            &part,
            cfg.effective_omega(),
            weights.as_deref(),
            ConsistencyTerm::Average,
        )?;
        c.con = con.value;
        c.con_cc = con.cc;
        c.con_e = con.e;
        c.con_cc_frac = part.cc_fraction();
        d_logits_u = Some([scaled(&g[0], w.lambda2), scaled(&g[1], w.lambda2)]);
    }

    let mut dis_grads = [None, None];
    if use_dis {
        let streams = [Some(&labelled), unlabelled.as_ref()];
        for (s, pair) in streams.into_iter().enumerate() {
            let pair = pair.expect("unlabelled stream is run when dis is on");
            let f1 = &pair[0].0.features;
            let f2 = &pair[1].0.features;
            let (target, tape) = if cfg.use_map {
                let seed = opts
                    .map_dropout
                    .then(|| rng::derive(cfg.seed, &[TAG_DROPOUT, step, s as u64]));
                let (m, t) = model.map_head.forward_opts(f2, true, seed)?;
                (m, Some(t))
            } else {
                (f2.clone(), None)
            };
            let (v, g1, g2) = cosine_discrepancy_grad(&f1.to_f64(), &target.to_f64())?;
            if s == 0 {
                c.dis_l = v;
            } else {
                c.dis_u = v;
            }
            let k = 0.5 * w.lambda3;
            dis_grads[s] = Some((scaled(&g1, k), scaled(&g2, k), tape));
        }
    }

    let breakdown = total_loss(&c, &w).map_err(|e| match e {
        CcvcError::NonFinite { component, value } => CcvcError::NonFinite {
            component: format!(
                "{component} at step {step} (sup {}, con {}, dis_l {}, dis_u {})",
                c.sup, c.con, c.dis_l, c.dis_u
            ),
            value,
        },
        other => other,
    })?;
    Ok(Pass {
        breakdown,
        labelled,
        unlabelled,
        dis_grads,
        d_logits_l,
        d_logits_u,
    })
}

/// Total objective on `batch` without changing the model.
pub fn batch_objective(
    model: &TwoBranchModel<f32>,
    batch: &Batch,
    cfg: &ExperimentConfig,
    step: u64,
    opts: StepOptions,
) -> Result<LossBreakdown> {
    Ok(objective(model, batch, cfg, step, opts)?.breakdown)
}

/// Accumulates parameter gradients of the objective into `model`.
fn backward(model: &mut TwoBranchModel<f32>, pass: Pass) {
    let Pass {
        labelled,
        unlabelled,
        dis_grads,
        d_logits_l,
        d_logits_u,
        ..
    } = pass;
    let streams = [
        Some((labelled, Some(d_logits_l))),
        unlabelled.map(|u| (u, d_logits_u)),
    ];
    for (stream, dis) in streams.into_iter().zip(dis_grads) {
        let Some((pair, d_logits)) = stream else {
            continue;
        };
        let mut d_feat: [Option<Tensor<f32>>; 2] = [None, None];
        if let Some((g1, g2, map_tape)) = dis {
            let g2 = match map_tape {
                Some(t) => model.map_head.backward(&t, &g2),
                None => g2,
            };
            d_feat = [Some(g1), Some(g2)];
        }
        let [(_, t1), (_, t2)] = pair;
        let [dl1, dl2] = match d_logits {
            Some([a, b]) => [Some(a), Some(b)],
            None => [None, None],
        };
        model.branches[0].backward(&t1, d_feat[0].as_ref(), dl1.as_ref());
        model.branches[1].backward(&t2, d_feat[1].as_ref(), dl2.as_ref());
    }
}

/// Gradients of the objective on `batch`, left in the parameters' `grad`
/// fields after zeroing. Running statistics are updated as in training.
pub fn compute_gradients(
    model: &mut TwoBranchModel<f32>,
    batch: &Batch,
    cfg: &ExperimentConfig,
    step: u64,
    opts: StepOptions,
) -> Result<LossBreakdown> {
    let pass = objective(model, batch, cfg, step, opts)?;
    let breakdown = pass.breakdown;
    model.zero_grad();
    backward(model, pass);
    Ok(breakdown)
}

/// One forward/backward pass and SGD update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
    train_step_with(state, batch, StepOptions::default())
}

pub fn train_step_with(
    state: &mut TrainState,
    batch: &Batch,
    opts: StepOptions,
) -> Result<LossBreakdown> {
    let cfg = &state.config;
    let lr = poly_lr(cfg.base_lr, state.step, state.total_steps, cfg.poly_power)?;
    let breakdown = compute_gradients(&mut state.model, batch, cfg, state.step, opts)?;
    sgd_update(state, lr as f32);
    state.model.zero_grad();
    state.step += 1;
    Ok(breakdown)
}

/// Momentum SGD with coupled weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
fn sgd_update(state: &mut TrainState, lr: f32) {
    let mu = state.config.momentum as f32;
    let wd = state.config.weight_decay as f32;
    let TrainState {
        model, momentum, ..
    } = state;
    let mut bufs = momentum.iter_mut();
    model.visit_params_mut(&mut |p| {
        let buf = bufs.next().expect("one buffer per parameter");
        for ((v, x), g) in buf.iter_mut().zip(p.value.iter_mut()).zip(&p.grad) {
            *v = mu * *v + (*g + wd * *x);
            *x -= lr * *v;
        }
    });
}

/// Loop settings that do not affect results.
#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Where `metrics.jsonl` and checkpoints go; nothing is written if unset.
    pub out_dir: Option<&'a Path>,
    /// State to continue from; its config must equal the loop's.
    pub resume: Option<TrainState>,
    /// Return after this many completed epochs.
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt-{epoch}.bin")
}

/// Trains for `config.epochs` epochs of `ceil(|unlabelled| / (batch_size / 2))`
/// steps, evaluating on `val` after each epoch.
pub fn train_loop(
    split: &DatasetSplit,
    val: &[Scene],
    config: &ExperimentConfig,
    mut opts: LoopOptions<'_>,
) -> Result<TrainState> {
    config.validate()?;
    if val.is_empty() {
        return param_err("val", "validation split is empty");
    }
    let spe = steps_per_epoch(split, config.batch_size) as u64;
    let total = config.epochs as u64 * spe;
    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.config != *config {
                return Err(CcvcError::Config {
                    key: "resume".into(),
                    reason: "checkpoint was trained with a different config".into(),
                });
            }
            s
        }
        None => TrainState::new(config, total)?,
    };
    state.total_steps = total;

    let mut log = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.jsonl");
            write_metrics(&path, &state.metrics())?;
            Some(std::io::BufWriter::new(
                std::fs::OpenOptions::new().append(true).open(&path)?,
            ))
        }
        None => None,
    };
    if config.epochs == 0 {
        if let Some(dir) = opts.out_dir {
            save_checkpoint(&state, &dir.join(checkpoint_name(0)))?;
        }
    }

    for epoch in state.epoch + 1..=config.epochs {
        for _ in 0..spe {
            let batch = make_batch(split, config.batch_size, state.step, config)?;
            let step = state.step;
            let lr = poly_lr(config.base_lr, step, total, config.poly_power)?;
            let b = train_step(&mut state, &batch)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                sup: b.sup,
                con: b.con,
                con_cc_frac: b.con_cc_frac,
                dis: b.dis,
                dis_l: b.dis_l,
                dis_u: b.dis_u,
                total: b.total,
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", MetricsRecord::Step(rec.clone()).to_line())?;
            }
            state.history.push(rec);
        }
        let ev = evaluate(&state.model, val, config.confidence_threshold)?;
        let rec = EpochRecord {
            epoch,
            val_miou: ev.miou,
            train_miou: evaluate_miou(&state.model, &split.labelled)?,
            mean_feature_cosine: ev.mean_cosine,
            mapped_feature_cosine: ev.mapped_cosine,
            confident_frac: ev.confidence.confident_frac,
            confident_acc: ev.confidence.confident_acc,
            confident_miou: ev.confidence.confident_miou,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", MetricsRecord::Epoch(rec.clone()).to_line())?;
            f.flush()?;
        }
        state.epoch = epoch;
        state.epoch_log.push(rec);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(state.epoch_log.last().expect("just pushed"));
        }
        if let Some(dir) = opts.out_dir {
            if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
                save_checkpoint(&state, &dir.join(checkpoint_name(epoch)))?;
            }
        }
        if opts.stop_after == Some(epoch) {
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_closed_forms() {
        assert_eq!(poly_lr(0.001, 0, 100, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(0.001, 100, 100, 0.9).unwrap(), 0.0);
        let half = poly_lr(0.001, 50, 100, 0.9).unwrap();
        assert!((half - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(0.001, 101, 100, 0.9).is_err());
        assert!(poly_lr(0.001, 0, 0, 0.9).is_err());
    }
}
