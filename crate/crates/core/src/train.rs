//! Optimization loop, evaluation driver and thread configuration.
//!
//! Training draws one randomly placed (and optionally augmented) window
//! per training clip per epoch in a seeded permutation order, minimizes
//! [`overall_loss`] with Adam (L2-coupled weight decay, constant learning
//! rate, global-norm gradient clipping), folds batch-norm statistics into
//! the running estimates after every step, validates periodically and keeps
//! the checkpoint with the lowest validation RMSE.
//!
//! Every random draw derives from `TrainConfig::seed`; kernels reduce in a
//! fixed order, so runs are bit-identical for any worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::loss::{overall_loss, write_curves, CurveRow, LossWeights, Targets};
use crate::model::{checkpoint, forward, Model, ModelConfig, ModelKind};
use crate::nn::{Mode, ParamStore, Session, BN_MOMENTUM};
use crate::rng::Rng;
use crate::signal::{protocol_hr, ClipResult, Report};
use crate::synth::{training_sample, Clip};
use crate::tensor::{Element, Tensor};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PHYSFORMER_THREADS";

/// Builds the global worker pool from [`THREADS_ENV`] (all cores when
/// unset). Returns the thread count in effect; a pool that already exists
/// is left unchanged.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| config_err!("{THREADS_ENV}={v} is not a thread count"))?;
        if n == 0 {
            return Err(config_err!("{THREADS_ENV} must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Architecture override; the desk configuration of `model` otherwise.
    pub architecture: Option<ModelConfig>,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Apply the periodic-attention loss (PhysFormer++ only).
    pub attention_loss: bool,
    /// Random flips and speed changes of training windows.
    pub augment: bool,
    /// Validate every this many epochs (and after the last).
    pub val_every: usize,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::PhysFormer,
            architecture: None,
            lr: 1e-4,
            weight_decay: 5e-5,
            epochs: 25,
            batch_size: 2,
            seed: 0,
            loss: LossWeights::default(),
            attention_loss: true,
            augment: true,
            val_every: 5,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> ModelConfig {
        match &self.architecture {
            Some(a) => ModelConfig { kind: self.model, ..a.clone() },
            None => ModelConfig::desk(self.model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(config_err!("epochs, batch_size and val_every must be at least 1"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(config_err!("lr must be positive; weight decay and clipping non-negative"));
        }
        self.architecture().validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<E: Element = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<E>>,
    pub v: BTreeMap<String, Tensor<E>>,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with the decay `wd·θ` added to every gradient. Every
/// parameter must have a gradient.
pub fn adam_step<E: Element>(
    params: &mut ParamStore<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    state: &mut AdamState<E>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    let (b1, b2) = ADAM_BETAS;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::State(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(dim_err!("gradient {:?} for `{name}` of shape {:?}", g.shape(), p.shape()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gd = gv.to_f64() + wd * pv.to_f64();
            let mn = b1 * mv.to_f64() + (1.0 - b1) * gd;
            let vn = b2 * vv.to_f64() + (1.0 - b2) * gd * gd;
            *mv = E::from_f64(mn);
            *vv = E::from_f64(vn);
            *pv = E::from_f64(pv.to_f64() - lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS));
        }
    }
    Ok(())
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<E: Element>(grads: &mut BTreeMap<String, Tensor<E>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = E::from_f64(v.to_f64() * s));
        }
    }
    norm
}

/// Index partition: every fifth clip (index ≡ 4 mod 5) is held out.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 5 != 4)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub curve: CurveRow,
    pub steps: usize,
    /// Validation report when this epoch validated.
    pub validation: Option<Report>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The best model by validation RMSE.
    pub best: Model,
    pub best_epoch: usize,
    pub best_rmse: f64,
    pub last: Model,
    pub curves: Vec<CurveRow>,
    pub logs: Vec<EpochLog>,
}

/// Where training writes artifacts: `checkpoint/` (best model),
/// `curves.csv`, `validation.csv` and `train_config.json`.
#[derive(Clone, Debug)]
pub struct OutputDir(pub PathBuf);

/// Trains `model` on `train` clips, validating on `val`.
pub fn train(
    model: Model,
    train: &[Clip],
    val: &[Clip],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    let mut model = model;
    let mcfg = model.config.clone();
    let frames = mcfg.frames;
    let use_atten = cfg.attention_loss && mcfg.kind == ModelKind::PhysFormerPP;
    let mut adam = AdamState::default();
    let mut order_rng = Rng::derive(cfg.seed, 0x7a1);
    let mut best: Option<(Model, usize, f64)> = None;
    let mut curves = Vec::new();
    let mut logs = Vec::new();
    let mut val_rows = Vec::new();
    if let Some(OutputDir(dir)) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    }

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut acc = CurveRow { epoch, beta: cfg.loss.beta(epoch, cfg.epochs), ..CurveRow::default() };
        let mut steps = 0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples = batch
                .par_iter()
                .enumerate()
                .map(|(k, &ci)| {
                    let stream = ((epoch as u64) << 32) | ((bi * cfg.batch_size + k) as u64);
                    let mut rng = Rng::derive(cfg.seed ^ 0x5a5a_0000, stream);
                    training_sample::<f32>(&train[ci], frames, &mut rng, cfg.augment)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack(&samples.iter().map(|s| s.x.clone()).collect::<Vec<_>>())?;
            let bvp_flat: Vec<f64> = samples.iter().flat_map(|s| s.bvp.iter().copied()).collect();
            let bvp = Tensor::from_f64(vec![samples.len(), frames], &bvp_flat)?;
            let hr: Vec<f64> = samples.iter().map(|s| s.hr).collect();
            let fps = train[batch[0]].fps;

            let mut sess = Session::new(&model.params, Mode::Train, true);
            let xv = sess.tape.constant(x);
            let step = (|| {
                let out = forward(&mut sess, &mcfg, xv)?;
                let maps = if use_atten { out.periodic_maps.clone() } else { Vec::new() };
                let terms = overall_loss(&mut sess.tape, out.signal, Targets { bvp: &bvp, hr: &hr, fps }, &maps, &cfg.loss, epoch, cfg.epochs)?;
                sess.tape.backward(terms.total)?;
                Ok::<_, Error>(terms)
            })();
            let terms = step.map_err(|e| match e {
                Error::NonFinite(op) => Error::Diverged(format!("epoch {epoch}, batch {bi}: non-finite value in `{op}`")),
                e => e,
            })?;
            let total = sess.tape.value(terms.total).data()[0].to_f64();
            if !total.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {bi}: loss is {total}")));
            }
            let mut grads = sess.grads();
            let (_, stats) = sess.finish();
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam_step(&mut model.params, &grads, &mut adam, cfg.lr, cfg.weight_decay)?;
            for (prefix, s) in &stats {
                model.params.update_running_stats(prefix, s, BN_MOMENTUM);
            }
            acc.alpha_term += cfg.loss.alpha * terms.time;
            acc.ce += terms.ce;
            acc.ld += terms.ld;
            acc.atten += terms.atten;
            acc.total += total;
            steps += 1;
        }
        let n = steps as f64;
        for v in [&mut acc.alpha_term, &mut acc.ce, &mut acc.ld, &mut acc.atten, &mut acc.total] {
            *v /= n;
        }
        curves.push(acc);

        let validation = if !val.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs) {
            let report = evaluate(&model, val)?;
            let rmse = report.metrics.rmse;
            val_rows.push((epoch, report.metrics));
            if best.as_ref().map_or(true, |b| rmse < b.2) {
                if let Some(OutputDir(dir)) = out {
                    checkpoint::save(&model, dir.join("checkpoint"), epoch, Some(order_rng.state()))?;
                }
                best = Some((model.clone(), epoch, rmse));
            }
            Some(report)
        } else {
            None
        };
        let log = EpochLog { curve: acc, steps, validation };
        on_epoch(&log);
        logs.push(log);
        if let Some(OutputDir(dir)) = out {
            write_curves(std::fs::File::create(dir.join("curves.csv"))?, &curves)?;
            let mut s = String::from("epoch,sd,mae,rmse,r\n");
            for (e, m) in &val_rows {
                s += &format!("{e},{},{},{},{}\n", m.sd, m.mae, m.rmse, m.r.map(|r| r.to_string()).unwrap_or_default());
            }
            std::fs::write(dir.join("validation.csv"), s)?;
        }
    }
    let (best, best_epoch, best_rmse) = match best {
        Some(b) => b,
        None => {
            if let Some(OutputDir(dir)) = out {
                checkpoint::save(&model, dir.join("checkpoint"), cfg.epochs, Some(order_rng.state()))?;
            }
            (model.clone(), cfg.epochs, f64::NAN)
        }
    };
    Ok(TrainOutcome { best, best_epoch, best_rmse, last: model, curves, logs })
}

/// Window starts `0, T, 2T, …` plus one aligned to the end of the clip.
pub fn window_starts(frames: usize, t: usize) -> Vec<usize> {
    if t == 0 || frames < t {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=frames - t).step_by(t).collect();
    if starts.last() != Some(&(frames - t)) {
        starts.push(frames - t);
    }
    starts
}

/// Batch norm uses running statistics when the model has them and each
/// window's own statistics otherwise (an untrained model).
pub fn inference_mode<E: Element>(model: &Model<E>) -> Mode {
    if model.params.buffers().next().is_some() {
        Mode::Eval
    } else {
        Mode::Train
    }
}

fn check_clip_length<E: Element>(model: &Model<E>, clip: &Clip) -> Result<usize> {
    let t = model.config.frames;
    if clip.frames < t {
        return Err(Error::Protocol(format!("clip {} has {} frames, the model needs {t}", clip.id, clip.frames)));
    }
    Ok(t)
}

fn batched<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshape(shape)
}

/// Predicts a whole clip window by window (see [`window_starts`]). Each
/// window's output is standardized; overlapping frames are averaged.
pub fn predict_clip<E: Element>(model: &Model<E>, clip: &Clip) -> Result<Vec<f64>> {
    let t = check_clip_length(model, clip)?;
    let mode = inference_mode(model);
    let mut sum = vec![0.0; clip.frames];
    let mut count = vec![0usize; clip.frames];
    for s in window_starts(clip.frames, t) {
        let x = batched(&clip.window::<E>(s, t)?.x)?;
        let y = model.predict(&x, mode)?.to_f64_vec();
        let m = y.iter().sum::<f64>() / t as f64;
        let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64).sqrt().max(1e-12);
        for (i, v) in y.iter().enumerate() {
            sum[s + i] += (v - m) / sd;
            count[s + i] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Mean `BCE(σ(S'), PM')` of a PhysFormer++ over every window of every
/// clip, with each window's peak map taken from its ground-truth BVP.
pub fn periodic_bce<E: Element>(model: &Model<E>, clips: &[Clip]) -> Result<f64> {
    if model.config.kind != ModelKind::PhysFormerPP {
        return Err(config_err!("periodic maps exist only in physformerpp"));
    }
    if clips.is_empty() {
        return Err(Error::Protocol("evaluation set is empty".into()));
    }
    let mode = inference_mode(model);
    let per_clip = clips
        .par_iter()
        .map(|clip| {
            let t = check_clip_length(model, clip)?;
            let starts = window_starts(clip.frames, t);
            let mut total = 0.0;
            for &s in &starts {
                let w = clip.window::<E>(s, t)?;
                let mut sess = Session::new(&model.params, mode, false);
                let x = sess.tape.constant(batched(&w.x)?);
                let out = forward(&mut sess, &model.config, x)?;
                let t_sub = sess.tape.shape(out.periodic_maps[0])[2];
                let bvp = Tensor::<E>::from_f64(vec![1, t], &w.bvp)?;
                let pm = crate::loss::batch_peak_maps(&bvp, clip.fps, t_sub)?;
                let l = crate::loss::atten_loss(&mut sess.tape, &out.periodic_maps, &pm)?;
                total += sess.tape.value(l).data()[0].to_f64();
            }
            Ok(total / starts.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_clip.iter().sum::<f64>() / per_clip.len() as f64)
}

/// Scores one predicted signal per clip against the clip labels using the
/// segment protocol of [`protocol_hr`].
pub fn evaluate_signals(method: &str, clips: &[Clip], signals: &[Vec<f64>]) -> Result<Report> {
    if clips.is_empty() {
        return Err(Error::Protocol("evaluation set is empty".into()));
    }
    if clips.len() != signals.len() {
        return Err(dim_err!("{} signals for {} clips", signals.len(), clips.len()));
    }
    let results = clips
        .iter()
        .zip(signals)
        .map(|(c, y)| {
            let pred = protocol_hr(y, c.fps)?;
            Ok(ClipResult { clip_id: c.id.clone(), gt_hr: c.hr, pred_hr: pred, abs_error: (pred - c.hr).abs() })
        })
        .collect::<Result<Vec<_>>>()?;
    Report::new(method, results)
}

/// Predicts every clip (in parallel, reported in input order) and scores
/// the predictions.
pub fn evaluate<E: Element>(model: &Model<E>, clips: &[Clip]) -> Result<Report> {
    let signals = clips.par_iter().map(|c| predict_clip(model, c)).collect::<Result<Vec<_>>>()?;
    evaluate_signals(&model.config.kind.to_string(), clips, &signals)
}
