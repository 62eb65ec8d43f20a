//! Training loop: stochastic-length frame sampling, AdamW with a warmup plus
//! cosine schedule, per-sample tapes reduced in a fixed order, and evaluation
//! over synthetic sequences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::detection::{
    decode, detection_loss, evaluate_ap, head_output, iou, seg_targets, ApConfig, Detection, FrameEval, FrameTargets,
    LossBreakdown, LossWeights,
};
use crate::fusion::{Frame, FusionState, Model, StepOutput, Strategy};
use crate::geometry::Box3D;
use crate::numerics::{ParamStore, Tape};
use crate::pillars::voxelize;
use crate::rng::Rng;
use crate::synth::{speed_bucket, Sequence, NUM_SPEED_BUCKETS};
use crate::{Error, Result};

/// Stochastic-length history sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlfPolicy {
    pub max_history: usize,
}

impl Default for SlfPolicy {
    fn default() -> Self {
        Self { max_history: 3 }
    }
}

/// Draws `S` uniformly from `0..=min(available, max_history)`, then `S`
/// distinct history indices from `0..available`. Returns them ascending with
/// the current index `available` appended.
pub fn sample_slf(available: usize, policy: &SlfPolicy, rng: &mut Rng) -> Vec<usize> {
    let s = rng.below(available.min(policy.max_history) + 1);
    let mut pool: Vec<usize> = (0..available).collect();
    // partial Fisher-Yates: the first `s` slots are a uniform subset
    for i in 0..s {
        let j = i + rng.below(available - i);
        pool.swap(i, j);
    }
    let mut picked = pool[..s].to_vec();
    picked.sort_unstable();
    picked.push(available);
    picked
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub warmup: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub slf: SlfPolicy,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            warmup: 200,
            lr_start: 5.0e-4,
            lr_peak: 1.0e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            seed: 0,
            slf: SlfPolicy::default(),
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds steps {}", self.warmup, self.steps)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        let rates_ok = self.lr_start >= 0.0 && self.lr_peak >= 0.0 && self.lr_start.is_finite() && self.lr_peak.is_finite();
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !rates_ok || !betas_ok || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Linear from `lr_start` to `lr_peak` over `warmup` steps, then cosine to 0
/// at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step >= cfg.steps {
        return 0.0;
    }
    if step < cfg.warmup {
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup) as f64;
    let x = (step - cfg.warmup) as f64 / span;
    cfg.lr_peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * x))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (libm::sqrt(vh) + cfg.eps) + cfg.weight_decay * w[i]);
            }
        }
    }
}

/// Maps `f` over `0..n`; results come back in index order whatever the
/// schedule.
pub trait Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SerialExecutor;

impl Executor for SerialExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..n).map(f).collect()
    }
}

/// One training sample: a sequence and ascending frame indices, the last
/// being the supervised frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub seq: usize,
    pub indices: Vec<usize>,
}

/// Picks a sequence and a current frame uniformly, then a history subset.
pub fn draw_sample(data: &[Sequence], policy: &SlfPolicy, rng: &mut Rng) -> Sample {
    let seq = rng.below(data.len());
    let cur = rng.below(data[seq].len());
    Sample {
        seq,
        indices: sample_slf(cur, policy, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub loss: LossBreakdown,
    /// Per parameter, store order.
    pub grads: Vec<Vec<f64>>,
}

/// Runs the model over `frames` with gradients disabled and returns the last
/// step. Recurrent strategies carry the state pass to pass; E2E stacks.
pub fn forward_clip(model: &Model, tape: &mut Tape, frames: &[&Frame], trainable_last: bool) -> Result<(StepOutput, crate::numerics::Params)> {
    let (last, history) = frames.split_last().ok_or_else(|| Error::InvalidArgument {
        op: "forward_clip",
        msg: "empty clip".into(),
    })?;
    if model.cfg.strategy == Strategy::E2E {
        let p = model.store.bind(tape, trainable_last);
        let out = model.stacked_step(tape, &p, frames)?;
        return Ok((out, p));
    }
    let mut state: Option<FusionState> = None;
    for f in history {
        // earlier passes only feed the carried state, which is detached
        let mut scratch = Tape::new();
        let pc = model.store.bind(&mut scratch, false);
        state = Some(model.fuse_step(&mut scratch, &pc, state.as_ref(), f)?.new_state);
    }
    let p = model.store.bind(tape, trainable_last);
    let out = model.fuse_step(tape, &p, state.as_ref(), last)?;
    Ok((out, p))
}

/// Loss and gradients of one sample; only the last pass is supervised.
pub fn sample_gradients(model: &Model, seq: &Sequence, indices: &[usize], w: LossWeights) -> Result<SampleResult> {
    let frames: Vec<&Frame> = indices.iter().map(|&i| &seq.frames[i].frame).collect();
    let mut tape = Tape::new();
    let (out, p) = forward_clip(model, &mut tape, &frames, true)?;
    let last = &seq.frames[*indices.last().expect("non-empty")];
    let gt = last.gt_local();
    let targets = FrameTargets::for_heads(&out.heads, &gt, &model.cfg.grid);
    let (loss, breakdown) = detection_loss(&mut tape, &out.heads, &targets, w)?;
    if !breakdown.total.is_finite() {
        return Ok(SampleResult {
            loss: breakdown,
            grads: Vec::new(),
        });
    }
    tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok(SampleResult { loss: breakdown, grads })
}

/// Loss record of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Largest `|total - (w_seg*seg + w_center*center + box)|` over the batch
    /// and the batch mean.
    pub identity_error: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    rng: Rng,
    pub step: usize,
    pub trace: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.store);
        Ok(Self {
            model,
            rng: Rng::new(cfg.seed ^ 0x7a11),
            cfg,
            opt,
            step: 0,
            trace: Vec::new(),
        })
    }

    pub fn draw_batch(&mut self, data: &[Sequence]) -> Vec<Sample> {
        (0..self.cfg.batch).map(|_| draw_sample(data, &self.cfg.slf, &mut self.rng)).collect()
    }

    /// Draws a batch and applies one update.
    pub fn train_step<E: Executor>(&mut self, data: &[Sequence], exec: &E) -> Result<StepRecord> {
        if data.is_empty() || data.iter().any(Sequence::is_empty) {
            return Err(Error::InvalidArgument {
                op: "train_step",
                msg: "training data needs non-empty sequences".into(),
            });
        }
        let batch = self.draw_batch(data);
        self.apply(&batch, data, exec)
    }

    /// One update on an explicit batch. Gradients are averaged over samples
    /// in batch order.
    pub fn apply<E: Executor>(&mut self, batch: &[Sample], data: &[Sequence], exec: &E) -> Result<StepRecord> {
        let lr = lr_at(&self.cfg, self.step);
        let w = self.cfg.weights;
        let model = &self.model;
        let results = exec.map(batch.len(), |i| sample_gradients(model, &data[batch[i].seq], &batch[i].indices, w));
        let n = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.model.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut sums = [0.0; 4];
        let mut identity_error: f64 = 0.0;
        for r in results {
            let r = match r {
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss {
                        step: self.step,
                        lr,
                        seg: f64::NAN,
                        center: f64::NAN,
                        box_loss: f64::NAN,
                    })
                }
                r => r?,
            };
            let l = r.loss;
            let finite = [l.total, l.seg, l.center, l.box_loss].iter().all(|v| v.is_finite())
                && r.grads.iter().flatten().all(|g| g.is_finite());
            if !finite || r.grads.is_empty() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    lr,
                    seg: l.seg,
                    center: l.center,
                    box_loss: l.box_loss,
                });
            }
            identity_error = identity_error.max(l.identity_error(w));
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            for (s, v) in sums.iter_mut().zip([l.total, l.seg, l.center, l.box_loss]) {
                *s += v;
            }
        }
        for g in grads.iter_mut().flatten() {
            *g /= n;
        }
        let loss = LossBreakdown {
            total: sums[0] / n,
            seg: sums[1] / n,
            center: sums[2] / n,
            box_loss: sums[3] / n,
        };
        identity_error = identity_error.max(loss.identity_error(w));
        self.opt.step(&mut self.model.store, &grads, lr, &self.cfg);
        let rec = StepRecord {
            step: self.step,
            lr,
            loss,
            identity_error,
        };
        self.step += 1;
        self.trace.push(rec);
        Ok(rec)
    }

    /// Trains to `cfg.steps`, evaluating on `held_out` every `eval_every`
    /// steps and after the last one.
    pub fn fit<E: Executor>(&mut self, data: &[Sequence], held_out: Option<(&[Sequence], &EvalConfig)>, exec: &E) -> Result<Vec<(usize, EvalReport)>> {
        let mut evals = Vec::new();
        while self.step < self.cfg.steps {
            self.train_step(data, exec)?;
            let due = self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every);
            if let Some((seqs, ec)) = held_out {
                if due || self.step == self.cfg.steps {
                    evals.push((self.step, evaluate(&self.model, seqs, ec, exec)?));
                }
            }
        }
        Ok(evals)
    }
}

/// Which frames of each sequence are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTargets {
    /// Only the final frame.
    Last,
    /// Every frame.
    All,
    /// Frames with a full clip of history, `t >= frames - 1`.
    FullClip,
    /// Frames `t >= k`, independent of the clip length.
    From(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Clip length: each scored frame is predicted from itself and up to
    /// `frames - 1` preceding frames.
    pub frames: usize,
    pub ap: ApConfig,
    pub k_max: usize,
    pub score_thresh: f64,
    pub targets: EvalTargets,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frames: 3,
            ap: ApConfig {
                iou_thresh: 0.5,
                ..ApConfig::default()
            },
            k_max: 50,
            score_thresh: 0.05,
            targets: EvalTargets::All,
        }
    }
}

/// Predictions for one scored frame, in its vehicle coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub seq: usize,
    pub frame: usize,
    pub detections: Vec<Detection>,
    pub gts: Vec<Box3D>,
    pub gt_speeds: Vec<f64>,
    /// Occupied pillars of the fused map, `U`.
    pub occupied: usize,
    pub foreground: usize,
    /// Occupied pillars inside a ground-truth box, and how many of them the
    /// foreground kept.
    pub gt_pillars: usize,
    pub gt_pillars_kept: usize,
    pub state_size: usize,
    pub fg_coords: Vec<crate::pillars::Cell>,
}

/// Predicts frame `target` of `seq` from a clip of up to `frames` frames.
pub fn predict_frame(model: &Model, seq: &Sequence, seq_index: usize, target: usize, frames: usize, cfg: &EvalConfig) -> Result<FramePrediction> {
    let start = (target + 1).saturating_sub(frames.max(1));
    let clip: Vec<&Frame> = seq.frames[start..=target].iter().map(|f| &f.frame).collect();
    let mut tape = Tape::new();
    let (out, _) = forward_clip(model, &mut tape, &clip, false)?;
    let head = head_output(&tape, &out.heads);
    let detections = decode(&head, &model.cfg.grid, cfg.k_max, cfg.score_thresh);
    let lf = &seq.frames[target];
    let gts = lf.gt_local();
    let current: Vec<_> = voxelize(&lf.frame.cloud, &model.cfg.grid).into_iter().map(|b| b.cell).collect();
    let inside = seg_targets(&current, &gts, &model.cfg.grid);
    let fg = out.new_state.foreground.coords();
    let gt_cells: Vec<_> = current.iter().zip(&inside).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    let kept = gt_cells.iter().filter(|c| fg.binary_search(c).is_ok()).count();
    Ok(FramePrediction {
        seq: seq_index,
        frame: target,
        detections,
        gt_speeds: lf.gt.iter().map(|g| g.speed).collect(),
        gts,
        occupied: out.stats.union,
        foreground: fg.len(),
        gt_pillars: gt_cells.len(),
        gt_pillars_kept: kept,
        state_size: out.new_state.size(),
        fg_coords: fg.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub aph: f64,
    /// `None` where a bucket has no ground truth.
    pub ap_by_speed: [Option<f64>; NUM_SPEED_BUCKETS],
    /// Foreground pillars over occupied pillars, pooled over frames.
    pub fg_ratio: f64,
    /// GT-box pillars kept by the foreground, pooled over frames.
    pub fg_coverage: f64,
    pub frames: usize,
    pub predictions: Vec<FramePrediction>,
}

/// Scores every target frame; frames run through `exec` and are pooled in
/// sequence order.
pub fn evaluate<E: Executor>(model: &Model, data: &[Sequence], cfg: &EvalConfig, exec: &E) -> Result<EvalReport> {
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (s, seq) in data.iter().enumerate() {
        match cfg.targets {
            EvalTargets::Last if !seq.is_empty() => jobs.push((s, seq.len() - 1)),
            EvalTargets::Last => {}
            EvalTargets::All => jobs.extend((0..seq.len()).map(|t| (s, t))),
            EvalTargets::FullClip => jobs.extend((cfg.frames.max(1) - 1..seq.len()).map(|t| (s, t))),
            EvalTargets::From(k) => jobs.extend((k..seq.len()).map(|t| (s, t))),
        }
    }
    let preds = exec.map(jobs.len(), |j| {
        let (s, t) = jobs[j];
        predict_frame(model, &data[s], s, t, cfg.frames, cfg)
    });
    let predictions = preds.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(predictions, cfg))
}

/// AP, per-speed AP and foreground statistics of a prediction set.
pub fn summarize(predictions: Vec<FramePrediction>, cfg: &EvalConfig) -> EvalReport {
    let frames: Vec<FrameEval> = predictions
        .iter()
        .map(|p| FrameEval {
            preds: p.detections.clone(),
            gts: p.gts.clone(),
        })
        .collect();
    let ap = evaluate_ap(&frames, &cfg.ap);
    let aph = evaluate_ap(
        &frames,
        &ApConfig {
            heading_weighted: true,
            ..cfg.ap
        },
    );
    let ap_by_speed = core::array::from_fn(|b| speed_bucket_ap(&predictions, b, &cfg.ap));
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let fg: usize = predictions.iter().map(|p| p.foreground).sum();
    let occ: usize = predictions.iter().map(|p| p.occupied).sum();
    let kept: usize = predictions.iter().map(|p| p.gt_pillars_kept).sum();
    let gtp: usize = predictions.iter().map(|p| p.gt_pillars).sum();
    EvalReport {
        ap,
        aph,
        ap_by_speed,
        fg_ratio: ratio(fg, occ),
        fg_coverage: ratio(kept, gtp),
        frames: predictions.len(),
        predictions,
    }
}

/// AP restricted to ground truth in one speed bucket. Predictions matching a
/// box of another bucket at the IoU threshold are ignored rather than
/// counted as false positives.
pub fn speed_bucket_ap(predictions: &[FramePrediction], bucket: usize, ap: &ApConfig) -> Option<f64> {
    let mut any = false;
    let frames: Vec<FrameEval> = predictions
        .iter()
        .map(|p| {
            let (mine, other): (Vec<_>, Vec<_>) =
                p.gts.iter().zip(&p.gt_speeds).partition(|(_, &s)| speed_bucket(s) == bucket);
            any |= !mine.is_empty();
            let preds = p
                .detections
                .iter()
                .filter(|d| {
                    let hits_other = other.iter().any(|(g, _)| iou(&d.bbox, g, ap.mode) >= ap.iou_thresh);
                    let hits_mine = mine.iter().any(|(g, _)| iou(&d.bbox, g, ap.mode) >= ap.iou_thresh);
                    hits_mine || !hits_other
                })
                .copied()
                .collect();
            FrameEval {
                preds,
                gts: mine.into_iter().map(|(g, _)| *g).collect(),
            }
        })
        .collect();
    any.then(|| evaluate_ap(&frames, ap))
}
