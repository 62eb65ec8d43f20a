//! Data generation, training, checkpoint loading and prediction export.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use lef_core::detection::{iou, ApConfig};
use lef_core::fusion::Model;
use lef_core::synth::{generate, occlusion_benchmark, ObjectClass, Sequence};
use lef_core::train::{evaluate, EvalConfig, EvalReport, EvalTargets, Executor, FramePrediction, StepRecord, Trainer};
use serde::Serialize;

use crate::config::Config;
use crate::formats;

/// Sequences `0..synth.sequences`; sequence `i` uses seed `synth.seed + i`.
pub fn generate_data<E: Executor>(cfg: &Config, exec: &E) -> Result<Vec<Sequence>> {
    let n = cfg.synth.sequences;
    let seqs = match cfg.synth.kind.as_str() {
        "benchmark" => exec.map(n, |i| occlusion_benchmark(&cfg.benchmark(i))),
        "scene" => exec.map(n, |i| generate(&cfg.scene(i))),
        other => bail!("unknown synth.kind `{other}` (benchmark | scene)"),
    };
    seqs.into_iter()
        .enumerate()
        .map(|(i, s)| s.with_context(|| format!("generating sequence {i}")))
        .collect()
}

/// Training and held-out parts; the last `train.held_out` sequences are held
/// out.
pub fn split<'a>(cfg: &Config, data: &'a [Sequence]) -> Result<(&'a [Sequence], &'a [Sequence])> {
    let h = cfg.train.held_out;
    ensure!(h < data.len(), "held_out = {h} leaves no training data out of {} sequences", data.len());
    Ok(data.split_at(data.len() - h))
}

pub fn new_model(cfg: &Config) -> Result<Model> {
    Ok(Model::new(cfg.fusion()?, cfg.model.seed)?)
}

pub struct Trained {
    pub trainer: Trainer,
    pub evals: Vec<(usize, EvalReport)>,
}

/// Trains a fresh model, calling `on_step` after every update and evaluating
/// on `held_out` every `train.eval_every` steps and after the last one.
pub fn train<E: Executor>(
    cfg: &Config,
    data: &[Sequence],
    held_out: &[Sequence],
    exec: &E,
    mut on_step: impl FnMut(&StepRecord, Option<&EvalReport>),
) -> Result<Trained> {
    ensure!(!data.is_empty(), "no training sequences");
    let mut trainer = Trainer::new(new_model(cfg)?, cfg.training()?)?;
    let ec = cfg.evaluation()?;
    let mut evals = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let rec = trainer.train_step(data, exec)?;
        let every = trainer.cfg.eval_every;
        let due = (every > 0 && trainer.step % every == 0) || trainer.step == trainer.cfg.steps;
        if due && !held_out.is_empty() {
            let r = evaluate(&trainer.model, held_out, &ec, exec)?;
            on_step(&rec, Some(&r));
            evals.push((trainer.step, r));
        } else {
            on_step(&rec, None);
        }
    }
    Ok(Trained { trainer, evals })
}

/// Model rebuilt from its sidecar configuration with the stored weights.
pub fn load_model(ckpt: &Path) -> Result<(Config, Model)> {
    let (cfg, tensors) = formats::load_checkpoint(ckpt)?;
    let mut model = new_model(&cfg)?;
    ensure!(
        tensors.len() == model.store.len(),
        "checkpoint holds {} tensors, model has {}",
        tensors.len(),
        model.store.len()
    );
    model.store.load(&tensors)?;
    Ok((cfg, model))
}

/// Predictions for every frame of every sequence, each from a clip of up to
/// `frames` frames ending at it. Returned in sequence-then-frame order.
pub fn predict<E: Executor>(model: &Model, data: &[Sequence], frames: usize, ec: &EvalConfig, exec: &E) -> Result<Vec<FramePrediction>> {
    let ec = EvalConfig {
        frames,
        targets: EvalTargets::All,
        ..*ec
    };
    Ok(evaluate(model, data, &ec, exec)?.predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    /// Running frame index over the data set, sequence-major.
    pub frame_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub heading: f64,
}

/// One row per detection. `preds` must cover every frame in order, as
/// returned by [`predict`].
pub fn prediction_rows(preds: &[FramePrediction]) -> Vec<PredictionRow> {
    preds
        .iter()
        .enumerate()
        .flat_map(|(frame_id, p)| {
            p.detections.iter().map(move |d| PredictionRow {
                frame_id,
                score: d.score,
                cx: d.bbox.center[0],
                cy: d.bbox.center[1],
                cz: d.bbox.center[2],
                l: d.bbox.size[0],
                w: d.bbox.size[1],
                h: d.bbox.size[2],
                heading: d.bbox.heading,
            })
        })
        .collect()
}

pub fn write_predictions_csv<W: Write>(out: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["frame_id", "score", "cx", "cy", "cz", "l", "w", "h", "heading"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of large ground-truth boxes matched by some detection at the IoU
/// threshold, greedy in score order per frame.
pub fn large_recall(preds: &[FramePrediction], ap: &ApConfig) -> Option<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for p in preds {
        let large: Vec<_> = p.gts.iter().filter(|g| ObjectClass::of_size(g.size) == ObjectClass::Large).collect();
        let mut used = vec![false; large.len()];
        let mut order: Vec<usize> = (0..p.detections.len()).collect();
        order.sort_by(|&a, &b| p.detections[b].score.total_cmp(&p.detections[a].score).then(a.cmp(&b)));
        for i in order {
            let d = &p.detections[i].bbox;
            let best = (0..large.len())
                .filter(|&g| !used[g])
                .map(|g| (iou(d, large[g], ap.mode), g))
                .filter(|&(v, _)| v >= ap.iou_thresh)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, g)) = best {
                used[g] = true;
                hit += 1;
            }
        }
        total += large.len();
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lef_core::detection::Detection;
    use lef_core::geometry::Box3D;

    fn pred(gts: Vec<Box3D>, dets: Vec<(Box3D, f64)>) -> FramePrediction {
        FramePrediction {
            seq: 0,
            frame: 0,
            detections: dets.into_iter().map(|(bbox, score)| Detection { bbox, score }).collect(),
            gt_speeds: vec![0.0; gts.len()],
            gts,
            occupied: 0,
            foreground: 0,
            gt_pillars: 0,
            gt_pillars_kept: 0,
            state_size: 0,
            fg_coords: Vec::new(),
        }
    }

    fn bus(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 1.5], [10.0, 2.5, 3.0], 0.0).unwrap()
    }

    #[test]
    fn recall_counts_large_boxes_only() {
        let car = Box3D::new([0.0, 20.0, 1.0], [4.0, 2.0, 1.5], 0.0).unwrap();
        let p = pred(vec![bus(0.0), bus(30.0), car], vec![(bus(0.5), 0.9), (bus(0.2), 0.8), (car, 0.7)]);
        let ap = ApConfig {
            iou_thresh: 0.5,
            ..ApConfig::default()
        };
        assert_eq!(large_recall(&[p], &ap), Some(0.5));
        assert_eq!(large_recall(&[pred(vec![car], vec![])], &ap), None);
    }

    #[test]
    fn csv_rows_use_running_frame_ids() {
        let preds = vec![
            pred(vec![], vec![(bus(1.0), 0.5)]),
            pred(vec![], vec![]),
            pred(vec![], vec![(bus(2.0), 0.25), (bus(3.0), 0.125)]),
        ];
        let rows = prediction_rows(&preds);
        assert_eq!(rows.iter().map(|r| r.frame_id).collect::<Vec<_>>(), vec![0, 2, 2]);
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("frame_id,score,cx,cy,cz,l,w,h,heading"));
        assert_eq!(lines.next(), Some("0,0.5,1.0,0.0,1.5,10.0,2.5,3.0,0.0"));
        assert_eq!(text.lines().count(), 4);
        let mut empty = Vec::new();
        write_predictions_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "frame_id,score,cx,cy,cz,l,w,h,heading\n");
    }

    #[test]
    fn split_keeps_the_tail() {
        let cfg = Config::default();
        let data = vec![Sequence::default(); 10];
        let (a, b) = split(&cfg, &data).unwrap();
        assert_eq!((a.len(), b.len()), (10 - cfg.train.held_out, cfg.train.held_out));
        assert!(split(&cfg, &data[..cfg.train.held_out]).is_err());
    }
}
