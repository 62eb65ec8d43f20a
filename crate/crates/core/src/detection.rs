//! Center-heatmap detection: targets, losses, heads, decoding and AP.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::geometry::{wrap_angle, Box3D};
use crate::numerics::{Activation, Mlp2, ParamStore, Params, Tape, Tensor, Var};
use crate::pillars::{Cell, GridSpec, TokenSet};
use crate::rng::Rng;
use crate::Result;

pub const PROB_CLAMP: f64 = 1e-6;
pub const SEG_GAMMA: f64 = 2.0;
pub const SEG_ALPHA: f64 = 0.25;
pub const HEATMAP_ALPHA: f64 = 2.0;
pub const HEATMAP_BETA: f64 = 4.0;
pub const MIN_OVERLAP: f64 = 0.7;
pub const MIN_RADIUS: i64 = 2;
pub const POSITIVE_THRESHOLD: f64 = 0.99;
pub const BOX_CHANNELS: usize = 8;

/// Foreground label per pillar: cell center inside any box footprint.
pub fn seg_targets(coords: &[Cell], gt: &[Box3D], grid: &GridSpec) -> Vec<bool> {
    coords
        .iter()
        .map(|&c| {
            let (x, y) = grid.cell_center(c);
            gt.iter().any(|b| b.contains_bev(x, y))
        })
        .collect()
}

/// CornerNet radius (in cells) for a `height x width` box at `min_overlap`.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + libm::sqrt(b1 * b1 - 4.0 * c1)) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + libm::sqrt(b2 * b2 - 16.0 * c2)) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + libm::sqrt(b3 * b3 - 4.0 * a3 * c3)) / 2.0;
    r1.min(r2).min(r3)
}

/// Integer splat radius of a box, floored at [`MIN_RADIUS`].
pub fn box_radius(b: &Box3D, grid: &GridSpec) -> i64 {
    let r = gaussian_radius(b.size[0] / grid.cell_m, b.size[1] / grid.cell_m, MIN_OVERLAP);
    (r as i64).max(MIN_RADIUS)
}

/// Dense `[H * W]` heatmap target: a Gaussian with `sigma = (2r + 1) / 6`
/// at each box's center cell, combined by elementwise max.
pub fn center_targets(gt: &[Box3D], grid: &GridSpec) -> Vec<f64> {
    let (h, w) = (grid.h() as i64, grid.w() as i64);
    let mut map = vec![0.0; (h * w) as usize];
    for b in gt {
        let Some(c) = grid.cell_of(b.center[0], b.center[1]) else { continue };
        let r = box_radius(b, grid);
        let sigma = (2 * r + 1) as f64 / 6.0;
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (c.row as i64 + dr, c.col as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                    continue;
                }
                let g = libm::exp(-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma));
                if g < f64::EPSILON {
                    continue;
                }
                let slot: &mut f64 = &mut map[(rr * w + cc) as usize];
                *slot = slot.max(g);
            }
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FocalMode {
    /// Binary focal loss, mean over entries.
    Seg,
    /// Penalty-reduced center focal loss, normalized by positives.
    Heatmap,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-entry loss and derivative with respect to the (clamped) probability.
fn focal_terms(p_raw: f64, t: f64, mode: FocalMode) -> (f64, f64, bool) {
    let p = clamp_prob(p_raw);
    let live = p == p_raw;
    let lp = libm::log(p);
    let lq = libm::log(1.0 - p);
    let (pos, a, g, neg_w) = match mode {
        FocalMode::Seg => (t >= 0.5, SEG_ALPHA, SEG_GAMMA, 1.0 - SEG_ALPHA),
        FocalMode::Heatmap => (
            t >= POSITIVE_THRESHOLD,
            1.0,
            HEATMAP_ALPHA,
            libm::pow(1.0 - t, HEATMAP_BETA),
        ),
    };
    if pos {
        let q = 1.0 - p;
        let loss = -a * libm::pow(q, g) * lp;
        let dp = a * (g * libm::pow(q, g - 1.0) * lp - libm::pow(q, g) / p);
        (loss, dp, live)
    } else {
        let loss = -neg_w * libm::pow(p, g) * lq;
        let dp = -neg_w * (g * libm::pow(p, g - 1.0) * lq - libm::pow(p, g) / (1.0 - p));
        (loss, dp, live)
    }
}

fn focal_norm(target: &[f64], mode: FocalMode) -> f64 {
    match mode {
        FocalMode::Seg => target.len().max(1) as f64,
        FocalMode::Heatmap => target.iter().filter(|&&t| t >= POSITIVE_THRESHOLD).count().max(1) as f64,
    }
}

/// Focal loss of probabilities against targets.
pub fn focal_loss(pred: &[f64], target: &[f64], mode: FocalMode) -> f64 {
    let sum: f64 = pred.iter().zip(target).map(|(&p, &t)| focal_terms(p, t, mode).0).sum();
    sum / focal_norm(target, mode)
}

/// SmoothL1 with `beta = 1`.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Box loss: SmoothL1 summed over channels, averaged over positives.
pub fn box_loss(pred: &[[f64; BOX_CHANNELS]], target: &[[f64; BOX_CHANNELS]]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| smooth_l1(a - b)))
        .sum();
    sum / pred.len().max(1) as f64
}

impl Tape {
    /// Focal loss over a probability tensor; `target` has one entry per
    /// element. Entries outside the clamp range receive no gradient.
    pub fn focal_loss(&mut self, pred: Var, target: &[f64], mode: FocalMode) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(crate::Error::ShapeMismatch {
                op: "focal_loss",
                left: p.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let norm = focal_norm(target, mode);
        let terms: Vec<(f64, f64, bool)> = p.data().iter().zip(target).map(|(&p, &t)| focal_terms(p, t, mode)).collect();
        let loss = terms.iter().map(|t| t.0).sum::<f64>() / norm;
        self.record("focal_loss", Tensor::scalar(loss), &[pred], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let s = g[0] / norm;
            vec![Some(terms.iter().map(|&(_, dp, live)| if live { dp * s } else { 0.0 }).collect())]
        })
    }

    /// `sum(smooth_l1(pred - target)) / max(rows, 1)` for `pred: [P, C]`.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(crate::Error::ShapeMismatch {
                op: "smooth_l1_loss",
                left: p.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let rows = if p.shape().is_empty() { 1 } else { p.shape()[0] };
        let norm = rows.max(1) as f64;
        let diff: Vec<f64> = p.data().iter().zip(target).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|&x| smooth_l1(x)).sum::<f64>() / norm;
        self.record("smooth_l1_loss", Tensor::scalar(loss), &[pred], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let s = g[0] / norm;
            vec![Some(diff.iter().map(|&x| x.clamp(-1.0, 1.0) * s).collect())]
        })
    }
}

/// Regression target of a box relative to cell `c`:
/// `(dx, dy, z, log l, log w, log h, sin, cos)`, offsets in cells.
pub fn encode_box(b: &Box3D, c: Cell, grid: &GridSpec) -> [f64; BOX_CHANNELS] {
    let (x, y) = grid.cell_center(c);
    [
        (b.center[0] - x) / grid.cell_m,
        (b.center[1] - y) / grid.cell_m,
        b.center[2],
        libm::log(b.size[0]),
        libm::log(b.size[1]),
        libm::log(b.size[2]),
        libm::sin(b.heading),
        libm::cos(b.heading),
    ]
}

pub fn decode_box(reg: &[f64; BOX_CHANNELS], c: Cell, grid: &GridSpec) -> Box3D {
    let (x, y) = grid.cell_center(c);
    let size = [libm::exp(reg[3]), libm::exp(reg[4]), libm::exp(reg[5])];
    let heading = wrap_angle(libm::atan2(reg[6], reg[7]));
    Box3D {
        center: [x + reg[0] * grid.cell_m, y + reg[1] * grid.cell_m, reg[2]],
        size,
        heading,
    }
}

/// Per-pillar head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub coords: Vec<Cell>,
    /// Center score in (0, 1).
    pub heatmap: Vec<f64>,
    pub box_reg: Vec<[f64; BOX_CHANNELS]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Peak picking: 3x3 local maxima over occupied cells (equal neighbors keep
/// the lowest row-major cell), score above threshold, top `k_max` by score.
pub fn decode(head: &HeadOutput, grid: &GridSpec, k_max: usize, score_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..head.coords.len()).collect();
    order.sort_by_key(|&i| head.coords[i]);
    let sorted: Vec<Cell> = order.iter().map(|&i| head.coords[i]).collect();
    let lookup = |c: Cell| sorted.binary_search(&c).ok().map(|k| order[k]);
    let mut peaks: Vec<(f64, Cell, usize)> = Vec::new();
    for (i, &c) in head.coords.iter().enumerate() {
        let s = head.heatmap[i];
        if s <= score_thresh {
            continue;
        }
        let mut is_peak = true;
        'scan: for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (r, cc) = (c.row as i64 + dr, c.col as i64 + dc);
                if r < 0 || cc < 0 {
                    continue;
                }
                let n = Cell::new(r as u32, cc as u32);
                if let Some(j) = lookup(n) {
                    let t = head.heatmap[j];
                    if t > s || (t == s && n < c) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
        }
        if is_peak {
            peaks.push((s, c, i));
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    peaks.truncate(k_max);
    peaks
        .into_iter()
        .map(|(score, c, i)| Detection {
            bbox: decode_box(&head.box_reg[i], c, grid),
            score,
        })
        .collect()
}

/// Weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 200.0, center: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub center: f64,
    pub box_loss: f64,
}

impl LossBreakdown {
    pub fn compose(seg: f64, center: f64, box_loss: f64, w: LossWeights) -> Self {
        Self {
            total: w.seg * seg + w.center * center + box_loss,
            seg,
            center,
            box_loss,
        }
    }

    pub fn identity_error(&self, w: LossWeights) -> f64 {
        (self.total - (w.seg * self.seg + w.center * self.center + self.box_loss)).abs()
    }
}

/// Segmentation, center and box heads applied per token.
#[derive(Debug, Clone, Copy)]
pub struct DetectionHeads {
    pub seg: Mlp2,
    pub center: Mlp2,
    pub reg: Mlp2,
}

/// Head outputs on the tape. Segmentation logits `[K, 1]` over `coords`;
/// center logits `[M, 1]` and regression `[M, 8]` over `det_coords`.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub coords: Vec<Cell>,
    pub seg_logit: Var,
    pub det_coords: Vec<Cell>,
    pub center_logit: Var,
    pub reg: Var,
}

impl DetectionHeads {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        let f = |s: &str| alloc::format!("{name}.{s}");
        let heads = Self {
            seg: Mlp2::new(store, &f("seg"), (d, d, 1), Activation::Relu, rng),
            center: Mlp2::new(store, &f("center"), (d, d, 1), Activation::Relu, rng),
            reg: Mlp2::new(store, &f("reg"), (d, d, BOX_CHANNELS), Activation::Relu, rng),
        };
        // rare positives: start both score heads near p = 0.01
        for b in [heads.seg.second.b, heads.center.second.b].into_iter().flatten() {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = -libm::log(99.0));
        }
        heads
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, tokens: &TokenSet) -> Result<HeadVars> {
        let seg_logit = self.seg.forward(tape, p, tokens.feats)?;
        self.detect(tape, p, tokens.coords.clone(), seg_logit, tokens)
    }

    /// Center and box heads on `det`, paired with segmentation logits
    /// already computed over `coords`.
    pub fn detect(&self, tape: &mut Tape, p: &Params, coords: Vec<Cell>, seg_logit: Var, det: &TokenSet) -> Result<HeadVars> {
        Ok(HeadVars {
            coords,
            seg_logit,
            det_coords: det.coords.clone(),
            center_logit: self.center.forward(tape, p, det.feats)?,
            reg: self.reg.forward(tape, p, det.feats)?,
        })
    }
}

/// Per-token targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub seg: Vec<f64>,
    pub center: Vec<f64>,
    /// Token rows of positives and their regression targets.
    pub positives: Vec<usize>,
    pub reg: Vec<[f64; BOX_CHANNELS]>,
}

impl FrameTargets {
    pub fn build(coords: &[Cell], gt: &[Box3D], grid: &GridSpec) -> Self {
        Self::build_split(coords, coords, gt, grid)
    }

    /// Targets for the coordinate sets of `heads`.
    pub fn for_heads(heads: &HeadVars, gt: &[Box3D], grid: &GridSpec) -> Self {
        Self::build_split(&heads.coords, &heads.det_coords, gt, grid)
    }

    /// Segmentation targets over `seg_coords`, center and box targets over
    /// `det_coords`.
    pub fn build_split(seg_coords: &[Cell], det_coords: &[Cell], gt: &[Box3D], grid: &GridSpec) -> Self {
        let seg = seg_targets(seg_coords, gt, grid).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        let dense = center_targets(gt, grid);
        let center: Vec<f64> = det_coords.iter().map(|&c| dense[grid.flat(c)]).collect();
        let mut positives = Vec::new();
        let mut reg = Vec::new();
        for (i, &c) in det_coords.iter().enumerate() {
            if center[i] < POSITIVE_THRESHOLD {
                continue;
            }
            // the box whose center cell this is; nearest center on a shared cell
            let owner = gt
                .iter()
                .filter(|b| grid.cell_of(b.center[0], b.center[1]) == Some(c))
                .min_by(|a, b| {
                    let (x, y) = grid.cell_center(c);
                    let da = (a.center[0] - x) * (a.center[0] - x) + (a.center[1] - y) * (a.center[1] - y);
                    let db = (b.center[0] - x) * (b.center[0] - x) + (b.center[1] - y) * (b.center[1] - y);
                    da.partial_cmp(&db).unwrap_or(Ordering::Equal)
                });
            if let Some(b) = owner {
                positives.push(i);
                reg.push(encode_box(b, c, grid));
            }
        }
        Self {
            seg,
            center,
            positives,
            reg,
        }
    }
}

/// Total loss on the tape plus the reported breakdown.
pub fn detection_loss(tape: &mut Tape, heads: &HeadVars, targets: &FrameTargets, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let ps = tape.sigmoid(heads.seg_logit)?;
    let seg = tape.focal_loss(ps, &targets.seg, FocalMode::Seg)?;
    let pc = tape.sigmoid(heads.center_logit)?;
    let center = tape.focal_loss(pc, &targets.center, FocalMode::Heatmap)?;
    let reg = tape.gather_rows(heads.reg, &targets.positives)?;
    let flat: Vec<f64> = targets.reg.iter().flatten().copied().collect();
    let bl = tape.smooth_l1_loss(reg, &flat)?;
    let a = tape.scale(seg, w.seg)?;
    let b = tape.scale(center, w.center)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, bl)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        seg: tape.value(seg).item(),
        center: tape.value(center).item(),
        box_loss: tape.value(bl).item(),
    };
    Ok((total, breakdown))
}

/// Head outputs as plain values.
pub fn head_output(tape: &Tape, heads: &HeadVars) -> HeadOutput {
    let center = tape.value(heads.center_logit);
    let reg = tape.value(heads.reg);
    HeadOutput {
        coords: heads.det_coords.clone(),
        heatmap: center.data().iter().map(|&z| crate::numerics::sigmoid(z)).collect(),
        box_reg: (0..heads.det_coords.len())
            .map(|i| {
                let mut r = [0.0; BOX_CHANNELS];
                r.copy_from_slice(reg.row(i));
                r
            })
            .collect(),
    }
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    let mut a = 0.0;
    for i in 0..n {
        let (u, v) = (p[i], p[(i + 1) % n]);
        a += u[0] * v[1] - v[0] * u[1];
    }
    a / 2.0
}

/// Intersection of two convex CCW polygons (Sutherland-Hodgman).
fn clip(subject: &[[f64; 2]], clipper: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clipper.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clipper[i], clipper[(i + 1) % n]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = core::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let p = clip(&a.bev_corners(), &b.bev_corners());
    if p.len() < 3 {
        0.0
    } else {
        polygon_area(&p).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouMode {
    #[default]
    Bev,
    ThreeD,
}

impl core::str::FromStr for IouMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bev" => Ok(Self::Bev),
            "3d" => Ok(Self::ThreeD),
            _ => Err(crate::Error::Config(alloc::format!("unknown IoU mode `{s}`"))),
        }
    }
}

pub fn iou(a: &Box3D, b: &Box3D, mode: IouMode) -> f64 {
    let inter = bev_intersection(a, b);
    let (aa, ab) = (a.size[0] * a.size[1], b.size[0] * b.size[1]);
    match mode {
        IouMode::Bev => {
            let u = aa + ab - inter;
            if u <= 0.0 {
                0.0
            } else {
                inter / u
            }
        }
        IouMode::ThreeD => {
            let (a0, a1) = a.z_range();
            let (b0, b1) = b.z_range();
            let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
            let vi = inter * dz;
            let u = aa * a.size[2] + ab * b.size[2] - vi;
            if u <= 0.0 {
                0.0
            } else {
                vi / u
            }
        }
    }
}

/// Predictions and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameEval {
    pub preds: Vec<Detection>,
    pub gts: Vec<Box3D>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApConfig {
    pub iou_thresh: f64,
    pub mode: IouMode,
    /// Weight true positives by heading agreement `(1 + cos dθ) / 2`.
    /// Not an official metric.
    pub heading_weighted: bool,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.7,
            mode: IouMode::Bev,
            heading_weighted: false,
        }
    }
}

/// Greedy score-ordered matching and 101-point interpolated AP. With no
/// ground truth at all, AP is 1 if there are no predictions, else 0.
pub fn evaluate_ap(frames: &[FrameEval], cfg: &ApConfig) -> f64 {
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.preds.len()).map(move |pi| (fi, pi)))
        .collect();
    if n_gt == 0 {
        return if order.is_empty() { 1.0 } else { 0.0 };
    }
    order.sort_by(|a, b| {
        let (sa, sb) = (frames[a.0].preds[a.1].score, frames[b.0].preds[b.1].score);
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then(a.cmp(b))
    });
    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut tp = 0.0;
    let mut hits = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (k, &(fi, pi)) in order.iter().enumerate() {
        let pred = &frames[fi].preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in frames[fi].gts.iter().enumerate() {
            if matched[fi][gi] {
                continue;
            }
            let v = iou(&pred.bbox, g, cfg.mode);
            if v >= cfg.iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[fi][gi] = true;
            hits += 1;
            tp += if cfg.heading_weighted {
                let dh = wrap_angle(pred.bbox.heading - frames[fi].gts[gi].heading);
                (1.0 + libm::cos(dh)) / 2.0
            } else {
                1.0
            };
        }
        curve.push((hits as f64 / n_gt as f64, tp / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 101.0
}
