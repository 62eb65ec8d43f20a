//! The recurrent fusion step.
//!
//! `f_i = psi(h(f_{i-1} (+) tau(t_i - t_{i-1}), nu(X_i)))`: history
//! foreground pillars, tagged with their time offset, are warped into the
//! current frame, aligned with the freshly encoded pillars, fused by window
//! attention, passed through the backbone and segmented; the surviving
//! foreground pillars become the next state. The state holds plain values,
//! so no gradient crosses a step boundary.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::attention::{sinusoid, AttentionBlock, AttentionVariant, DEFAULT_WINDOW};
use crate::calibration::{apply_calibration, calibrate_tokens, AlignStats, CalibrationMap, ReductionNet, Sampling};
use crate::detection::{DetectionHeads, HeadVars};
use crate::geometry::{PointCloud, Pose};
use crate::numerics::{Linear, ParamStore, Params, Tape, Tensor};
use crate::pillars::{voxelize, Cell, GridSpec, PillarEncoder, SparsePillarSet, TokenSet};
use crate::rng::Rng;
use crate::{Error, Result};

/// Frame period that defines one unit of time-offset position.
pub const FRAME_PERIOD: f64 = 0.1;

/// Where history enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Strategy {
    /// Late-to-early: history foreground features join the encoded pillars
    /// before the backbone.
    #[default]
    L2E,
    /// Early-to-early: pose-compensated raw clouds stacked with a per-point
    /// time offset, single pass.
    E2E,
    /// Late-to-late: per-frame backbone, history fused right before the heads.
    L2L,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Self::E2E, Self::L2L, Self::L2E];

    pub fn name(self) -> &'static str {
        match self {
            Self::L2E => "l2e",
            Self::E2E => "e2e",
            Self::L2L => "l2l",
        }
    }
}

impl core::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2e" => Ok(Self::L2E),
            "e2e" => Ok(Self::E2E),
            "l2l" => Ok(Self::L2L),
            _ => Err(Error::Config(alloc::format!("unknown fusion strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub grid: GridSpec,
    pub d: usize,
    pub heads: usize,
    pub window: u32,
    pub variant: AttentionVariant,
    pub fusion_blocks: usize,
    pub backbone_depth: usize,
    /// Offset every second backbone block's windows by half a window.
    pub backbone_shift: bool,
    pub fg_threshold: f64,
    pub fg_cap: usize,
    /// Chebyshev radius over which foreground pillars spawn head-only
    /// tokens, refined by one attention block; 0 is off.
    pub diffusion: u32,
    pub time_dims: usize,
    pub strategy: Strategy,
    /// Inverse calibration on; when off, history keeps its own coordinates.
    pub ica: bool,
    pub sampling: Sampling,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            d: 32,
            heads: 4,
            window: DEFAULT_WINDOW,
            variant: AttentionVariant::SelfAttn,
            fusion_blocks: 1,
            backbone_depth: 2,
            backbone_shift: false,
            fg_threshold: 0.5,
            fg_cap: 2000,
            diffusion: 0,
            time_dims: 32,
            strategy: Strategy::L2E,
            ica: true,
            sampling: Sampling::Nearest,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return bad("fg_threshold must lie in (0, 1)");
        }
        if self.fg_cap == 0 {
            return bad("fg_cap must be at least 1");
        }
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return bad("d must be a positive multiple of 4");
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("heads must divide d");
        }
        if self.time_dims == 0 || !self.time_dims.is_multiple_of(2) {
            return bad("time_dims must be positive and even");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        Ok(())
    }

    /// Upper bound on carried scalars: coordinates plus features per pillar.
    pub fn state_capacity(&self) -> usize {
        self.fg_cap * (2 + self.d)
    }
}

/// Sinusoidal encoding of a non-negative time offset, position measured in
/// frame periods.
pub fn time_offset_encoding(dt: f64, dims: usize) -> Result<Vec<f64>> {
    if dims == 0 || !dims.is_multiple_of(2) {
        return Err(Error::InvalidArgument {
            op: "time_offset_encoding",
            msg: alloc::format!("dims = {dims} must be positive and even"),
        });
    }
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::NegativeTimeOffset(dt));
    }
    Ok(sinusoid(dt / FRAME_PERIOD, dims))
}

/// The carried recurrent state: detached foreground pillars of the last
/// step, with the pose and time they were observed at.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub foreground: SparsePillarSet,
    pub timestamp: f64,
    pub pose: Pose,
    pub generation: u64,
}

impl FusionState {
    /// Scalars held: two coordinates plus `d` features per pillar.
    pub fn size(&self) -> usize {
        self.foreground.len() * (2 + self.foreground.d())
    }
}

/// One sensor sweep in the vehicle frame, with the vehicle pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub pose: Pose,
    pub timestamp: f64,
}

/// Cardinalities of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    /// Encoded current pillars, `N'`.
    pub current: usize,
    /// History pillars in the incoming state, `K`.
    pub history: usize,
    /// History pillars after calibration, `K~`.
    pub calibrated: usize,
    /// Aligned union, `U`.
    pub union: usize,
    /// Pillars kept as the next state.
    pub foreground: usize,
}

impl StepStats {
    /// `N' <= U <= N' + K~` and `K~ <= K`.
    pub fn bounds_hold(&self) -> bool {
        self.current <= self.union && self.union <= self.current + self.calibrated && self.calibrated <= self.history
    }
}

/// Everything one step produces. `tokens` are the backbone outputs.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub fused: TokenSet,
    pub tokens: TokenSet,
    pub heads: HeadVars,
    pub fg_scores: Vec<f64>,
    pub new_state: FusionState,
    pub stats: StepStats,
}

/// Selects foreground pillars: sigmoid score above the threshold, then the
/// top `cap` by score (equal scores keep the lower row-major coordinate).
/// Returns every score and the kept set in row-major order.
pub fn foreground_segment(features: &SparsePillarSet, logits: &[f64], threshold: f64, cap: usize) -> (Vec<f64>, SparsePillarSet) {
    let scores: Vec<f64> = logits.iter().map(|&z| crate::numerics::sigmoid(z)).collect();
    let mut kept: Vec<usize> = (0..features.len()).filter(|&i| scores[i] > threshold).collect();
    kept.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(features.coords()[a].cmp(&features.coords()[b]))
    });
    kept.truncate(cap);
    kept.sort_by_key(|&i| features.coords()[i]);
    let d = features.d();
    let mut data = Vec::with_capacity(kept.len() * d);
    for &i in &kept {
        data.extend_from_slice(features.feature(i));
    }
    let coords = kept.iter().map(|&i| features.coords()[i]).collect();
    let set = SparsePillarSet::new(coords, Tensor::new(&[kept.len(), d], data).expect("shape")).expect("subset of a valid set");
    (scores, set)
}

/// Tokens scoring above `threshold` spread into every unoccupied cell within
/// Chebyshev distance `radius`; a new token is the elementwise max of the
/// spreading tokens that reach it. Returns the input tokens followed by the
/// new ones in row-major order.
pub fn diffuse_tokens(tape: &mut Tape, tokens: &TokenSet, scores: &[f64], threshold: f64, radius: u32, grid: &GridSpec) -> Result<TokenSet> {
    let existing: BTreeSet<Cell> = tokens.coords.iter().copied().collect();
    let mut reached: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    let r = i64::from(radius);
    for (i, &c) in tokens.coords.iter().enumerate() {
        if scores[i] <= threshold {
            continue;
        }
        for dr in -r..=r {
            for dc in -r..=r {
                let (row, col) = (i64::from(c.row) + dr, i64::from(c.col) + dc);
                if row < 0 || col < 0 || row >= grid.h() as i64 || col >= grid.w() as i64 {
                    continue;
                }
                let n = Cell::new(row as u32, col as u32);
                if !existing.contains(&n) {
                    reached.entry(n).or_default().push(i);
                }
            }
        }
    }
    if reached.is_empty() {
        return Ok(tokens.clone());
    }
    let (mut rows, mut segment) = (Vec::new(), Vec::new());
    for (k, srcs) in reached.values().enumerate() {
        rows.extend_from_slice(srcs);
        segment.extend(core::iter::repeat_n(k, srcs.len()));
    }
    let gathered = tape.gather_rows(tokens.feats, &rows)?;
    let pooled = tape.segment_max(gathered, &segment, reached.len())?;
    let feats = tape.concat(&[tokens.feats, pooled], 0)?;
    let mut coords = tokens.coords.clone();
    coords.extend(reached.keys().copied());
    Ok(TokenSet { coords, feats })
}

/// Window self-attention blocks in sequence; coordinates and count are kept.
pub fn backbone_stub(tape: &mut Tape, p: &Params, blocks: &[AttentionBlock], tokens: &TokenSet, shift: bool) -> Result<TokenSet> {
    let mut x = tokens.clone();
    for (i, b) in blocks.iter().enumerate() {
        let s = if shift && i % 2 == 1 { b.ws / 2 } else { 0 };
        x = b.forward(tape, p, &x, AttentionVariant::SelfAttn, None, s)?;
    }
    Ok(x)
}

/// All parameters of the detector for one configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: FusionConfig,
    pub store: ParamStore,
    pub encoder: PillarEncoder,
    pub time_proj: Linear,
    pub reduce: ReductionNet,
    pub fusion: Vec<AttentionBlock>,
    pub backbone: Vec<AttentionBlock>,
    pub heads: DetectionHeads,
    pub diffuse: Option<AttentionBlock>,
}

impl Model {
    pub fn new(cfg: FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let d = cfg.d;
        let d_in = if cfg.strategy == Strategy::E2E { 6 } else { 5 };
        let encoder = PillarEncoder::new(&mut store, "encoder", d_in, d, &mut rng);
        let time_proj = Linear::new(&mut store, "time_proj", d + cfg.time_dims, d, true, &mut rng);
        let reduce = ReductionNet::new(&mut store, "reduce", d, &mut rng);
        let mut block = |name: alloc::string::String, rng: &mut Rng| AttentionBlock::new(&mut store, &name, d, cfg.heads, cfg.window, rng);
        let mut fusion = Vec::new();
        if cfg.strategy == Strategy::L2E {
            for i in 0..cfg.fusion_blocks {
                fusion.push(block(alloc::format!("fusion.{i}"), &mut rng)?);
            }
        }
        let mut backbone = Vec::new();
        for i in 0..cfg.backbone_depth {
            backbone.push(block(alloc::format!("backbone.{i}"), &mut rng)?);
        }
        let heads = DetectionHeads::new(&mut store, "head", d, &mut rng);
        let diffuse = if cfg.diffusion > 0 {
            Some(AttentionBlock::new(&mut store, "diffuse.0", d, cfg.heads, cfg.window, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            time_proj,
            reduce,
            fusion,
            backbone,
            heads,
            diffuse,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// History tokens tagged with their time offset and warped into the
    /// current frame. Returns the calibrated tokens and the map used.
    fn calibrated_history(&self, tape: &mut Tape, p: &Params, state: &FusionState, pose: &Pose, timestamp: f64) -> Result<(TokenSet, CalibrationMap)> {
        if timestamp <= state.timestamp {
            return Err(Error::NonMonotonicTime {
                prev: state.timestamp,
                cur: timestamp,
            });
        }
        let k = state.foreground.len();
        let tau = time_offset_encoding(timestamp - state.timestamp, self.cfg.time_dims)?;
        let mut rows = Vec::with_capacity(k * tau.len());
        for _ in 0..k {
            rows.extend_from_slice(&tau);
        }
        let h = tape.constant(state.foreground.features().clone());
        let t = tape.constant(Tensor::new(&[k, self.cfg.time_dims], rows)?);
        let ht = tape.concat(&[h, t], 1)?;
        let folded = self.time_proj.forward(tape, p, ht)?;
        let tokens = TokenSet {
            coords: state.foreground.coords().to_vec(),
            feats: folded,
        };
        let map = if self.cfg.ica {
            calibrate_tokens(state.foreground.coords(), &state.pose, pose, &self.cfg.grid, self.cfg.sampling)
        } else {
            CalibrationMap {
                targets: tokens.coords.clone(),
                taps: (0..k).map(|i| (i, i, 1.0)).collect(),
            }
        };
        Ok((apply_calibration(tape, &tokens, &map)?, map))
    }

    fn align(&self, tape: &mut Tape, p: &Params, hist: &TokenSet, cur: &TokenSet) -> Result<(TokenSet, AlignStats)> {
        self.reduce.align(tape, p, hist, cur)
    }

    /// One recurrent step (L2E or L2L). For E2E use [`Model::stacked_step`].
    pub fn fuse_step(&self, tape: &mut Tape, p: &Params, state: Option<&FusionState>, frame: &Frame) -> Result<StepOutput> {
        let cfg = &self.cfg;
        if cfg.strategy == Strategy::E2E {
            return self.stacked_step(tape, p, &[frame]);
        }
        let buckets = voxelize(&frame.cloud, &cfg.grid);
        let current = self.encoder.encode(tape, p, &frame.cloud, &buckets, &cfg.grid, None)?;
        let mut stats = StepStats {
            current: current.len(),
            ..Default::default()
        };
        let history = match state {
            Some(s) => {
                stats.history = s.foreground.len();
                let (h, _) = self.calibrated_history(tape, p, s, &frame.pose, frame.timestamp)?;
                stats.calibrated = h.len();
                Some(h)
            }
            None => None,
        };
        let (fused, tokens) = match cfg.strategy {
            Strategy::L2E => {
                let aligned = match &history {
                    Some(h) => {
                        let (j, a) = self.align(tape, p, h, &current)?;
                        stats.union = a.union;
                        j
                    }
                    None => {
                        stats.union = current.len();
                        current.clone()
                    }
                };
                let mut fused = aligned;
                for b in &self.fusion {
                    fused = b.forward(tape, p, &fused, cfg.variant, history.as_ref(), 0)?;
                }
                let tokens = backbone_stub(tape, p, &self.backbone, &fused, cfg.backbone_shift)?;
                (fused, tokens)
            }
            Strategy::L2L => {
                let late = backbone_stub(tape, p, &self.backbone, &current, cfg.backbone_shift)?;
                let tokens = match &history {
                    Some(h) => {
                        let (j, a) = self.align(tape, p, h, &late)?;
                        stats.union = a.union;
                        j
                    }
                    None => {
                        stats.union = late.len();
                        late
                    }
                };
                (current, tokens)
            }
            Strategy::E2E => unreachable!("dispatched above"),
        };
        if cfg.sampling == Sampling::Nearest && !stats.bounds_hold() {
            return Err(Error::Invariant(alloc::format!("sparsity bounds violated: {stats:?}")));
        }
        self.finish(tape, p, fused, tokens, stats, state.map_or(0, |s| s.generation + 1), frame)
    }

    /// Early fusion: all frames (current last) are pose-compensated into the
    /// current frame, stacked with a per-point time offset, and run once.
    pub fn stacked_step(&self, tape: &mut Tape, p: &Params, frames: &[&Frame]) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let cur = frames.last().ok_or_else(|| Error::InvalidArgument {
            op: "stacked_step",
            msg: "no frames".into(),
        })?;
        for w in frames.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::NonMonotonicTime {
                    prev: w[0].timestamp,
                    cur: w[1].timestamp,
                });
            }
        }
        let (cloud, dt) = stack_frames(frames)?;
        let buckets = voxelize(&cloud, &cfg.grid);
        let extra = (self.encoder.d_in == 6).then_some(dt.as_slice());
        let current = self.encoder.encode(tape, p, &cloud, &buckets, &cfg.grid, extra)?;
        let stats = StepStats {
            current: current.len(),
            union: current.len(),
            ..Default::default()
        };
        let mut fused = current;
        for b in &self.fusion {
            fused = b.forward(tape, p, &fused, AttentionVariant::SelfAttn, None, 0)?;
        }
        let tokens = backbone_stub(tape, p, &self.backbone, &fused, cfg.backbone_shift)?;
        self.finish(tape, p, fused, tokens, stats, 0, cur)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(&self, tape: &mut Tape, p: &Params, fused: TokenSet, tokens: TokenSet, mut stats: StepStats, generation: u64, frame: &Frame) -> Result<StepOutput> {
        let seg_logit = self.heads.seg.forward(tape, p, tokens.feats)?;
        let features = tokens.to_set(tape);
        let logits = tape.value(seg_logit).data().to_vec();
        let (fg_scores, foreground) = foreground_segment(&features, &logits, self.cfg.fg_threshold, self.cfg.fg_cap);
        let heads = match &self.diffuse {
            Some(b) => {
                let spread = diffuse_tokens(tape, &tokens, &fg_scores, self.cfg.fg_threshold, self.cfg.diffusion, &self.cfg.grid)?;
                let det = b.forward(tape, p, &spread, AttentionVariant::SelfAttn, None, 0)?;
                self.heads.detect(tape, p, tokens.coords.clone(), seg_logit, &det)?
            }
            None => self.heads.detect(tape, p, tokens.coords.clone(), seg_logit, &tokens)?,
        };
        stats.foreground = foreground.len();
        Ok(StepOutput {
            fused,
            tokens,
            heads,
            fg_scores,
            new_state: FusionState {
                foreground,
                timestamp: frame.timestamp,
                pose: frame.pose,
                generation,
            },
            stats,
        })
    }

    /// Runs frames in order from an empty state and returns every step. For
    /// E2E each step stacks all frames up to and including itself.
    pub fn run(&self, tape: &mut Tape, p: &Params, frames: &[&Frame]) -> Result<Vec<StepOutput>> {
        let mut outs: Vec<StepOutput> = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            let out = match self.cfg.strategy {
                Strategy::E2E => self.stacked_step(tape, p, &frames[..=i])?,
                _ => {
                    let state = outs.last().map(|o| &o.new_state);
                    self.fuse_step(tape, p, state, frames[i])?
                }
            };
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Points of every frame expressed in the last frame's vehicle coordinates,
/// with each point's age `t_last - t_k` in seconds.
pub fn stack_frames(frames: &[&Frame]) -> Result<(PointCloud, Vec<f64>)> {
    let cur = frames.last().ok_or_else(|| Error::InvalidArgument {
        op: "stack_frames",
        msg: "no frames".into(),
    })?;
    let n: usize = frames.iter().map(|f| f.cloud.len()).sum();
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let mut dt = Vec::with_capacity(n);
    for f in frames {
        let rel = Pose::relative_transform(&cur.pose, &f.pose);
        let age = cur.timestamp - f.timestamp;
        for i in 0..f.cloud.len() {
            points.push(rel.transform_point(f.cloud.points[i]));
            intensity.push(f.cloud.intensity_at(i));
            dt.push(age);
        }
    }
    Ok((PointCloud::new(points, Some(intensity), cur.timestamp)?, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::numerics::check_gradients;
    use crate::pillars::Cell;

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            grid: GridSpec::new(16.0, 0.8).unwrap(),
            d: 8,
            heads: 2,
            window: 5,
            time_dims: 8,
            fg_threshold: 0.3,
            ..Default::default()
        }
    }

    fn cluster_cloud(rng: &mut Rng, centers: &[[f64; 2]], t: f64) -> PointCloud {
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..40 {
                pts.push([c[0] + rng.range(-1.5, 1.5), c[1] + rng.range(-1.0, 1.0), rng.range(0.0, 2.0)]);
            }
        }
        for _ in 0..60 {
            pts.push([rng.range(-8.0, 8.0), rng.range(-8.0, 8.0), 0.0]);
        }
        PointCloud::new(pts, None, t).unwrap()
    }

    fn frame(rng: &mut Rng, pose: Pose, t: f64) -> Frame {
        Frame {
            cloud: cluster_cloud(rng, &[[2.0, 1.0], [-4.0, -3.0]], t),
            pose,
            timestamp: t,
        }
    }

    #[test]
    fn time_encoding_cases() {
        let z = time_offset_encoding(0.0, 8).unwrap();
        for k in 0..4 {
            assert_eq!(z[2 * k], 0.0);
            assert_eq!(z[2 * k + 1], 1.0);
        }
        let e = time_offset_encoding(0.1, 8).unwrap();
        let pos = 0.1 / FRAME_PERIOD;
        for k in 0..4 {
            let a = pos / 10000f64.powf(2.0 * k as f64 / 8.0);
            assert!((e[2 * k] - a.sin()).abs() < 1e-15);
            assert!((e[2 * k + 1] - a.cos()).abs() < 1e-15);
        }
        let grid: Vec<Vec<f64>> = (0..=10).map(|i| time_offset_encoding(i as f64 * 0.1, 4).unwrap()).collect();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                assert!(grid[i].iter().zip(&grid[j]).any(|(a, b)| (a - b).abs() > 1e-9));
            }
        }
        assert!(matches!(time_offset_encoding(-0.1, 8), Err(Error::NegativeTimeOffset(_))));
        assert!(time_offset_encoding(0.1, 7).is_err());
    }

    #[test]
    fn foreground_selection_rules() {
        let coords: Vec<Cell> = (0..6).map(|i| Cell::new(i / 3, i % 3)).collect();
        let set = SparsePillarSet::new(coords.clone(), Tensor::new(&[6, 1], (0..6).map(|i| i as f64).collect()).unwrap()).unwrap();
        let (s, fg) = foreground_segment(&set, &[f64::NEG_INFINITY; 6], 0.5, 3);
        assert!(fg.is_empty());
        assert!(s.iter().all(|&v| v == 0.0));
        let (_, fg) = foreground_segment(&set, &[f64::INFINITY; 6], 0.5, 4);
        assert_eq!(fg.coords(), &coords[..4]);
        let (_, fg) = foreground_segment(&set, &[0.1, 3.0, -1.0, 2.0, 5.0, 0.0], 0.5, 2);
        assert_eq!(fg.coords(), &[coords[1], coords[4]]);
        assert_eq!(fg.feature(1), &[4.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.fg_threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.fg_cap = 0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.heads = 3;
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn first_frame_equals_single_frame_pipeline() {
        let cfg = small_cfg();
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = Rng::new(2);
        let f = frame(&mut rng, Pose::identity(), 0.0);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let out = model.fuse_step(&mut tape, &p, None, &f).unwrap();
        // the same operators applied by hand
        let mut t2 = Tape::new();
        let p2 = model.store.bind(&mut t2, false);
        let buckets = voxelize(&f.cloud, &cfg.grid);
        let cur = model.encoder.encode(&mut t2, &p2, &f.cloud, &buckets, &cfg.grid, None).unwrap();
        let fused = model.fusion[0].forward(&mut t2, &p2, &cur, cfg.variant, None, 0).unwrap();
        let tokens = backbone_stub(&mut t2, &p2, &model.backbone, &fused, false).unwrap();
        assert_eq!(tape.value(out.tokens.feats), t2.value(tokens.feats));
        assert!(out.new_state.foreground.len() <= cfg.fg_cap);
        assert_eq!(out.stats.union, out.stats.current);
        assert_eq!(out.new_state.generation, 0);
    }

    #[test]
    fn static_scene_alignment_inclusion() {
        let mut cfg = small_cfg();
        cfg.fg_threshold = 1e-4;
        let model = Model::new(cfg, 3).unwrap();
        let mut rng = Rng::new(4);
        let f1 = frame(&mut rng, Pose::identity(), 0.0);
        let f2 = Frame {
            timestamp: 0.1,
            ..f1.clone()
        };
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let o1 = model.fuse_step(&mut tape, &p, None, &f1).unwrap();
        assert!(!o1.new_state.foreground.is_empty());
        let o2 = model.fuse_step(&mut tape, &p, Some(&o1.new_state), &f2).unwrap();
        // identity motion: calibrated coords are exactly the previous foreground
        let map = calibrate_tokens(o1.new_state.foreground.coords(), &f1.pose, &f2.pose, &cfg.grid, Sampling::Nearest);
        assert_eq!(map.targets, o1.new_state.foreground.coords());
        let mut union: Vec<Cell> = o1.tokens.coords.iter().chain(&map.targets).copied().collect();
        union.sort_unstable();
        union.dedup();
        assert_eq!(o2.stats.union, union.len());
        assert_eq!(o2.fused.coords, union);
        assert!(o2.stats.bounds_hold());
    }

    #[test]
    fn non_monotonic_time_rejected() {
        let model = Model::new(small_cfg(), 5).unwrap();
        let mut rng = Rng::new(6);
        let f = frame(&mut rng, Pose::identity(), 1.0);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let o = model.fuse_step(&mut tape, &p, None, &f).unwrap();
        assert!(matches!(
            model.fuse_step(&mut tape, &p, Some(&o.new_state), &f),
            Err(Error::NonMonotonicTime { .. })
        ));
    }

    fn moving_frames(rng: &mut Rng, n: usize) -> Vec<Frame> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                frame(rng, Pose::from_yaw_translation(0.05 * i as f64, 0.8 * i as f64, 0.1 * i as f64, 0.0), t)
            })
            .collect()
    }

    #[test]
    fn replay_is_bit_identical() {
        for strategy in [Strategy::L2E, Strategy::L2L] {
            let mut cfg = small_cfg();
            cfg.strategy = strategy;
            cfg.variant = AttentionVariant::MixAttn;
            cfg.fg_threshold = 1e-4;
            let model = Model::new(cfg, 7).unwrap();
            let frames = moving_frames(&mut Rng::new(8), 3);
            let refs: Vec<&Frame> = frames.iter().collect();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, false);
            let all = model.run(&mut tape, &p, &refs).unwrap();
            // restart: replay frames 1-2 on a fresh tape, thread the state
            let mut t2 = Tape::new();
            let p2 = model.store.bind(&mut t2, false);
            let head = model.run(&mut t2, &p2, &refs[..2]).unwrap();
            let mut t3 = Tape::new();
            let p3 = model.store.bind(&mut t3, false);
            let last = model.fuse_step(&mut t3, &p3, Some(&head[1].new_state), &frames[2]).unwrap();
            let a = crate::detection::head_output(&tape, &all[2].heads);
            let b = crate::detection::head_output(&t3, &last.heads);
            assert_eq!(a, b);
            assert_eq!(all[2].new_state, last.new_state);
        }
    }

    #[test]
    fn stop_gradient_recompute_oracle() {
        let mut cfg = small_cfg();
        cfg.variant = AttentionVariant::CrossAttn;
        cfg.fg_threshold = 1e-4;
        let model = Model::new(cfg, 9).unwrap();
        let frames = moving_frames(&mut Rng::new(10), 2);
        let loss_of = |tape: &mut Tape, out: &StepOutput| {
            let s = tape.sum(out.tokens.feats).unwrap();
            let h = tape.sum(out.heads.center_logit).unwrap();
            tape.add(s, h).unwrap()
        };
        // two steps on one tape
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, true);
        let o1 = model.fuse_step(&mut tape, &p, None, &frames[0]).unwrap();
        assert!(!o1.new_state.foreground.is_empty());
        let o2 = model.fuse_step(&mut tape, &p, Some(&o1.new_state), &frames[1]).unwrap();
        let l = loss_of(&mut tape, &o2);
        tape.backward(l).unwrap();
        // step 1 replaced by a constant state of the same value
        let state = FusionState {
            foreground: SparsePillarSet::new(o1.new_state.foreground.coords().to_vec(), o1.new_state.foreground.features().clone()).unwrap(),
            ..o1.new_state.clone()
        };
        let mut t2 = Tape::new();
        let p2 = model.store.bind(&mut t2, true);
        let o = model.fuse_step(&mut t2, &p2, Some(&state), &frames[1]).unwrap();
        let l2 = loss_of(&mut t2, &o);
        t2.backward(l2).unwrap();
        assert_eq!(tape.value(l).item(), t2.value(l2).item());
        for (a, b) in p.vars().iter().zip(p2.vars()) {
            assert_eq!(tape.grad(*a), t2.grad(*b));
        }
        // the encoder saw frame 1 in step 1 too, yet only step 2 contributes
        assert!(tape.grad(p.var(model.encoder.mlp.first.w)).is_some());
    }

    #[test]
    fn sparsity_bounds_fuzz() {
        let mut rng = Rng::new(11);
        let mut cfg = small_cfg();
        cfg.fg_threshold = 1e-3;
        for (i, strategy) in [Strategy::L2E, Strategy::L2L].into_iter().enumerate() {
            cfg.strategy = strategy;
            let model = Model::new(cfg, 12 + i as u64).unwrap();
            let mut state: Option<FusionState> = None;
            let mut pose = Pose::identity();
            for step in 0..40 {
                pose = pose.compose(&Pose::from_yaw_translation(rng.range(-0.3, 0.3), rng.range(-1.0, 2.0), rng.range(-1.0, 1.0), 0.0));
                let center = [rng.range(-6.0, 6.0), rng.range(-6.0, 6.0)];
                let f = Frame {
                    cloud: cluster_cloud(&mut rng, &[center], step as f64 * 0.1),
                    pose,
                    timestamp: step as f64 * 0.1,
                };
                let mut tape = Tape::new();
                let p = model.store.bind(&mut tape, false);
                let out = model.fuse_step(&mut tape, &p, state.as_ref(), &f).unwrap();
                assert!(out.stats.bounds_hold(), "{:?}", out.stats);
                assert!(out.new_state.size() <= cfg.state_capacity());
                state = Some(out.new_state);
            }
        }
    }

    #[test]
    fn e2e_stacks_pose_compensated_points() {
        let mut rng = Rng::new(13);
        let f1 = frame(&mut rng, Pose::from_translation(0.0, 0.0, 0.0), 0.0);
        let f2 = frame(&mut rng, Pose::from_translation(2.0, 0.0, 0.0), 0.1);
        let (cloud, dt) = stack_frames(&[&f1, &f2]).unwrap();
        assert_eq!(cloud.len(), f1.cloud.len() + f2.cloud.len());
        let p = cloud.points[0];
        let q = f1.cloud.points[0];
        assert!((p[0] - (q[0] - 2.0)).abs() < 1e-12);
        assert!((dt[0] - 0.1).abs() < 1e-12);
        assert_eq!(dt[cloud.len() - 1], 0.0);
        let mut cfg = small_cfg();
        cfg.strategy = Strategy::E2E;
        let model = Model::new(cfg, 14).unwrap();
        assert_eq!(model.encoder.d_in, 6);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let outs = model.run(&mut tape, &p, &[&f1, &f2]).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs[1].stats.current >= outs[0].stats.current);
    }

    #[test]
    fn backbone_depths() {
        let cfg = small_cfg();
        let model = Model::new(cfg, 15).unwrap();
        let mut rng = Rng::new(16);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let coords = vec![Cell::new(0, 0), Cell::new(3, 4), Cell::new(9, 9)];
        let x = TokenSet {
            coords: coords.clone(),
            feats: tape.constant(Tensor::new(&[3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap()),
        };
        let id = backbone_stub(&mut tape, &p, &[], &x, false).unwrap();
        assert_eq!(id.feats, x.feats);
        let two = backbone_stub(&mut tape, &p, &model.backbone, &x, false).unwrap();
        let a = crate::attention::attend(&mut tape, &p, &model.backbone[0], &x, AttentionVariant::SelfAttn, None).unwrap();
        let b = crate::attention::attend(&mut tape, &p, &model.backbone[1], &a, AttentionVariant::SelfAttn, None).unwrap();
        assert_eq!(tape.value(two.feats), tape.value(b.feats));
        assert_eq!(two.coords, coords);
        let empty = TokenSet {
            coords: vec![],
            feats: tape.constant(Tensor::zeros(&[0, 8])),
        };
        assert!(backbone_stub(&mut tape, &p, &model.backbone, &empty, false).unwrap().is_empty());
    }

    #[test]
    fn time_projection_and_backbone_gradients() {
        let cfg = small_cfg();
        let model = Model::new(cfg, 17).unwrap();
        let np = model.store.len();
        let mut rng = Rng::new(18);
        let coords = vec![Cell::new(0, 0), Cell::new(1, 3), Cell::new(6, 7)];
        for trial in 0..20 {
            let mut inputs = model.store.tensors().to_vec();
            inputs.push(Tensor::new(&[3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap());
            let w = Tensor::new(&[3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap();
            let shift = trial % 2 == 1;
            let report = check_gradients(&inputs, |tape, v| {
                let p = Params::from_vars(v[..np].to_vec());
                let tau = tape.constant(Tensor::new(&[3, 8], time_offset_encoding(0.2, 8)?.repeat(3))?);
                let ht = tape.concat(&[v[np], tau], 1)?;
                let folded = model.time_proj.forward(tape, &p, ht)?;
                let x = TokenSet { coords: coords.clone(), feats: folded };
                let y = backbone_stub(tape, &p, &model.backbone, &x, shift)?;
                let w = tape.constant(w.clone());
                let m = tape.mul(y.feats, w)?;
                tape.sum(m)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn diffusion_matches_neighborhood_max_oracle() {
        let grid = GridSpec::new(8.0, 1.0).unwrap();
        let mut rng = Rng::new(23);
        for trial in 0..20 {
            let n = 1 + rng.below(12);
            let mut coords: Vec<Cell> = (0..n).map(|_| Cell::new(rng.below(8) as u32, rng.below(8) as u32)).collect();
            coords.sort();
            coords.dedup();
            let n = coords.len();
            let feats: Vec<f64> = (0..n * 3).map(|_| rng.normal()).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let radius = 1 + (trial % 2) as u32;
            let mut tape = Tape::new();
            let x = TokenSet {
                coords: coords.clone(),
                feats: tape.constant(Tensor::new(&[n, 3], feats.clone()).unwrap()),
            };
            let y = diffuse_tokens(&mut tape, &x, &scores, 0.5, radius, &grid).unwrap();
            let yv = tape.value(y.feats).clone();
            assert_eq!(&y.coords[..n], &coords[..]);
            assert_eq!(&yv.data()[..n * 3], &feats[..]);
            let mut want = Vec::new();
            for row in 0..8u32 {
                for col in 0..8u32 {
                    let c = Cell::new(row, col);
                    if coords.contains(&c) {
                        continue;
                    }
                    let near: Vec<usize> = (0..n)
                        .filter(|&i| scores[i] > 0.5 && coords[i].row.abs_diff(row) <= radius && coords[i].col.abs_diff(col) <= radius)
                        .collect();
                    if !near.is_empty() {
                        let m: Vec<f64> = (0..3).map(|j| near.iter().map(|&i| feats[i * 3 + j]).fold(f64::NEG_INFINITY, f64::max)).collect();
                        want.push((c, m));
                    }
                }
            }
            assert_eq!(y.coords.len(), n + want.len());
            for (k, (c, m)) in want.iter().enumerate() {
                assert_eq!(y.coords[n + k], *c);
                assert_eq!(yv.row(n + k), &m[..]);
            }
        }
    }

    #[test]
    fn diffusion_without_foreground_is_identity() {
        let grid = GridSpec::new(8.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let x = TokenSet {
            coords: vec![Cell::new(0, 0), Cell::new(7, 7)],
            feats: tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        };
        let y = diffuse_tokens(&mut tape, &x, &[0.1, 0.2], 0.5, 2, &grid).unwrap();
        assert_eq!(y.coords, x.coords);
        assert_eq!(y.feats, x.feats);
        let z = diffuse_tokens(&mut tape, &x, &[0.9, 0.1], 0.5, 1, &grid).unwrap();
        assert_eq!(z.coords[2..], [Cell::new(0, 1), Cell::new(1, 0), Cell::new(1, 1)]);
    }

    #[test]
    fn diffused_heads_cover_spread_cells_and_keep_state_on_union() {
        let cfg = FusionConfig {
            diffusion: 1,
            fg_threshold: 0.005,
            ..small_cfg()
        };
        let model = Model::new(cfg, 29).unwrap();
        assert!(model.diffuse.is_some());
        let mut rng = Rng::new(30);
        let frame = Frame {
            cloud: cluster_cloud(&mut rng, &[[2.0, 2.0]], 0.0),
            pose: Pose::identity(),
            timestamp: 0.0,
        };
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let out = model.fuse_step(&mut tape, &p, None, &frame).unwrap();
        assert_eq!(out.heads.coords, out.tokens.coords);
        assert!(out.heads.det_coords.len() > out.heads.coords.len());
        assert_eq!(&out.heads.det_coords[..out.tokens.len()], &out.tokens.coords[..]);
        assert_eq!(tape.value(out.heads.reg).shape(), &[out.heads.det_coords.len(), crate::detection::BOX_CHANNELS]);
        assert!(out.new_state.foreground.coords().iter().all(|c| out.tokens.coords.contains(c)));
    }

    #[test]
    fn diffusion_gradients() {
        let cfg = FusionConfig { diffusion: 1, ..small_cfg() };
        let model = Model::new(cfg, 31).unwrap();
        let block = model.diffuse.as_ref().unwrap();
        let np = model.store.len();
        let grid = model.cfg.grid;
        let mut rng = Rng::new(32);
        let coords = vec![Cell::new(2, 2), Cell::new(2, 4), Cell::new(6, 7)];
        for _ in 0..20 {
            let mut inputs = model.store.tensors().to_vec();
            inputs.push(Tensor::new(&[3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap());
            let w = rng.normal();
            let report = check_gradients(&inputs, |tape, v| {
                let p = Params::from_vars(v[..np].to_vec());
                let x = TokenSet { coords: coords.clone(), feats: v[np] };
                let y = diffuse_tokens(tape, &x, &[0.9, 0.9, 0.1], 0.5, 1, &grid)?;
                let z = block.forward(tape, &p, &y, AttentionVariant::SelfAttn, None, 0)?;
                let s = tape.sum(z.feats)?;
                let sq = tape.mul(s, s)?;
                tape.scale(sq, w)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
