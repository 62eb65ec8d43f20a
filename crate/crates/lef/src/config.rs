//! TOML run configuration. Keys are namespaced by section (`synth.*`,
//! `model.*`, `train.*`, `eval.*`); either `[section]` tables or dotted keys
//! work. Every key is optional and defaults to the library default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use lef_core::detection::{ApConfig, IouMode, LossWeights};
use lef_core::fusion::FusionConfig;
use lef_core::pillars::GridSpec;
use lef_core::synth::{BenchmarkConfig, SceneConfig, SensorConfig};
use lef_core::train::{EvalConfig, EvalTargets, SlfPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.fusion()?;
        cfg.training()?;
        cfg.evaluation()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        let m = &self.model;
        let cfg = FusionConfig {
            grid: GridSpec::new(m.range_m, m.cell_m)?,
            d: m.d,
            heads: m.heads,
            window: m.window,
            variant: m.variant.parse()?,
            fusion_blocks: m.fusion_blocks,
            backbone_depth: m.backbone_depth,
            backbone_shift: m.backbone_shift,
            fg_threshold: m.fg_threshold,
            fg_cap: m.fg_cap,
            diffusion: m.diffusion,
            time_dims: m.time_dims,
            strategy: m.strategy.parse()?,
            ica: m.ica,
            sampling: m.sampling.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn training(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            batch: t.batch,
            warmup: t.warmup,
            lr_start: t.lr_start,
            lr_peak: t.lr_peak,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            weights: LossWeights {
                seg: t.seg_weight,
                center: t.center_weight,
            },
            seed: t.seed,
            slf: SlfPolicy {
                max_history: t.max_history,
            },
            eval_every: t.eval_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn evaluation(&self) -> Result<EvalConfig> {
        let e = &self.eval;
        let targets = match e.targets.as_str() {
            "all" => EvalTargets::All,
            "last" => EvalTargets::Last,
            "full_clip" => EvalTargets::FullClip,
            "from" => EvalTargets::From(e.first_frame),
            other => bail!("unknown eval.targets `{other}` (all | last | full_clip | from)"),
        };
        if e.frames == 0 {
            bail!("eval.frames must be >= 1");
        }
        Ok(EvalConfig {
            frames: e.frames,
            ap: ApConfig {
                iou_thresh: e.iou,
                mode: e.mode.parse::<IouMode>()?,
                heading_weighted: false,
            },
            k_max: e.k_max,
            score_thresh: e.score_thresh,
            targets,
        })
    }

    fn sensor(&self) -> SensorConfig {
        let s = &self.synth;
        SensorConfig {
            height: s.sensor_height,
            surface_density: s.surface_density,
            ground_density: s.ground_density,
            ground_inner: s.ground_inner,
            ground_outer: s.ground_outer,
            range_noise: s.range_noise,
            points_budget: s.points_budget,
            occlusion: s.occlusion,
            ..SensorConfig::default()
        }
    }

    /// Scene generator settings of sequence `i`.
    pub fn scene(&self, i: usize) -> SceneConfig {
        let s = &self.synth;
        SceneConfig {
            seed: s.seed + i as u64,
            n_static: s.n_static,
            n_moving: s.n_moving,
            speed_range: (s.speed_min, s.speed_max),
            ego_speed: s.ego_speed,
            frames: s.frames,
            frame_period: s.frame_period,
            sensor: self.sensor(),
            ..SceneConfig::default()
        }
    }

    /// Occlusion benchmark settings of sequence `i`.
    pub fn benchmark(&self, i: usize) -> BenchmarkConfig {
        let s = &self.synth;
        BenchmarkConfig {
            seed: s.seed + i as u64,
            frames: s.frames,
            frame_period: s.frame_period,
            ego_speed: s.ego_speed,
            boxes_per_side: s.boxes_per_side,
            speed_range: (s.speed_min, s.speed_max),
            sensor: self.sensor(),
            ..BenchmarkConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// `benchmark` (fenced large objects) or `scene` (mixed classes).
    pub kind: String,
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub frame_period: f64,
    pub ego_speed: f64,
    pub n_static: usize,
    pub n_moving: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub boxes_per_side: usize,
    pub points_budget: usize,
    pub occlusion: bool,
    pub sensor_height: f64,
    pub surface_density: f64,
    pub ground_density: f64,
    pub ground_inner: f64,
    pub ground_outer: f64,
    pub range_noise: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        let s = SceneConfig::default();
        Self {
            kind: "benchmark".into(),
            seed: 0,
            sequences: 40,
            frames: b.frames,
            frame_period: b.frame_period,
            ego_speed: b.ego_speed,
            n_static: s.n_static,
            n_moving: s.n_moving,
            speed_min: b.speed_range.0,
            speed_max: b.speed_range.1,
            boxes_per_side: b.boxes_per_side,
            points_budget: b.sensor.points_budget,
            occlusion: b.sensor.occlusion,
            sensor_height: b.sensor.height,
            surface_density: b.sensor.surface_density,
            ground_density: b.sensor.ground_density,
            ground_inner: b.sensor.ground_inner,
            ground_outer: b.sensor.ground_outer,
            range_noise: b.sensor.range_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub range_m: f64,
    pub cell_m: f64,
    pub d: usize,
    pub heads: usize,
    pub window: u32,
    /// `self | cross | mix`
    pub variant: String,
    pub fusion_blocks: usize,
    pub backbone_depth: usize,
    pub backbone_shift: bool,
    pub fg_threshold: f64,
    pub fg_cap: usize,
    /// Head-only token spread radius in cells; 0 is off.
    pub diffusion: u32,
    pub time_dims: usize,
    /// `L2E | E2E | L2L`
    pub strategy: String,
    pub ica: bool,
    /// `nearest | bilinear`
    pub sampling: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            range_m: f.grid.range_m,
            cell_m: f.grid.cell_m,
            d: f.d,
            heads: f.heads,
            window: f.window,
            variant: f.variant.name().into(),
            fusion_blocks: f.fusion_blocks,
            backbone_depth: f.backbone_depth,
            backbone_shift: f.backbone_shift,
            fg_threshold: f.fg_threshold,
            fg_cap: f.fg_cap,
            diffusion: f.diffusion,
            time_dims: f.time_dims,
            strategy: f.strategy.name().into(),
            ica: f.ica,
            sampling: f.sampling.name().into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub warmup: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seg_weight: f64,
    pub center_weight: f64,
    pub seed: u64,
    pub max_history: usize,
    pub eval_every: usize,
    /// Trailing sequences of the data set held out for evaluation.
    pub held_out: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch: t.batch,
            warmup: t.warmup,
            lr_start: t.lr_start,
            lr_peak: t.lr_peak,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            seg_weight: t.weights.seg,
            center_weight: t.weights.center,
            seed: t.seed,
            max_history: t.slf.max_history,
            eval_every: t.eval_every,
            held_out: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub frames: usize,
    pub iou: f64,
    /// `bev | 3d`
    pub mode: String,
    pub k_max: usize,
    pub score_thresh: f64,
    /// `all | last | full_clip | from`
    pub targets: String,
    /// First scored frame index when `targets = "from"`.
    pub first_frame: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            frames: e.frames,
            iou: e.ap.iou_thresh,
            mode: "bev".into(),
            k_max: e.k_max,
            score_thresh: e.score_thresh,
            targets: "all".into(),
            first_frame: 0,
        }
    }
}
