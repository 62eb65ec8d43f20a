//! Ablation tables. Every arm trains from the same data, model seed and
//! training seed; a failing arm yields a `failed` row and the table goes on.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use anyhow::{anyhow, Result};
use lef_core::attention::AttentionVariant;
use lef_core::fusion::{Model, Strategy};
use lef_core::synth::Sequence;
use lef_core::train::{evaluate, EvalReport, Executor};
use serde::Serialize;

use crate::config::Config;
use crate::pipeline::{large_recall, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    FusionStrategy,
    FrameLength,
    Ica,
    AttentionVariant,
    SpeedBuckets,
}

impl Table {
    pub const ALL: [Table; 5] = [
        Table::FusionStrategy,
        Table::FrameLength,
        Table::Ica,
        Table::AttentionVariant,
        Table::SpeedBuckets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Table::FusionStrategy => "fusion_strategy",
            Table::FrameLength => "frame_length",
            Table::Ica => "ica",
            Table::AttentionVariant => "attention_variant",
            Table::SpeedBuckets => "speed_buckets",
        }
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Table {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Table::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| anyhow!("unknown ablation `{s}` (fusion_strategy | frame_length | ica | attention_variant | speed_buckets)"))
    }
}

/// Frame counts of the frame-length table.
pub const FRAME_LENGTHS: [usize; 3] = [3, 6, 9];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRow {
    pub table: String,
    pub arm: String,
    pub status: String,
    pub eval_frames: usize,
    pub ap: Option<f64>,
    pub aph: Option<f64>,
    pub large_recall: Option<f64>,
    pub ap_static: Option<f64>,
    pub ap_slow: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_fast: Option<f64>,
    pub ap_very_fast: Option<f64>,
    pub fg_ratio: Option<f64>,
    pub fg_coverage: Option<f64>,
    /// Largest carried-state size over scored frames, scalars.
    pub max_state: Option<usize>,
    pub final_loss: Option<f64>,
    pub error: String,
}

impl ArmRow {
    fn ok(table: Table, arm: &str, frames: usize, r: &EvalReport, cfg: &Config, final_loss: f64) -> Result<Self> {
        let ap = cfg.evaluation()?.ap;
        let s = r.ap_by_speed;
        Ok(Self {
            table: table.name().into(),
            arm: arm.into(),
            status: "ok".into(),
            eval_frames: frames,
            ap: Some(r.ap),
            aph: Some(r.aph),
            large_recall: large_recall(&r.predictions, &ap),
            ap_static: s[0],
            ap_slow: s[1],
            ap_medium: s[2],
            ap_fast: s[3],
            ap_very_fast: s[4],
            fg_ratio: Some(r.fg_ratio),
            fg_coverage: Some(r.fg_coverage),
            max_state: r.predictions.iter().map(|p| p.state_size).max(),
            final_loss: Some(final_loss),
            error: String::new(),
        })
    }

    fn failed(table: Table, arm: &str, frames: usize, e: &anyhow::Error) -> Self {
        Self {
            table: table.name().into(),
            arm: arm.into(),
            status: "failed".into(),
            eval_frames: frames,
            ap: None,
            aph: None,
            large_recall: None,
            ap_static: None,
            ap_slow: None,
            ap_medium: None,
            ap_fast: None,
            ap_very_fast: None,
            fg_ratio: None,
            fg_coverage: None,
            max_state: None,
            final_loss: None,
            error: format!("{e:#}"),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Arms of `table`: label and the configuration that differs from `base`.
pub fn arms(table: Table, base: &Config) -> Vec<(String, Config)> {
    let with = |f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match table {
        Table::FusionStrategy => Strategy::ALL
            .iter()
            .map(|s| (s.name().to_uppercase(), with(&|c| c.model.strategy = s.name().into())))
            .collect(),
        Table::FrameLength => vec![("LEF".into(), base.clone())],
        Table::Ica => vec![
            ("with_ica".into(), with(&|c| c.model.ica = true)),
            ("without_ica".into(), with(&|c| c.model.ica = false)),
        ],
        Table::AttentionVariant => AttentionVariant::ALL
            .iter()
            .map(|v| (v.name().into(), with(&|c| c.model.variant = v.name().into())))
            .collect(),
        Table::SpeedBuckets => vec![
            ("without_attention".into(), with(&|c| c.model.fusion_blocks = 0)),
            (
                "with_attention".into(),
                with(&|c| {
                    c.model.variant = AttentionVariant::SelfAttn.name().into();
                    c.model.fusion_blocks = c.model.fusion_blocks.max(1);
                }),
            ),
        ],
    }
}

fn eval_at<E: Executor>(model: &Model, cfg: &Config, frames: usize, held: &[Sequence], exec: &E) -> Result<EvalReport> {
    let mut ec = cfg.evaluation()?;
    ec.frames = frames;
    Ok(evaluate(model, held, &ec, exec)?)
}

/// Trains and evaluates every arm of `table` on `data` / `held_out`.
/// `on_row` sees each row as it completes.
pub fn run<E: Executor>(
    table: Table,
    base: &Config,
    data: &[Sequence],
    held_out: &[Sequence],
    exec: &E,
    mut on_row: impl FnMut(&ArmRow),
) -> Vec<ArmRow> {
    let mut rows = Vec::new();
    let mut push = |row: ArmRow| {
        on_row(&row);
        rows.push(row);
    };
    for (arm, cfg) in arms(table, base) {
        let frames = base.eval.frames;
        let trained = train(&cfg, data, held_out, exec, |_, _| {});
        let t = match trained {
            Ok(t) => t,
            Err(e) => {
                push(ArmRow::failed(table, &arm, frames, &e));
                continue;
            }
        };
        let loss = t.trainer.trace.last().map_or(f64::NAN, |r| r.loss.total);
        let lengths: Vec<usize> = match table {
            Table::FrameLength => FRAME_LENGTHS.to_vec(),
            _ => vec![frames],
        };
        for n in lengths {
            let label = match table {
                Table::FrameLength => format!("{arm}_{n}f"),
                _ => arm.clone(),
            };
            let row = eval_at(&t.trainer.model, &cfg, n, held_out, exec).and_then(|r| ArmRow::ok(table, &label, n, &r, &cfg, loss));
            push(row.unwrap_or_else(|e| ArmRow::failed(table, &label, n, &e)));
        }
    }
    rows
}

pub fn write_csv<W: Write>(out: W, rows: &[ArmRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
