use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use lef::ablation::{self, Table};
use lef::bench::bench;
use lef::config::Config;
use lef::exec::Runtime;
use lef::formats::{read_dataset, save_checkpoint, write_dataset};
use lef::pipeline::{self, load_model, prediction_rows, write_predictions_csv};
use lef::viz::{render, Scene};
use lef_core::detection::IouMode;
use lef_core::synth::speed_bucket_label;
use lef_core::train::{evaluate, EvalReport, EvalTargets};

#[derive(Parser)]
#[command(name = "lef", version, about = "Recurrent late-to-early temporal fusion for LiDAR 3D detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic data set.
    SynthGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-step loss trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out part of a data set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value = "bev")]
        mode: IouMode,
        #[arg(long)]
        frames: Option<usize>,
        /// Score every sequence instead of the held-out tail.
        #[arg(long)]
        all: bool,
    },
    /// Export detections for every frame as CSV.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run one ablation table and write it as CSV.
    Ablate {
        #[arg(long)]
        name: Table,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step latency of the recurrent and stacked pipelines.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seq: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Render one frame as a BEV PPM image.
    Viz {
        #[arg(long)]
        data: PathBuf,
        /// Running frame index over the data set.
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overlay predictions and the foreground of this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long, default_value_t = 8.0)]
        px_per_m: f64,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_report(r: &EvalReport) {
    println!("frames scored  {}", r.frames);
    println!("AP             {:.4}", r.ap);
    println!("APH            {:.4}", r.aph);
    println!("fg ratio       {:.4}", r.fg_ratio);
    println!("fg coverage    {:.4}", r.fg_coverage);
    for (b, ap) in r.ap_by_speed.iter().enumerate() {
        println!("AP {:<14} {}", speed_bucket_label(b), fmt_opt(*ap));
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let rt = Runtime::from_env();
    match cli.cmd {
        Cmd::SynthGen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = pipeline::generate_data(&cfg, &rt)?;
            write_dataset(&out, &cfg.fusion()?.grid, &data)?;
            let frames: usize = data.iter().map(|s| s.len()).sum();
            println!("wrote {} sequences, {frames} frames to {}", data.len(), out.display());
        }
        Cmd::Train { config, data, out, trace } => {
            let cfg = load_config(config.as_deref())?;
            let ds = read_dataset(&data)?;
            let (train, held) = pipeline::split(&cfg, &ds.sequences)?;
            let steps = cfg.train.steps;
            let t = pipeline::train(&cfg, train, held, &rt, |rec, eval| {
                if rec.step % 50 == 0 || rec.step + 1 == steps || eval.is_some() {
                    eprintln!(
                        "step {:>6}  lr {:.2e}  loss {:.5}  seg {:.5}  center {:.5}  box {:.5}",
                        rec.step, rec.lr, rec.loss.total, rec.loss.seg, rec.loss.center, rec.loss.box_loss
                    );
                }
                if let Some(r) = eval {
                    eprintln!("eval  AP {:.4}  APH {:.4}  fg ratio {:.3}  fg coverage {:.3}", r.ap, r.aph, r.fg_ratio, r.fg_coverage);
                }
            })?;
            save_checkpoint(&out, &t.trainer.model.store, &cfg)?;
            if let Some(path) = trace {
                let mut w = csv::Writer::from_writer(create(&path)?);
                w.write_record(["step", "lr", "total", "seg", "center", "box", "identity_error"])?;
                for r in &t.trainer.trace {
                    let l = r.loss;
                    w.write_record([r.step.to_string(), r.lr.to_string(), l.total.to_string(), l.seg.to_string(), l.center.to_string(), l.box_loss.to_string(), r.identity_error.to_string()])?;
                }
                w.flush()?;
            }
            println!("wrote {} ({} parameters)", out.display(), t.trainer.model.num_params());
        }
        Cmd::Eval { ckpt, data, iou, mode, frames, all } => {
            let (cfg, model) = load_model(&ckpt)?;
            let ds = read_dataset(&data)?;
            let seqs = if all { &ds.sequences[..] } else { pipeline::split(&cfg, &ds.sequences)?.1 };
            let mut ec = cfg.evaluation()?;
            ec.ap.iou_thresh = iou;
            ec.ap.mode = mode;
            if let Some(f) = frames {
                ec.frames = f;
            }
            print_report(&evaluate(&model, seqs, &ec, &rt)?);
        }
        Cmd::Infer { ckpt, data, frames, csv } => {
            let (cfg, model) = load_model(&ckpt)?;
            let ds = read_dataset(&data)?;
            let preds = pipeline::predict(&model, &ds.sequences, frames, &cfg.evaluation()?, &rt)?;
            let rows = prediction_rows(&preds);
            write_predictions_csv(create(&csv)?, &rows)?;
            println!("wrote {} detections over {} frames to {}", rows.len(), preds.len(), csv.display());
        }
        Cmd::Ablate { name, config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let seqs = match data {
                Some(dir) => read_dataset(&dir)?.sequences,
                None => pipeline::generate_data(&cfg, &rt)?,
            };
            let (train, held) = pipeline::split(&cfg, &seqs)?;
            let rows = ablation::run(name, &cfg, train, held, &rt, |r| {
                eprintln!("{} {:<20} {:<6} frames {}  AP {}", r.table, r.arm, r.status, r.eval_frames, fmt_opt(r.ap));
            });
            ablation::write_csv(create(&out)?, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Cmd::Bench { ckpt, data, seq, repeats } => {
            let (_, model) = load_model(&ckpt)?;
            let ds = read_dataset(&data)?;
            let s = ds.sequences.get(seq).with_context(|| format!("no sequence {seq}"))?;
            let r = bench(&model, &s.inputs(), repeats)?;
            let mut o = io::stdout().lock();
            writeln!(o, "parameters     {}", r.params)?;
            writeln!(o, "frames         {} x {} repeats", r.frames, r.repeats)?;
            for (name, l) in [("recurrent", &r.recurrent), ("stacked", &r.stacked)] {
                writeln!(
                    o,
                    "{name:<10} median {:.3} ms  p95 {:.3} ms  slope {:+.4} ms/frame ({:+.2}% of mean)",
                    l.median * 1e3,
                    l.p95 * 1e3,
                    l.slope * 1e3,
                    l.relative_slope() * 100.0
                )?;
            }
            writeln!(o, "state sizes    {:?}", r.state_sizes)?;
        }
        Cmd::Viz { data, frame, out, ckpt, frames, px_per_m } => {
            let ds = read_dataset(&data)?;
            let mut k = frame;
            let (si, seq) = ds
                .sequences
                .iter()
                .enumerate()
                .find(|(_, s)| {
                    let hit = k < s.len();
                    if !hit {
                        k -= s.len();
                    }
                    hit
                })
                .with_context(|| format!("frame {frame} out of range"))?;
            let lf = &seq.frames[k];
            let gts = lf.gt_local();
            let (preds, fg, grid) = match ckpt {
                Some(path) => {
                    let (cfg, model) = load_model(&path)?;
                    let mut ec = cfg.evaluation()?;
                    ec.targets = EvalTargets::All;
                    let p = lef_core::train::predict_frame(&model, seq, si, k, frames, &ec)?;
                    (p.detections.iter().map(|d| d.bbox).collect(), p.fg_coords, model.cfg.grid)
                }
                None => (Vec::new(), Vec::new(), ds.grid),
            };
            ensure!(px_per_m > 0.0, "px_per_m must be positive");
            let img = render(
                &grid,
                px_per_m,
                &Scene {
                    points: &lf.frame.cloud.points,
                    foreground: &fg,
                    gts: &gts,
                    preds: &preds,
                },
            );
            let mut w = create(&out)?;
            w.write_all(&img.to_ppm())?;
            w.flush()?;
            println!("wrote {}x{} image to {}", img.width, img.height, out.display());
        }
    }
    Ok(())
}
