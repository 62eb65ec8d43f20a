//! Wall-clock latency of the recurrent step and of input stacking.

use std::time::{Duration, Instant};

use anyhow::Result;
use lef_core::fusion::{FusionState, Model};
use lef_core::fusion::Frame;
use lef_core::numerics::Tape;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    /// Median over repeats of each frame's step time, seconds.
    pub per_frame: Vec<f64>,
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
    /// Least-squares slope of `per_frame` against frame index over the
    /// regressed frames, seconds per frame.
    pub slope: f64,
    /// First frame index included in the regression.
    pub fit_from: usize,
}

impl LatencyStats {
    /// `slope / mean` over the regressed frames.
    pub fn relative_slope(&self) -> f64 {
        let tail = &self.per_frame[self.fit_from.min(self.per_frame.len())..];
        let m = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        if m > 0.0 {
            self.slope / m
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub params: usize,
    pub frames: usize,
    pub repeats: usize,
    /// Recurrent step with carried state. Frame 0 runs without history and
    /// is left out of the slope.
    pub recurrent: LatencyStats,
    /// Stacked input of frames `0..=i` at frame `i`.
    pub stacked: LatencyStats,
    /// Carried-state scalars after each recurrent step of the last repeat.
    pub state_sizes: Vec<usize>,
}

/// Nearest-rank percentile of an unsorted sample, `q` in `[0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 0.5)
}

/// Least-squares slope of `ys` against `xs`; zero for fewer than two points.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxy: f64 = (0..n).map(|i| (xs[i] - mx) * (ys[i] - my)).sum();
    let sxx: f64 = (0..n).map(|i| (xs[i] - mx) * (xs[i] - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

fn stats(samples: &[Vec<f64>], fit_from: usize) -> LatencyStats {
    let per_frame: Vec<f64> = samples.iter().map(|s| median(s)).collect();
    let all: Vec<f64> = samples.iter().flatten().copied().collect();
    let from = fit_from.min(per_frame.len());
    let xs: Vec<f64> = (from..per_frame.len()).map(|i| i as f64).collect();
    LatencyStats {
        median: median(&all),
        p95: percentile(&all, 0.95),
        mean: all.iter().sum::<f64>() / all.len().max(1) as f64,
        slope: slope(&xs, &per_frame[from..]),
        fit_from: from,
        per_frame,
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Runs the recurrent pipeline over `frames` `repeats` times after one
/// warm-up pass, then the stacked pipeline the same way.
pub fn bench(model: &Model, frames: &[Frame], repeats: usize) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let n = frames.len();
    let mut rec = vec![Vec::with_capacity(repeats); n];
    let mut stk = vec![Vec::with_capacity(repeats); n];
    let mut state_sizes = vec![0; n];
    for r in 0..=repeats {
        let mut state: Option<FusionState> = None;
        for (i, f) in frames.iter().enumerate() {
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, false);
            let out = model.fuse_step(&mut tape, &p, state.as_ref(), f)?;
            let dt = secs(t0.elapsed());
            state_sizes[i] = out.new_state.size();
            state = Some(out.new_state);
            if r > 0 {
                rec[i].push(dt);
            }
        }
    }
    for r in 0..=repeats {
        for i in 0..n {
            let stack: Vec<&Frame> = frames[..=i].iter().collect();
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, false);
            model.stacked_step(&mut tape, &p, &stack)?;
            if r > 0 {
                stk[i].push(secs(t0.elapsed()));
            }
        }
    }
    Ok(BenchReport {
        params: model.num_params(),
        frames: n,
        repeats,
        recurrent: stats(&rec, 1),
        stacked: stats(&stk, 0),
        state_sizes,
    })
}
