//! Inverse calibration of history BEV maps into the current vehicle frame,
//! and temporal alignment with the current map.
//!
//! For every target cell center `c` (current frame, meters) the source
//! location is `relative_transform(g_prev, g_cur) * c` in the history frame.
//! Nearest-neighbor sampling copies the history feature of the source cell;
//! sources outside the grid or on an invalid history cell yield a zero
//! feature and a false mask. A history pillar is sampled by at most one
//! target: when several targets round to the same source, the one whose
//! back-projected center lies closest to the source cell center wins (ties
//! go to the lowest row-major target). This keeps the calibrated count at or
//! below the history count under rotation.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Pose;
use crate::numerics::{Activation, Mlp2, ParamStore, Params, Tape, Tensor, Var};
use crate::pillars::{BevMap, Cell, GridSpec, TokenSet};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    #[default]
    Nearest,
    /// Bilinear over the valid neighbors of the source location; the mask is
    /// true when any neighbor is valid. Does not preserve exact values.
    Bilinear,
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Nearest => "nearest",
            Sampling::Bilinear => "bilinear",
        }
    }
}

impl core::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::Config(alloc::format!("unknown sampling `{s}`"))),
        }
    }
}

/// Continuous source index (row, col) of a target cell.
fn source_of(rel: &Pose, grid: &GridSpec, target: Cell) -> (f64, f64) {
    let (x, y) = grid.cell_center(target);
    let s = rel.transform_point([x, y, 0.0]);
    grid.continuous_index(s[0], s[1])
}

fn round_half_up(v: f64) -> f64 {
    libm::floor(v + 0.5)
}

/// Nearest source cell and squared distance (in cells) to its center.
fn nearest_source(rel: &Pose, grid: &GridSpec, target: Cell) -> Option<(Cell, f64)> {
    let (r, c) = source_of(rel, grid, target);
    let (rr, cc) = (round_half_up(r), round_half_up(c));
    let n = grid.h() as f64;
    if rr < 0.0 || cc < 0.0 || rr >= n || cc >= n {
        return None;
    }
    let dist = (r - rr) * (r - rr) + (c - cc) * (c - cc);
    Some((Cell::new(rr as u32, cc as u32), dist))
}

/// Bilinear taps `(source cell, weight)` with non-zero weight inside the grid.
fn bilinear_taps(rel: &Pose, grid: &GridSpec, target: Cell) -> Vec<(Cell, f64)> {
    let (r, c) = source_of(rel, grid, target);
    let (r0, c0) = (libm::floor(r), libm::floor(c));
    let (fr, fc) = (r - r0, c - c0);
    let n = grid.h() as f64;
    let mut taps = Vec::with_capacity(4);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (rr, cc) = (r0 + dr, c0 + dc);
            let w = wr * wc;
            if w > 0.0 && rr >= 0.0 && cc >= 0.0 && rr < n && cc < n {
                taps.push((Cell::new(rr as u32, cc as u32), w));
            }
        }
    }
    taps
}

/// Resolves many-to-one nearest samples: per source keep the closest target.
fn dedupe_nearest(mut hits: Vec<(usize, Cell, f64, usize)>) -> Vec<(Cell, usize)> {
    // (source row, target, dist, source key)
    hits.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.2.partial_cmp(&b.2).unwrap_or(core::cmp::Ordering::Equal))
            .then(a.1.cmp(&b.1))
    });
    hits.dedup_by_key(|h| h.0);
    let mut out: Vec<(Cell, usize)> = hits.into_iter().map(|h| (h.1, h.0)).collect();
    out.sort_by_key(|h| h.0);
    out
}

/// Sparse description of a calibration: each output token (sorted target
/// coordinates) is a weighted sum of history rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMap {
    pub targets: Vec<Cell>,
    /// `(output row, history row, weight)`.
    pub taps: Vec<(usize, usize, f64)>,
}

impl CalibrationMap {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Calibration map for history tokens at `coords` (unique cells). Only
/// targets near the forward image of each history pillar are examined; the
/// result equals a scan over every target cell.
pub fn calibrate_tokens(coords: &[Cell], g_prev: &Pose, g_cur: &Pose, grid: &GridSpec, sampling: Sampling) -> CalibrationMap {
    let rel = Pose::relative_transform(g_prev, g_cur);
    let fwd = rel.invert();
    let mut row_of = alloc::collections::BTreeMap::new();
    for (i, &c) in coords.iter().enumerate() {
        row_of.insert(c, i);
    }
    let reach: i64 = match sampling {
        Sampling::Nearest => 1,
        Sampling::Bilinear => 2,
    };
    let n = grid.h() as i64;
    let mut candidates: Vec<Cell> = Vec::new();
    for &c in coords {
        let (x, y) = grid.cell_center(c);
        let p = fwd.transform_point([x, y, 0.0]);
        let (r, cc) = grid.continuous_index(p[0], p[1]);
        let (r, cc) = (round_half_up(r) as i64, round_half_up(cc) as i64);
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (tr, tc) = (r + dr, cc + dc);
                if tr >= 0 && tc >= 0 && tr < n && tc < n {
                    candidates.push(Cell::new(tr as u32, tc as u32));
                }
            }
        }
    }
    candidates.sort_unstable();
    candidates.dedup();
    match sampling {
        Sampling::Nearest => {
            let hits = candidates
                .into_iter()
                .filter_map(|t| {
                    let (s, dist) = nearest_source(&rel, grid, t)?;
                    let &row = row_of.get(&s)?;
                    Some((row, t, dist, 0))
                })
                .collect();
            let kept = dedupe_nearest(hits);
            CalibrationMap {
                targets: kept.iter().map(|k| k.0).collect(),
                taps: kept.iter().enumerate().map(|(o, k)| (o, k.1, 1.0)).collect(),
            }
        }
        Sampling::Bilinear => {
            let mut targets = Vec::new();
            let mut taps = Vec::new();
            for t in candidates {
                let valid: Vec<(usize, f64)> = bilinear_taps(&rel, grid, t)
                    .into_iter()
                    .filter_map(|(s, w)| row_of.get(&s).map(|&row| (row, w)))
                    .collect();
                if valid.is_empty() {
                    continue;
                }
                let o = targets.len();
                targets.push(t);
                taps.extend(valid.into_iter().map(|(row, w)| (o, row, w)));
            }
            CalibrationMap { targets, taps }
        }
    }
}

/// Warps a history BEV map into the current vehicle frame by inverse
/// sampling, scanning every target cell.
pub fn inverse_calibrate(hist: &BevMap, g_prev: &Pose, g_cur: &Pose, grid: &GridSpec, sampling: Sampling) -> Result<BevMap> {
    hist.check_grid(grid)?;
    let rel = Pose::relative_transform(g_prev, g_cur);
    let d = hist.d();
    let mut out = BevMap::empty(grid.h(), grid.w(), d);
    match sampling {
        Sampling::Nearest => {
            let mut hits = Vec::new();
            for r in 0..grid.h() {
                for c in 0..grid.w() {
                    let t = Cell::new(r as u32, c as u32);
                    if let Some((s, dist)) = nearest_source(&rel, grid, t) {
                        if hist.is_valid(s) {
                            hits.push((grid.flat(s), t, dist, 0));
                        }
                    }
                }
            }
            for (t, flat) in dedupe_nearest(hits) {
                let s = Cell::new((flat / grid.w()) as u32, (flat % grid.w()) as u32);
                out.set(t, hist.at(s));
            }
        }
        Sampling::Bilinear => {
            let mut acc = vec![0.0; d];
            for r in 0..grid.h() {
                for c in 0..grid.w() {
                    let t = Cell::new(r as u32, c as u32);
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    let mut any = false;
                    for (s, w) in bilinear_taps(&rel, grid, t) {
                        if hist.is_valid(s) {
                            any = true;
                            acc.iter_mut().zip(hist.at(s)).for_each(|(a, v)| *a += w * v);
                        }
                    }
                    if any {
                        out.set(t, &acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

impl Tape {
    /// `out[o] += w * x[i]` for every tap `(o, i, w)`; `n_out` rows.
    pub fn weighted_gather(&mut self, x: Var, taps: &[(usize, usize, f64)], n_out: usize) -> Result<Var> {
        let t = self.value(x);
        let n_in = t.shape()[0];
        let d: usize = t.shape()[1..].iter().product();
        if taps.iter().any(|&(o, i, _)| o >= n_out || i >= n_in) {
            return Err(Error::InvalidArgument {
                op: "weighted_gather",
                msg: "tap index out of range".into(),
            });
        }
        let mut data = vec![0.0; n_out * d];
        for &(o, i, w) in taps {
            let src = &t.data()[i * d..(i + 1) * d];
            data[o * d..(o + 1) * d].iter_mut().zip(src).for_each(|(a, v)| *a += w * v);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = n_out;
        let out = Tensor::new(&shape, data)?;
        let taps = taps.to_vec();
        self.record("weighted_gather", out, &[x], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = vec![0.0; n_in * d];
            for &(o, i, w) in &taps {
                let src = &g[o * d..(o + 1) * d];
                gx[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, v)| *a += w * v);
            }
            vec![Some(gx)]
        })
    }
}

/// Applies a calibration map to history tokens on the tape.
pub fn apply_calibration(tape: &mut Tape, hist: &TokenSet, map: &CalibrationMap) -> Result<TokenSet> {
    let feats = tape.weighted_gather(hist.feats, &map.taps, map.len())?;
    Ok(TokenSet {
        coords: map.targets.clone(),
        feats,
    })
}

/// Dimension-reduction network on concatenated `[history | current]`
/// features: `linear(2d -> d) -> relu -> linear(d -> d)`.
#[derive(Debug, Clone, Copy)]
pub struct ReductionNet {
    pub mlp: Mlp2,
    pub d: usize,
}

impl ReductionNet {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp2::new(store, name, (2 * d, d, d), Activation::Relu, rng),
            d,
        }
    }

    /// Aligns calibrated history tokens with current tokens. Output tokens
    /// are the union of both coordinate sets in row-major order; a side
    /// missing at a cell contributes zeros to the concatenation.
    pub fn align(&self, tape: &mut Tape, p: &Params, hist: &TokenSet, cur: &TokenSet) -> Result<(TokenSet, AlignStats)> {
        for t in [hist, cur] {
            let w = tape.value(t.feats).shape()[1];
            if w != self.d {
                return Err(Error::WidthMismatch { expected: self.d, got: w });
            }
        }
        let mut union: Vec<Cell> = hist.coords.iter().chain(&cur.coords).copied().collect();
        union.sort_unstable();
        union.dedup();
        let index = |c: &Cell| union.binary_search(c).expect("cell in union");
        let hist_idx: Vec<usize> = hist.coords.iter().map(index).collect();
        let cur_idx: Vec<usize> = cur.coords.iter().map(index).collect();
        let u = union.len();
        let h = tape.scatter_add_rows(hist.feats, &hist_idx, u)?;
        let c = tape.scatter_add_rows(cur.feats, &cur_idx, u)?;
        let j = tape.concat(&[h, c], 1)?;
        let feats = self.mlp.forward(tape, p, j)?;
        let stats = AlignStats {
            current: cur.len(),
            calibrated_history: hist.len(),
            union: u,
        };
        Ok((TokenSet { coords: union, feats }, stats))
    }
}

/// Cardinalities of one alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignStats {
    pub current: usize,
    pub calibrated_history: usize,
    pub union: usize,
}

/// Dense form of the alignment: concatenate, reduce per valid cell, union
/// mask. Invalid cells stay exactly zero.
pub fn temporal_align(tape: &mut Tape, p: &Params, net: &ReductionNet, hist: &BevMap, cur: &BevMap) -> Result<BevMap> {
    if hist.h() != cur.h() || hist.w() != cur.w() {
        return Err(Error::GridMismatch {
            map_h: hist.h(),
            map_w: hist.w(),
            grid_h: cur.h(),
            grid_w: cur.w(),
        });
    }
    if hist.d() != cur.d() {
        return Err(Error::WidthMismatch {
            expected: cur.d(),
            got: hist.d(),
        });
    }
    let hs = crate::pillars::sparsify(hist);
    let cs = crate::pillars::sparsify(cur);
    let ht = TokenSet::from_set(tape, &hs);
    let ct = TokenSet::from_set(tape, &cs);
    let (out, _) = net.align(tape, p, &ht, &ct)?;
    let mut m = BevMap::empty(cur.h(), cur.w(), net.d);
    let vals = tape.value(out.feats);
    for (i, &c) in out.coords.iter().enumerate() {
        m.set(c, vals.row(i));
    }
    Ok(m)
}
