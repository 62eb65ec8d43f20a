//! Window attention over sparse pillar tokens.
//!
//! Tokens are grouped into `ws x ws` BEV tiles; attention never crosses a
//! tile. Queries are the current tokens; keys and values come from the
//! current tokens (self), the calibrated history tokens (cross) or both
//! (mix), windowed with the same partition as the queries.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{Activation, LayerNorm, Linear, Mlp2, ParamStore, Params, Tape, Tensor, Var};
use crate::pillars::{Cell, SparsePillarSet, TokenSet};
use crate::rng::Rng;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum AttentionVariant {
    #[default]
    SelfAttn,
    CrossAttn,
    MixAttn,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [Self::SelfAttn, Self::CrossAttn, Self::MixAttn];

    pub fn name(self) -> &'static str {
        match self {
            Self::SelfAttn => "self",
            Self::CrossAttn => "cross",
            Self::MixAttn => "mix",
        }
    }
}

impl core::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfAttn),
            "cross" => Ok(Self::CrossAttn),
            "mix" => Ok(Self::MixAttn),
            _ => Err(Error::Config(alloc::format!("unknown attention variant `{s}`"))),
        }
    }
}

/// Window id `(row / ws, col / ws)` after offsetting by `shift`.
pub type WindowId = (u32, u32);

/// Tokens grouped by window. Windows are in id order; members are token
/// indices in row-major coordinate order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowBatch {
    pub ws: u32,
    pub shift: u32,
    pub ids: Vec<WindowId>,
    pub members: Vec<Vec<usize>>,
    coords: Vec<Cell>,
}

impl WindowBatch {
    pub fn from_coords(coords: &[Cell], ws: u32, shift: u32) -> Result<Self> {
        if ws == 0 {
            return Err(Error::InvalidArgument {
                op: "window_partition",
                msg: "window size must be at least 1".into(),
            });
        }
        let mut groups: BTreeMap<WindowId, Vec<usize>> = BTreeMap::new();
        for (i, &c) in coords.iter().enumerate() {
            groups.entry(window_of(c, ws, shift)).or_default().push(i);
        }
        let mut ids = Vec::with_capacity(groups.len());
        let mut members = Vec::with_capacity(groups.len());
        for (id, mut m) in groups {
            m.sort_by_key(|&i| coords[i]);
            ids.push(id);
            members.push(m);
        }
        Ok(Self {
            ws,
            shift,
            ids,
            members,
            coords: coords.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn coords(&self) -> &[Cell] {
        &self.coords
    }

    pub fn max_len(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Per-window padding mask of width `max_len`; true marks a real token.
    pub fn padding_mask(&self) -> Vec<Vec<bool>> {
        let l = self.max_len();
        self.members.iter().map(|m| (0..l).map(|j| j < m.len()).collect()).collect()
    }

    /// Position of a token inside its window.
    pub fn local(&self, c: Cell) -> (u32, u32) {
        local_coord(c, self.ws, self.shift)
    }

    pub fn window_index(&self, id: WindowId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

pub fn window_of(c: Cell, ws: u32, shift: u32) -> WindowId {
    ((c.row + shift) / ws, (c.col + shift) / ws)
}

pub fn local_coord(c: Cell, ws: u32, shift: u32) -> (u32, u32) {
    ((c.row + shift) % ws, (c.col + shift) % ws)
}

pub fn window_partition(tokens: &SparsePillarSet, ws: u32) -> Result<WindowBatch> {
    WindowBatch::from_coords(tokens.coords(), ws, 0)
}

/// Sinusoidal encoding of `pos` into `dims` values, `sin`/`cos` interleaved,
/// frequency `pos / 10000^(2k / dims)`.
pub fn sinusoid(pos: f64, dims: usize) -> Vec<f64> {
    let mut out = vec![0.0; dims];
    for k in 0..dims / 2 {
        let a = pos / libm::pow(10000.0, (2 * k) as f64 / dims as f64);
        out[2 * k] = libm::sin(a);
        out[2 * k + 1] = libm::cos(a);
    }
    out
}

/// Positional encoding of an in-window coordinate: the first half encodes
/// the row, the second half the column.
pub fn positional_encoding(coord: (u32, u32), d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::InvalidArgument {
            op: "positional_encoding",
            msg: alloc::format!("d = {d} is not a positive multiple of 4"),
        });
    }
    let mut pe = sinusoid(coord.0 as f64, d / 2);
    pe.extend(sinusoid(coord.1 as f64, d / 2));
    Ok(pe)
}

/// One attention group: query rows and key rows (`None` = padding slot).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Group {
    pub queries: Vec<usize>,
    pub keys: Vec<Option<usize>>,
}

impl Tape {
    /// Multi-head scaled dot-product attention restricted to groups.
    /// `q: [N, d]`, `k, v: [M, d]`; returns `[N, d]`. Padding keys take a
    /// `-inf` logit; a query with no valid key gets a zero output.
    pub fn windowed_attention(&mut self, q: Var, k: Var, v: Var, groups: &[Group], heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let op = "windowed_attention";
        if qt.shape().len() != 2 || kt.shape().len() != 2 || kt.shape() != vt.shape() || qt.shape()[1] != kt.shape()[1] {
            return Err(Error::ShapeMismatch {
                op,
                left: qt.shape().to_vec(),
                right: kt.shape().to_vec(),
            });
        }
        let (n, d) = (qt.shape()[0], qt.shape()[1]);
        let m = kt.shape()[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument {
                op,
                msg: alloc::format!("{heads} heads do not divide d = {d}"),
            });
        }
        let oob = groups
            .iter()
            .any(|g| g.queries.iter().any(|&i| i >= n) || g.keys.iter().flatten().any(|&j| j >= m));
        if oob {
            return Err(Error::InvalidArgument {
                op,
                msg: "group index out of range".into(),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut out = vec![0.0; n * d];
        // probs[g][h][qi * nk + kj]
        let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(groups.len());
        for g in groups {
            let nk = g.keys.len();
            let mut ph = Vec::with_capacity(heads);
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; g.queries.len() * nk];
                for (qi, &i) in g.queries.iter().enumerate() {
                    let qrow = &qd[i * d + off..i * d + off + dh];
                    let row = &mut p[qi * nk..(qi + 1) * nk];
                    let mut mx = f64::NEG_INFINITY;
                    for (s, key) in row.iter_mut().zip(&g.keys) {
                        *s = match key {
                            Some(j) => dot(qrow, &kd[j * d + off..j * d + off + dh]) * scale,
                            None => f64::NEG_INFINITY,
                        };
                        mx = mx.max(*s);
                    }
                    if mx == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = libm::exp(*s - mx);
                        z += *s;
                    }
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for (s, key) in row.iter_mut().zip(&g.keys) {
                        *s /= z;
                        if let Some(j) = key {
                            let vrow = &vd[j * d + off..j * d + off + dh];
                            o.iter_mut().zip(vrow).for_each(|(a, b)| *a += *s * b);
                        }
                    }
                }
                ph.push(p);
            }
            probs.push(ph);
        }
        let out = Tensor::new(&[n, d], out)?;
        let groups = groups.to_vec();
        self.record(op, out, &[q, k, v], move |inp: &[&Tensor], _: &Tensor, go: &[f64]| {
            let (qd, kd, vd) = (inp[0].data(), inp[1].data(), inp[2].data());
            let mut gq = vec![0.0; n * d];
            let mut gk = vec![0.0; m * d];
            let mut gv = vec![0.0; m * d];
            let mut gp = Vec::new();
            for (g, ph) in groups.iter().zip(&probs) {
                let nk = g.keys.len();
                for (h, p) in ph.iter().enumerate() {
                    let off = h * dh;
                    for (qi, &i) in g.queries.iter().enumerate() {
                        let row = &p[qi * nk..(qi + 1) * nk];
                        let goi = &go[i * d + off..i * d + off + dh];
                        gp.clear();
                        let mut dotsum = 0.0;
                        for (&pj, key) in row.iter().zip(&g.keys) {
                            let v = match key {
                                Some(j) => {
                                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                                    gvj.iter_mut().zip(goi).for_each(|(a, b)| *a += pj * b);
                                    dot(goi, &vd[j * d + off..j * d + off + dh])
                                }
                                None => 0.0,
                            };
                            gp.push(v);
                            dotsum += pj * v;
                        }
                        let qrow = &qd[i * d + off..i * d + off + dh];
                        for ((&pj, &gpj), key) in row.iter().zip(&gp).zip(&g.keys) {
                            let Some(j) = key else { continue };
                            let gs = pj * (gpj - dotsum) * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            let krow = &kd[j * d + off..j * d + off + dh];
                            gq[i * d + off..i * d + off + dh].iter_mut().zip(krow).for_each(|(a, b)| *a += gs * b);
                            gk[j * d + off..j * d + off + dh].iter_mut().zip(qrow).for_each(|(a, b)| *a += gs * b);
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-norm window attention block:
/// `x + Wo * attn(LN(x) + PE, kv)` then `+ FFN(LN(.))` with 2x expansion.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub d: usize,
    pub heads: usize,
    pub ws: u32,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// No bias: a query with nothing to attend to receives exactly zero.
    pub wo: Linear,
    pub ln_ff: LayerNorm,
    pub ffn: Mlp2,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ws: u32, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument {
                op: "AttentionBlock::new",
                msg: alloc::format!("{heads} heads do not divide d = {d}"),
            });
        }
        if !d.is_multiple_of(4) {
            return Err(Error::InvalidArgument {
                op: "AttentionBlock::new",
                msg: alloc::format!("d = {d} is not a multiple of 4"),
            });
        }
        if ws == 0 {
            return Err(Error::InvalidArgument {
                op: "AttentionBlock::new",
                msg: "window size must be at least 1".into(),
            });
        }
        let f = |s: &str| alloc::format!("{name}.{s}");
        Ok(Self {
            d,
            heads,
            ws,
            ln_q: LayerNorm::new(store, &f("ln_q"), d),
            ln_kv: LayerNorm::new(store, &f("ln_kv"), d),
            wq: Linear::new(store, &f("wq"), d, d, true, rng),
            wk: Linear::new(store, &f("wk"), d, d, true, rng),
            wv: Linear::new(store, &f("wv"), d, d, true, rng),
            wo: Linear::new(store, &f("wo"), d, d, false, rng),
            ln_ff: LayerNorm::new(store, &f("ln_ff"), d),
            ffn: Mlp2::new(store, &f("ffn"), (d, 2 * d, d), Activation::Gelu, rng),
        })
    }

    fn pe(&self, tape: &mut Tape, coords: &[Cell], shift: u32) -> Var {
        let mut data = Vec::with_capacity(coords.len() * self.d);
        for &c in coords {
            data.extend(positional_encoding(local_coord(c, self.ws, shift), self.d).expect("d checked at construction"));
        }
        tape.constant(Tensor::new(&[coords.len(), self.d], data).expect("shape"))
    }

    fn embed(&self, tape: &mut Tape, p: &Params, ln: &LayerNorm, t: &TokenSet, shift: u32) -> Result<Var> {
        let x = ln.forward(tape, p, t.feats)?;
        let pe = self.pe(tape, &t.coords, shift);
        tape.add(x, pe)
    }

    /// Runs the block. `history` is required for cross and mix attention.
    /// Output coords and order equal the query coords and order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Params,
        queries: &TokenSet,
        variant: AttentionVariant,
        history: Option<&TokenSet>,
        shift: u32,
    ) -> Result<TokenSet> {
        let w = tape.shape(queries.feats)[1];
        if w != self.d {
            return Err(Error::WidthMismatch { expected: self.d, got: w });
        }
        if queries.is_empty() {
            return Ok(queries.clone());
        }
        let empty = TokenSet {
            coords: Vec::new(),
            feats: tape.constant(Tensor::zeros(&[0, self.d])),
        };
        let history = match (variant, history) {
            (AttentionVariant::SelfAttn, _) => None,
            (_, Some(h)) => Some(h),
            (_, None) => Some(&empty),
        };
        let qx = self.embed(tape, p, &self.ln_q, queries, shift)?;
        let batch = WindowBatch::from_coords(&queries.coords, self.ws, shift)?;
        let hist_embed = match history {
            Some(h) => {
                let hw = tape.shape(h.feats)[1];
                if hw != self.d {
                    return Err(Error::WidthMismatch { expected: self.d, got: hw });
                }
                Some((self.embed(tape, p, &self.ln_kv, h, shift)?, h))
            }
            None => None,
        };
        let n = queries.len();
        let mut hist_by_window: BTreeMap<WindowId, Vec<usize>> = BTreeMap::new();
        if let Some((_, h)) = hist_embed {
            for (j, &c) in h.coords.iter().enumerate() {
                hist_by_window.entry(window_of(c, self.ws, shift)).or_default().push(j);
            }
            for m in hist_by_window.values_mut() {
                m.sort_by_key(|&j| h.coords[j]);
            }
        }
        let kv_src = match (variant, hist_embed) {
            (AttentionVariant::SelfAttn, _) | (_, None) => qx,
            (AttentionVariant::CrossAttn, Some((hx, _))) => hx,
            (AttentionVariant::MixAttn, Some((hx, _))) => tape.concat(&[qx, hx], 0)?,
        };
        let groups: Vec<Group> = batch
            .ids
            .iter()
            .zip(&batch.members)
            .map(|(id, m)| {
                let hist = hist_by_window.get(id).map(Vec::as_slice).unwrap_or(&[]);
                let keys = match variant {
                    AttentionVariant::SelfAttn => m.iter().map(|&i| Some(i)).collect(),
                    AttentionVariant::CrossAttn => hist.iter().map(|&j| Some(j)).collect(),
                    AttentionVariant::MixAttn => m.iter().copied().chain(hist.iter().map(|&j| n + j)).map(Some).collect(),
                };
                Group {
                    queries: m.clone(),
                    keys,
                }
            })
            .collect();
        let q = self.wq.forward(tape, p, qx)?;
        let k = self.wk.forward(tape, p, kv_src)?;
        let v = self.wv.forward(tape, p, kv_src)?;
        let a = tape.windowed_attention(q, k, v, &groups, self.heads)?;
        let a = self.wo.forward(tape, p, a)?;
        let x = tape.add(queries.feats, a)?;
        let f = self.ln_ff.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, f)?;
        let feats = tape.add(x, f)?;
        Ok(TokenSet {
            coords: queries.coords.clone(),
            feats,
        })
    }
}

/// Attention fusion of query tokens with history tokens under `variant`.
pub fn attend(
    tape: &mut Tape,
    p: &Params,
    block: &AttentionBlock,
    queries: &TokenSet,
    variant: AttentionVariant,
    history: Option<&TokenSet>,
) -> Result<TokenSet> {
    block.forward(tape, p, queries, variant, history, 0)
}
