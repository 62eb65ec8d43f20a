//! BEV pillar grid: voxelization, the per-pillar set encoder, and conversion
//! between sparse pillar sets and dense masked maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::PointCloud;
use crate::numerics::{Activation, Mlp2, ParamStore, Params, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Square BEV detection zone centered on the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub range_m: f64,
    pub cell_m: f64,
    size: usize,
}

impl GridSpec {
    /// `H = W = range / cell`, rounded to nearest with ties going down (the
    /// 164 m / 0.32 m zone is 512 cells).
    pub fn new(range_m: f64, cell_m: f64) -> Result<Self> {
        if !(cell_m > 0.0) || !(range_m > 0.0) || !range_m.is_finite() {
            return Err(Error::Config(alloc::format!("bad grid range {range_m} / cell {cell_m}")));
        }
        let size = libm::ceil(range_m / cell_m - 0.5) as usize;
        if size == 0 {
            return Err(Error::Config("grid has no cells".into()));
        }
        Ok(Self { range_m, cell_m, size })
    }

    /// 40 m zone at 0.32 m (125 x 125).
    pub fn desk() -> Self {
        Self::new(40.0, 0.32).expect("valid")
    }

    /// 164 m zone at 0.32 m (512 x 512).
    pub fn paper() -> Self {
        Self::new(164.0, 0.32).expect("valid")
    }

    pub fn h(&self) -> usize {
        self.size
    }

    pub fn w(&self) -> usize {
        self.size
    }

    pub fn num_cells(&self) -> usize {
        self.size * self.size
    }

    /// Cell containing `(x, y)`; `None` outside the grid. Points on a
    /// boundary belong to the higher-index cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        let half = self.range_m / 2.0;
        let col = libm::floor((x + half) / self.cell_m);
        let row = libm::floor((y + half) / self.cell_m);
        let n = self.size as f64;
        (col >= 0.0 && row >= 0.0 && col < n && row < n).then(|| Cell::new(row as u32, col as u32))
    }

    /// Continuous cell indices of a metric location, cell centers at
    /// integer values.
    pub fn continuous_index(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.range_m / 2.0;
        ((y + half) / self.cell_m - 0.5, (x + half) / self.cell_m - 0.5)
    }

    pub fn cell_center(&self, c: Cell) -> (f64, f64) {
        let half = self.range_m / 2.0;
        (
            (c.col as f64 + 0.5) * self.cell_m - half,
            (c.row as f64 + 0.5) * self.cell_m - half,
        )
    }

    pub fn contains(&self, c: Cell) -> bool {
        (c.row as usize) < self.size && (c.col as usize) < self.size
    }

    pub fn flat(&self, c: Cell) -> usize {
        c.row as usize * self.size + c.col as usize
    }
}

/// BEV cell index; rows follow +y, columns follow +x. Ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub const fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

/// Coordinate-indexed set of `d`-dim pillar features.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePillarSet {
    coords: Vec<Cell>,
    features: Tensor,
}

impl SparsePillarSet {
    pub fn new(coords: Vec<Cell>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != coords.len() {
            return Err(Error::ShapeMismatch {
                op: "SparsePillarSet::new",
                left: features.shape().to_vec(),
                right: vec![coords.len()],
            });
        }
        let mut sorted = coords.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument {
                op: "SparsePillarSet::new",
                msg: "duplicate pillar coordinate".into(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite { op: "SparsePillarSet::new" });
        }
        Ok(Self { coords, features })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            coords: Vec::new(),
            features: Tensor::zeros(&[0, d]),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn d(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn coords(&self) -> &[Cell] {
        &self.coords
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Same set with rows in row-major coordinate order.
    pub fn canonical(&self) -> SparsePillarSet {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.coords[i]);
        let d = self.d();
        let mut data = Vec::with_capacity(self.len() * d);
        for &i in &order {
            data.extend_from_slice(self.feature(i));
        }
        SparsePillarSet {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            features: Tensor::new(&[self.len(), d], data).expect("shape"),
        }
    }
}

/// Dense `H x W x d` map with a validity mask. Features are exactly zero
/// wherever the mask is false.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    h: usize,
    w: usize,
    d: usize,
    features: Vec<f64>,
    mask: Vec<bool>,
}

impl BevMap {
    pub fn empty(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            features: vec![0.0; h * w * d],
            mask: vec![false; h * w],
        }
    }

    /// Builds a map, zeroing features under a false mask.
    pub fn from_parts(h: usize, w: usize, d: usize, mut features: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if features.len() != h * w * d || mask.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "BevMap::from_parts",
                left: vec![h, w, d],
                right: vec![features.len(), mask.len()],
            });
        }
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                features[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Self { h, w, d, features, mask })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn is_valid(&self, c: Cell) -> bool {
        self.mask[c.row as usize * self.w + c.col as usize]
    }

    pub fn at(&self, c: Cell) -> &[f64] {
        let i = c.row as usize * self.w + c.col as usize;
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn set(&mut self, c: Cell, v: &[f64]) {
        let i = c.row as usize * self.w + c.col as usize;
        self.features[i * self.d..(i + 1) * self.d].copy_from_slice(v);
        self.mask[i] = true;
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.h != grid.h() || self.w != grid.w() {
            return Err(Error::GridMismatch {
                map_h: self.h,
                map_w: self.w,
                grid_h: grid.h(),
                grid_w: grid.w(),
            });
        }
        Ok(())
    }
}

/// Points that fall in one pillar, in original point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PillarBucket {
    pub cell: Cell,
    pub points: Vec<usize>,
}

/// Assigns in-range points to cells. Buckets come out sorted by cell
/// (row-major), members by original point index; out-of-range points are
/// dropped.
pub fn voxelize(pc: &PointCloud, grid: &GridSpec) -> Vec<PillarBucket> {
    let mut keyed: Vec<(Cell, usize)> = pc
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| grid.cell_of(p[0], p[1]).map(|c| (c, i)))
        .collect();
    keyed.sort_unstable();
    let mut out: Vec<PillarBucket> = Vec::new();
    for (cell, i) in keyed {
        match out.last_mut() {
            Some(b) if b.cell == cell => b.points.push(i),
            _ => out.push(PillarBucket { cell, points: vec![i] }),
        }
    }
    out
}

/// Per-point input features: offsets from the cell center in cell units, z
/// in meters, range over half the zone size, intensity; plus an optional
/// extra channel (the time offset used by point stacking).
pub fn point_features(pc: &PointCloud, buckets: &[PillarBucket], grid: &GridSpec, extra: Option<&[f64]>) -> (Tensor, Vec<usize>) {
    let width = 5 + usize::from(extra.is_some());
    let n: usize = buckets.iter().map(|b| b.points.len()).sum();
    let mut data = Vec::with_capacity(n * width);
    let mut segment = Vec::with_capacity(n);
    let half = grid.range_m / 2.0;
    for (s, b) in buckets.iter().enumerate() {
        let (cx, cy) = grid.cell_center(b.cell);
        for &i in &b.points {
            let p = pc.points[i];
            data.push((p[0] - cx) / grid.cell_m);
            data.push((p[1] - cy) / grid.cell_m);
            data.push(p[2]);
            data.push(libm::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / half);
            data.push(pc.intensity_at(i));
            if let Some(e) = extra {
                data.push(e[i]);
            }
            segment.push(s);
        }
    }
    (Tensor::new(&[n, width], data).expect("shape"), segment)
}

/// Pillar tokens bound to a tape: coordinates plus a `[K, d]` feature var.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub coords: Vec<Cell>,
    pub feats: Var,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn from_set(tape: &mut Tape, s: &SparsePillarSet) -> Self {
        Self {
            coords: s.coords.clone(),
            feats: tape.constant(s.features.clone()),
        }
    }

    /// Detached copy of the current values.
    pub fn to_set(&self, tape: &Tape) -> SparsePillarSet {
        SparsePillarSet {
            coords: self.coords.clone(),
            features: tape.value(self.feats).clone(),
        }
    }
}

/// The per-pillar set encoder: `linear(in -> d) -> relu -> linear(d -> d)`
/// per point, then max-pool over the points of each pillar.
#[derive(Debug, Clone, Copy)]
pub struct PillarEncoder {
    pub mlp: Mlp2,
    pub d_in: usize,
    pub d: usize,
}

impl PillarEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp2::new(store, name, (d_in, d, d), Activation::Relu, rng),
            d_in,
            d,
        }
    }

    /// Encodes the occupied pillars; one token per bucket, bucket order.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Params,
        pc: &PointCloud,
        buckets: &[PillarBucket],
        grid: &GridSpec,
        extra: Option<&[f64]>,
    ) -> Result<TokenSet> {
        let coords: Vec<Cell> = buckets.iter().map(|b| b.cell).collect();
        if buckets.is_empty() {
            let feats = tape.constant(Tensor::zeros(&[0, self.d]));
            return Ok(TokenSet { coords, feats });
        }
        let (x, segment) = point_features(pc, buckets, grid, extra);
        if x.shape()[1] != self.d_in {
            return Err(Error::WidthMismatch {
                expected: self.d_in,
                got: x.shape()[1],
            });
        }
        let xv = tape.constant(x);
        let h = self.mlp.forward(tape, p, xv)?;
        let feats = tape.segment_max(h, &segment, buckets.len())?;
        Ok(TokenSet { coords, feats })
    }
}

/// Scatters a sparse set into a dense masked map.
pub fn densify(s: &SparsePillarSet, grid: &GridSpec) -> Result<BevMap> {
    let mut m = BevMap::empty(grid.h(), grid.w(), s.d());
    for (i, &c) in s.coords.iter().enumerate() {
        if !grid.contains(c) {
            return Err(Error::CoordOutOfBounds {
                row: c.row as usize,
                col: c.col as usize,
                h: grid.h(),
                w: grid.w(),
            });
        }
        m.set(c, s.feature(i));
    }
    Ok(m)
}

/// One token per valid cell, row-major.
pub fn sparsify(m: &BevMap) -> SparsePillarSet {
    let mut coords = Vec::new();
    let mut data = Vec::new();
    for r in 0..m.h {
        for c in 0..m.w {
            let cell = Cell::new(r as u32, c as u32);
            if m.is_valid(cell) {
                coords.push(cell);
                data.extend_from_slice(m.at(cell));
            }
        }
    }
    let k = coords.len();
    SparsePillarSet {
        coords,
        features: Tensor::new(&[k, m.d], data).expect("shape"),
    }
}
