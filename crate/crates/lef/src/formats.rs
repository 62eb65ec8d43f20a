//! On-disk formats.
//!
//! Data set: a directory holding `manifest.json` and one `LEFSEQ01` blob per
//! frame. Blob layout, little-endian: magic, `u32` point count, `f32`
//! `x, y, z, intensity` quads, 16 `f64` pose entries (row-major), `f64`
//! timestamp, `u32` box count, then per box 7 `f64` (`cx cy cz l w h
//! heading`, world frame), `u32` track id and `u8` class. Per-box speed and
//! visibility live in the manifest.
//!
//! Checkpoint: magic `LEFCKPT1`, then per tensor `u32` name length, UTF-8
//! name, `u32` rank, `u32` dims and an `f32` payload, until end of file. The
//! run configuration is stored next to it as `<ckpt>.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use lef_core::fusion::Frame;
use lef_core::geometry::{Box3D, PointCloud, Pose};
use lef_core::numerics::{ParamStore, Tensor};
use lef_core::pillars::GridSpec;
use lef_core::synth::{GtBox, LabeledFrame, ObjectClass, Sequence};
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub const SEQ_MAGIC: &[u8; 8] = b"LEFSEQ01";
pub const CKPT_MAGIC: &[u8; 8] = b"LEFCKPT1";
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub grid: GridParams,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub range_m: f64,
    pub cell_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    /// Point clouds carry intensity; otherwise the stored channel is zero.
    pub intensity: bool,
    pub frames: Vec<FrameEntry>,
    /// `[cx, cy, cz, l, w, h, heading]`, world frame.
    pub occluders: Vec<[f64; 7]>,
    pub union_visibility: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub speeds: Vec<f64>,
    pub visibility: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub sequences: Vec<Sequence>,
}

fn box_row(b: &Box3D) -> [f64; 7] {
    [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.heading]
}

fn row_box(r: &[f64; 7]) -> Result<Box3D> {
    Ok(Box3D::new([r[0], r[1], r[2]], [r[3], r[4], r[5]], r[6])?)
}

pub fn encode_frame(f: &LabeledFrame) -> Vec<u8> {
    let cloud = &f.frame.cloud;
    let mut out = Vec::with_capacity(8 + 4 + 16 * cloud.len() + 8 * 17 + 4 + 61 * f.gt.len());
    out.extend_from_slice(SEQ_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], inten] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for row in f.frame.pose.matrix() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&f.frame.timestamp.to_le_bytes());
    out.extend_from_slice(&(f.gt.len() as u32).to_le_bytes());
    for g in &f.gt {
        for v in box_row(&g.bbox) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&g.track_id.to_le_bytes());
        out.push(g.class.index() as u8);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| anyhow!("truncated at byte {} (need {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// A decoded blob: the model input plus `(box, track_id, class)` labels.
pub struct DecodedFrame {
    pub frame: Frame,
    pub boxes: Vec<(Box3D, u32, ObjectClass)>,
}

pub fn decode_frame(buf: &[u8], intensity: bool) -> Result<DecodedFrame> {
    let mut r = Reader { buf, pos: 0 };
    ensure!(r.take(8)? == SEQ_MAGIC, "bad frame magic");
    let n = r.u32()? as usize;
    ensure!(n.saturating_mul(16) <= buf.len(), "point count {n} exceeds blob size");
    let mut points = Vec::with_capacity(n);
    let mut inten = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y, z, i) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        points.push([x as f64, y as f64, z as f64]);
        inten.push(i as f64);
    }
    let mut m = [[0.0; 4]; 4];
    for row in &mut m {
        for v in row {
            *v = r.f64()?;
        }
    }
    let pose = Pose::from_matrix(m)?;
    let timestamp = r.f64()?;
    let nb = r.u32()? as usize;
    let mut boxes = Vec::with_capacity(nb.min(buf.len() / 61));
    for _ in 0..nb {
        let mut row = [0.0; 7];
        for v in &mut row {
            *v = r.f64()?;
        }
        let id = r.u32()?;
        let c = r.u8()?;
        let class = ObjectClass::from_index(c as usize).ok_or_else(|| anyhow!("unknown class {c}"))?;
        boxes.push((row_box(&row)?, id, class));
    }
    ensure!(r.done(), "{} trailing bytes", buf.len() - r.pos);
    let cloud = PointCloud::new(points, intensity.then_some(inten), timestamp)?;
    Ok(DecodedFrame {
        frame: Frame { cloud, pose, timestamp },
        boxes,
    })
}

pub fn write_dataset(dir: &Path, grid: &GridSpec, sequences: &[Sequence]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (s, seq) in sequences.iter().enumerate() {
        let name = format!("seq{s:04}");
        let mut frames = Vec::with_capacity(seq.len());
        for (i, f) in seq.frames.iter().enumerate() {
            let file = format!("{name}_{i:04}.bin");
            fs::write(dir.join(&file), encode_frame(f)).with_context(|| format!("writing {file}"))?;
            frames.push(FrameEntry {
                file,
                speeds: f.gt.iter().map(|g| g.speed).collect(),
                visibility: f.visibility.clone(),
            });
        }
        entries.push(SequenceEntry {
            name,
            intensity: seq.frames.iter().any(|f| f.frame.cloud.intensity.is_some()),
            frames,
            occluders: seq.occluders.iter().map(box_row).collect(),
            union_visibility: seq.union_visibility.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        grid: GridParams {
            range_m: grid.range_m,
            cell_m: grid.cell_m,
        },
        sequences: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        m.schema_version == SCHEMA_VERSION,
        "unsupported schema version {} (expected {SCHEMA_VERSION})",
        m.schema_version
    );
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let grid = GridSpec::new(m.grid.range_m, m.grid.cell_m)?;
    let mut sequences = Vec::with_capacity(m.sequences.len());
    for entry in &m.sequences {
        let mut frames = Vec::with_capacity(entry.frames.len());
        for fe in &entry.frames {
            let bytes = fs::read(dir.join(&fe.file)).with_context(|| format!("reading {}", fe.file))?;
            let d = decode_frame(&bytes, entry.intensity).with_context(|| format!("decoding {}", fe.file))?;
            ensure!(
                fe.speeds.len() == d.boxes.len() && fe.visibility.len() == d.boxes.len(),
                "{}: manifest lists {} speeds and {} visibilities for {} boxes",
                fe.file,
                fe.speeds.len(),
                fe.visibility.len(),
                d.boxes.len()
            );
            let gt = d
                .boxes
                .into_iter()
                .zip(&fe.speeds)
                .map(|((bbox, track_id, class), &speed)| GtBox {
                    bbox,
                    track_id,
                    class,
                    speed,
                })
                .collect();
            frames.push(LabeledFrame {
                frame: d.frame,
                gt,
                visibility: fe.visibility.clone(),
            });
        }
        let occluders = entry.occluders.iter().map(row_box).collect::<Result<_>>()?;
        sequences.push(Sequence {
            frames,
            occluders,
            union_visibility: entry.union_visibility.clone(),
        });
    }
    Ok(Dataset { grid, sequences })
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * store.num_scalars() + 64 * store.len());
    out.extend_from_slice(CKPT_MAGIC);
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    ensure!(r.take(8)? == CKPT_MAGIC, "bad checkpoint magic");
    let mut out = Vec::new();
    while !r.done() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.filter(|&l| l.saturating_mul(4) <= buf.len() - r.pos);
        let len = len.ok_or_else(|| anyhow!("tensor {name}: shape {shape:?} exceeds file size"))?;
        let data = (0..len).map(|_| Ok(r.f32()? as f64)).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &Config) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(store)).with_context(|| format!("writing {}", path.display()))?;
    fs::write(sidecar_path(path), cfg.to_toml()?)?;
    Ok(())
}

/// Loads the configuration sidecar and the tensors of a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Config, Vec<(String, Tensor)>)> {
    let side = sidecar_path(path);
    if !side.exists() {
        bail!("missing checkpoint config {}", side.display());
    }
    let cfg = Config::load(&side)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let tensors = decode_checkpoint(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok((cfg, tensors))
}
