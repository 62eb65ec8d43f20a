//! Bird's-eye-view raster in binary PPM (P6). `+x` points right and `+y`
//! up; the image covers the detection grid.

use lef_core::geometry::{Box3D, Point3};
use lef_core::pillars::{Cell, GridSpec};

pub const POINT: [u8; 3] = [255, 255, 255];
pub const GT: [u8; 3] = [0, 220, 0];
pub const PRED: [u8; 3] = [40, 90, 255];
pub const FG_TINT: [u8; 3] = [110, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn add(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        for k in 0..3 {
            self.rgb[i + k] = self.rgb[i + k].saturating_add(c[k]);
        }
    }

    /// Bresenham segment, clipped to the image.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Layers drawn bottom to top: foreground tint, points, ground truth,
/// predictions.
pub struct Scene<'a> {
    pub points: &'a [Point3],
    pub foreground: &'a [Cell],
    pub gts: &'a [Box3D],
    pub preds: &'a [Box3D],
}

/// Pixel of a vehicle-frame location at `px_per_m` pixels per metre.
fn pixel(grid: &GridSpec, px_per_m: f64, x: f64, y: f64) -> (i64, i64) {
    let half = grid.range_m / 2.0;
    (((x + half) * px_per_m).floor() as i64, ((half - y) * px_per_m).floor() as i64)
}

pub fn render(grid: &GridSpec, px_per_m: f64, scene: &Scene) -> Image {
    let side = (grid.range_m * px_per_m).round().max(1.0) as usize;
    let mut img = Image::new(side, side);
    let cell_px = grid.cell_m * px_per_m;
    for c in scene.foreground {
        let x0 = (c.col as f64 * cell_px).floor() as usize;
        let x1 = (((c.col + 1) as f64 * cell_px).floor() as usize).min(side);
        let y1 = side.saturating_sub((c.row as f64 * cell_px).floor() as usize);
        let y0 = side.saturating_sub(((c.row + 1) as f64 * cell_px).floor() as usize);
        for y in y0..y1 {
            for x in x0..x1 {
                img.add(x, y, FG_TINT);
            }
        }
    }
    for p in scene.points {
        let (x, y) = pixel(grid, px_per_m, p[0], p[1]);
        img.put(x, y, POINT);
    }
    for (boxes, color) in [(scene.gts, GT), (scene.preds, PRED)] {
        for b in boxes {
            let c = b.bev_corners().map(|[x, y]| pixel(grid, px_per_m, x, y));
            for k in 0..4 {
                img.line(c[k], c[(k + 1) % 4], color);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(20.0, 1.0).unwrap()
    }

    #[test]
    fn ppm_header_and_size() {
        let img = render(&grid(), 2.0, &Scene { points: &[], foreground: &[], gts: &[], preds: &[] });
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n40 40\n255\n"));
        assert_eq!(ppm.len(), b"P6\n40 40\n255\n".len() + 40 * 40 * 3);
    }

    #[test]
    fn layers_land_where_expected() {
        let g = grid();
        let b = Box3D::new([0.0, 0.0, 1.0], [4.0, 2.0, 2.0], 0.0).unwrap();
        let fg = [g.cell_of(5.5, 5.5).unwrap()];
        let img = render(
            &g,
            2.0,
            &Scene {
                points: &[[-5.2, 3.1, 0.0]],
                foreground: &fg,
                gts: &[b],
                preds: &[],
            },
        );
        // Point at x=-5.2, y=3.1 -> column 9, row 13.
        assert_eq!(img.get(9, 13), POINT);
        // Foreground cell spans x in [5, 6), y in [5, 6) -> columns 30..32, rows 8..10.
        assert_eq!(img.get(30, 8), FG_TINT);
        assert_eq!(img.get(31, 9), FG_TINT);
        assert_eq!(img.get(29, 8), [0, 0, 0]);
        // Box corner (2, 1) -> column 24, row 18; centre stays empty.
        assert_eq!(img.get(24, 18), GT);
        assert_eq!(img.get(20, 20), [0, 0, 0]);
        // Left edge x=-2 -> column 16 between rows 18 and 22.
        assert!((18..=22).all(|r| img.get(16, r) == GT));
    }

    #[test]
    fn lines_outside_the_image_are_clipped() {
        let mut img = Image::new(4, 4);
        img.line((-10, 1), (10, 1), PRED);
        assert!((0..4).all(|x| img.get(x, 1) == PRED));
        assert_eq!(img.get(0, 0), [0, 0, 0]);
    }
}
