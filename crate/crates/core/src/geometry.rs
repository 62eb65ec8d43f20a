//! Rigid poses, point clouds and 7-DoF boxes.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::{Error, Result};

pub type Mat4 = [[f64; 4]; 4];
pub type Point3 = [f64; 3];

const ORTHO_TOL: f64 = 1e-6;

/// Homogeneous vehicle-to-world transform.
///
/// The rotation block is orthonormal with determinant +1 and the last row is
/// exactly `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    m: Mat4,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const fn identity() -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        let mut p = Self::identity();
        p.m[0][3] = x;
        p.m[1][3] = y;
        p.m[2][3] = z;
        p
    }

    /// Rotation about +z by `yaw` followed by a translation.
    pub fn from_yaw_translation(yaw: f64, x: f64, y: f64, z: f64) -> Self {
        let (s, c) = (libm::sin(yaw), libm::cos(yaw));
        Self {
            m: [
                [c, -s, 0.0, x],
                [s, c, 0.0, y],
                [0.0, 0.0, 1.0, z],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Validates a raw matrix. Rotation blocks within `1e-6` of orthonormal
    /// are snapped back by polar decomposition; anything further is rejected.
    pub fn from_matrix(m: Mat4) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!("last row {:?}", m[3])));
        }
        let mut r = rotation_of(&m);
        let dev = ortho_deviation(&r);
        if dev > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation deviates from orthonormal by {dev:e}"
            )));
        }
        if det3(&r) <= 0.0 {
            return Err(Error::InvalidPose("rotation has negative determinant".into()));
        }
        if dev > 1e-12 {
            r = polar_orthonormalize(r);
        }
        let mut out = m;
        for i in 0..3 {
            out[i][..3].copy_from_slice(&r[i]);
        }
        Ok(Self { m: out })
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.m
    }

    pub fn translation(&self) -> Point3 {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation_of(&self.m)
    }

    /// Heading of the vehicle x axis in the world xy plane.
    pub fn yaw(&self) -> f64 {
        libm::atan2(self.m[1][0], self.m[0][0])
    }

    pub fn invert(&self) -> Pose {
        let r = self.rotation();
        let t = self.translation();
        let mut m = Self::identity().m;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i];
            }
            m[i][3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        Pose { m }
    }

    /// Matrix product `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.m[i][k] * other.m[k][j];
                }
                m[i][j] = acc;
            }
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        Pose { m }
    }

    /// `g_prev^-1 * g_cur`: maps current-vehicle coordinates into the previous
    /// vehicle frame. This is the inverse-sampling map for history BEV maps.
    pub fn relative_transform(g_prev: &Pose, g_cur: &Pose) -> Pose {
        g_prev.invert().compose(g_cur)
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn transform_points(&self, pts: &[Point3]) -> Vec<Point3> {
        pts.iter().map(|&p| self.transform_point(p)).collect()
    }

    /// Rotates a direction (no translation).
    pub fn rotate_vector(&self, v: Point3) -> Point3 {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

fn rotation_of(m: &Mat4) -> [[f64; 3]; 3] {
    [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ]
}

fn ortho_deviation(r: &[[f64; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

fn inverse3(r: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(r);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, e) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (r[a][c] * r[b][e] - r[a][e] * r[b][c]) / d;
        }
    }
    inv
}

/// Newton iteration `R <- (R + R^-T) / 2`, converging to the orthonormal
/// polar factor.
fn polar_orthonormalize(mut r: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    for _ in 0..8 {
        let inv = inverse3(&r);
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (r[i][j] + inv[j][i]);
            }
        }
        r = next;
        if ortho_deviation(&r) < 1e-15 {
            break;
        }
    }
    r
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = libm::fmod(a + PI, 2.0 * PI);
    if w < 0.0 {
        w += 2.0 * PI;
    }
    let out = w - PI;
    if out >= PI {
        -PI
    } else {
        out
    }
}

/// One LiDAR sweep in the vehicle frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub intensity: Option<Vec<f64>>,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, intensity: Option<Vec<f64>>, timestamp: f64) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "PointCloud::new",
                msg: "non-finite coordinate".into(),
            });
        }
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return Err(Error::InvalidArgument {
                    op: "PointCloud::new",
                    msg: format!("{} intensities for {} points", i.len(), points.len()),
                });
            }
        }
        Ok(Self {
            points,
            intensity,
            timestamp,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intensity_at(&self, i: usize) -> f64 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }
}

/// 7-DoF box: center, (length, width, height) and heading about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: Point3,
    pub heading: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: Point3, heading: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidBox(format!("sizes must be positive, got {size:?}")));
        }
        if center.iter().any(|v| !v.is_finite()) || !heading.is_finite() {
            return Err(Error::InvalidBox("non-finite center or heading".into()));
        }
        Ok(Self {
            center,
            size,
            heading: wrap_angle(heading),
        })
    }

    /// Box expressed in another frame: `pose` maps this box's frame into the
    /// target frame.
    pub fn transformed(&self, pose: &Pose) -> Box3D {
        Box3D {
            center: pose.transform_point(self.center),
            size: self.size,
            heading: wrap_angle(self.heading + pose.yaw()),
        }
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = (libm::sin(self.heading), libm::cos(self.heading));
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Inclusive heading-aware footprint test with a `1e-9` m tolerance so
    /// that cell centers exactly on an edge count as inside.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = (libm::sin(self.heading), libm::cos(self.heading));
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.size[0] / 2.0 + 1e-9 && v.abs() <= self.size[1] / 2.0 + 1e-9
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_pose(rng: &mut Rng) -> Pose {
        // Random rotation from a unit quaternion.
        let q: [f64; 4] = core::array::from_fn(|_| rng.normal());
        let n = libm::sqrt(q.iter().map(|v| v * v).sum());
        let [w, x, y, z] = q.map(|v| v / n);
        let m = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), rng.range(-10.0, 10.0)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), rng.range(-10.0, 10.0)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y), rng.range(-10.0, 10.0)],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Pose::from_matrix(m).unwrap()
    }

    fn naive_mul(a: &Mat4, b: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn assert_identity(p: &Pose, tol: f64) {
        let id = Pose::identity();
        for i in 0..4 {
            for j in 0..4 {
                assert!((p.matrix()[i][j] - id.matrix()[i][j]).abs() <= tol, "{p:?}");
            }
        }
    }

    #[test]
    fn invert_identity_and_translation() {
        assert_eq!(Pose::identity().invert(), Pose::identity());
        let inv = Pose::from_translation(1.0, 2.0, 3.0).invert();
        assert_eq!(inv.translation(), [-1.0, -2.0, -3.0]);
    }

    #[test]
    fn invert_random_poses() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let prod = naive_mul(p.matrix(), p.invert().matrix());
            assert_identity(&Pose { m: prod }, 1e-9);
            assert_identity(&p.compose(&p.invert()), 1e-9);
        }
    }

    #[test]
    fn compose_cases() {
        let p = Pose::from_yaw_translation(0.3, 1.0, -2.0, 0.5);
        assert_eq!(Pose::identity().compose(&p), p);
        let t = Pose::from_translation(1.0, 0.0, 0.0).compose(&Pose::from_translation(0.0, 1.0, 0.0));
        assert_eq!(t.translation(), [1.0, 1.0, 0.0]);

        // Rz(90) * T(1,0,0): hand product puts the translation at (0,1,0).
        let rz = Pose::from_matrix([
            [0.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let c = rz.compose(&Pose::from_translation(1.0, 0.0, 0.0));
        let expected = [
            [0.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert_eq!(c.matrix(), &expected);
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            for i in 0..4 {
                for j in 0..4 {
                    assert!((l.matrix()[i][j] - r.matrix()[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn relative_transform_semantics() {
        let g = Pose::from_yaw_translation(0.7, 3.0, 4.0, 0.0);
        assert_identity(&Pose::relative_transform(&g, &g), 1e-12);

        // The ego moved +0.32 m along x. A world point at x = 1.0 sits at
        // x = 0.68 in the current vehicle frame and x = 1.0 in the previous
        // one; the relative transform must carry the former to the latter.
        let g_prev = Pose::identity();
        let g_cur = Pose::from_translation(0.32, 0.0, 0.0);
        let world = [1.0, 0.0, 0.0];
        let in_cur = g_cur.invert().transform_point(world);
        let in_prev = g_prev.invert().transform_point(world);
        let rel = Pose::relative_transform(&g_prev, &g_cur);
        let mapped = rel.transform_point(in_cur);
        for k in 0..3 {
            assert!((mapped[k] - in_prev[k]).abs() < 1e-12);
        }
        assert_eq!(rel.translation(), [0.32, 0.0, 0.0]);

        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let round = Pose::relative_transform(&a, &b).compose(&Pose::relative_transform(&b, &a));
            assert_identity(&round, 1e-9);
        }
    }

    #[test]
    fn transform_points_cases() {
        let pts = [[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        assert_eq!(Pose::identity().transform_points(&pts), pts.to_vec());
        assert_eq!(
            Pose::from_translation(1.0, 0.0, 0.0).transform_point([0.0, 0.0, 0.0]),
            [1.0, 0.0, 0.0]
        );
        let r = Pose::from_yaw_translation(core::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0);
        let p = r.transform_point([1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn rigid_transforms_preserve_distances() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let pts: Vec<Point3> = (0..10)
                .map(|_| [rng.range(-50.0, 50.0), rng.range(-50.0, 50.0), rng.range(-5.0, 5.0)])
                .collect();
            let out = p.transform_points(&pts);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let d0 = dist(pts[i], pts[j]);
                    let d1 = dist(out[i], out[j]);
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }

    fn dist(a: Point3, b: Point3) -> f64 {
        libm::sqrt((0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum())
    }

    #[test]
    fn construction_validates() {
        let mut m = *Pose::identity().matrix();
        m[3][0] = 1e-3;
        assert!(Pose::from_matrix(m).is_err());

        let mut m = *Pose::identity().matrix();
        m[0][0] = 1.1;
        assert!(Pose::from_matrix(m).is_err());

        let mut m = *Pose::identity().matrix();
        m[2][2] = -1.0;
        assert!(Pose::from_matrix(m).is_err(), "reflection must be rejected");

        // Small noise is snapped back to an exact rotation.
        let mut m = *Pose::from_yaw_translation(0.4, 1.0, 2.0, 3.0).matrix();
        m[0][0] += 5e-7;
        m[1][2] -= 3e-7;
        let p = Pose::from_matrix(m).unwrap();
        assert!(ortho_deviation(&p.rotation()) < 1e-14);
    }

    #[test]
    fn box_wraps_heading_and_checks_size() {
        let b = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 3.0 * PI).unwrap();
        assert!((b.heading + PI).abs() < 1e-12);
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(-PI) + PI).abs() < 1e-15);
    }
}
