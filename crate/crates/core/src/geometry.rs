//! Upright oriented 3D boxes: volume, corners, exact IoU by BEV polygon
//! clipping, a Monte-Carlo IoU estimator, rigid/scale transforms and
//! point-to-box distance.
//!
//! Boxes only rotate about the vertical `z` axis. Intersection volume is the
//! area of the clipped bird's-eye-view rectangles times the overlap of the
//! two height intervals.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Points closer than this to a clip edge count as inside.
const EDGE_EPS: f64 = 1e-9;
/// Intersections with a smaller BEV area are treated as empty.
const MIN_AREA: f64 = 1e-12;

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm_sq(a: Vec3) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

pub(crate) fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    norm_sq(sub(a, b))
}

/// Fold an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut y = yaw;
    if y.abs() > 64.0 * TAU {
        y = y.rem_euclid(TAU);
    }
    while y >= PI {
        y -= TAU;
    }
    while y < -PI {
        y += TAU;
    }
    y
}

/// Rotate `(x, y)` by `yaw` about the origin.
#[inline]
pub(crate) fn rotate_xy(x: f64, y: f64, cos: f64, sin: f64) -> (f64, f64) {
    (cos * x - sin * y, sin * x + cos * y)
}

/// An upright box: center, per-axis size (x = width, y = length, z = height)
/// in the box frame, and yaw about `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct OrientedBox3D {
    center: Vec3,
    size: Vec3,
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    center: Vec3,
    size: Vec3,
    yaw: f64,
}

impl TryFrom<BoxRepr> for OrientedBox3D {
    type Error = Error;

    fn try_from(r: BoxRepr) -> Result<Self> {
        OrientedBox3D::new(r.center, r.size, r.yaw)
    }
}

impl From<OrientedBox3D> for BoxRepr {
    fn from(b: OrientedBox3D) -> Self {
        BoxRepr {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
        }
    }
}

impl OrientedBox3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self> {
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite center {center:?}")));
        }
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidBox(format!(
                "size components must be finite and > 0, got {size:?}"
            )));
        }
        if !yaw.is_finite() {
            return Err(Error::InvalidBox(format!("non-finite yaw {yaw}")));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Result<Self> {
        Self::new(center, size, 0.0)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn size(&self) -> Vec3 {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn half_size(&self) -> Vec3 {
        [self.size[0] * 0.5, self.size[1] * 0.5, self.size[2] * 0.5]
    }

    pub fn with_center(&self, center: Vec3) -> Result<Self> {
        Self::new(center, self.size, self.yaw)
    }

    pub fn with_size(&self, size: Vec3) -> Result<Self> {
        Self::new(self.center, size, self.yaw)
    }

    pub fn volume(&self) -> f64 {
        volume(self)
    }

    /// World point expressed in the box frame (origin at the center, x along
    /// the heading).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = sub(p, self.center);
        let (x, y) = rotate_xy(d[0], d[1], c, -s);
        [x, y, d[2]]
    }

    pub fn to_world(&self, local: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let (x, y) = rotate_xy(local[0], local[1], c, s);
        [x + self.center[0], y + self.center[1], local[2] + self.center[2]]
    }

    /// True if `p` is inside or within `tol` of the surface.
    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        let l = self.to_local(p);
        let h = self.half_size();
        (0..3).all(|a| l[a].abs() <= h[a] + tol)
    }

    /// Bird's-eye-view footprint, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let c = corners(self);
        [
            [c[0][0], c[0][1]],
            [c[1][0], c[1][1]],
            [c[2][0], c[2][1]],
            [c[3][0], c[3][1]],
        ]
    }

    /// Axis-aligned `(min, max)` hull.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let cs = corners(self);
        let mut lo = cs[0];
        let mut hi = cs[0];
        for c in &cs[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    }

    fn z_range(&self) -> (f64, f64) {
        let h = self.size[2] * 0.5;
        (self.center[2] - h, self.center[2] + h)
    }

    fn key(&self) -> [f64; 7] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
        ]
    }
}

pub fn volume(b: &OrientedBox3D) -> f64 {
    b.size[0] * b.size[1] * b.size[2]
}

/// Sign pattern of the 8 corners, Gray-code order over (x, y, z) with x as
/// the fastest bit: the first four corners are the bottom face in
/// counter-clockwise order, the last four the top face.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0],
];

pub fn corners(b: &OrientedBox3D) -> [Vec3; 8] {
    let h = b.half_size();
    let mut out = [[0.0; 3]; 8];
    for (o, s) in out.iter_mut().zip(CORNER_SIGNS.iter()) {
        *o = b.to_world([s[0] * h[0], s[1] * h[1], s[2] * h[2]]);
    }
    out
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segment_line_intersection(s: [f64; 2], e: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let ds = cross2(a, b, s);
    let de = cross2(a, b, e);
    let denom = ds - de;
    if denom.abs() < f64::MIN_POSITIVE {
        return s;
    }
    let t = ds / denom;
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

/// Sutherland–Hodgman clipping of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: [f64; 2]| cross2(a, b, p) >= -EDGE_EPS;
        let mut prev = input[input.len() - 1];
        for &cur in &input {
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
            prev = cur;
        }
    }
    output
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Exact overlap volume of two upright boxes.
pub fn intersection_volume(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    // Cheap reject on circumscribed circles.
    let ra = 0.5 * (a.size[0].hypot(a.size[1]));
    let rb = 0.5 * (b.size[0].hypot(b.size[1]));
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    if dx * dx + dy * dy >= (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let clipped = clip_convex_polygon(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&clipped);
    if area < MIN_AREA {
        return 0.0;
    }
    area * dz
}

/// Exact 3D IoU. Symmetric bit-for-bit: the pair is put into a canonical
/// order before clipping.
pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (a, b) = match cmp_boxes(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = volume(a) + volume(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cmp_boxes(a: &OrientedBox3D, b: &OrientedBox3D) -> Ordering {
    let (ka, kb) = (a.key(), b.key());
    for (x, y) in ka.iter().zip(kb.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Precomputed inside-test for the Monte-Carlo estimator.
struct Membership {
    center: Vec3,
    half: Vec3,
    cos: f64,
    sin: f64,
}

impl Membership {
    fn new(b: &OrientedBox3D) -> Self {
        let (sin, cos) = b.yaw.sin_cos();
        Self {
            center: b.center,
            half: b.half_size(),
            cos,
            sin,
        }
    }

    #[inline]
    fn contains(&self, p: Vec3) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let lx = self.cos * dx + self.sin * dy;
        let ly = -self.sin * dx + self.cos * dy;
        // Non-short-circuit `&` keeps this branch-free on random input.
        (lx.abs() <= self.half[0]) & (ly.abs() <= self.half[1]) & (dz.abs() <= self.half[2])
    }
}

/// Hit-counting IoU estimate. Samples are drawn uniformly from the
/// axis-aligned hull of both boxes; deterministic for a given seed.
pub fn iou3d_monte_carlo(a: &OrientedBox3D, b: &OrientedBox3D, n_samples: usize, seed: u64) -> f64 {
    let n_samples = n_samples.max(1);
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    let lo = [alo[0].min(blo[0]), alo[1].min(blo[1]), alo[2].min(blo[2])];
    let hi = [ahi[0].max(bhi[0]), ahi[1].max(bhi[1]), ahi[2].max(bhi[2])];
    let ext = sub(hi, lo);
    let ma = Membership::new(a);
    let mb = Membership::new(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
    for _ in 0..n_samples {
        let p = [
            lo[0] + ext[0] * rng.random::<f64>(),
            lo[1] + ext[1] * rng.random::<f64>(),
            lo[2] + ext[2] * rng.random::<f64>(),
        ];
        let ia = ma.contains(p);
        let ib = mb.contains(p);
        in_a += ia as u64;
        in_b += ib as u64;
        both += (ia & ib) as u64;
    }
    let union = in_a + in_b - both;
    if both == 0 || union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Flip, then rotate about `z`, then uniform scale; all about the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform3D {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rot_yaw: f64,
    pub scale: f64,
}

impl Default for Transform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform3D {
    pub fn identity() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            rot_yaw: 0.0,
            scale: 1.0,
        }
    }

    pub fn new(flip_x: bool, flip_y: bool, rot_yaw: f64, scale: f64) -> Result<Self> {
        let t = Self {
            flip_x,
            flip_y,
            rot_yaw,
            scale,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidTransform(format!(
                "scale must be finite and > 0, got {}",
                self.scale
            )));
        }
        if !self.rot_yaw.is_finite() {
            return Err(Error::InvalidTransform("non-finite rotation".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// The transform undoing `self`, expressed in the same
    /// flip-rotate-scale form. With exactly one flip the reflection
    /// conjugates the rotation, so the angle keeps its sign.
    pub fn inverse(&self) -> Self {
        let single_flip = self.flip_x ^ self.flip_y;
        Self {
            flip_x: self.flip_x,
            flip_y: self.flip_y,
            rot_yaw: if single_flip { self.rot_yaw } else { -self.rot_yaw },
            scale: 1.0 / self.scale,
        }
    }

    /// Linear part applied to a direction or offset.
    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        let mut x = if self.flip_x { -v[0] } else { v[0] };
        let mut y = if self.flip_y { -v[1] } else { v[1] };
        let (s, c) = self.rot_yaw.sin_cos();
        (x, y) = rotate_xy(x, y, c, s);
        [x * self.scale, y * self.scale, v[2] * self.scale]
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.apply_vector(p)
    }

    pub fn apply_yaw(&self, yaw: f64) -> f64 {
        let mut y = yaw;
        if self.flip_x {
            y = PI - y;
        }
        if self.flip_y {
            y = -y;
        }
        normalize_yaw(y + self.rot_yaw)
    }

    /// Number of mirror flips (0, 1 or 2); an odd count reverses handedness.
    pub fn n_flips(&self) -> usize {
        self.flip_x as usize + self.flip_y as usize
    }
}

pub fn apply_transform(b: &OrientedBox3D, t: &Transform3D) -> OrientedBox3D {
    let center = t.apply_point(b.center);
    let size = [b.size[0] * t.scale, b.size[1] * t.scale, b.size[2] * t.scale];
    OrientedBox3D {
        center,
        size,
        yaw: t.apply_yaw(b.yaw),
    }
}

/// Distance from `p` to the closest point of the (solid) box; zero inside.
pub fn point_box_distance(p: Vec3, b: &OrientedBox3D) -> f64 {
    let l = b.to_local(p);
    let h = b.half_size();
    let mut acc = 0.0;
    for a in 0..3 {
        let d = (l[a].abs() - h[a]).max(0.0);
        acc += d * d;
    }
    acc.sqrt()
}

/// Smallest signed difference between two angles, in `[-pi, pi)`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_yaw(a - b)
}
