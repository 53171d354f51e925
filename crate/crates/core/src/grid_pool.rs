//! Differentiable 3D grid pooling.
//!
//! A `D x D x D` lattice of virtual points is laid over a box at cell
//! centers. Each virtual point takes the inverse-squared-distance weighted
//! mean of its `k` nearest seed features. With the neighbor sets held fixed
//! the pooled features are smooth in the box center, size and yaw, and
//! [`pool_with_jacobian`] returns those derivatives.
//!
//! [`box_query_pool`] is the hard-crop alternative: it keeps only the seeds
//! inside the box and jumps whenever the surface crosses a seed.

use crate::error::{Error, Result};
use crate::geometry::{dist_sq, sub, OrientedBox3D, Vec3};
use crate::synth::SceneSample;

/// Squared distances below this snap the pooled feature to that seed.
const COINCIDENT_SQ: f64 = 1e-18;

/// Seed points and their features, borrowed from a scene.
#[derive(Debug, Clone, Copy)]
pub struct Seeds<'a> {
    pub points: &'a [Vec3],
    pub features: &'a [Vec<f64>],
}

impl<'a> Seeds<'a> {
    pub fn new(points: &'a [Vec3], features: &'a [Vec<f64>]) -> Self {
        debug_assert_eq!(points.len(), features.len());
        Self { points, features }
    }

    pub fn from_scene(scene: &'a SceneSample) -> Self {
        Self::new(&scene.points, &scene.features)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoolResult {
    /// World-frame virtual points, x index fastest.
    pub grid_points: Vec<Vec3>,
    /// Virtual points relative to the box center, in the box frame.
    pub local_coords: Vec<Vec3>,
    pub features: Vec<Vec<f64>>,
    pub neighbor_ids: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl GridPoolResult {
    pub fn len(&self) -> usize {
        self.grid_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_points.is_empty()
    }

    /// `[local_coords; features]` for grid point `m`.
    pub fn point_input(&self, m: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + self.features[m].len());
        v.extend_from_slice(&self.local_coords[m]);
        v.extend_from_slice(&self.features[m]);
        v
    }
}

/// Derivatives of the pooled features. Per grid point: `d_center` and
/// `d_size` are `F x 3` row-major, `d_yaw` has `F` entries. The local
/// coordinates are `size * unit_offsets[m]` per axis, so their only
/// dependence is on size, diagonal with entries `unit_offsets[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolJacobian {
    pub d_center: Vec<Vec<f64>>,
    pub d_size: Vec<Vec<f64>>,
    pub d_yaw: Vec<Vec<f64>>,
    pub unit_offsets: Vec<Vec3>,
}

/// Cell-center offsets in units of box size: `(i + 0.5) / D - 0.5` per axis.
pub fn unit_offsets(d: usize) -> Vec<Vec3> {
    let step = |i: usize| (i as f64 + 0.5) / d as f64 - 0.5;
    let mut out = Vec::with_capacity(d * d * d);
    for iz in 0..d {
        for iy in 0..d {
            for ix in 0..d {
                out.push([step(ix), step(iy), step(iz)]);
            }
        }
    }
    out
}

fn local_grid(b: &OrientedBox3D, d: usize) -> Vec<Vec3> {
    let s = b.size();
    unit_offsets(d)
        .into_iter()
        .map(|u| [u[0] * s[0], u[1] * s[1], u[2] * s[2]])
        .collect()
}

pub fn make_grid(b: &OrientedBox3D, d: usize) -> Vec<Vec3> {
    local_grid(b, d).into_iter().map(|l| b.to_world(l)).collect()
}

/// The `k` nearest seeds to `q` as `(index, squared distance)`, nearest
/// first; equal distances keep the lower index first.
pub fn k_nearest(points: &[Vec3], q: Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        let d = dist_sq(*p, q);
        if best.len() == k && d >= best[k - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, bd)| bd <= d);
        best.insert(pos, (i, d));
        if best.len() > k {
            best.pop();
        }
    }
    best
}

struct Interp {
    feature: Vec<f64>,
    ids: Vec<usize>,
    weights: Vec<f64>,
    dist_sq: Vec<f64>,
    snapped: bool,
}

fn interpolate_one(q: Vec3, seeds: &Seeds, k: usize) -> Interp {
    let nn = k_nearest(seeds.points, q, k);
    let f_dim = seeds.feature_dim();
    let ids: Vec<usize> = nn.iter().map(|x| x.0).collect();
    let dist_sq: Vec<f64> = nn.iter().map(|x| x.1).collect();
    if dist_sq[0] < COINCIDENT_SQ {
        let mut weights = vec![0.0; k];
        weights[0] = 1.0;
        return Interp {
            feature: seeds.features[ids[0]].clone(),
            ids,
            weights,
            dist_sq,
            snapped: true,
        };
    }
    let weights: Vec<f64> = dist_sq.iter().map(|d| 1.0 / d).collect();
    let total: f64 = weights.iter().sum();
    let mut feature = vec![0.0; f_dim];
    for (&i, w) in ids.iter().zip(&weights) {
        for (f, s) in feature.iter_mut().zip(&seeds.features[i]) {
            *f += w * s;
        }
    }
    for f in &mut feature {
        *f /= total;
    }
    Interp {
        feature,
        ids,
        weights,
        dist_sq,
        snapped: false,
    }
}

fn check_seeds(seeds: &Seeds, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if seeds.len() < k {
        return Err(Error::NotEnoughSeeds {
            needed: k,
            got: seeds.len(),
        });
    }
    Ok(())
}

/// Per-query features, neighbor ids and weights.
pub type Interpolated = (Vec<Vec<f64>>, Vec<Vec<usize>>, Vec<Vec<f64>>);

/// Interpolated features, neighbor ids and weights for arbitrary query
/// points.
pub fn interpolate(
    grid: &[Vec3],
    seeds: &Seeds,
    k: usize,
) -> Result<Interpolated> {
    check_seeds(seeds, k)?;
    let mut feats = Vec::with_capacity(grid.len());
    let mut ids = Vec::with_capacity(grid.len());
    let mut weights = Vec::with_capacity(grid.len());
    for q in grid {
        let r = interpolate_one(*q, seeds, k);
        feats.push(r.feature);
        ids.push(r.ids);
        weights.push(r.weights);
    }
    Ok((feats, ids, weights))
}

pub fn pool(b: &OrientedBox3D, seeds: &Seeds, d: usize, k: usize) -> Result<GridPoolResult> {
    Ok(pool_impl(b, seeds, d, k, false)?.0)
}

pub fn pool_with_jacobian(
    b: &OrientedBox3D,
    seeds: &Seeds,
    d: usize,
    k: usize,
) -> Result<(GridPoolResult, PoolJacobian)> {
    let (res, jac) = pool_impl(b, seeds, d, k, true)?;
    Ok((res, jac.expect("requested")))
}

fn pool_impl(
    b: &OrientedBox3D,
    seeds: &Seeds,
    d: usize,
    k: usize,
    with_jacobian: bool,
) -> Result<(GridPoolResult, Option<PoolJacobian>)> {
    if d == 0 {
        return Err(Error::Config("grid resolution D must be >= 1".into()));
    }
    check_seeds(seeds, k)?;
    let units = unit_offsets(d);
    let local = local_grid(b, d);
    let grid: Vec<Vec3> = local.iter().map(|l| b.to_world(*l)).collect();
    let f_dim = seeds.feature_dim();
    let (sin, cos) = b.yaw().sin_cos();

    let n = grid.len();
    let mut res = GridPoolResult {
        grid_points: grid.clone(),
        local_coords: local.clone(),
        features: Vec::with_capacity(n),
        neighbor_ids: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
    };
    let mut jac = with_jacobian.then(|| PoolJacobian {
        d_center: Vec::with_capacity(n),
        d_size: Vec::with_capacity(n),
        d_yaw: Vec::with_capacity(n),
        unit_offsets: units.clone(),
    });

    for m in 0..n {
        let g = grid[m];
        let r = interpolate_one(g, seeds, k);
        if let Some(j) = jac.as_mut() {
            // d f / d g, F x 3.
            let mut dfdg = vec![0.0; f_dim * 3];
            if !r.snapped {
                let total: f64 = r.weights.iter().sum();
                for (&i, d2) in r.ids.iter().zip(&r.dist_sq) {
                    let diff = sub(g, seeds.points[i]);
                    // d w / d g = -2 (g - p) / d^4
                    let scale = -2.0 / (d2 * d2) / total;
                    for (fi, (fs, fm)) in seeds.features[i].iter().zip(&r.feature).enumerate() {
                        let c = (fs - fm) * scale;
                        for a in 0..3 {
                            dfdg[fi * 3 + a] += c * diff[a];
                        }
                    }
                }
            }
            let u = units[m];
            let l = local[m];
            // Columns of d g / d size: R(yaw) e_b u_b.
            let dg_ds = [
                [cos * u[0], sin * u[0], 0.0],
                [-sin * u[1], cos * u[1], 0.0],
                [0.0, 0.0, u[2]],
            ];
            let dg_dyaw = [-sin * l[0] - cos * l[1], cos * l[0] - sin * l[1], 0.0];
            let mut d_size = vec![0.0; f_dim * 3];
            let mut d_yaw = vec![0.0; f_dim];
            for fi in 0..f_dim {
                let row = &dfdg[fi * 3..fi * 3 + 3];
                for bcol in 0..3 {
                    d_size[fi * 3 + bcol] =
                        row[0] * dg_ds[bcol][0] + row[1] * dg_ds[bcol][1] + row[2] * dg_ds[bcol][2];
                }
                d_yaw[fi] = row[0] * dg_dyaw[0] + row[1] * dg_dyaw[1] + row[2] * dg_dyaw[2];
            }
            j.d_center.push(dfdg);
            j.d_size.push(d_size);
            j.d_yaw.push(d_yaw);
        }
        res.features.push(r.feature);
        res.neighbor_ids.push(r.ids);
        res.weights.push(r.weights);
    }
    Ok((res, jac))
}

/// Seeds strictly inside the box, in seed order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQueryResult {
    pub ids: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

pub fn box_query_pool(b: &OrientedBox3D, seeds: &Seeds) -> BoxQueryResult {
    let h = b.half_size();
    let mut out = BoxQueryResult {
        ids: Vec::new(),
        features: Vec::new(),
    };
    for (i, p) in seeds.points.iter().enumerate() {
        let l = b.to_local(*p);
        if (0..3).all(|a| l[a].abs() < h[a]) {
            out.ids.push(i);
            out.features.push(seeds.features[i].clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> OrientedBox3D {
        OrientedBox3D::new([0.0; 3], [1.0; 3], 0.0).unwrap()
    }

    #[test]
    fn grid_shapes() {
        let g = make_grid(&unit_box(), 1);
        assert_eq!(g, vec![[0.0; 3]]);
        assert_eq!(make_grid(&unit_box(), 4).len(), 64);
        let g2 = make_grid(&unit_box(), 2);
        for p in &g2 {
            assert!(p.iter().all(|c| c.abs() == 0.25));
        }
        assert_eq!(g2[0], [-0.25, -0.25, -0.25]);
        assert_eq!(g2[1], [0.25, -0.25, -0.25]);
        assert_eq!(g2[2], [-0.25, 0.25, -0.25]);
    }

    #[test]
    fn interpolation_examples() {
        let pts = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 2.0], [9.0, 9.0, 9.0]];
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![4.0, 4.0], vec![100.0, 100.0]];
        let seeds = Seeds::new(&pts, &feats);

        // Coincident with a seed.
        let (f, _, w) = interpolate(&[[2.0, 0.0, 0.0]], &seeds, 3).unwrap();
        assert_eq!(f[0], vec![0.0, 1.0]);
        assert_eq!(w[0][0], 1.0);

        // Equidistant from two seeds.
        let (f, ids, _) = interpolate(&[[1.0, 0.0, 0.0]], &seeds, 2).unwrap();
        assert_eq!(ids[0], vec![0, 1]);
        assert!((f[0][0] - 0.5).abs() < 1e-15 && (f[0][1] - 0.5).abs() < 1e-15);

        // Distances (1, 2, sqrt 8).
        let pts = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 2.0, 2.0]];
        let feats = vec![vec![1.0], vec![2.0], vec![3.0]];
        let seeds = Seeds::new(&pts, &feats);
        let (f, _, w) = interpolate(&[[0.0; 3]], &seeds, 3).unwrap();
        assert!((w[0][0] - 1.0).abs() < 1e-15);
        assert!((w[0][1] - 0.25).abs() < 1e-15);
        assert!((w[0][2] - 0.125).abs() < 1e-15);
        let expect = (1.0 + 0.25 * 2.0 + 0.125 * 3.0) / 1.375;
        assert!((f[0][0] - expect).abs() < 1e-15);

        assert!(matches!(
            interpolate(&[[0.0; 3]], &seeds, 4),
            Err(Error::NotEnoughSeeds { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn knn_tie_break_prefers_lower_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let nn = k_nearest(&pts, [0.0; 3], 2);
        assert_eq!(nn.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn constant_features_have_zero_gradient() {
        let pts = vec![[3.0, 0.1, 0.0], [-2.0, 1.0, 0.5], [0.4, -3.0, 1.0], [1.0, 1.0, 2.0]];
        let feats = vec![vec![0.7, -1.0]; 4];
        let (_, jac) = pool_with_jacobian(&unit_box(), &Seeds::new(&pts, &feats), 2, 3).unwrap();
        for m in 0..8 {
            assert!(jac.d_center[m].iter().all(|v| v.abs() < 1e-12));
            assert!(jac.d_size[m].iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn snapped_grid_point_has_zero_gradient() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let feats = vec![vec![1.0], vec![2.0], vec![3.0]];
        let (res, jac) = pool_with_jacobian(&unit_box(), &Seeds::new(&pts, &feats), 1, 3).unwrap();
        assert_eq!(res.features[0], vec![1.0]);
        assert!(jac.d_center[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn box_query_examples() {
        let pts = vec![[0.0; 3], [0.3, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let feats = vec![vec![1.0], vec![2.0], vec![3.0]];
        let seeds = Seeds::new(&pts, &feats);
        let empty = OrientedBox3D::new([5.0, 5.0, 5.0], [1.0; 3], 0.0).unwrap();
        assert!(box_query_pool(&empty, &seeds).ids.is_empty());
        let all = OrientedBox3D::new([1.0, 0.0, 0.0], [5.0; 3], 0.0).unwrap();
        assert_eq!(box_query_pool(&all, &seeds).features.len(), 3);
        let some = unit_box();
        assert_eq!(box_query_pool(&some, &seeds).ids, vec![0, 1]);
    }
}
