//! Factorized multi-resolution ground feature planes.
//!
//! Every level stores, per feature channel `r`, an xy-plane matrix
//! `M[r] ∈ R^{H×W}` and a z-axis vector `v[r] ∈ R^{D}`. The feature of a
//! normalized point `(x, y, z)` is `bilinear(M[r], x, y) · linear(v[r], z)`,
//! i.e. a sample of the rank-one tensor `v[r] ∘ M[r]` without materializing
//! it. Channels are concatenated within a level; levels are stored finest
//! first (downsample factor 1) and concatenated coarse to fine.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, CustomOp, Graph, Param, ParamGroup, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::Aabb;

/// Default cap on the number of values [`densify`] will materialize.
pub const DENSIFY_CAP: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Density,
    Appearance,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Density => "density",
            FeatureKind::Appearance => "appearance",
        }
    }
}

/// One rank-`R` plane/vector factor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFactor<T> {
    /// `R×H×W`
    pub matrix: Param<T>,
    /// `R×D`
    pub vector: Param<T>,
}

impl<T: Real> PlaneFactor<T> {
    pub fn new(matrix: Array<T>, vector: Array<T>, name: &str) -> Result<Self> {
        let (ms, vs) = (matrix.shape(), vector.shape());
        if ms.len() != 3 || vs.len() != 2 || ms[0] != vs[0] {
            return Err(Error::shape(
                "PlaneFactor::new",
                format!("matrix {ms:?}, vector {vs:?}"),
            ));
        }
        if ms[0] == 0 || ms[1] < 2 || ms[2] < 2 || vs[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "plane factor needs R > 0 and at least 2 vertices per axis, got matrix {ms:?}, vector {vs:?}"
            )));
        }
        Ok(PlaneFactor {
            matrix: Param::new(format!("{name}.M_xy"), matrix, ParamGroup::Planes),
            vector: Param::new(format!("{name}.v_z"), vector, ParamGroup::Planes),
        })
    }

    pub fn channels(&self) -> usize {
        self.matrix.value.shape()[0]
    }

    /// `(H, W, D)`
    pub fn resolution(&self) -> (usize, usize, usize) {
        let s = self.matrix.value.shape();
        (s[1], s[2], self.vector.value.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.matrix.value.len() + self.vector.value.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel<T> {
    pub factor: usize,
    pub density: PlaneFactor<T>,
    pub appearance: PlaneFactor<T>,
}

impl<T: Real> PyramidLevel<T> {
    pub fn get(&self, kind: FeatureKind) -> &PlaneFactor<T> {
        match kind {
            FeatureKind::Density => &self.density,
            FeatureKind::Appearance => &self.appearance,
        }
    }
}

/// Construction parameters for [`FeaturePyramid::build`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Finest plane resolution `(H, W)`.
    pub plane_resolution: [usize; 2],
    /// Finest z-vector length; `None` derives it from the scene box.
    pub depth_resolution: Option<usize>,
    pub density_components: usize,
    pub appearance_components: usize,
    pub downsample_factors: Vec<usize>,
    pub init_scale: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            plane_resolution: [1024, 1024],
            depth_resolution: None,
            density_components: 8,
            appearance_components: 16,
            downsample_factors: vec![1, 4, 16],
            init_scale: 0.1,
        }
    }
}

/// z-vector length that keeps voxels roughly isotropic:
/// `base · z_extent / max(x_extent, y_extent)`, clamped to `[16, 256]`.
pub fn default_depth_resolution(plane_resolution: [usize; 2], aabb: &Aabb) -> usize {
    let e = aabb.extent();
    let base = plane_resolution[0].max(plane_resolution[1]) as f64;
    let d = (base * e[2] / e[0].max(e[1])).round() as usize;
    d.clamp(16, 256)
}

/// `(H, W, D)` of every level: planes divide exactly (floor, must stay ≥ 2),
/// z-vectors divide with floor and a minimum of 2.
pub fn level_resolutions(config: &PyramidConfig, aabb: &Aabb) -> Result<Vec<(usize, usize, usize)>> {
    let [h, w] = config.plane_resolution;
    let d = config
        .depth_resolution
        .unwrap_or_else(|| default_depth_resolution(config.plane_resolution, aabb));
    config
        .downsample_factors
        .iter()
        .map(|&f| {
            if f == 0 || h / f < 2 || w / f < 2 {
                return Err(Error::InvalidArgument(format!(
                    "plane resolution {h}x{w} too small for downsample factor {f}"
                )));
            }
            Ok((h / f, w / f, (d / f).max(2)))
        })
        .collect()
}

/// Multi-resolution density and appearance factors over a scene box.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<PyramidLevel<T>>,
    /// World-space box (already padded) mapped onto `[0,1]³`.
    pub aabb: Aabb,
}

impl<T: Real> FeaturePyramid<T> {
    /// Builds a pyramid with entries drawn i.i.d. from `U[-init_scale, init_scale]`.
    pub fn build(config: &PyramidConfig, aabb: Aabb, seed: u64) -> Result<Self> {
        if config.density_components == 0 || config.appearance_components == 0 {
            return Err(Error::InvalidArgument("component counts must be > 0".into()));
        }
        if config.downsample_factors.is_empty() || config.downsample_factors.contains(&0) {
            return Err(Error::InvalidArgument(
                "downsample factors must be non-empty and positive".into(),
            ));
        }
        let resolutions = level_resolutions(config, &aabb)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let mut uniform = |shape: &[usize]| -> Array<T> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.gen_range(-s..=s))).collect();
            Array::new(shape, data).expect("shape")
        };
        let mut levels = Vec::with_capacity(config.downsample_factors.len());
        for (l, (&f, (hl, wl, dl))) in config
            .downsample_factors
            .iter()
            .zip(resolutions)
            .enumerate()
        {
            let rs = config.density_components;
            let rc = config.appearance_components;
            let density = PlaneFactor::new(
                uniform(&[rs, hl, wl]),
                uniform(&[rs, dl]),
                &format!("level{l}.density"),
            )?;
            let appearance = PlaneFactor::new(
                uniform(&[rc, hl, wl]),
                uniform(&[rc, dl]),
                &format!("level{l}.appearance"),
            )?;
            levels.push(PyramidLevel {
                factor: f,
                density,
                appearance,
            });
        }
        Ok(FeaturePyramid { levels, aabb })
    }

    /// Feature vector length for one kind, summed over levels.
    pub fn feature_dim(&self, kind: FeatureKind) -> usize {
        self.levels.iter().map(|l| l.get(kind).channels()).sum()
    }

    /// `Σ_levels R·(H·W + D)` over both kinds.
    pub fn param_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.density.param_count() + l.appearance.param_count())
            .sum()
    }

    /// Values a dense `R×D×H×W` grid at the same resolutions would need.
    pub fn dense_param_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| {
                [&l.density, &l.appearance]
                    .iter()
                    .map(|f| {
                        let (h, w, d) = f.resolution();
                        f.channels() * h * w * d
                    })
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.levels
            .iter()
            .flat_map(|l| {
                [
                    &l.density.matrix,
                    &l.density.vector,
                    &l.appearance.matrix,
                    &l.appearance.vector,
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.levels
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.density.matrix,
                    &mut l.density.vector,
                    &mut l.appearance.matrix,
                    &mut l.appearance.vector,
                ]
            })
            .collect()
    }

    /// Inserts all factors into `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Result<BoundPyramid> {
        let mut density = Vec::new();
        let mut appearance = Vec::new();
        for l in &self.levels {
            density.push((
                l.density.matrix.bind(graph, trainable)?,
                l.density.vector.bind(graph, trainable)?,
            ));
            appearance.push((
                l.appearance.matrix.bind(graph, trainable)?,
                l.appearance.vector.bind(graph, trainable)?,
            ));
        }
        Ok(BoundPyramid {
            density,
            appearance,
        })
    }

    /// Graph-free feature lookup for a single normalized point.
    pub fn sample_point(&self, x: [f64; 3], kind: FeatureKind) -> Result<Vec<T>> {
        let points = Array::from_f64(&[1, 3], &x)?;
        let mut out = Vec::with_capacity(self.feature_dim(kind));
        for l in self.levels.iter().rev() {
            let f = l.get(kind);
            out.extend_from_slice(
                plane_features(&f.matrix.value, &f.vector.value, &points)?.data(),
            );
        }
        Ok(out)
    }
}

/// Graph handles of a pyramid's factors, `(matrix, vector)` per level.
#[derive(Clone, Debug)]
pub struct BoundPyramid {
    pub density: Vec<(Var, Var)>,
    pub appearance: Vec<(Var, Var)>,
}

impl BoundPyramid {
    pub fn factors(&self, kind: FeatureKind) -> &[(Var, Var)] {
        match kind {
            FeatureKind::Density => &self.density,
            FeatureKind::Appearance => &self.appearance,
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.density
            .iter()
            .zip(&self.appearance)
            .flat_map(|(d, a)| [d.0, d.1, a.0, a.1])
    }
}

/// Interpolation stencil along one axis with `n` lattice vertices.
#[derive(Clone, Copy)]
struct Stencil {
    i0: usize,
    t: f64,
}

fn stencil(u: f64, n: usize) -> Stencil {
    let f = u * (n - 1) as f64;
    let i0 = (f.floor() as usize).min(n - 2);
    Stencil {
        i0,
        t: f - i0 as f64,
    }
}

fn validate_points<T: Real>(points: &Array<T>) -> Result<usize> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("sample_features", format!("points {s:?}")));
    }
    for p in points.data() {
        let v = p.to_f64().unwrap_or(f64::NAN);
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "query point coordinate {v} outside the unit cube"
            )));
        }
    }
    Ok(s[0])
}

/// Per-point stencil: x along W, y along H, z along D.
fn stencils<T: Real>(points: &Array<T>, h: usize, w: usize, d: usize) -> Vec<[Stencil; 3]> {
    points
        .data()
        .chunks_exact(3)
        .map(|p| {
            let c = |a: usize| p[a].to_f64().unwrap_or(0.0);
            [stencil(c(0), w), stencil(c(1), h), stencil(c(2), d)]
        })
        .collect()
}

/// Samples one plane/vector factor at `N` normalized points, returning `N×R`.
pub fn plane_features<T: Real>(
    matrix: &Array<T>,
    vector: &Array<T>,
    points: &Array<T>,
) -> Result<Array<T>> {
    let n = validate_points(points)?;
    let (ms, vs) = (matrix.shape(), vector.shape());
    if ms.len() != 3 || vs.len() != 2 || ms[0] != vs[0] || ms[1] < 2 || ms[2] < 2 || vs[1] < 2 {
        return Err(Error::shape(
            "sample_features",
            format!("matrix {ms:?}, vector {vs:?}"),
        ));
    }
    let (r, h, w, d) = (ms[0], ms[1], ms[2], vs[1]);
    let m = matrix.data();
    let v = vector.data();
    let mut out = Vec::with_capacity(n * r);
    for [sx, sy, sz] in stencils(points, h, w, d) {
        let (tx, ty, tz) = (T::of(sx.t), T::of(sy.t), T::of(sz.t));
        let one = T::one();
        let w00 = (one - tx) * (one - ty);
        let w01 = tx * (one - ty);
        let w10 = (one - tx) * ty;
        let w11 = tx * ty;
        let base = sy.i0 * w + sx.i0;
        for c in 0..r {
            let mc = &m[c * h * w..];
            let bil = w00 * mc[base] + w01 * mc[base + 1] + w10 * mc[base + w] + w11 * mc[base + w + 1];
            let vc = &v[c * d..];
            let lin = (one - tz) * vc[sz.i0] + tz * vc[sz.i0 + 1];
            out.push(bil * lin);
        }
    }
    Array::new(&[n, r], out)
}

struct PlaneSampleOp;

impl<T: Real> CustomOp<T> for PlaneSampleOp {
    fn name(&self) -> &'static str {
        "sample_features"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Array<T>>>> {
        let (matrix, vector, points) = (inputs[0], inputs[1], inputs[2]);
        let ms = matrix.shape();
        let (r, h, w, d) = (ms[0], ms[1], ms[2], vector.shape()[1]);
        let m = matrix.data();
        let v = vector.data();
        let g = grad.data();
        let mut gm = needs[0].then(|| vec![T::zero(); m.len()]);
        let mut gv = needs[1].then(|| vec![T::zero(); v.len()]);
        let mut gp = needs[2].then(|| vec![T::zero(); points.len()]);
        let one = T::one();
        let (sw, sh, sd) = (T::of((w - 1) as f64), T::of((h - 1) as f64), T::of((d - 1) as f64));
        for (p, [sx, sy, sz]) in stencils(points, h, w, d).into_iter().enumerate() {
            let (tx, ty, tz) = (T::of(sx.t), T::of(sy.t), T::of(sz.t));
            let w00 = (one - tx) * (one - ty);
            let w01 = tx * (one - ty);
            let w10 = (one - tx) * ty;
            let w11 = tx * ty;
            let base = sy.i0 * w + sx.i0;
            for c in 0..r {
                let gc = g[p * r + c];
                let mo = c * h * w + base;
                let (m00, m01, m10, m11) = (m[mo], m[mo + 1], m[mo + w], m[mo + w + 1]);
                let vo = c * d + sz.i0;
                let (v0, v1) = (v[vo], v[vo + 1]);
                let bil = w00 * m00 + w01 * m01 + w10 * m10 + w11 * m11;
                let lin = (one - tz) * v0 + tz * v1;
                if let Some(gm) = gm.as_mut() {
                    let s = gc * lin;
                    gm[mo] = gm[mo] + s * w00;
                    gm[mo + 1] = gm[mo + 1] + s * w01;
                    gm[mo + w] = gm[mo + w] + s * w10;
                    gm[mo + w + 1] = gm[mo + w + 1] + s * w11;
                }
                if let Some(gv) = gv.as_mut() {
                    let s = gc * bil;
                    gv[vo] = gv[vo] + s * (one - tz);
                    gv[vo + 1] = gv[vo + 1] + s * tz;
                }
                if let Some(gp) = gp.as_mut() {
                    let dx = ((one - ty) * (m01 - m00) + ty * (m11 - m10)) * sw;
                    let dy = ((one - tx) * (m10 - m00) + tx * (m11 - m01)) * sh;
                    let dz = (v1 - v0) * sd;
                    gp[3 * p] = gp[3 * p] + gc * lin * dx;
                    gp[3 * p + 1] = gp[3 * p + 1] + gc * lin * dy;
                    gp[3 * p + 2] = gp[3 * p + 2] + gc * bil * dz;
                }
            }
        }
        Ok(vec![
            gm.map(|x| Array::new(matrix.shape(), x)).transpose()?,
            gv.map(|x| Array::new(vector.shape(), x)).transpose()?,
            gp.map(|x| Array::new(points.shape(), x)).transpose()?,
        ])
    }
}

/// Samples one factor inside a graph: `N×R`, differentiable w.r.t. the
/// matrix, the vector and the points.
pub fn sample_factor<T: Real>(
    graph: &mut Graph<T>,
    matrix: Var,
    vector: Var,
    points: Var,
) -> Result<Var> {
    let out = plane_features(graph.value(matrix), graph.value(vector), graph.value(points))?;
    graph.custom(&[matrix, vector, points], out, Box::new(PlaneSampleOp))
}

/// Concatenated multi-level features (`N × Σ R`) for points `N×3` in `[0,1]³`.
pub fn sample_features<T: Real>(
    graph: &mut Graph<T>,
    pyramid: &BoundPyramid,
    points: Var,
    kind: FeatureKind,
) -> Result<Var> {
    let mut parts = Vec::new();
    for &(m, v) in pyramid.factors(kind).iter().rev() {
        parts.push(sample_factor(graph, m, v, points)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    graph.concat(&parts, 1)
}

/// Materializes `out[r,k,j,i] = v[r,k] · M[r,j,i]` by explicit loops.
pub fn densify<T: Real>(factor: &PlaneFactor<T>) -> Result<Array<T>> {
    densify_with_cap(factor, DENSIFY_CAP)
}

pub fn densify_with_cap<T: Real>(factor: &PlaneFactor<T>, cap: usize) -> Result<Array<T>> {
    let r = factor.channels();
    let (h, w, d) = factor.resolution();
    let requested = r * d * h * w;
    if requested > cap {
        return Err(Error::SizeCap { requested, cap });
    }
    let m = factor.matrix.value.data();
    let v = factor.vector.value.data();
    let mut out = Vec::with_capacity(requested);
    for c in 0..r {
        for k in 0..d {
            for j in 0..h {
                for i in 0..w {
                    out.push(v[c * d + k] * m[c * h * w + j * w + i]);
                }
            }
        }
    }
    Array::new(&[r, d, h, w], out)
}

fn to_gray(values: &[f64], w: usize, h: usize) -> image::GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    image::GrayImage::from_fn(w as u32, h as u32, |i, j| {
        let v = values[j as usize * w + i as usize];
        let n = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        image::Luma([(n * 255.0).round() as u8])
    })
}

/// Min-max normalized grayscale image of channel `r` of a plane matrix.
pub fn plane_image<T: Real>(matrix: &Array<T>, r: usize) -> image::GrayImage {
    let s = matrix.shape();
    let (h, w) = (s[1], s[2]);
    let values: Vec<f64> = matrix.data()[r * h * w..(r + 1) * h * w]
        .iter()
        .map(|v| v.to_f64().unwrap_or(0.0))
        .collect();
    to_gray(&values, w, h)
}

/// Writes `level{l}_{kind}_{r:02}.png` for every level, kind and channel.
/// Returns the written paths.
pub fn export_plane_images<T: Real>(
    pyramid: &FeaturePyramid<T>,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (l, level) in pyramid.levels.iter().enumerate() {
        for kind in [FeatureKind::Density, FeatureKind::Appearance] {
            let f = level.get(kind);
            for r in 0..f.channels() {
                let path = dir.join(format!("level{l}_{}_{r:02}.png", kind.as_str()));
                plane_image(&f.matrix.value, r)
                    .save(&path)
                    .map_err(|e| Error::Image {
                        path: path.clone(),
                        source: e,
                    })?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factor(r: usize, h: usize, w: usize, d: usize, m: f64, v: f64) -> PlaneFactor<f64> {
        PlaneFactor::new(Array::full(&[r, h, w], m), Array::full(&[r, d], v), "t").unwrap()
    }

    #[test]
    fn constant_factors() {
        let f = factor(2, 3, 4, 5, 0.7, -2.0);
        let pts = Array::from_f64(&[2, 3], &[0.1, 0.9, 0.33, 1.0, 0.0, 0.5]).unwrap();
        let out = plane_features(&f.matrix.value, &f.vector.value, &pts).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        for &x in out.data() {
            assert!((x - (0.7 * -2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_at_lattice_vertices() {
        let (r, h, w, d) = (2, 3, 4, 5);
        let m: Vec<f64> = (0..r * h * w).map(|i| i as f64 * 0.1 - 1.0).collect();
        let v: Vec<f64> = (0..r * d).map(|i| 1.0 + i as f64 * 0.25).collect();
        let ma = Array::new(&[r, h, w], m.clone()).unwrap();
        let va = Array::new(&[r, d], v.clone()).unwrap();
        for (i, j, k) in [(0, 0, 0), (3, 2, 4), (1, 2, 3), (2, 1, 0)] {
            let p = [
                i as f64 / (w - 1) as f64,
                j as f64 / (h - 1) as f64,
                k as f64 / (d - 1) as f64,
            ];
            let pts = Array::from_f64(&[1, 3], &p).unwrap();
            let out = plane_features(&ma, &va, &pts).unwrap();
            for c in 0..r {
                let expected = m[c * h * w + j * w + i] * v[c * d + k];
                assert!((out.data()[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_points_outside_unit_cube() {
        let f = factor(1, 2, 2, 2, 1.0, 1.0);
        let pts = Array::from_f64(&[1, 3], &[0.5, 1.2, 0.5]).unwrap();
        assert!(plane_features(&f.matrix.value, &f.vector.value, &pts).is_err());
    }

    #[test]
    fn densify_hand_example() {
        let f = PlaneFactor::<f64>::new(
            Array::from_f64(&[1, 2, 2], &[1., 0., 0., 1.]).unwrap(),
            Array::from_f64(&[1, 2], &[1., 2.]).unwrap(),
            "t",
        )
        .unwrap();
        let g = densify(&f).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2, 2]);
        assert_eq!(g.data(), &[1., 0., 0., 1., 2., 0., 0., 2.]);
    }

    #[test]
    fn densify_zero_vector_and_channel_independence() {
        let z = factor(1, 3, 3, 4, 0.5, 0.0);
        assert!(densify(&z).unwrap().data().iter().all(|&x| x == 0.0));

        let m = Array::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let v = Array::from_f64(&[2, 2], &[1., -1., 2., 3.]).unwrap();
        let base = densify(&PlaneFactor::new(m.clone(), v.clone(), "t").unwrap()).unwrap();
        let mut m2 = m.clone();
        m2.data_mut()[4..].iter_mut().for_each(|x| *x *= 10.0);
        let mut v2 = v.clone();
        v2.data_mut()[2] = -7.0;
        let changed = densify(&PlaneFactor::new(m2, v2, "t").unwrap()).unwrap();
        // channel 0 untouched by edits to channel 1
        assert_eq!(base.data()[..8], changed.data()[..8]);
        assert_ne!(base.data()[8..], changed.data()[8..]);
    }

    #[test]
    fn densify_cap() {
        let f = factor(2, 8, 8, 8, 1.0, 1.0);
        assert!(matches!(
            densify_with_cap(&f, 1000),
            Err(Error::SizeCap { requested: 1024, cap: 1000 })
        ));
    }

    #[test]
    fn pyramid_defaults_and_resolutions() {
        let cfg = PyramidConfig {
            plane_resolution: [1024, 1024],
            depth_resolution: Some(64),
            ..Default::default()
        };
        let small = PyramidConfig {
            plane_resolution: [64, 64],
            depth_resolution: Some(64),
            ..cfg.clone()
        };
        let p = FeaturePyramid::<f32>::build(&small, Aabb::unit(), 1).unwrap();
        assert_eq!(p.levels.len(), 3);
        for l in &p.levels {
            assert_eq!(l.density.channels(), 8);
            assert_eq!(l.appearance.channels(), 16);
            assert_eq!(l.density.resolution(), l.appearance.resolution());
        }
        assert_eq!(p.levels[0].density.resolution(), (64, 64, 64));
        assert_eq!(p.levels[1].density.resolution(), (16, 16, 16));
        assert_eq!(p.levels[2].density.resolution(), (4, 4, 4));

        let res = level_resolutions(&cfg, &Aabb::unit()).unwrap();
        assert_eq!(res, vec![(1024, 1024, 64), (256, 256, 16), (64, 64, 4)]);
    }

    #[test]
    fn pyramid_rejects_tiny_resolution() {
        let cfg = PyramidConfig {
            plane_resolution: [16, 16],
            ..Default::default()
        };
        assert!(FeaturePyramid::<f32>::build(&cfg, Aabb::unit(), 0).is_err());
    }

    #[test]
    fn pyramid_is_seed_deterministic_and_bounded() {
        let cfg = PyramidConfig {
            plane_resolution: [32, 32],
            depth_resolution: Some(16),
            downsample_factors: vec![1, 4],
            ..Default::default()
        };
        let a = FeaturePyramid::<f32>::build(&cfg, Aabb::unit(), 9).unwrap();
        let b = FeaturePyramid::<f32>::build(&cfg, Aabb::unit(), 9).unwrap();
        let c = FeaturePyramid::<f32>::build(&cfg, Aabb::unit(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.params() {
            assert!(p.value.data().iter().all(|x| x.abs() <= 0.1));
        }
    }

    #[test]
    fn param_count_is_quadratic_not_cubic() {
        let cfg = PyramidConfig {
            plane_resolution: [64, 64],
            depth_resolution: Some(64),
            ..Default::default()
        };
        let p = FeaturePyramid::<f32>::build(&cfg, Aabb::unit(), 0).unwrap();
        let expected: usize = [(64, 64), (16, 16), (4, 4)]
            .iter()
            .map(|&(hw, d): &(usize, usize)| (8 + 16) * (hw * hw + d))
            .sum();
        assert_eq!(p.param_count(), expected);
        let dense: usize = [(64usize, 64usize), (16, 16), (4, 4)]
            .iter()
            .map(|&(hw, d)| 24 * hw * hw * d)
            .sum();
        assert_eq!(p.dense_param_count(), dense);
        assert!(p.param_count() * 32 < p.dense_param_count());
    }

    #[test]
    fn depth_resolution_rule() {
        let aabb = Aabb::new([0., 0., 0.], [10., 5., 1.]);
        assert_eq!(default_depth_resolution([64, 64], &aabb), 16);
        assert_eq!(default_depth_resolution([1024, 1024], &aabb), 102);
        let tall = Aabb::new([0., 0., 0.], [1., 1., 10.]);
        assert_eq!(default_depth_resolution([64, 64], &tall), 256);
    }

    #[test]
    fn plane_image_normalization() {
        let constant = Array::<f64>::full(&[1, 3, 4], 2.5);
        let img = plane_image(&constant, 0);
        assert!(img.pixels().all(|p| p.0[0] == 128));

        let m = Array::<f64>::from_f64(&[2, 2, 3], &[0., 1., 2., 3., 4., 5., 9., 9., 9., 9., 9., 10.])
            .unwrap();
        let img = plane_image(&m, 0);
        assert_eq!((img.width(), img.height()), (3, 2));
        // pixel (i, j) = normalized M[0, j, i]
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(2, 1).0[0], 255);
        assert_eq!(img.get_pixel(1, 0).0[0], 51);
        assert_eq!(plane_image(&m, 1).get_pixel(2, 1).0[0], 255);
    }

    #[test]
    fn export_counts() {
        let cfg = PyramidConfig {
            plane_resolution: [32, 32],
            depth_resolution: Some(16),
            ..Default::default()
        };
        let p = FeaturePyramid::<f32>::build(&cfg, Aabb::unit(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = export_plane_images(&p, dir.path()).unwrap();
        let density = written
            .iter()
            .filter(|p| p.to_string_lossy().contains("_density_"))
            .count();
        assert_eq!(density, 24);
        assert_eq!(written.len(), 24 + 48);
    }
}
