//! Cameras, ray generation, sample placement along rays and differentiable
//! alpha compositing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, CustomOp, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, Vec3};

/// Pinhole camera. Camera space looks down +z with x right and y down;
/// `c2w` is a row-major 4×4 camera-to-world matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub c2w: [f64; 16],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target` with world `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Camera {
        let forward = geometry::normalize(geometry::sub(target, eye));
        let right = geometry::normalize(geometry::cross(forward, up));
        let down = geometry::cross(forward, right);
        #[rustfmt::skip]
        let c2w = [
            right[0], down[0], forward[0], eye[0],
            right[1], down[1], forward[1], eye[1],
            right[2], down[2], forward[2], eye[2],
            0.0, 0.0, 0.0, 1.0,
        ];
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            c2w,
            near,
            far,
        }
    }

    pub fn origin(&self) -> Vec3 {
        [self.c2w[3], self.c2w[7], self.c2w[11]]
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let m = &self.c2w;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[4] * v[0] + m[5] * v[1] + m[6] * v[2],
            m[8] * v[0] + m[9] * v[1] + m[10] * v[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Camera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::Camera(format!(
                "need 0 <= near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("empty image".into()));
        }
        if self.c2w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Camera("non-finite pose".into()));
        }
        let m = &self.c2w;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Camera("last pose row must be [0, 0, 0, 1]".into()));
        }
        let cols: Vec<Vec3> = (0..3).map(|c| [m[c], m[4 + c], m[8 + c]]).collect();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (geometry::dot(cols[i], cols[j]) - expected).abs() > 1e-4 {
                    return Err(Error::Camera("rotation block is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// World-space ray through continuous pixel coordinates `(u, v)`.
    pub fn world_ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        (self.origin(), geometry::normalize(self.rotate(d_cam)))
    }

    /// World-space ray through the center of pixel `(i, j)`.
    pub fn pixel_ray(&self, i: usize, j: usize) -> (Vec3, Vec3) {
        self.world_ray(i as f64 + 0.5, j as f64 + 0.5)
    }
}

/// Ray in normalized scene coordinates (the scene box maps to `[0,1]³`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// The ray misses the unit cube within the camera's near/far range.
    pub empty: bool,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        geometry::add(self.origin, geometry::scale(self.dir, t))
    }
}

/// Maps a world ray into normalized coordinates of `aabb` and clips it to the
/// unit cube and to the world-space `[near, far]` range.
pub fn normalize_ray(aabb: &Aabb, origin: Vec3, dir: Vec3, near: f64, far: f64) -> Ray {
    let e = aabb.extent();
    let scaled = [dir[0] / e[0], dir[1] / e[1], dir[2] / e[2]];
    let speed = geometry::norm(scaled);
    let o = aabb.to_unit(origin);
    let d = geometry::scale(scaled, 1.0 / speed);
    let (lo, hi) = (near * speed, far * speed);
    match Aabb::unit().intersect(o, d) {
        Some((t0, t1)) if t0.max(lo) < t1.min(hi) => Ray {
            origin: o,
            dir: d,
            t_near: t0.max(lo),
            t_far: t1.min(hi),
            empty: false,
        },
        _ => Ray {
            origin: o,
            dir: d,
            t_near: 0.0,
            t_far: 1.0,
            empty: true,
        },
    }
}

/// Rays for the given `(i, j)` pixels of `camera`, in the normalized frame of `aabb`.
pub fn generate_rays(camera: &Camera, aabb: &Aabb, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    camera.validate()?;
    pixels
        .iter()
        .map(|&(i, j)| {
            if i >= camera.width || j >= camera.height {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({i}, {j}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            let (o, d) = camera.pixel_ray(i, j);
            Ok(normalize_ray(aabb, o, d, camera.near, camera.far))
        })
        .collect()
}

/// Independent, reproducible random stream for one ray.
pub fn ray_rng(seed: u64, ray_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray_id);
    rng
}

/// One sample per equal-width bin of `[t_near, t_far]`: at the bin center, or
/// uniformly inside the bin when `jitter` is given.
pub fn stratified_sample<R: Rng>(ray: &Ray, n: usize, jitter: Option<&mut R>) -> Result<Vec<f64>> {
    if ray.empty {
        return Err(Error::InvalidArgument("cannot sample an empty ray".into()));
    }
    Ok(stratified(ray.t_near, ray.t_far, n, jitter))
}

fn stratified<R: Rng>(lo: f64, hi: f64, n: usize, mut jitter: Option<&mut R>) -> Vec<f64> {
    let width = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let u = match jitter.as_deref_mut() {
                Some(rng) => rng.gen::<f64>(),
                None => 0.5,
            };
            lo + (i as f64 + u) * width
        })
        .collect()
}

/// Draws `n_fine` positions from the piecewise-constant density over the
/// coarse bins whose masses are `coarse_weights + floor` (normalized).
///
/// Bin edges are the ray bounds and the midpoints between consecutive coarse
/// samples. Falls back to jittered stratified sampling when every mass is zero.
pub fn grid_guided_sample<R: Rng>(
    ray: &Ray,
    coarse_ts: &[f64],
    coarse_weights: &[f64],
    n_fine: usize,
    floor: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if coarse_ts.len() != coarse_weights.len() || coarse_ts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} coarse samples but {} weights",
            coarse_ts.len(),
            coarse_weights.len()
        )));
    }
    if coarse_weights.iter().any(|&w| !(w >= 0.0)) || floor < 0.0 {
        return Err(Error::InvalidArgument("weights must be non-negative".into()));
    }
    let n = coarse_ts.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(ray.t_near);
    edges.extend(coarse_ts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(ray.t_far);

    let masses: Vec<f64> = coarse_weights.iter().map(|&w| w + floor).collect();
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Ok(stratified(ray.t_near, ray.t_far, n_fine, Some(rng)));
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &masses {
        acc += m / total;
        cdf.push(acc);
    }
    let mut out: Vec<f64> = (0..n_fine)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            // first bin whose upper CDF exceeds u; zero-mass bins are never chosen
            let mut bin = cdf[1..].partition_point(|&c| c <= u).min(n - 1);
            while masses[bin] == 0.0 && bin > 0 {
                bin -= 1;
            }
            let p = masses[bin] / total;
            let frac = ((u - cdf[bin]) / p).clamp(0.0, 1.0);
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Merges two sorted sample sets.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_by(f64::total_cmp);
    out
}

/// Composited result for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub transmittance: f64,
    pub depth: f64,
}

fn deltas(ts: &[f64], t_far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = ts.last() {
        d.push((t_far - last).max(0.0));
    }
    d
}

fn check_composite_inputs(sigmas: &[f64], n_colors: usize, ts: &[f64]) -> Result<()> {
    if sigmas.len() != ts.len() || n_colors != ts.len() {
        return Err(Error::InvalidArgument(format!(
            "composite: {} densities, {} colors, {} positions",
            sigmas.len(),
            n_colors,
            ts.len()
        )));
    }
    if ts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("composite: sample positions not sorted".into()));
    }
    if sigmas.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidArgument("composite: negative density".into()));
    }
    Ok(())
}

/// Alpha compositing along one ray:
/// `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i}(1 − α_j)`, `w_i = T_i α_i`,
/// `color = Σ w_i c_i + T_final · background`.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    ts: &[f64],
    t_far: f64,
    background: [f64; 3],
) -> Result<RenderOutput> {
    check_composite_inputs(sigmas, colors.len(), ts)?;
    let delta = deltas(ts, t_far);
    let mut optical = 0.0;
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut weights = Vec::with_capacity(ts.len());
    for i in 0..ts.len() {
        optical += sigmas[i] * delta[i];
        let t_next = (-optical).exp();
        let w = t - t_next;
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        depth += w * ts[i];
        weights.push(w);
        t = t_next;
    }
    for c in 0..3 {
        color[c] += t * background[c];
    }
    Ok(RenderOutput {
        color,
        weights,
        transmittance: t,
        depth,
    })
}

/// Compositing weights only, for building sampling densities.
pub fn composite_weights(sigmas: &[f64], ts: &[f64], t_far: f64) -> Vec<f64> {
    let delta = deltas(ts, t_far);
    let mut optical = 0.0;
    let mut t = 1.0;
    sigmas
        .iter()
        .zip(&delta)
        .map(|(&s, &d)| {
            optical += s * d;
            let t_next = (-optical).exp();
            let w = t - t_next;
            t = t_next;
            w
        })
        .collect()
}

struct CompositeOp {
    /// `R×S` sample spacings.
    deltas: Vec<f64>,
    samples: usize,
    background: [f64; 3],
}

impl CompositeOp {
    /// Per ray: transmittance before each sample (`S+1` values, last is final).
    fn transmittance(&self, sigma: &[f64]) -> Vec<f64> {
        let s = self.samples;
        let rays = sigma.len() / s.max(1);
        let mut out = Vec::with_capacity(rays * (s + 1));
        for r in 0..rays {
            let mut optical = 0.0;
            out.push(1.0);
            for i in 0..s {
                optical += sigma[r * s + i] * self.deltas[r * s + i];
                out.push((-optical).exp());
            }
        }
        out
    }
}

impl<T: Real> CustomOp<T> for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Array<T>>>> {
        let s = self.samples;
        let sigma: Vec<f64> = inputs[0].data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
        let rgb: Vec<f64> = inputs[1].data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
        let rays = sigma.len() / s.max(1);
        let trans = self.transmittance(&sigma);
        let g: Vec<f64> = grad.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
        let mut g_sigma = vec![T::zero(); sigma.len()];
        let mut g_rgb = vec![T::zero(); rgb.len()];
        for r in 0..rays {
            let tr = &trans[r * (s + 1)..(r + 1) * (s + 1)];
            let gr = [g[3 * r], g[3 * r + 1], g[3 * r + 2]];
            // suffix = Σ_{i>k} w_i c_i + T_final · bg, dotted with the output gradient
            let mut suffix: f64 = (0..3).map(|c| gr[c] * tr[s] * self.background[c]).sum();
            for k in (0..s).rev() {
                let idx = r * s + k;
                let w = tr[k] - tr[k + 1];
                let ck = &rgb[3 * idx..3 * idx + 3];
                let g_dot_c: f64 = (0..3).map(|c| gr[c] * ck[c]).sum();
                g_sigma[idx] = T::of(self.deltas[idx] * (tr[k + 1] * g_dot_c - suffix));
                for c in 0..3 {
                    g_rgb[3 * idx + c] = T::of(w * gr[c]);
                }
                suffix += w * g_dot_c;
            }
        }
        Ok(vec![
            needs[0]
                .then(|| Array::new(inputs[0].shape(), g_sigma))
                .transpose()?,
            needs[1]
                .then(|| Array::new(inputs[1].shape(), g_rgb))
                .transpose()?,
        ])
    }
}

/// Batched differentiable compositing. `sigma` is `R×S`, `rgb` is `R×S×3`,
/// `ts` holds `R·S` sorted positions and `t_far` one bound per ray.
/// Returns the `R×3` composited colors.
pub fn composite_graph<T: Real>(
    g: &mut Graph<T>,
    sigma: Var,
    rgb: Var,
    ts: &[f64],
    t_far: &[f64],
    background: [f64; 3],
) -> Result<Var> {
    let ss = g.shape(sigma).to_vec();
    let (rays, samples) = match ss.as_slice() {
        [r, s] => (*r, *s),
        other => return Err(Error::shape("composite", format!("sigma {other:?}"))),
    };
    if g.shape(rgb) != [rays, samples, 3] || ts.len() != rays * samples || t_far.len() != rays {
        return Err(Error::shape(
            "composite",
            format!("sigma {ss:?}, rgb {:?}, {} ts", g.shape(rgb), ts.len()),
        ));
    }
    let mut all_deltas = Vec::with_capacity(ts.len());
    for r in 0..rays {
        let row = &ts[r * samples..(r + 1) * samples];
        if row.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("composite: sample positions not sorted".into()));
        }
        all_deltas.extend(deltas(row, t_far[r]));
    }
    let sig: Vec<f64> = g.value(sigma).data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    if sig.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument("composite: negative density".into()));
    }
    let op = CompositeOp {
        deltas: all_deltas,
        samples,
        background,
    };
    let trans = op.transmittance(&sig);
    let colors = g.value(rgb).data();
    let mut out = Vec::with_capacity(rays * 3);
    for r in 0..rays {
        let tr = &trans[r * (samples + 1)..(r + 1) * (samples + 1)];
        for c in 0..3 {
            let mut acc = tr[samples] * background[c];
            for i in 0..samples {
                let w = tr[i] - tr[i + 1];
                acc += w * colors[3 * (r * samples + i) + c].to_f64().unwrap_or(0.0);
            }
            out.push(T::of(acc));
        }
    }
    let out = Array::new(&[rays, 3], out)?;
    g.custom(&[sigma, rgb], out, Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_camera(w: usize, h: usize) -> Camera {
        #[rustfmt::skip]
        let c2w = [
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ];
        Camera {
            fx: 50.0,
            fy: 50.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            c2w,
            near: 0.1,
            far: 10.0,
        }
    }

    #[test]
    fn principal_point_ray() {
        let cam = identity_camera(32, 24);
        let (o, d) = cam.world_ray(cam.cx, cam.cy);
        assert_eq!(o, [0.0; 3]);
        assert_eq!(d, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn translated_pose_shifts_origins_only() {
        let cam = identity_camera(8, 8);
        let mut moved = cam.clone();
        moved.c2w[3] = 1.0;
        for (i, j) in [(0, 0), (3, 5), (7, 7)] {
            let (o1, d1) = cam.pixel_ray(i, j);
            let (o2, d2) = moved.pixel_ray(i, j);
            assert_eq!(geometry::sub(o2, o1), [1.0, 0.0, 0.0]);
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn camera_convention_x_right_y_down() {
        let cam = identity_camera(8, 8);
        let (_, right) = cam.world_ray(8.0, 4.0);
        let (_, down) = cam.world_ray(4.0, 8.0);
        assert!(right[0] > 0.0 && right[1] == 0.0);
        assert!(down[1] > 0.0 && down[0] == 0.0);
    }

    #[test]
    fn parallel_ray_outside_box_is_empty() {
        let aabb = Aabb::unit();
        let r = normalize_ray(&aabb, [-1.0, 2.0, 0.5], [1.0, 0.0, 0.0], 0.0, 100.0);
        assert!(r.empty);
        let hit = normalize_ray(&aabb, [-1.0, 0.5, 0.5], [1.0, 0.0, 0.0], 0.0, 100.0);
        assert!(!hit.empty);
        assert!((hit.t_near - 1.0).abs() < 1e-12 && (hit.t_far - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_rays_are_unit_and_consistent() {
        let aabb = Aabb::new([-2.0, -1.0, 0.0], [2.0, 1.0, 0.5]);
        let origin = [0.3, -3.0, 2.0];
        let dir = geometry::normalize([0.1, 1.0, -0.6]);
        let r = normalize_ray(&aabb, origin, dir, 0.0, 100.0);
        assert!(!r.empty);
        assert!((geometry::norm(r.dir) - 1.0).abs() < 1e-12);
        // the normalized entry point maps back onto the world ray
        let entry = aabb.from_unit(r.at(r.t_near));
        let along = geometry::sub(entry, origin);
        let cross = geometry::cross(along, dir);
        assert!(geometry::norm(cross) < 1e-9);
        for p in [r.at(r.t_near), r.at(r.t_far)] {
            assert!(p.iter().all(|&c| (-1e-9..=1.0 + 1e-9).contains(&c)));
        }
    }

    #[test]
    fn near_far_limits_clip_the_segment() {
        let aabb = Aabb::unit();
        let r = normalize_ray(&aabb, [-1.0, 0.5, 0.5], [1.0, 0.0, 0.0], 1.25, 1.5);
        assert!((r.t_near - 1.25).abs() < 1e-12 && (r.t_far - 1.5).abs() < 1e-12);
        assert!(normalize_ray(&aabb, [-1.0, 0.5, 0.5], [1.0, 0.0, 0.0], 0.0, 0.5).empty);
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut cam = identity_camera(4, 4);
        cam.c2w[0] = 2.0;
        assert!(generate_rays(&cam, &Aabb::unit(), &[(0, 0)]).is_err());
        let mut cam = identity_camera(4, 4);
        cam.near = 5.0;
        cam.far = 5.0;
        assert!(cam.validate().is_err());
        let cam = identity_camera(4, 4);
        assert!(generate_rays(&cam, &Aabb::unit(), &[(4, 0)]).is_err());
    }

    fn unit_ray() -> Ray {
        Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: 1.0,
            empty: false,
        }
    }

    #[test]
    fn stratified_bin_centers() {
        let ts = stratified_sample::<ChaCha8Rng>(&unit_ray(), 2, None).unwrap();
        assert_eq!(ts, vec![0.25, 0.75]);
    }

    #[test]
    fn stratified_jitter_stays_in_bins() {
        let mut rng = ray_rng(3, 0);
        let ts = stratified_sample(&unit_ray(), 16, Some(&mut rng)).unwrap();
        for (i, t) in ts.iter().enumerate() {
            assert!(*t >= i as f64 / 16.0 && *t < (i + 1) as f64 / 16.0);
        }
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        let empty = Ray {
            empty: true,
            ..unit_ray()
        };
        assert!(stratified_sample::<ChaCha8Rng>(&empty, 4, None).is_err());
    }

    #[test]
    fn guided_delta_pdf() {
        let ray = unit_ray();
        let coarse = stratified_sample::<ChaCha8Rng>(&ray, 8, None).unwrap();
        let mut w = vec![0.0; 8];
        w[5] = 0.7;
        let mut rng = ray_rng(1, 1);
        let fine = grid_guided_sample(&ray, &coarse, &w, 500, 0.0, &mut rng).unwrap();
        assert!(fine.iter().all(|&t| (0.625..=0.75).contains(&t)));
    }

    #[test]
    fn guided_half_pdf() {
        let ray = unit_ray();
        let coarse = stratified_sample::<ChaCha8Rng>(&ray, 4, None).unwrap();
        let mut rng = ray_rng(2, 0);
        let fine =
            grid_guided_sample(&ray, &coarse, &[0.5, 0.5, 0.0, 0.0], 1000, 0.0, &mut rng).unwrap();
        assert!(fine.iter().all(|&t| (0.0..=0.5).contains(&t)));
        assert!(fine.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn guided_falls_back_when_weights_vanish() {
        let ray = unit_ray();
        let coarse = stratified_sample::<ChaCha8Rng>(&ray, 4, None).unwrap();
        let mut rng = ray_rng(2, 0);
        let fine = grid_guided_sample(&ray, &coarse, &[0.0; 4], 8, 0.0, &mut rng).unwrap();
        for (i, t) in fine.iter().enumerate() {
            assert!(*t >= i as f64 / 8.0 && *t < (i + 1) as f64 / 8.0);
        }
        assert!(grid_guided_sample(&ray, &coarse, &[0.0; 3], 8, 0.0, &mut rng).is_err());
    }

    #[test]
    fn composite_empty_space() {
        let out = composite(&[0.0], &[[1.0, 1.0, 1.0]], &[0.5], 1.0, [0.2, 0.3, 0.4]).unwrap();
        assert_eq!(out.color, [0.2, 0.3, 0.4]);
        assert_eq!(out.weights, vec![0.0]);
        assert_eq!(out.transmittance, 1.0);
    }

    #[test]
    fn composite_opaque_surface() {
        let out = composite(&[1e10], &[[1.0, 0.0, 0.0]], &[0.0], 1.0, [0.0; 3]).unwrap();
        assert!((out.color[0] - 1.0).abs() < 1e-9 && out.color[1] == 0.0);
        assert!((out.weights[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn composite_two_samples_hand_values() {
        let out = composite(
            &[1.0, 1.0],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &[0.0, 1.0],
            2.0,
            [0.0; 3],
        )
        .unwrap();
        assert!((out.color[0] - 0.6321).abs() < 5e-5);
        assert!((out.color[1] - 0.2325).abs() < 5e-5);
        assert_eq!(out.color[2], 0.0);
        assert!((out.transmittance - 0.1353).abs() < 5e-5);
    }

    #[test]
    fn composite_rejects_bad_input() {
        assert!(composite(&[1.0, 1.0], &[[0.0; 3]; 2], &[1.0, 0.5], 2.0, [0.0; 3]).is_err());
        assert!(composite(&[-1.0], &[[0.0; 3]], &[0.5], 2.0, [0.0; 3]).is_err());
        assert!(composite(&[1.0], &[[0.0; 3]; 2], &[0.5], 2.0, [0.0; 3]).is_err());
    }

    #[test]
    fn graph_composite_matches_scalar_version() {
        let sig = [0.3, 2.0, 0.0, 5.0, 1.0, 0.2];
        let rgb: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let ts = [0.1, 0.4, 0.5, 0.0, 0.2, 0.9];
        let t_far = [0.8, 1.0];
        let bg = [0.1, 0.2, 0.3];
        let mut g = Graph::<f64>::new();
        let s = g.constant(Array::new(&[2, 3], sig.to_vec()).unwrap()).unwrap();
        let c = g.constant(Array::new(&[2, 3, 3], rgb.clone()).unwrap()).unwrap();
        let out = composite_graph(&mut g, s, c, &ts, &t_far, bg).unwrap();
        for r in 0..2 {
            let colors: Vec<[f64; 3]> = (0..3)
                .map(|i| {
                    let o = 9 * r + 3 * i;
                    [rgb[o], rgb[o + 1], rgb[o + 2]]
                })
                .collect();
            let reference =
                composite(&sig[3 * r..3 * r + 3], &colors, &ts[3 * r..3 * r + 3], t_far[r], bg)
                    .unwrap();
            for k in 0..3 {
                assert!((g.value(out).data()[3 * r + k] - reference.color[k]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn conservation(sig in proptest::collection::vec(0.0f64..50.0, 1..20), gaps in proptest::collection::vec(0.0f64..0.5, 20)) {
            let mut ts = Vec::new();
            let mut t = 0.0;
            for g in gaps.iter().take(sig.len()) { ts.push(t); t += g; }
            let colors = vec![[0.5; 3]; sig.len()];
            let out = composite(&sig, &colors, &ts, t + 0.1, [0.0; 3]).unwrap();
            let total: f64 = out.weights.iter().sum::<f64>() + out.transmittance;
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((0.0..=1.0).contains(&out.transmittance));
        }

        #[test]
        fn more_density_never_less_opacity(sig in proptest::collection::vec(0.0f64..10.0, 1..12), k in 0usize..12, bump in 0.0f64..5.0) {
            let n = sig.len();
            let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            let colors = vec![[0.0; 3]; n];
            let base = composite(&sig, &colors, &ts, n as f64 * 0.1, [0.0; 3]).unwrap();
            let mut more = sig.clone();
            more[k % n] += bump;
            let bumped = composite(&more, &colors, &ts, n as f64 * 0.1, [0.0; 3]).unwrap();
            let sum = |o: &RenderOutput| o.weights.iter().sum::<f64>();
            prop_assert!(sum(&bumped) >= sum(&base) - 1e-12);
        }

        #[test]
        fn splitting_an_interval_is_invisible(sig in proptest::collection::vec(0.0f64..10.0, 2..10), k in 0usize..10, frac in 0.05f64..0.95) {
            let n = sig.len();
            let k = k % n;
            let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.2).collect();
            let t_far = n as f64 * 0.2;
            let colors: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 / n as f64, 0.5, 1.0 - i as f64 / n as f64]).collect();
            let bg = [0.3, 0.6, 0.9];
            let base = composite(&sig, &colors, &ts, t_far, bg).unwrap();
            let end = if k + 1 < n { ts[k + 1] } else { t_far };
            let mut ts2 = ts.clone();
            ts2.insert(k + 1, ts[k] + frac * (end - ts[k]));
            let mut sig2 = sig.clone();
            sig2.insert(k + 1, sig[k]);
            let mut col2 = colors.clone();
            col2.insert(k + 1, colors[k]);
            let split = composite(&sig2, &col2, &ts2, t_far, bg).unwrap();
            for c in 0..3 {
                prop_assert!((split.color[c] - base.color[c]).abs() < 1e-6);
            }
        }

        #[test]
        fn guided_samples_within_bounds(w in proptest::collection::vec(0.0f64..1.0, 1..16), seed in any::<u64>(), lo in 0.0f64..1.0, len in 0.01f64..2.0) {
            let ray = Ray { origin: [0.0; 3], dir: [1.0, 0.0, 0.0], t_near: lo, t_far: lo + len, empty: false };
            let coarse = stratified_sample::<ChaCha8Rng>(&ray, w.len(), None).unwrap();
            let mut rng = ray_rng(seed, 0);
            let fine = grid_guided_sample(&ray, &coarse, &w, 32, 0.01, &mut rng).unwrap();
            prop_assert!(fine.iter().all(|&t| t >= ray.t_near && t <= ray.t_far));
            prop_assert!(fine.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
