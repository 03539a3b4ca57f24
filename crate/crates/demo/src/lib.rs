//! Browser demo: three small interactive views of the renderer internals.
//!
//! * an exact render of a procedural box city from an orbiting camera,
//! * the transmittance/weight profile of a density bump along one ray,
//! * where grid-guided sampling puts its fine samples for that bump.
//!
//! The plain Rust functions are what the tests exercise; the `wasm_*`
//! wrappers are the JavaScript surface.

use gridnerf::geometry::Aabb;
use gridnerf::render::{composite, composite_weights, grid_guided_sample, Camera, Ray};
use gridnerf::scene::{generate_synthetic_scene, oracle_render, SyntheticScene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// RGBA bytes (`size×size×4`) of a box city seen from the given orbit angles.
pub fn render_city(
    boxes: usize,
    seed: u64,
    azimuth_deg: f64,
    elevation_deg: f64,
    size: usize,
) -> Result<Vec<u8>, String> {
    let extents = SyntheticScene::default_extents();
    let scene = generate_synthetic_scene(boxes, seed, extents).map_err(|e| e.to_string())?;
    let camera = orbit_camera(&extents, azimuth_deg, elevation_deg, size);
    let img = oracle_render(&scene, &camera);
    Ok(img
        .to_rgb8()
        .pixels()
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect())
}

fn orbit_camera(extents: &Aabb, azimuth_deg: f64, elevation_deg: f64, size: usize) -> Camera {
    let e = extents.extent();
    let center = [0.0, 0.0, extents.min[2] + 0.25 * e[2]];
    let r = 1.6 * e[0].max(e[1]);
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.clamp(5.0, 89.0).to_radians());
    let eye = [
        center[0] + r * el.cos() * az.cos(),
        center[1] + r * el.cos() * az.sin(),
        center[2] + r * el.sin(),
    ];
    let focal = 0.5 * size as f64 / 25f64.to_radians().tan();
    Camera::look_at(eye, center, [0.0, 0.0, 1.0], focal, size, size, 0.05, 4.0 * r)
}

/// Gaussian density bump on `[0, 1]` sampled at `n` bin centers.
fn bump(peak: f64, center: f64, width: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let w = width.max(1e-3);
    let sigma = ts
        .iter()
        .map(|t| peak.max(0.0) * (-0.5 * ((t - center) / w).powi(2)).exp())
        .collect();
    (ts, sigma)
}

/// Per-sample `(t, σ, weight, transmittance before the sample)` rows,
/// flattened, for a density bump along a unit-length ray.
pub fn composite_profile(peak: f64, center: f64, width: f64, n: usize) -> Result<Vec<f64>, String> {
    let n = n.max(1);
    let (ts, sigma) = bump(peak, center, width, n);
    let colors = vec![[1.0, 1.0, 1.0]; n];
    let out = composite(&sigma, &colors, &ts, 1.0, [0.0; 3]).map_err(|e| e.to_string())?;
    let mut rows = Vec::with_capacity(4 * n);
    let mut before = 1.0;
    for i in 0..n {
        rows.extend([ts[i], sigma[i], out.weights[i], before]);
        before -= out.weights[i];
    }
    Ok(rows)
}

/// Histogram (`bins` equal cells of `[0, 1]`) of `n_fine` guided samples
/// drawn from the coarse weights of a density bump.
pub fn guided_histogram(
    peak: f64,
    center: f64,
    width: f64,
    floor: f64,
    n_coarse: usize,
    n_fine: usize,
    bins: usize,
    seed: u64,
) -> Result<Vec<u32>, String> {
    let n_coarse = n_coarse.max(1);
    let bins = bins.max(1);
    let (ts, sigma) = bump(peak, center, width, n_coarse);
    let weights = composite_weights(&sigma, &ts, 1.0);
    let ray = Ray {
        origin: [0.0; 3],
        dir: [0.0, 0.0, 1.0],
        t_near: 0.0,
        t_far: 1.0,
        empty: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = grid_guided_sample(&ray, &ts, &weights, n_fine, floor.max(0.0), &mut rng)
        .map_err(|e| e.to_string())?;
    let mut hist = vec![0u32; bins];
    for t in fine {
        hist[((t * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(hist)
}

#[wasm_bindgen]
pub fn wasm_render_city(
    boxes: u32,
    seed: u32,
    azimuth_deg: f64,
    elevation_deg: f64,
    size: u32,
) -> Result<Vec<u8>, JsValue> {
    render_city(boxes as usize, seed as u64, azimuth_deg, elevation_deg, size as usize)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn wasm_composite_profile(peak: f64, center: f64, width: f64, n: u32) -> Result<Vec<f64>, JsValue> {
    composite_profile(peak, center, width, n as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn wasm_guided_histogram(
    peak: f64,
    center: f64,
    width: f64,
    floor: f64,
    n_coarse: u32,
    n_fine: u32,
    bins: u32,
    seed: u32,
) -> Result<Vec<u32>, JsValue> {
    guided_histogram(
        peak,
        center,
        width,
        floor,
        n_coarse as usize,
        n_fine as usize,
        bins as usize,
        seed as u64,
    )
    .map_err(|e| JsValue::from_str(&e))
}
