//! The two-branch model (feature pyramid, grid heads, optional NeRF branch)
//! and the batched forward pass shared by training, rendering and gradient
//! checks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Checkpoint, Graph, Param, Real, Record, Var};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::grid::{sample_features, BoundPyramid, FeatureKind, FeaturePyramid, PyramidConfig};
use crate::heads::{
    grid_branch_eval, nerf_branch_eval, BoundGridHeads, BoundLinear, BoundNerfBranch, GridHeads,
    HeadConfig, NerfBranch,
};
use crate::metrics::Image;
use crate::render::{
    composite_graph, composite_weights, generate_rays, grid_guided_sample, merge_sorted, ray_rng,
    stratified_sample, Camera, Ray,
};

/// Architecture of the field: pyramid layout and head sizes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub heads: HeadConfig,
}

/// Per-ray sample budget and compositing background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Uniform mass added to every coarse weight before building the fine PDF.
    pub guide_floor: f64,
    pub background: [f64; 3],
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_coarse: 64,
            n_fine: 128,
            guide_floor: 0.01,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Grid,
    Nerf,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Grid => "grid",
            Branch::Nerf => "nerf",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Branch::Grid),
            "nerf" => Ok(Branch::Nerf),
            other => Err(Error::InvalidArgument(format!(
                "unknown branch '{other}' (expected grid or nerf)"
            ))),
        }
    }
}

const NERF_SEED_OFFSET: u64 = 0x6e65_7266;
const HEAD_SEED_OFFSET: u64 = 0x6865_6164;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub pyramid: FeaturePyramid<T>,
    pub grid_heads: GridHeads<T>,
    /// Absent until the joint stage starts.
    pub nerf: Option<NerfBranch<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh grid branch over `aabb` (the padded box mapped onto `[0,1]³`).
    pub fn new(config: &ModelConfig, aabb: Aabb, seed: u64) -> Result<Self> {
        let pyramid = FeaturePyramid::build(&config.pyramid, aabb, seed)?;
        let grid_heads = GridHeads::new(
            pyramid.feature_dim(FeatureKind::Density),
            pyramid.feature_dim(FeatureKind::Appearance),
            &config.heads,
            seed.wrapping_add(HEAD_SEED_OFFSET),
        );
        Ok(Model {
            config: config.clone(),
            pyramid,
            grid_heads,
            nerf: None,
        })
    }

    pub fn aabb(&self) -> &Aabb {
        &self.pyramid.aabb
    }

    /// Creates the NeRF branch if it does not exist yet.
    pub fn init_nerf(&mut self, seed: u64) {
        if self.nerf.is_none() {
            self.nerf = Some(NerfBranch::new(
                self.pyramid.feature_dim(FeatureKind::Density),
                self.pyramid.feature_dim(FeatureKind::Appearance),
                &self.config.heads,
                seed.wrapping_add(NERF_SEED_OFFSET),
            ));
        }
    }

    /// All parameters: pyramid, grid heads, then NeRF branch.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.pyramid.params();
        p.extend(self.grid_heads.params());
        if let Some(n) = &self.nerf {
            p.extend(n.params());
        }
        p
    }

    /// Same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.pyramid.params_mut();
        p.extend(self.grid_heads.params_mut());
        if let Some(n) = &mut self.nerf {
            p.extend(n.params_mut());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, opts: BindOptions) -> Result<BoundModel> {
        let pyramid = self.pyramid.bind(g, opts.planes_trainable)?;
        let grid_heads = self.grid_heads.bind(g, opts.mlps_trainable)?;
        let nerf = match (&self.nerf, opts.with_nerf) {
            (Some(n), true) => Some(n.bind(g, opts.mlps_trainable)?),
            (None, true) => return Err(Error::NerfUninitialized),
            _ => None,
        };
        Ok(BoundModel {
            pyramid,
            grid_heads,
            nerf,
            density_dim: self.pyramid.feature_dim(FeatureKind::Density),
            appearance_dim: self.pyramid.feature_dim(FeatureKind::Appearance),
            zero_nerf_features: opts.zero_nerf_features,
        })
    }

    /// Writes every parameter (with optimizer state) plus the architecture.
    pub fn save(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.push(Record::text("meta.model", serde_json::to_string(&self.config)?));
        let a = self.aabb();
        let corners = Array::<f64>::new(&[2, 3], [a.min, a.max].concat())?;
        ck.push(Record::array("meta.aabb", &corners));
        for p in self.params() {
            p.save(ck);
        }
        Ok(())
    }

    /// Rebuilds a model from [`Model::save`] output. The NeRF branch is
    /// restored only when the checkpoint contains it.
    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = match &ck.require("meta.model")?.payload {
            crate::autodiff::Payload::Utf8(s) => serde_json::from_str(s)?,
            _ => return Err(Error::Checkpoint("meta.model is not text".into())),
        };
        let corners = ck.require("meta.aabb")?.to_array::<f64>()?;
        if corners.shape() != [2, 3] {
            return Err(Error::Checkpoint("meta.aabb must be 2×3".into()));
        }
        let c = corners.data();
        let aabb = Aabb::new([c[0], c[1], c[2]], [c[3], c[4], c[5]]);
        let mut model = Model::new(&config, aabb, 0)?;
        if ck.has_prefix("nerf_branch.") {
            model.init_nerf(0);
        }
        for p in model.params_mut() {
            p.load(ck)?;
        }
        Ok(model)
    }
}

/// How the model enters a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BindOptions {
    pub planes_trainable: bool,
    pub mlps_trainable: bool,
    pub with_nerf: bool,
    /// Feed zeros instead of grid features to the NeRF branch (PE-only ablation).
    pub zero_nerf_features: bool,
}

impl BindOptions {
    pub fn inference(with_nerf: bool) -> Self {
        BindOptions {
            planes_trainable: false,
            mlps_trainable: false,
            with_nerf,
            zero_nerf_features: false,
        }
    }
}

pub struct BoundModel {
    pub pyramid: BoundPyramid,
    pub grid_heads: BoundGridHeads,
    pub nerf: Option<BoundNerfBranch>,
    density_dim: usize,
    appearance_dim: usize,
    zero_nerf_features: bool,
}

fn linear_vars(l: &BoundLinear) -> [Var; 2] {
    [l.weight, l.bias]
}

impl BoundModel {
    /// Graph handles aligned with [`Model::params`] of the bound model.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.pyramid.vars().collect();
        v.extend(self.grid_heads.density.iter().flat_map(linear_vars));
        v.extend(self.grid_heads.color.iter().flat_map(linear_vars));
        if let Some(n) = &self.nerf {
            v.extend(n.trunk.iter().flat_map(linear_vars));
            v.extend(linear_vars(&n.sigma));
            v.extend(linear_vars(&n.color));
        }
        v
    }
}

/// Sample placement for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions<'a> {
    pub sampling: &'a SamplingConfig,
    /// Jitter coarse samples inside their bins (training).
    pub jitter: bool,
    /// Seed of the per-ray random streams (jitter and guided sampling).
    pub seed: u64,
    /// NeRF-branch positions (`R×(n_coarse+n_fine)`, sorted per ray) to use
    /// instead of drawing guided samples; lets a caller hold them fixed.
    pub nerf_ts: Option<&'a [f64]>,
}

/// Composited output of one branch for `R` rays.
pub struct BranchOutput {
    /// `R×3` composited colors.
    pub color: Var,
    /// `R×S` sample positions.
    pub ts: Vec<f64>,
    /// `R×S` compositing weights, detached.
    pub weights: Vec<f64>,
    pub samples: usize,
}

fn clamp_unit(p: Vec3) -> Vec3 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)]
}

fn points_and_dirs<T: Real>(
    g: &mut Graph<T>,
    rays: &[Ray],
    ts: &[f64],
    samples: usize,
) -> Result<(Var, Var)> {
    let mut pts = Vec::with_capacity(ts.len() * 3);
    let mut dirs = Vec::with_capacity(ts.len() * 3);
    for (r, ray) in rays.iter().enumerate() {
        for &t in &ts[r * samples..(r + 1) * samples] {
            pts.extend(clamp_unit(ray.at(t)));
            dirs.extend(ray.dir);
        }
    }
    let n = ts.len();
    let p = g.constant(Array::from_f64(&[n, 3], &pts)?)?;
    let d = g.constant(Array::from_f64(&[n, 3], &dirs)?)?;
    Ok((p, d))
}

fn detached_weights<T: Real>(
    g: &Graph<T>,
    sigma: Var,
    ts: &[f64],
    rays: &[Ray],
    samples: usize,
) -> Vec<f64> {
    let s: Vec<f64> = g
        .value(sigma)
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(0.0))
        .collect();
    let mut out = Vec::with_capacity(ts.len());
    for (r, ray) in rays.iter().enumerate() {
        let span = r * samples..(r + 1) * samples;
        out.extend(composite_weights(&s[span.clone()], &ts[span], ray.t_far));
    }
    out
}

/// Renders non-empty `rays` through the grid branch and, when the NeRF branch
/// is bound, through the NeRF branch at the union of coarse and guided
/// samples. `ray_ids` index the per-ray random streams.
pub fn forward_rays<T: Real>(
    g: &mut Graph<T>,
    model: &BoundModel,
    rays: &[Ray],
    ray_ids: &[u64],
    opts: SampleOptions,
) -> Result<(BranchOutput, Option<BranchOutput>)> {
    if rays.len() != ray_ids.len() {
        return Err(Error::shape(
            "forward_rays",
            format!("{} rays, {} ids", rays.len(), ray_ids.len()),
        ));
    }
    if let Some(r) = rays.iter().position(|r| r.empty) {
        return Err(Error::InvalidArgument(format!(
            "ray {r} misses the scene box; cull empty rays first"
        )));
    }
    let sc = opts.sampling;
    let nc = sc.n_coarse;
    if nc == 0 {
        return Err(Error::InvalidArgument("n_coarse must be at least 1".into()));
    }
    let mut rngs: Vec<_> = ray_ids.iter().map(|&id| ray_rng(opts.seed, id)).collect();
    let mut coarse = Vec::with_capacity(rays.len() * nc);
    for (ray, rng) in rays.iter().zip(rngs.iter_mut()) {
        let jitter = if opts.jitter { Some(rng) } else { None };
        coarse.extend(stratified_sample(ray, nc, jitter)?);
    }
    let t_far: Vec<f64> = rays.iter().map(|r| r.t_far).collect();
    let n = rays.len();

    let (pts, dirs) = points_and_dirs(g, rays, &coarse, nc)?;
    let dfeat = sample_features(g, &model.pyramid, pts, FeatureKind::Density)?;
    let afeat = sample_features(g, &model.pyramid, pts, FeatureKind::Appearance)?;
    let (sigma, rgb) = grid_branch_eval(g, &model.grid_heads, dfeat, afeat, dirs)?;
    let sigma = g.reshape(sigma, &[n, nc])?;
    let rgb = g.reshape(rgb, &[n, nc, 3])?;
    let color = composite_graph(g, sigma, rgb, &coarse, &t_far, sc.background)?;
    let weights = detached_weights(g, sigma, &coarse, rays, nc);
    let grid = BranchOutput {
        color,
        ts: coarse,
        weights,
        samples: nc,
    };

    let Some(net) = &model.nerf else {
        return Ok((grid, None));
    };
    let ns = nc + sc.n_fine;
    let mut union = Vec::with_capacity(n * ns);
    if let Some(fixed) = opts.nerf_ts {
        if fixed.len() != n * ns {
            return Err(Error::shape(
                "forward_rays",
                format!("{} fixed positions for {n}×{ns}", fixed.len()),
            ));
        }
        union.extend_from_slice(fixed);
    } else {
        for (r, (ray, rng)) in rays.iter().zip(rngs.iter_mut()).enumerate() {
            let span = r * nc..(r + 1) * nc;
            let fine = grid_guided_sample(
                ray,
                &grid.ts[span.clone()],
                &grid.weights[span.clone()],
                sc.n_fine,
                sc.guide_floor,
                rng,
            )?;
            union.extend(merge_sorted(&grid.ts[span], &fine));
        }
    }
    let (pts, dirs) = points_and_dirs(g, rays, &union, ns)?;
    let (dfeat, afeat) = if model.zero_nerf_features {
        (
            g.constant(Array::zeros(&[n * ns, model.density_dim]))?,
            g.constant(Array::zeros(&[n * ns, model.appearance_dim]))?,
        )
    } else {
        (
            sample_features(g, &model.pyramid, pts, FeatureKind::Density)?,
            sample_features(g, &model.pyramid, pts, FeatureKind::Appearance)?,
        )
    };
    let (sigma, rgb) = nerf_branch_eval(g, net, dfeat, afeat, pts, dirs)?;
    let sigma = g.reshape(sigma, &[n, ns])?;
    let rgb = g.reshape(rgb, &[n, ns, 3])?;
    let color = composite_graph(g, sigma, rgb, &union, &t_far, sc.background)?;
    let weights = detached_weights(g, sigma, &union, rays, ns);
    Ok((
        grid,
        Some(BranchOutput {
            color,
            ts: union,
            weights,
            samples: ns,
        }),
    ))
}

/// `Σ_rays Σ_rgb (pred − target)² / normalizer` as a graph node. `targets`
/// holds one rgb triple per row of `pred`.
pub fn squared_error_sum<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[[f64; 3]],
    normalizer: f64,
) -> Result<Var> {
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let t = g.constant(Array::from_f64(&[targets.len(), 3], &flat)?)?;
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.scale(s, T::of(1.0 / normalizer))
}

/// Mean over rays of the per-ray squared error summed over rgb.
pub fn mse_pixel_loss(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "mse_pixel_loss",
            format!("{} predictions, {} targets", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Colors of `rays` through both branches without gradient tracking.
/// Empty rays get the background. The NeRF result is `None` when
/// `with_nerf` is false.
pub fn render_rays<T: Real>(
    model: &Model<T>,
    rays: &[Ray],
    ray_ids: &[u64],
    with_nerf: bool,
    sampling: &SamplingConfig,
    seed: u64,
    chunk: usize,
) -> Result<(Vec<[f64; 3]>, Option<Vec<[f64; 3]>>)> {
    if with_nerf && model.nerf.is_none() {
        return Err(Error::NerfUninitialized);
    }
    let bg = sampling.background;
    let mut grid = vec![bg; rays.len()];
    let mut nerf = with_nerf.then(|| vec![bg; rays.len()]);
    let live: Vec<usize> = (0..rays.len()).filter(|&i| !rays[i].empty).collect();
    let opts = SampleOptions {
        sampling,
        jitter: false,
        seed,
        nerf_ts: None,
    };
    for part in live.chunks(chunk.max(1)) {
        let sub: Vec<Ray> = part.iter().map(|&i| rays[i]).collect();
        let ids: Vec<u64> = part.iter().map(|&i| ray_ids[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, BindOptions::inference(with_nerf))?;
        let (gout, nout) = forward_rays(&mut g, &bound, &sub, &ids, opts)?;
        scatter(&g, gout.color, part, &mut grid);
        if let (Some(n), Some(dst)) = (nout, nerf.as_mut()) {
            scatter(&g, n.color, part, dst);
        }
    }
    Ok((grid, nerf))
}

fn scatter<T: Real>(g: &Graph<T>, color: Var, idx: &[usize], dst: &mut [[f64; 3]]) {
    for (k, px) in g.value(color).data().chunks_exact(3).enumerate() {
        dst[idx[k]] = [
            px[0].to_f64().unwrap_or(0.0),
            px[1].to_f64().unwrap_or(0.0),
            px[2].to_f64().unwrap_or(0.0),
        ];
    }
}

/// Renders a full image through `branch`.
pub fn render_image<T: Real>(
    model: &Model<T>,
    camera: &Camera,
    branch: Branch,
    sampling: &SamplingConfig,
    seed: u64,
    chunk: usize,
) -> Result<Image> {
    let pixels: Vec<(usize, usize)> = (0..camera.height)
        .flat_map(|j| (0..camera.width).map(move |i| (i, j)))
        .collect();
    let rays = generate_rays(camera, model.aabb(), &pixels)?;
    let ids: Vec<u64> = (0..rays.len() as u64).collect();
    let with_nerf = branch == Branch::Nerf;
    let (grid, nerf) = render_rays(model, &rays, &ids, with_nerf, sampling, seed, chunk)?;
    let colors = match branch {
        Branch::Grid => grid,
        Branch::Nerf => nerf.ok_or(Error::NerfUninitialized)?,
    };
    let mut img = Image::new(camera.width, camera.height);
    for (k, &(i, j)) in pixels.iter().enumerate() {
        img.set_pixel(i, j, colors[k].map(|c| c.clamp(0.0, 1.0)));
    }
    Ok(img)
}
