//! Two-stage optimization: grid-branch pretraining, then joint training of
//! both branches on a weighted sum of their reconstruction losses.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Checkpoint, Graph, ParamGroup, Payload, Record};
use crate::error::{Error, Result};
use crate::model::{
    forward_rays, squared_error_sum, BindOptions, Model, ModelConfig, SampleOptions,
    SamplingConfig,
};
use crate::render::{generate_rays, Ray};
use crate::scene::{SceneDataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub grid: f64,
    pub nerf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            grid: 1.0,
            nerf: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub joint_iters: usize,
    pub batch_rays: usize,
    /// Rays per independent sub-graph. Gradients are reduced over chunks in
    /// a fixed order, so results do not depend on the thread count.
    pub chunk_rays: usize,
    pub lr_planes: f64,
    pub lr_mlp: f64,
    /// Learning rates decay exponentially to `lr · lr_decay_factor` at the
    /// last iteration.
    pub lr_decay_factor: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Keep the pyramid fixed during the joint stage.
    pub freeze_grid_features: bool,
    /// Feed zeros instead of grid features to the NeRF branch.
    pub zero_grid_features_in_nerf: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_iters: 10_000,
            joint_iters: 100_000,
            batch_rays: 4096,
            chunk_rays: 1024,
            lr_planes: 0.02,
            lr_mlp: 0.01,
            lr_decay_factor: 0.1,
            loss_weights: LossWeights::default(),
            seed: 0,
            model: ModelConfig::default(),
            sampling: SamplingConfig::default(),
            checkpoint_every: 10_000,
            log_every: 100,
            freeze_grid_features: false,
            zero_grid_features_in_nerf: false,
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.pretrain_iters + self.joint_iters
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_rays == 0 || self.chunk_rays == 0 {
            return bad("batch_rays and chunk_rays must be at least 1");
        }
        if !(self.loss_weights.grid >= 0.0 && self.loss_weights.nerf >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr_planes > 0.0 && self.lr_mlp > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must be in (0, 1]");
        }
        if self.sampling.n_coarse == 0 {
            return bad("sampling.n_coarse must be at least 1");
        }
        if !(self.sampling.guide_floor >= 0.0) {
            return bad("sampling.guide_floor must be non-negative");
        }
        Ok(())
    }

    /// Learning rate of `group` at global iteration `it`.
    pub fn learning_rate(&self, group: ParamGroup, it: usize) -> f64 {
        let base = match group {
            ParamGroup::Planes => self.lr_planes,
            ParamGroup::Mlp => self.lr_mlp,
        };
        let total = self.total_iters().max(1) as f64;
        base * self.lr_decay_factor.powf(it as f64 / total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Joint => "joint",
        }
    }
}

/// Losses of one optimizer step (already including empty rays).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub grid: f64,
    pub nerf: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub stage: Stage,
    pub losses: StepLosses,
    pub elapsed_s: f64,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        let nerf = self
            .losses
            .nerf
            .map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
        format!(
            "iter={} stage={} grid_loss={:.6e} nerf_loss={} total={:.6e} time_s={:.3}",
            self.iteration,
            self.stage.as_str(),
            self.losses.grid,
            nerf,
            self.losses.total,
            self.elapsed_s
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub entries: Vec<LogEntry>,
    pub summary: Vec<(String, f64)>,
}

impl TrainReport {
    pub fn summary_line(&self) -> String {
        let mut s = String::from("summary");
        for (k, v) in &self.summary {
            let _ = write!(s, " {k}={v}");
        }
        s
    }
}

/// Every training pixel as a normalized ray with its target color.
#[derive(Clone, Debug)]
pub struct RayTable {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
}

impl RayTable {
    pub fn from_dataset(ds: &SceneDataset, split: Split) -> Result<Self> {
        let mut rays = Vec::new();
        let mut targets = Vec::new();
        for f in ds.split(split) {
            let cam = &f.camera;
            let px: Vec<(usize, usize)> = (0..cam.height)
                .flat_map(|j| (0..cam.width).map(move |i| (i, j)))
                .collect();
            rays.extend(generate_rays(cam, &ds.normalized_box, &px)?);
            targets.extend(px.iter().map(|&(i, j)| f.image.pixel(i, j)));
        }
        if rays.is_empty() {
            return Err(Error::Dataset(format!("no {split:?} rays in dataset")));
        }
        Ok(RayTable { rays, targets })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    rng.set_stream(epoch);
    let mut p: Vec<u32> = (0..n as u32).collect();
    p.shuffle(&mut rng);
    p
}

struct ChunkResult {
    grads: Vec<Option<Array<f32>>>,
    grid_loss: f64,
    nerf_loss: f64,
}

/// Optimizer loop over a [`RayTable`].
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    /// Global iteration: pretrain steps are `0..pretrain_iters`, joint steps follow.
    pub iteration: usize,
    data: RayTable,
    perm: Option<(u64, Vec<u32>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &SceneDataset) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, dataset.normalized_box, config.seed)?;
        Self::with_model(config, model, 0, dataset)
    }

    pub fn with_model(
        config: TrainConfig,
        model: Model<f32>,
        iteration: usize,
        dataset: &SceneDataset,
    ) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::InvalidArgument(
                "model architecture in the checkpoint differs from the config".into(),
            ));
        }
        Ok(Trainer {
            data: RayTable::from_dataset(dataset, Split::Train)?,
            config,
            model,
            iteration,
            perm: None,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ck: &Checkpoint, dataset: &SceneDataset) -> Result<Self> {
        let model = Model::load(ck)?;
        let it = match &ck.require("meta.iteration")?.payload {
            Payload::U64(v) if v.len() == 1 => v[0] as usize,
            _ => return Err(Error::Checkpoint("meta.iteration malformed".into())),
        };
        Self::with_model(config, model, it, dataset)
    }

    pub fn stage(&self) -> Stage {
        if self.iteration < self.config.pretrain_iters {
            Stage::Pretrain
        } else {
            Stage::Joint
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.push(Record::text("meta.train", serde_json::to_string(&self.config)?));
        ck.push(Record::u64("meta.iteration", vec![self.iteration as u64]));
        self.model.save(&mut ck)?;
        Ok(ck)
    }

    fn batch(&mut self) -> (Vec<Ray>, Vec<[f64; 3]>, Vec<u64>) {
        let n = self.data.len();
        let b = self.config.batch_rays;
        let mut rays = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for k in 0..b {
            let global = (self.iteration * b + k) as u64;
            let epoch = global / n as u64;
            if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
                self.perm = Some((epoch, epoch_permutation(self.config.seed, epoch, n)));
            }
            let idx = self.perm.as_ref().expect("set above").1[(global % n as u64) as usize] as usize;
            rays.push(self.data.rays[idx]);
            targets.push(self.data.targets[idx]);
            ids.push(global);
        }
        (rays, targets, ids)
    }

    fn bind_options(&self, stage: Stage) -> BindOptions {
        BindOptions {
            planes_trainable: !(stage == Stage::Joint && self.config.freeze_grid_features),
            mlps_trainable: true,
            with_nerf: stage == Stage::Joint,
            zero_nerf_features: self.config.zero_grid_features_in_nerf,
        }
    }

    fn run_chunk(
        &self,
        stage: Stage,
        rays: &[Ray],
        targets: &[[f64; 3]],
        ids: &[u64],
        batch: f64,
    ) -> Result<ChunkResult> {
        let mut g = Graph::<f32>::new();
        let bound = self.model.bind(&mut g, self.bind_options(stage))?;
        let opts = SampleOptions {
            sampling: &self.config.sampling,
            jitter: true,
            seed: self.config.seed,
            nerf_ts: None,
        };
        let (grid, nerf) = forward_rays(&mut g, &bound, rays, ids, opts)?;
        let lg = squared_error_sum(&mut g, grid.color, targets, batch)?;
        let (total, nerf_loss) = match nerf {
            Some(n) => {
                let ln = squared_error_sum(&mut g, n.color, targets, batch)?;
                let w = self.config.loss_weights;
                let a = g.scale(lg, w.grid as f32)?;
                let b = g.scale(ln, w.nerf as f32)?;
                (g.add(a, b)?, g.value(ln).item() as f64)
            }
            None => (lg, 0.0),
        };
        let grid_loss = g.value(lg).item() as f64;
        let mut grads = g.backward(total)?;
        let grads = bound.param_vars().into_iter().map(|v| grads.take(v)).collect();
        Ok(ChunkResult {
            grads,
            grid_loss,
            nerf_loss,
        })
    }

    /// One optimizer step at the current iteration.
    pub fn step(&mut self) -> Result<StepLosses> {
        let it = self.iteration;
        let stage = self.stage();
        if stage == Stage::Joint {
            self.model.init_nerf(self.config.seed);
        }
        self.step_inner(stage).map_err(|e| match e {
            e @ Error::Diverged { .. } => e,
            e if e.is_numeric() => Error::Diverged {
                iteration: it,
                source: Box::new(e),
            },
            e => e,
        })
    }

    fn step_inner(&mut self, stage: Stage) -> Result<StepLosses> {
        let (rays, targets, ids) = self.batch();
        let batch = rays.len() as f64;
        let bg = self.config.sampling.background;
        // rays missing the scene box render as background and carry no gradient
        let mut empty_loss = 0.0;
        let mut live = Vec::with_capacity(rays.len());
        for (k, r) in rays.iter().enumerate() {
            if r.empty {
                empty_loss += (0..3).map(|c| (bg[c] - targets[k][c]).powi(2)).sum::<f64>() / batch;
            } else {
                live.push(k);
            }
        }
        let chunks: Vec<(Vec<Ray>, Vec<[f64; 3]>, Vec<u64>)> = live
            .chunks(self.config.chunk_rays)
            .map(|c| {
                (
                    c.iter().map(|&k| rays[k]).collect(),
                    c.iter().map(|&k| targets[k]).collect(),
                    c.iter().map(|&k| ids[k]).collect(),
                )
            })
            .collect();
        let run = |c: &(Vec<Ray>, Vec<[f64; 3]>, Vec<u64>)| self.run_chunk(stage, &c.0, &c.1, &c.2, batch);
        #[cfg(feature = "parallel")]
        let results: Vec<Result<ChunkResult>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<ChunkResult>> = chunks.iter().map(run).collect();

        let mut grid_loss = empty_loss;
        let mut nerf_loss = empty_loss;
        let mut sum: Vec<Option<Array<f32>>> = Vec::new();
        for r in results {
            let r = r?;
            grid_loss += r.grid_loss;
            nerf_loss += r.nerf_loss;
            if sum.is_empty() {
                sum = r.grads;
            } else {
                for (acc, g) in sum.iter_mut().zip(r.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
        }
        let nerf = (stage == Stage::Joint).then_some(nerf_loss);
        let w = self.config.loss_weights;
        let total = match nerf {
            Some(n) => w.grid * grid_loss + w.nerf * n,
            None => grid_loss,
        };
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let it = self.iteration;
        let lr_planes = self.config.learning_rate(ParamGroup::Planes, it);
        let lr_mlp = self.config.learning_rate(ParamGroup::Mlp, it);
        for (p, g) in self.model.params_mut().into_iter().zip(sum) {
            if let Some(g) = g {
                let lr = match p.group {
                    ParamGroup::Planes => lr_planes,
                    ParamGroup::Mlp => lr_mlp,
                };
                p.step(&g, lr)?;
            }
        }
        if self.model.params().iter().any(|p| !p.value.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.iteration += 1;
        Ok(StepLosses {
            grid: grid_loss,
            nerf,
            total,
        })
    }
}

/// Which stages a call to [`run_training`] executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelect {
    Pretrain,
    Joint,
    Both,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub stage: StageSelect,
    /// Directory for checkpoints and the log; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Echo log lines to stderr.
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stage: StageSelect::Both,
            out_dir: None,
            resume: None,
            verbose: false,
        }
    }
}

pub const LOG_FILE: &str = "train_log.txt";

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

/// Runs the selected stages and returns the trained model with its report.
///
/// Checkpoints land in `out_dir` as `pretrain.ckpt` (end of pretraining),
/// `iter_{n}.ckpt` (cadence) and `final.ckpt`. A non-finite loss aborts the
/// run; checkpoints already written are left untouched.
pub fn run_training(
    dataset: &SceneDataset,
    config: &TrainConfig,
    opts: RunOptions,
) -> Result<(Model<f32>, TrainReport)> {
    let mut trainer = match &opts.resume {
        Some(ck) => Trainer::resume(config.clone(), ck, dataset)?,
        None => Trainer::new(config.clone(), dataset)?,
    };
    let p = config.pretrain_iters;
    let end = match opts.stage {
        StageSelect::Pretrain => p,
        StageSelect::Joint | StageSelect::Both => config.total_iters(),
    };
    if opts.stage == StageSelect::Joint && trainer.iteration < p {
        trainer.iteration = p;
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut emit = |line: &str, verbose: bool| -> Result<()> {
        if verbose {
            eprintln!("{line}");
        }
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{line}").map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    };
    let save = |t: &Trainer, name: &str| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            t.checkpoint()?.save(&checkpoint_path(dir, name))?;
        }
        Ok(())
    };

    let start = Instant::now();
    let mut report = TrainReport::default();
    if trainer.iteration == p && opts.stage != StageSelect::Joint {
        save(&trainer, "pretrain")?;
    }
    while trainer.iteration < end {
        let stage = trainer.stage();
        let losses = trainer.step()?;
        let it = trainer.iteration;
        let log_every = config.log_every.max(1);
        if it % log_every == 0 || it == end || it == 1 {
            let e = LogEntry {
                iteration: it,
                stage,
                losses,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            emit(&e.to_line(), opts.verbose)?;
            report.entries.push(e);
        }
        if it == p && stage == Stage::Pretrain {
            save(&trainer, "pretrain")?;
        }
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            save(&trainer, &format!("iter_{it}"))?;
        }
    }
    if opts.stage == StageSelect::Joint || end > p {
        trainer.model.init_nerf(config.seed);
    }
    save(&trainer, "final")?;
    report.summary.push(("iterations".into(), trainer.iteration as f64));
    report
        .summary
        .push(("wall_time_s".into(), start.elapsed().as_secs_f64()));
    if let Some(last) = report.entries.last() {
        report.summary.push(("final_total_loss".into(), last.losses.total));
    }
    emit(&report.summary_line(), opts.verbose)?;
    Ok((trainer.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PyramidConfig;
    use crate::heads::{HeadConfig, PeConfig};
    use crate::scene::{load_dataset, orbit_cameras, write_synthetic_dataset, SyntheticScene};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            pretrain_iters: 3,
            joint_iters: 3,
            batch_rays: 48,
            chunk_rays: 20,
            model: ModelConfig {
                pyramid: PyramidConfig {
                    plane_resolution: [16, 16],
                    depth_resolution: Some(8),
                    density_components: 2,
                    appearance_components: 3,
                    downsample_factors: vec![1, 4],
                    init_scale: 0.1,
                },
                heads: HeadConfig {
                    grid_hidden: 8,
                    grid_hidden_layers: 2,
                    nerf_width: 8,
                    nerf_depth: 4,
                    pe: PeConfig {
                        pos_levels: 3,
                        dir_levels: 2,
                    },
                },
            },
            sampling: SamplingConfig {
                n_coarse: 6,
                n_fine: 4,
                ..SamplingConfig::default()
            },
            checkpoint_every: 0,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> (tempfile::TempDir, SceneDataset) {
        let dir = tempfile::tempdir().unwrap();
        let scene = SyntheticScene::benchmark(3).unwrap();
        let views = orbit_cameras(&scene.extents, 4, 12, 12, 4);
        let path = write_synthetic_dataset(dir.path(), &scene, &views).unwrap();
        let ds = load_dataset(&path).unwrap();
        (dir, ds)
    }

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.pretrain_iters, c.joint_iters), (10_000, 100_000));
        assert_eq!(c.batch_rays, 4096);
        assert_eq!((c.lr_planes, c.lr_mlp), (0.02, 0.01));
        assert_eq!((c.loss_weights.grid, c.loss_weights.nerf), (1.0, 1.0));
        assert_eq!((c.sampling.n_coarse, c.sampling.n_fine), (64, 128));
    }

    #[test]
    fn learning_rate_decays_to_factor() {
        let c = TrainConfig {
            pretrain_iters: 10,
            joint_iters: 30,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate(ParamGroup::Planes, 0), 0.02);
        assert!((c.learning_rate(ParamGroup::Mlp, 40) - 0.001).abs() < 1e-15);
        assert!(c.learning_rate(ParamGroup::Mlp, 20) < 0.01);
    }

    #[test]
    fn config_rejects_unknown_keys_and_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 4, "sampling": {"n_fine": 3}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.sampling.n_fine, 3);
        assert_eq!(c.sampling.n_coarse, 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sede": 4}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"model": {"pyramid": {"planes": 1}}}"#).is_err());
    }

    #[test]
    fn epochs_visit_every_ray_once() {
        let p = epoch_permutation(1, 0, 100);
        let mut s = p.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<u32>>());
        assert_ne!(p, epoch_permutation(1, 1, 100));
    }

    #[test]
    fn pretrain_leaves_nerf_absent_and_is_deterministic() {
        let (_d, ds) = tiny_dataset();
        let cfg = tiny_train_config();
        let run = || {
            let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
            let losses: Vec<_> = (0..3).map(|_| t.step().unwrap()).collect();
            (t.model, losses)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert!(m1.nerf.is_none());
        assert!(l1[0].grid > 0.0 && l1[0].grid.is_finite());
        assert!(l1.iter().all(|l| l.nerf.is_none()));
    }

    #[test]
    fn frozen_features_and_zero_nerf_weight() {
        let (_d, ds) = tiny_dataset();
        let cfg = TrainConfig {
            pretrain_iters: 0,
            freeze_grid_features: true,
            loss_weights: LossWeights {
                grid: 1.0,
                nerf: 0.0,
            },
            ..tiny_train_config()
        };
        let mut t = Trainer::new(cfg, &ds).unwrap();
        t.model.init_nerf(0);
        let before = t.model.clone();
        let l = t.step().unwrap();
        assert!(l.nerf.is_some());
        assert_eq!(t.model.pyramid, before.pyramid);
        // zero loss weight ⇒ zero gradient ⇒ Adam leaves the weights in place
        assert_eq!(
            t.model.nerf.as_ref().unwrap().trunk.layers[0].weight.value,
            before.nerf.as_ref().unwrap().trunk.layers[0].weight.value
        );
        assert_ne!(t.model.grid_heads, before.grid_heads);
    }

    #[test]
    fn run_training_writes_checkpoints_and_resumes_identically() {
        let (_d, ds) = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config();
        let opts = RunOptions {
            out_dir: Some(out.path().to_path_buf()),
            ..RunOptions::default()
        };
        let (full, report) = run_training(&ds, &cfg, opts).unwrap();
        assert!(full.nerf.is_some());
        assert_eq!(report.entries.len(), 6);
        assert!(report.entries.windows(2).all(|w| w[0].iteration < w[1].iteration));
        let pre = Checkpoint::load(&checkpoint_path(out.path(), "pretrain")).unwrap();
        assert!(!pre.has_prefix("nerf_branch."));
        let log = std::fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
        assert!(log.lines().last().unwrap().starts_with("summary"));

        let (resumed, _) = run_training(
            &ds,
            &cfg,
            RunOptions {
                stage: StageSelect::Joint,
                resume: Some(pre),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn chunk_results_do_not_depend_on_threads() {
        let (_d, ds) = tiny_dataset();
        let cfg = tiny_train_config();
        let mut a = Trainer::new(cfg.clone(), &ds).unwrap();
        let la = a.step().unwrap();
        #[cfg(feature = "parallel")]
        let lb = {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
            let mut b = Trainer::new(cfg, &ds).unwrap();
            let l = pool.install(|| b.step().unwrap());
            assert_eq!(a.model, b.model);
            l
        };
        #[cfg(not(feature = "parallel"))]
        let lb = la;
        assert_eq!(la, lb);
    }
}
