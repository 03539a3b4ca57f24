//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use gridnerf::autodiff::gradcheck::{relative_error, EntryCheck};
use gridnerf::autodiff::{Array, Graph};
use gridnerf::geometry::Aabb;
use gridnerf::grid::PyramidConfig;
use gridnerf::heads::{HeadConfig, PeConfig};
use gridnerf::model::{
    forward_rays, squared_error_sum, BindOptions, Model, ModelConfig, SampleOptions,
    SamplingConfig,
};
use gridnerf::render::{generate_rays, Camera, Ray};
use gridnerf::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        pyramid: PyramidConfig {
            plane_resolution: [12, 12],
            depth_resolution: Some(12),
            density_components: 2,
            appearance_components: 3,
            downsample_factors: vec![1, 3],
            init_scale: 0.3,
        },
        heads: HeadConfig {
            grid_hidden: 8,
            grid_hidden_layers: 2,
            nerf_width: 8,
            nerf_depth: 3,
            pe: PeConfig {
                pos_levels: 3,
                dir_levels: 2,
            },
        },
    }
}

pub fn tiny_sampling() -> SamplingConfig {
    SamplingConfig {
        n_coarse: 8,
        n_fine: 6,
        ..SamplingConfig::default()
    }
}

pub fn tiny_aabb() -> Aabb {
    Aabb::new([-1.0, -1.0, 0.0], [1.0, 1.0, 0.6])
}

/// Non-empty rays of a small camera looking down into [`tiny_aabb`].
pub fn ray_fan(n: usize) -> Vec<Ray> {
    let cam = Camera::look_at(
        [1.8, 1.2, 1.6],
        [0.0, 0.0, 0.2],
        [0.0, 0.0, 1.0],
        1.2 * n as f64,
        n,
        n,
        0.05,
        10.0,
    );
    let px: Vec<_> = (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).collect();
    generate_rays(&cam, &tiny_aabb(), &px)
        .unwrap()
        .into_iter()
        .filter(|r| !r.empty)
        .collect()
}

/// Parameter families checked separately.
pub const FAMILIES: [&str; 4] = ["plane matrices", "z-vectors", "grid heads", "nerf branch"];

pub fn family_of(name: &str) -> usize {
    if name.ends_with(".M_xy") {
        0
    } else if name.ends_with(".v_z") {
        1
    } else if name.starts_with("grid_head") {
        2
    } else {
        3
    }
}

/// Everything needed to evaluate the full per-ray loss with frozen sample
/// positions as a function of the parameter values.
pub struct LossProblem {
    pub model: Model<f64>,
    pub rays: Vec<Ray>,
    pub ids: Vec<u64>,
    pub targets: Vec<[f64; 3]>,
    pub sampling: SamplingConfig,
    pub nerf_ts: Vec<f64>,
}

const OPTS: BindOptions = BindOptions {
    planes_trainable: true,
    mlps_trainable: true,
    with_nerf: true,
    zero_nerf_features: false,
};

impl LossProblem {
    pub fn new(seed: u64) -> Self {
        let mut model = Model::<f64>::new(&tiny_model_config(), tiny_aabb(), seed).unwrap();
        model.init_nerf(seed + 1);
        // move off the initializer's exact zeros (biases), where relu has no derivative
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            for x in p.value.data_mut() {
                *x += rng.gen_range(-0.05..0.05);
            }
        }
        let rays = ray_fan(4);
        let ids: Vec<u64> = (0..rays.len() as u64).collect();
        let targets = rays.iter().map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let sampling = tiny_sampling();
        // draw the guided samples once; the loss treats them as constants
        let mut g = Graph::new();
        let b = model.bind(&mut g, OPTS).unwrap();
        let opts = SampleOptions {
            sampling: &sampling,
            jitter: true,
            seed,
            nerf_ts: None,
        };
        let (_, nerf) = forward_rays(&mut g, &b, &rays, &ids, opts).unwrap();
        let nerf_ts = nerf.unwrap().ts;
        LossProblem {
            model,
            rays,
            ids,
            targets,
            sampling,
            nerf_ts,
        }
    }

    pub fn values(&self) -> Vec<Array<f64>> {
        self.model.params().iter().map(|p| p.value.clone()).collect()
    }

    /// Full loss (grid + NeRF, equal weights, mean over rays), the relu
    /// sign pattern of the run and, when `grads` is set, the gradient of
    /// every parameter.
    pub fn eval(&self, values: &[Array<f64>], grads: bool) -> Result<Evaluation> {
        let mut model = self.model.clone();
        for (p, v) in model.params_mut().into_iter().zip(values) {
            p.value.data_mut().copy_from_slice(v.data());
        }
        let mut g = Graph::new();
        let b = model.bind(&mut g, OPTS)?;
        let opts = SampleOptions {
            sampling: &self.sampling,
            jitter: true,
            seed: 0,
            nerf_ts: Some(&self.nerf_ts),
        };
        let (grid, nerf) = forward_rays(&mut g, &b, &self.rays, &self.ids, opts)?;
        let r = self.rays.len() as f64;
        let lg = squared_error_sum(&mut g, grid.color, &self.targets, r)?;
        let ln = squared_error_sum(&mut g, nerf.unwrap().color, &self.targets, r)?;
        let loss = g.add(lg, ln)?;
        let value = g.value(loss).item();
        let pattern = g.relu_pattern();
        if !grads {
            return Ok(Evaluation {
                value,
                pattern,
                grads: Vec::new(),
            });
        }
        let gr = g.backward(loss)?;
        let out = b
            .param_vars()
            .into_iter()
            .zip(values)
            .map(|(v, a)| {
                gr.get(v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(a.shape()))
            })
            .collect();
        Ok(Evaluation {
            value,
            pattern,
            grads: out,
        })
    }
}

pub struct Evaluation {
    pub value: f64,
    pub pattern: Vec<bool>,
    pub grads: Vec<Array<f64>>,
}

pub const GRADCHECK_EPS: f64 = 1e-4;

pub struct FamilyCheck {
    pub family: usize,
    pub checks: Vec<EntryCheck>,
    /// Candidates passed over because `x ± ε` crosses a relu kink.
    pub straddling: usize,
}

/// Central-difference checks of `per_family` random entries with a nonzero
/// analytic gradient in each parameter family. Entries whose stencil lands
/// on a different relu pattern than the base point are replaced by the next
/// random candidate, since no finite difference can be compared with the
/// derivative there.
pub fn full_loss_gradcheck(seed: u64, per_family: usize) -> Vec<FamilyCheck> {
    let problem = LossProblem::new(seed);
    let values = problem.values();
    let base = problem.eval(&values, true).unwrap();
    let names: Vec<String> = problem.model.params().iter().map(|p| p.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..FAMILIES.len())
        .map(|family| {
            let mut pool: Vec<(usize, usize)> = names
                .iter()
                .enumerate()
                .filter(|(_, n)| family_of(n) == family)
                .flat_map(|(k, _)| {
                    base.grads[k]
                        .data()
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.abs() > 1e-10)
                        .map(move |(i, _)| (k, i))
                })
                .collect();
            pool.shuffle(&mut rng);
            let mut checks = Vec::new();
            let mut straddling = 0;
            for (input, index) in pool {
                if checks.len() == per_family {
                    break;
                }
                let mut probe = values.clone();
                let x0 = values[input].data()[index];
                probe[input].data_mut()[index] = x0 + GRADCHECK_EPS;
                let plus = problem.eval(&probe, false).unwrap();
                probe[input].data_mut()[index] = x0 - GRADCHECK_EPS;
                let minus = problem.eval(&probe, false).unwrap();
                if plus.pattern != base.pattern || minus.pattern != base.pattern {
                    straddling += 1;
                    continue;
                }
                let numeric = (plus.value - minus.value) / (2.0 * GRADCHECK_EPS);
                let analytic = base.grads[input].data()[index];
                checks.push(EntryCheck {
                    input,
                    index,
                    analytic,
                    numeric,
                    rel_error: relative_error(analytic, numeric, 1e-8),
                });
            }
            FamilyCheck {
                family,
                checks,
                straddling,
            }
        })
        .collect()
}
