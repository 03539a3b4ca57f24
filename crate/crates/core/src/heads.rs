//! Positional encoding and the neural heads that turn grid features into
//! density and color: the grid-branch density/color heads and the NeRF-branch
//! network conditioned on grid features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, CustomOp, Graph, Param, ParamGroup, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeConfig {
    /// Frequencies for positions; the highest is `2^(pos_levels-1)`.
    pub pos_levels: usize,
    pub dir_levels: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            pos_levels: 16,
            dir_levels: 4,
        }
    }
}

/// `(sin(u), cos(u), …, sin(2^{L-1}u), cos(2^{L-1}u))` for every component
/// `u` of every row, component-major. Input `N×C`, output `N×2LC`.
pub fn positional_encoding<T: Real>(x: &Array<T>, levels: usize) -> Result<Array<T>> {
    let (n, c) = match x.shape() {
        [n, c] => (*n, *c),
        [c] => (1, *c),
        s => return Err(Error::shape("positional_encoding", format!("{s:?}"))),
    };
    let mut out = Vec::with_capacity(n * c * 2 * levels);
    for &u in x.data() {
        let mut f = T::one();
        for _ in 0..levels {
            let a = f * u;
            out.push(a.sin());
            out.push(a.cos());
            f = f + f;
        }
    }
    let shape = if x.ndim() == 1 {
        vec![2 * levels * c]
    } else {
        vec![n, 2 * levels * c]
    };
    Array::new(&shape, out)
}

struct PosEncOp {
    levels: usize,
}

impl<T: Real> CustomOp<T> for PosEncOp {
    fn name(&self) -> &'static str {
        "positional_encoding"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Array<T>>>> {
        let x = inputs[0];
        let g = grad.data();
        let mut gx = Vec::with_capacity(x.len());
        for (i, &u) in x.data().iter().enumerate() {
            let mut f = T::one();
            let mut acc = T::zero();
            for l in 0..self.levels {
                let a = f * u;
                let (gs, gc) = (g[i * 2 * self.levels + 2 * l], g[i * 2 * self.levels + 2 * l + 1]);
                acc = acc + f * (gs * a.cos() - gc * a.sin());
                f = f + f;
            }
            gx.push(acc);
        }
        Ok(vec![Some(Array::new(x.shape(), gx)?)])
    }
}

/// Graph version of [`positional_encoding`] for `N×C` inputs.
pub fn encode<T: Real>(graph: &mut Graph<T>, x: Var, levels: usize) -> Result<Var> {
    if levels == 0 {
        return Err(Error::InvalidArgument("PE needs at least one frequency".into()));
    }
    let out = positional_encoding(graph.value(x), levels)?;
    graph.custom(&[x], out, Box::new(PosEncOp { levels }))
}

/// Fully connected layer `y = x·W + b`, `W` stored `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| T::of(rng.gen_range(-limit..=limit)))
            .collect();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                Array::new(&[fan_in, fan_out], w).expect("shape"),
                ParamGroup::Mlp,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Array::zeros(&[fan_out]),
                ParamGroup::Mlp,
            ),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundLinear> {
        Ok(BoundLinear {
            weight: self.weight.bind(g, trainable)?,
            bias: self.bias.bind(g, trainable)?,
        })
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_bias(y, self.bias)
    }
}

/// Stack of linear layers with ReLU between them and no activation after the
/// last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<BoundLinear>> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

fn run_mlp<T: Real>(g: &mut Graph<T>, layers: &[BoundLinear], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.apply(g, h)?;
        if i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

fn check_width<T: Real>(g: &Graph<T>, v: Var, expected: usize, what: &str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 || s[1] != expected {
        return Err(Error::shape(
            "head input",
            format!("{what}: expected N×{expected}, got {s:?}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Hidden width of the grid-branch heads.
    pub grid_hidden: usize,
    /// Hidden layers in each grid-branch head.
    pub grid_hidden_layers: usize,
    /// Width of the NeRF-branch trunk.
    pub nerf_width: usize,
    /// Fully connected layers in the NeRF-branch trunk.
    pub nerf_depth: usize,
    pub pe: PeConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            grid_hidden: 128,
            grid_hidden_layers: 2,
            nerf_width: 256,
            nerf_depth: 4,
            pe: PeConfig::default(),
        }
    }
}

/// Grid-branch heads: `σ = softplus(F_σ(G_σ))`, `c = sigmoid(F_c(G_c ⊕ PE(d)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridHeads<T> {
    pub density: Mlp<T>,
    pub color: Mlp<T>,
    pub dir_levels: usize,
}

#[derive(Clone, Debug)]
pub struct BoundGridHeads {
    pub density: Vec<BoundLinear>,
    pub color: Vec<BoundLinear>,
    pub dir_levels: usize,
}

impl<T: Real> GridHeads<T> {
    pub fn new(density_dim: usize, appearance_dim: usize, config: &HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = vec![config.grid_hidden; config.grid_hidden_layers];
        let widths = |input: usize, out: usize| {
            let mut w = vec![input];
            w.extend(&hidden);
            w.push(out);
            w
        };
        let dir_dim = 2 * config.pe.dir_levels * 3;
        GridHeads {
            density: Mlp::new("grid_head.density", &widths(density_dim, 1), &mut rng),
            color: Mlp::new(
                "grid_head.color",
                &widths(appearance_dim + dir_dim, 3),
                &mut rng,
            ),
            dir_levels: config.pe.dir_levels,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundGridHeads> {
        Ok(BoundGridHeads {
            density: self.density.bind(g, trainable)?,
            color: self.color.bind(g, trainable)?,
            dir_levels: self.dir_levels,
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.density.params();
        p.extend(self.color.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.density.params_mut();
        p.extend(self.color.params_mut());
        p
    }
}

/// Evaluates the grid branch on `N` samples. `dirs` is `N×3` (unit rows).
/// Returns `(σ: N×1, rgb: N×3)`.
pub fn grid_branch_eval<T: Real>(
    g: &mut Graph<T>,
    heads: &BoundGridHeads,
    density_feat: Var,
    appearance_feat: Var,
    dirs: Var,
) -> Result<(Var, Var)> {
    let dw = g.value(heads.density[0].weight).shape()[0];
    check_width(g, density_feat, dw, "density features")?;
    let raw_sigma = run_mlp(g, &heads.density, density_feat)?;
    let sigma = g.softplus(raw_sigma)?;

    let pe_dir = encode(g, dirs, heads.dir_levels)?;
    let color_in = g.concat(&[appearance_feat, pe_dir], 1)?;
    let cw = g.value(heads.color[0].weight).shape()[0];
    check_width(g, color_in, cw, "appearance features + PE(d)")?;
    let raw_rgb = run_mlp(g, &heads.color, color_in)?;
    let rgb = g.sigmoid(raw_rgb)?;
    Ok((sigma, rgb))
}

/// NeRF branch `F′(G_σ, G_c, PE(X), PE(d))`: a ReLU trunk without skip
/// connections; density is read off the trunk, color from one more layer
/// that also sees `PE(d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NerfBranch<T> {
    pub trunk: Mlp<T>,
    pub sigma: Linear<T>,
    pub color: Linear<T>,
    pub pe: PeConfig,
}

#[derive(Clone, Debug)]
pub struct BoundNerfBranch {
    pub trunk: Vec<BoundLinear>,
    pub sigma: BoundLinear,
    pub color: BoundLinear,
    pub pe: PeConfig,
}

impl<T: Real> NerfBranch<T> {
    pub fn new(density_dim: usize, appearance_dim: usize, config: &HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = density_dim + appearance_dim + 2 * config.pe.pos_levels * 3;
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(config.nerf_width).take(config.nerf_depth));
        let trunk = Mlp::new("nerf_branch.trunk", &widths, &mut rng);
        let w = config.nerf_width;
        NerfBranch {
            trunk,
            sigma: Linear::new("nerf_branch.sigma", w, 1, &mut rng),
            color: Linear::new(
                "nerf_branch.color",
                w + 2 * config.pe.dir_levels * 3,
                3,
                &mut rng,
            ),
            pe: config.pe,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundNerfBranch> {
        Ok(BoundNerfBranch {
            trunk: self.trunk.bind(g, trainable)?,
            sigma: self.sigma.bind(g, trainable)?,
            color: self.color.bind(g, trainable)?,
            pe: self.pe,
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.trunk.params();
        p.extend(self.sigma.params());
        p.extend(self.color.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.trunk.params_mut();
        p.extend(self.sigma.params_mut());
        p.extend(self.color.params_mut());
        p
    }
}

/// Evaluates the NeRF branch on `N` samples at normalized positions `points`.
pub fn nerf_branch_eval<T: Real>(
    g: &mut Graph<T>,
    net: &BoundNerfBranch,
    density_feat: Var,
    appearance_feat: Var,
    points: Var,
    dirs: Var,
) -> Result<(Var, Var)> {
    let pe_x = encode(g, points, net.pe.pos_levels)?;
    let input = g.concat(&[density_feat, appearance_feat, pe_x], 1)?;
    let iw = g.value(net.trunk[0].weight).shape()[0];
    check_width(g, input, iw, "G_σ ⊕ G_c ⊕ PE(X)")?;
    let mut h = input;
    for l in &net.trunk {
        h = l.apply(g, h)?;
        h = g.relu(h)?;
    }
    let raw_sigma = net.sigma.apply(g, h)?;
    let sigma = g.softplus(raw_sigma)?;
    let pe_d = encode(g, dirs, net.pe.dir_levels)?;
    let color_in = g.concat(&[h, pe_d], 1)?;
    let raw_rgb = net.color.apply(g, color_in)?;
    let rgb = g.sigmoid(raw_rgb)?;
    Ok((sigma, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> HeadConfig {
        HeadConfig {
            grid_hidden: 16,
            grid_hidden_layers: 2,
            nerf_width: 12,
            nerf_depth: 4,
            pe: PeConfig {
                pos_levels: 3,
                dir_levels: 2,
            },
        }
    }

    fn zero_all(params: Vec<&mut Param<f64>>) {
        for p in params {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize, lo: f64, hi: f64) -> Array<f64> {
        let d = (0..n * c).map(|_| rng.gen_range(lo..hi)).collect();
        Array::new(&[n, c], d).unwrap()
    }

    fn unit_dirs(rng: &mut ChaCha8Rng, n: usize) -> Array<f64> {
        let mut d = Vec::new();
        for _ in 0..n {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            d.extend(v.iter().map(|x| x / l));
        }
        Array::new(&[n, 3], d).unwrap()
    }

    #[test]
    fn pe_examples() {
        let z = positional_encoding(&Array::<f64>::from_vec(vec![0.0]), 2).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 0.0, 1.0]);
        let h = positional_encoding(&Array::<f64>::from_vec(vec![std::f64::consts::FRAC_PI_2]), 1)
            .unwrap();
        assert!((h.data()[0] - 1.0).abs() < 1e-12 && h.data()[1].abs() < 1e-12);
    }

    #[test]
    fn pe_layout_is_component_major() {
        let x = Array::<f64>::from_f64(&[1, 2], &[0.3, -0.7]).unwrap();
        let e = positional_encoding(&x, 3).unwrap();
        assert_eq!(e.shape(), &[1, 12]);
        let d = e.data();
        assert!((d[4] - (4.0f64 * 0.3).sin()).abs() < 1e-12);
        assert!((d[6] - (-0.7f64).sin()).abs() < 1e-12);
        assert!((d[11] - (4.0f64 * -0.7).cos()).abs() < 1e-12);
    }

    #[test]
    fn default_pe_highest_frequency() {
        let pe = PeConfig::default();
        assert_eq!(pe.pos_levels, 16);
        assert_eq!(1u64 << (pe.pos_levels - 1), 1 << 15);
    }

    #[test]
    fn zero_grid_network() {
        let cfg = small_config();
        let mut heads = GridHeads::<f64>::new(4, 6, &cfg, 1);
        zero_all(heads.params_mut());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let b = heads.bind(&mut g, false).unwrap();
        let fs = g.constant(random_rows(&mut rng, 5, 4, -1.0, 1.0)).unwrap();
        let fc = g.constant(random_rows(&mut rng, 5, 6, -1.0, 1.0)).unwrap();
        let d = g.constant(unit_dirs(&mut rng, 5)).unwrap();
        let (s, c) = grid_branch_eval(&mut g, &b, fs, fc, d).unwrap();
        assert!(g.value(s).data().iter().all(|&x| (x - std::f64::consts::LN_2).abs() < 1e-12));
        assert!(g.value(c).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn zero_nerf_network() {
        let cfg = small_config();
        let mut net = NerfBranch::<f64>::new(4, 6, &cfg, 1);
        zero_all(net.params_mut());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let b = net.bind(&mut g, false).unwrap();
        let fs = g.constant(random_rows(&mut rng, 3, 4, -1.0, 1.0)).unwrap();
        let fc = g.constant(random_rows(&mut rng, 3, 6, -1.0, 1.0)).unwrap();
        let x = g.constant(random_rows(&mut rng, 3, 3, 0.0, 1.0)).unwrap();
        let d = g.constant(unit_dirs(&mut rng, 3)).unwrap();
        let (s, c) = nerf_branch_eval(&mut g, &b, fs, fc, x, d).unwrap();
        assert!(g.value(s).data().iter().all(|&x| (x - std::f64::consts::LN_2).abs() < 1e-12));
        assert!(g.value(c).data().iter().all(|&x| x == 0.5));
        assert_eq!(net.trunk.layers.len(), 4);
    }

    #[test]
    fn sigma_nonnegative_and_direction_independent() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..1000u64 {
            let heads = GridHeads::<f64>::new(4, 6, &cfg, trial);
            let mut g = Graph::new();
            let b = heads.bind(&mut g, false).unwrap();
            let fs = g.constant(random_rows(&mut rng, 2, 4, -10.0, 10.0)).unwrap();
            let fc = g.constant(random_rows(&mut rng, 2, 6, -1.0, 1.0)).unwrap();
            let d1 = g.constant(unit_dirs(&mut rng, 2)).unwrap();
            let d2 = g.constant(unit_dirs(&mut rng, 2)).unwrap();
            let (s1, c1) = grid_branch_eval(&mut g, &b, fs, fc, d1).unwrap();
            let (s2, c2) = grid_branch_eval(&mut g, &b, fs, fc, d2).unwrap();
            assert!(g.value(s1).data().iter().all(|&x| x >= 0.0));
            assert_eq!(g.value(s1), g.value(s2));
            if trial < 20 {
                assert_ne!(g.value(c1), g.value(c2));
            }
        }
    }

    #[test]
    fn nerf_is_pointwise() {
        let cfg = small_config();
        let net = NerfBranch::<f64>::new(4, 6, &cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fs = random_rows(&mut rng, 6, 4, -1.0, 1.0);
        let fc = random_rows(&mut rng, 6, 6, -1.0, 1.0);
        let x = random_rows(&mut rng, 6, 3, 0.0, 1.0);
        let d = unit_dirs(&mut rng, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |a: &Array<f64>| {
            let c = a.shape()[1];
            let data = perm
                .iter()
                .flat_map(|&i| a.data()[i * c..(i + 1) * c].to_vec())
                .collect();
            Array::new(a.shape(), data).unwrap()
        };
        let run = |fs: Array<f64>, fc: Array<f64>, x: Array<f64>, d: Array<f64>| {
            let mut g = Graph::new();
            let b = net.bind(&mut g, false).unwrap();
            let (fs, fc, x, d) = (
                g.constant(fs).unwrap(),
                g.constant(fc).unwrap(),
                g.constant(x).unwrap(),
                g.constant(d).unwrap(),
            );
            let (s, c) = nerf_branch_eval(&mut g, &b, fs, fc, x, d).unwrap();
            (g.value(s).clone(), g.value(c).clone())
        };
        let (s, c) = run(fs.clone(), fc.clone(), x.clone(), d.clone());
        let (sp, cp) = run(permute(&fs), permute(&fc), permute(&x), permute(&d));
        assert_eq!(permute(&s), sp);
        assert_eq!(permute(&c), cp);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = small_config();
        let heads = GridHeads::<f64>::new(4, 6, &cfg, 1);
        let mut g = Graph::new();
        let b = heads.bind(&mut g, false).unwrap();
        let fs = g.constant(Array::zeros(&[2, 5])).unwrap();
        let fc = g.constant(Array::zeros(&[2, 6])).unwrap();
        let d = g.constant(Array::from_f64(&[2, 3], &[0., 0., 1., 0., 0., 1.]).unwrap()).unwrap();
        assert!(grid_branch_eval(&mut g, &b, fs, fc, d).is_err());
    }
}
