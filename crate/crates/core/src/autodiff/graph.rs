use super::array::{Array, Real};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module (feature-plane
/// sampling, alpha compositing). The forward value is computed by the caller
/// and handed to [`Graph::custom`].
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries for inputs with
    /// `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Array<T>],
        output: &Array<T>,
        grad_output: &Array<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Array<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumLastAxis(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Array<T>,
    requires_grad: bool,
}

/// Define-by-run computation tape. Every operation evaluates eagerly when it
/// is recorded, so node values are available immediately via [`Graph::value`]
/// and the node list is already in topological order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, a: &Array<T>) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of zero every relu input lies on, over the whole tape.
    /// Two runs of the same program with equal patterns are on the same
    /// smooth piece, so a finite difference between them is meaningful.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|&x| x > T::zero()))
            .collect()
    }

    /// Forward value of the designated output node. Evaluation is eager, so
    /// this only looks the value up.
    pub fn forward(&self, output: Var) -> &Array<T> {
        self.value(output)
    }

    fn push(&mut self, op: Op<T>, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf; it participates in gradients iff `array.requires_grad()`.
    pub fn leaf(&mut self, array: Array<T>) -> Result<Var> {
        check_finite("leaf", &array)?;
        let rg = array.requires_grad();
        Ok(self.push(Op::Leaf, array, rg))
    }

    pub fn constant(&mut self, array: Array<T>) -> Result<Var> {
        self.leaf(array.with_grad(false))
    }

    pub fn param(&mut self, array: Array<T>) -> Result<Var> {
        self.leaf(array.with_grad(true))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::new(av.shape(), data)?;
        check_finite(name, &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, out, rg))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        check_finite(name, &out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(op, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, |x| x.cos(), Op::Cos(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `[n,k] × [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (m as isize, 1),
            &mut out,
            false,
        );
        let out = Array::new(&[n, m], out)?;
        check_finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// Adds a length-`m` bias to every row of an `[n,m]` array.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_bias", format!("{sa:?} + {sb:?}")));
        }
        let m = sa[1];
        let bv = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let out = Array::new(sa, data)?;
        check_finite("add_bias", &out)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddBias(a, bias), out, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let out = Array::scalar(s);
        check_finite("sum", &out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumAll(a), out, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let out = Array::scalar(s / T::of(n as f64));
        check_finite("mean", &out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MeanAll(a), out, rg))
    }

    /// Sums the trailing axis: `[.., m] -> [..]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&m, lead)) = shape.split_last() else {
            return Err(Error::shape("sum_last_axis", "scalar input"));
        };
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(m.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Array::new(lead, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumLastAxis(a), out, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let out = Array::new(&out_shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), out.with_grad(false), rg))
    }

    /// Records an externally evaluated operation with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Array<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        check_finite(op.name(), &output)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            output.with_grad(false),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array::full(out_val.shape(), T::one()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut leaves = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Array::zeros(node.value.shape()));
                check_finite("backward", &g)?;
                leaves.push((Var(id), g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(&self, v: Var, g: &Array<T>, f: impl Fn(T, T, T) -> T, out: &Array<T>) -> Array<T> {
        let x = self.value(v);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
            .collect();
        Array::new(x.shape(), data).expect("same shape")
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.elementwise(*b, g, |gi, bi, _| gi * bi, out);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.elementwise(*a, g, |gi, ai, _| gi * ai, out);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, shaped);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        (m as isize, 1),
                        self.value(*b).data(),
                        (1, m as isize),
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, *a, Array::new(&[n, k], da)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(
                        k,
                        n,
                        m,
                        self.value(*a).data(),
                        (1, k as isize),
                        g.data(),
                        (m as isize, 1),
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, *b, Array::new(&[k, m], db)?);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let m = self.shape(*bias)[0];
                    let mut gb = vec![T::zero(); m];
                    for row in g.data().chunks(m.max(1)) {
                        for (acc, &x) in gb.iter_mut().zip(row) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *bias, Array::new(&[m], gb)?);
                }
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Array::full(&shape, g.item()));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::of(self.value(*a).len() as f64);
                self.accumulate(grads, *a, Array::full(&shape, g.item() / n));
            }
            Op::SumLastAxis(a) => {
                let shape = self.shape(*a).to_vec();
                let m = *shape.last().expect("non-scalar");
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat(x).take(m))
                    .collect();
                self.accumulate(grads, *a, Array::new(&shape, data)?);
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let block = width * inner;
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total * inner + offset * inner;
                            data.extend_from_slice(&g.data()[start..start + block]);
                        }
                        let shape = self.shape(v).to_vec();
                        self.accumulate(grads, v, Array::new(&shape, data)?);
                    }
                    offset += width;
                }
            }
            Op::Exp(a) => {
                let ga = self.elementwise(*a, g, |gi, _, yi| gi * yi, out);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = self.elementwise(*a, g, |gi, xi, _| gi / xi, out);
                self.accumulate(grads, *a, ga);
            }
            Op::Sin(a) => {
                let ga = self.elementwise(*a, g, |gi, xi, _| gi * xi.cos(), out);
                self.accumulate(grads, *a, ga);
            }
            Op::Cos(a) => {
                let ga = self.elementwise(*a, g, |gi, xi, _| -gi * xi.sin(), out);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = self.elementwise(
                    *a,
                    g,
                    |gi, xi, _| if xi > T::zero() { gi } else { T::zero() },
                    out,
                );
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = self.elementwise(*a, g, |gi, xi, _| gi * sigmoid(xi), out);
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = self.elementwise(*a, g, |gi, _, yi| gi * yi * (T::one() - yi), out);
                self.accumulate(grads, *a, ga);
            }
            Op::Custom { inputs, op } => {
                let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                let values: Vec<&Array<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, out, g, &needs)?;
                for ((&v, need), ig) in inputs.iter().zip(&needs).zip(input_grads) {
                    if let (true, Some(ig)) = (*need, ig) {
                        if ig.shape() != self.shape(v) {
                            return Err(Error::shape(op.name(), "backward gradient shape"));
                        }
                        self.accumulate(grads, v, ig);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Array<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.leaves
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Removes and returns the gradient of a leaf.
    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        let i = self.leaves.binary_search_by_key(&v, |(k, _)| *k).ok()?;
        Some(std::mem::replace(&mut self.leaves[i].1, Array::zeros(&[0])))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Array<T>)> {
        self.leaves.iter().map(|(v, a)| (*v, a))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
