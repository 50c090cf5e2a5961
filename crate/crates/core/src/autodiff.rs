//! Reverse-mode differentiation over dense matrices, plus the layers and
//! optimizer the nonlinear model is built from.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation order,
//! so walking the node list backwards is a reverse topological order.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::stiefel::{projection_distances, softmin_assign, AxisAlignedSubspaces};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `aᵀa`
    Gram(Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a column vector to every column.
    AddBias(Var, Var),
    Activation(Var, Activation),
    Scale(Var, f64),
    SumSquares(Var),
    /// Mean softmin cross-entropy of the columns against fixed targets.
    SoftminCrossEntropy(Var, Vec<usize>, AxisAlignedSubspaces),
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Gram(_) => "gram",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddBias(..) => "add_bias",
            Op::Activation(..) => "activation",
            Op::Scale(..) => "scale",
            Op::SumSquares(_) => "sum_squares",
            Op::SoftminCrossEntropy(..) => "softmin_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// A single forward pass and its gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            name: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A named trainable input.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// A constant input; no gradient is kept for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a parameter, zeros if the loss did not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        self.grad(v).cloned().unwrap_or_else(|| {
            let value = self.value(v);
            Matrix::zeros(value.nrows(), value.ncols())
        })
    }

    fn describe(&self, i: usize) -> String {
        let n = &self.nodes[i];
        match &n.name {
            Some(name) => name.clone(),
            None => format!("{}#{i}", n.op.label()),
        }
    }

    fn shape_error(&self, what: &str, a: Var, b: Var) -> Error {
        let (va, vb) = (self.value(a), self.value(b));
        domain(format!(
            "{what}: shapes {}×{} and {}×{} do not fit",
            va.nrows(),
            va.ncols(),
            vb.nrows(),
            vb.ncols()
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).ncols() != self.value(b).nrows() {
            return Err(self.shape_error("matmul", a, b));
        }
        let value = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `aᵀa`.
    pub fn gram(&mut self, a: Var) -> Var {
        let value = self.value(a).tr_mul(self.value(a));
        let rg = self.needs(&[a]);
        self.push(value, Op::Gram(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_error("add", a, b));
        }
        let value = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_error("sub", a, b));
        }
        let value = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.ncols() != 1 || vb.nrows() != va.nrows() {
            return Err(self.shape_error("add_bias", a, bias));
        }
        let mut value = va.clone();
        for mut col in value.column_iter_mut() {
            col += vb.column(0);
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|v| act.apply(v));
        let rg = self.needs(&[a]);
        self.push(value, Op::Activation(a, act), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `‖a‖_F²` as a `1 × 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::from_element(1, 1, self.value(a).norm_squared());
        let rg = self.needs(&[a]);
        self.push(value, Op::SumSquares(a), rg)
    }

    /// Mean cross-entropy of softmin memberships of the columns of `h_rot`.
    pub fn softmin_cross_entropy(
        &mut self,
        h_rot: Var,
        targets: Vec<usize>,
        subspaces: AxisAlignedSubspaces,
    ) -> Result<Var> {
        let h = self.value(h_rot);
        if targets.len() != h.ncols() {
            return Err(domain(format!("{} targets for {} columns", targets.len(), h.ncols())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= subspaces.k) {
            return Err(domain(format!("target {t} is outside [0, {})", subspaces.k)));
        }
        let y = softmin_assign(&projection_distances(h, &subspaces)?).y;
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -y[(i, t)].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len().max(1) as f64;
        let rg = self.needs(&[h_rot]);
        Ok(self.push(
            Matrix::from_element(1, 1, loss),
            Op::SoftminCrossEntropy(h_rot, targets, subspaces),
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => *existing += g,
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`. Call [`Tape::reset`] before
    /// recording and differentiating another pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff {
                node: self.describe(loss.0),
                message: "backward already ran on this tape; reset it before another pass".into(),
            });
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Autodiff {
                node: self.describe(loss.0),
                message: "backward needs a 1×1 loss".into(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Matrix::from_element(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Autodiff {
                    node: self.describe(i),
                    message: "gradient contains non-finite entries".into(),
                });
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(b).transpose();
                    let gb = self.value(a).tr_mul(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Gram(a) => {
                    let ga = self.value(a) * (&g + g.transpose());
                    self.accumulate(a, ga);
                }
                Op::Transpose(a) => self.accumulate(a, g.transpose()),
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, -g.clone());
                }
                Op::AddBias(a, bias) => {
                    let gb = Matrix::from_fn(g.nrows(), 1, |r, _| g.row(r).sum());
                    self.accumulate(a, g.clone());
                    self.accumulate(bias, gb);
                }
                Op::Activation(a, act) => {
                    let out = &self.nodes[i].value;
                    let input = &self.nodes[a.0].value;
                    let ga = Matrix::from_fn(g.nrows(), g.ncols(), |r, c| {
                        g[(r, c)] * act.derivative(input[(r, c)], out[(r, c)])
                    });
                    self.accumulate(a, ga);
                }
                Op::Scale(a, c) => self.accumulate(a, &g * c),
                Op::SumSquares(a) => {
                    let ga = self.value(a) * (2.0 * g[(0, 0)]);
                    self.accumulate(a, ga);
                }
                Op::SoftminCrossEntropy(a, targets, subspaces) => {
                    let h = self.value(a);
                    let y = softmin_assign(&projection_distances(h, &subspaces)?).y;
                    let n = targets.len().max(1) as f64;
                    let scale = g[(0, 0)] / n;
                    let ga = Matrix::from_fn(h.nrows(), h.ncols(), |c, j| {
                        let b = subspaces.block_of(c);
                        let ind = if b == targets[j] { 1.0 } else { 0.0 };
                        2.0 * h[(c, j)] * (y[(j, b)] - ind) * scale
                    });
                    self.accumulate(a, ga);
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Elementwise nonlinearity. Only smooth choices, so finite differences
/// agree with the analytic derivative everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative in terms of the input `x` and the output `y = f(x)`.
    fn derivative(self, _x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Fully-connected layer `act(W·x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
    pub activation: Activation,
    /// When false, `b` stays zero and receives no gradient.
    pub use_bias: bool,
}

impl Dense {
    /// Weights and bias uniform in `±1/√input`.
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut RngState) -> Self {
        let limit = 1.0 / (input.max(1) as f64).sqrt();
        let w = Matrix::from_fn(output, input, |_, _| (2.0 * rng.uniform() - 1.0) * limit);
        let b = Matrix::from_fn(output, 1, |_, _| (2.0 * rng.uniform() - 1.0) * limit);
        Self {
            w,
            b,
            activation,
            use_bias: true,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w: Matrix::identity(dim, dim),
            b: Matrix::zeros(dim, 1),
            activation: Activation::Identity,
            use_bias: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = &self.w * x;
        if self.use_bias {
            for mut col in out.column_iter_mut() {
                col += self.b.column(0);
            }
        }
        out.apply(|v| *v = self.activation.apply(*v));
        out
    }
}

/// A stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layers `sizes[0] → sizes[1] → …`, `hidden` activation everywhere but the
    /// last layer, which uses `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut RngState) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(domain(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == sizes.len() { output } else { hidden };
                Dense::new(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Dense::identity(dim)],
        }
    }

    /// Drops every bias, making the network an odd function when its
    /// activations are odd.
    pub fn without_bias(mut self) -> Self {
        for l in &mut self.layers {
            l.use_bias = false;
            l.b.fill(0.0);
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + if l.use_bias { l.b.len() } else { 0 })
            .sum()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        h
    }

    /// Registers the parameters on `tape` as `prefix.i.w` / `prefix.i.b`.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Vec<Var> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            vars.push(tape.param(format!("{prefix}.{i}.w"), l.w.clone()));
            vars.push(tape.param(format!("{prefix}.{i}.b"), l.b.clone()));
        }
        vars
    }

    /// Records the forward pass using parameter vars from [`Mlp::register`].
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let mut pre = tape.matmul(params[2 * i], h)?;
            if l.use_bias {
                pre = tape.add_bias(pre, params[2 * i + 1])?;
            }
            h = if l.activation == Activation::Identity {
                pre
            } else {
                tape.activation(pre, l.activation)
            };
        }
        Ok(h)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }
}

/// Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over an ordered list of parameter matrices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(domain("parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.nrows(), g.ncols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[k].shape() != g.shape() {
                return Err(domain(format!("shape mismatch for parameter {k}")));
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for idx in 0..g.len() {
                let gi = g[idx];
                m[idx] = c.beta1 * m[idx] + (1.0 - c.beta1) * gi;
                v[idx] = c.beta2 * v[idx] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                p[idx] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
