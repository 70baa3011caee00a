//! Neural building blocks on top of the tape: affine maps, activations,
//! normalization, dropout, the GRU cell and small feedforward networks.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Silu,
    Exp,
}

impl Activation {
    pub fn apply_value(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
            Activation::Exp => x.exp(),
        }
    }
}

/// `y = x·Wᵀ + b` with `x: B×d`, `W: k×d`, `b: 1×k`.
pub fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (k, d) = w.shape();
    if x.shape().1 != d || b.shape() != (1, k) {
        return Err(Error::Shape(format!(
            "affine: x {:?}, W {:?}, b {:?}",
            x.shape(),
            (k, d),
            b.shape()
        )));
    }
    x.matmul_t(w)?.try_add(b)
}

pub fn activation(kind: Activation, x: Var<'_>) -> Var<'_> {
    match kind {
        Activation::Sigmoid => x.sigmoid(),
        Activation::Tanh => x.tanh(),
        Activation::Silu => x.silu(),
        Activation::Exp => x.exp(),
    }
}

pub fn softmax(x: Var<'_>) -> Var<'_> {
    x.softmax()
}

pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.layer_norm(gamma, beta, eps)
}

/// Inverted dropout. In eval mode, or with `rate == 0`, returns `x` itself.
pub fn dropout<'t>(x: Var<'t>, rate: f64, training: bool, rng: &mut Rng) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let (rows, cols) = x.shape();
    let mask = Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        }
    });
    x.try_mul(x.tape().leaf(mask))
}

pub(crate) fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// Collects leaves in binding order so gradients can be matched back to
/// parameters.
pub struct Binder<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, value: &Matrix) -> Var<'t> {
        let v = self.tape.leaf(value.clone());
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Named parameter visitation. `visit` and `visit_mut` walk the same order as
/// the corresponding `bind`.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix));

    fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, m| out.push((name, m)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// GRU weights: `W·` are `m×d`, `U·` are `m×m`, biases `1×m`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub wz: Matrix,
    pub uz: Matrix,
    pub bz: Matrix,
    pub wr: Matrix,
    pub ur: Matrix,
    pub br: Matrix,
    pub wh: Matrix,
    pub uh: Matrix,
    pub bh: Matrix,
}

pub struct GruVars<'t> {
    pub wz: Var<'t>,
    pub uz: Var<'t>,
    pub bz: Var<'t>,
    pub wr: Var<'t>,
    pub ur: Var<'t>,
    pub br: Var<'t>,
    pub wh: Var<'t>,
    pub uh: Var<'t>,
    pub bh: Var<'t>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((hidden, input));
        let u = || Array2::zeros((hidden, hidden));
        let b = || Array2::zeros((1, hidden));
        Self {
            wz: w(),
            uz: u(),
            bz: b(),
            wr: w(),
            ur: u(),
            br: b(),
            wh: w(),
            uh: u(),
            bh: b(),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        for w in [&mut p.wz, &mut p.wr, &mut p.wh] {
            *w = uniform_init(hidden, input, input, rng);
        }
        for u in [&mut p.uz, &mut p.ur, &mut p.uh] {
            *u = uniform_init(hidden, hidden, hidden, rng);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.wz.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.nrows()
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> GruVars<'t> {
        GruVars {
            wz: b.bind(&self.wz),
            uz: b.bind(&self.uz),
            bz: b.bind(&self.bz),
            wr: b.bind(&self.wr),
            ur: b.bind(&self.ur),
            br: b.bind(&self.br),
            wh: b.bind(&self.wh),
            uh: b.bind(&self.uh),
            bh: b.bind(&self.bh),
        }
    }

    /// Untaped GRU step on plain values (rows are batch samples).
    pub fn step_values(&self, x: &Matrix, h: &Matrix) -> Matrix {
        let gate = |w: &Matrix, u: &Matrix, b: &Matrix, hh: &Matrix| {
            let mut a = x.dot(&w.t());
            a += &hh.dot(&u.t());
            a += b;
            a
        };
        let z = gate(&self.wz, &self.uz, &self.bz, h).mapv_into(sigmoid);
        let r = gate(&self.wr, &self.ur, &self.br, h).mapv_into(sigmoid);
        let rh = &r * h;
        let cand = gate(&self.wh, &self.uh, &self.bh, &rh).mapv_into(f64::tanh);
        let one_minus_z = z.mapv(|v| 1.0 - v);
        &one_minus_z * h + &z * &cand
    }
}

impl Parameters for GruParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (name, m) in [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("bz", &self.bz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("br", &self.br),
            ("wh", &self.wh),
            ("uh", &self.uh),
            ("bh", &self.bh),
        ] {
            f(join(prefix, name), m);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        for m in [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ] {
            f(m);
        }
    }
}

/// One GRU step on the tape:
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `h̃ = tanh(Wh x + Uh (r ⊙ h) + bh)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell<'t>(x: Var<'t>, h: Var<'t>, p: &GruVars<'t>) -> Result<Var<'t>> {
    let (m, d) = p.wz.shape();
    if x.shape().1 != d || h.shape().1 != m || x.shape().0 != h.shape().0 {
        return Err(Error::Shape(format!(
            "gru_cell: x {:?}, h {:?}, expected input {d} and hidden {m}",
            x.shape(),
            h.shape()
        )));
    }
    let z = (x.matmul_t(p.wz)? + h.matmul_t(p.uz)? + p.bz).sigmoid();
    let r = (x.matmul_t(p.wr)? + h.matmul_t(p.ur)? + p.br).sigmoid();
    let cand = (x.matmul_t(p.wh)? + (r * h).matmul_t(p.uh)? + p.bh).tanh();
    Ok(z.rsub(1.0) * h + z * cand)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnnLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

/// Chain of affine layers each followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FnnParams {
    pub layers: Vec<FnnLayer>,
}

pub struct FnnVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>, Activation)>,
}

impl FnnParams {
    /// Builds a network from `(input, output, activation)` triples.
    pub fn new(spec: &[(usize, usize, Activation)], rng: &mut Rng) -> Result<Self> {
        for pair in spec.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(Error::Shape(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].1, pair[1].0
                )));
            }
        }
        let layers = spec
            .iter()
            .map(|&(input, output, activation)| FnnLayer {
                weight: uniform_init(output, input, input, rng),
                bias: Array2::zeros((1, output)),
                activation,
            })
            .collect();
        Ok(Self { layers })
    }

    /// The OCV network `g`: 1 → 32 → 32 → 1 (SiLU, SiLU, sigmoid).
    pub fn ocv_net(rng: &mut Rng) -> Self {
        Self::new(
            &[
                (1, 32, Activation::Silu),
                (32, 32, Activation::Silu),
                (32, 1, Activation::Sigmoid),
            ],
            rng,
        )
        .expect("static layout")
    }

    /// The RC-resistance network `f`: (SOC, SOH) → 32 → `e_rc` (SiLU, sigmoid).
    pub fn resistance_net(e_rc: usize, rng: &mut Rng) -> Self {
        Self::new(
            &[(2, 32, Activation::Silu), (32, e_rc, Activation::Sigmoid)],
            rng,
        )
        .expect("static layout")
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> FnnVars<'t> {
        FnnVars {
            layers: self
                .layers
                .iter()
                .map(|l| (b.bind(&l.weight), b.bind(&l.bias), l.activation))
                .collect(),
        }
    }

    /// Untaped forward pass.
    pub fn forward_values(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for l in &self.layers {
            let mut a = h.dot(&l.weight.t());
            a += &l.bias;
            h = a.mapv_into(|v| l.activation.apply_value(v));
        }
        h
    }
}

impl Parameters for FnnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("{i}.weight")), &l.weight);
            f(join(prefix, &format!("{i}.bias")), &l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        for l in &mut self.layers {
            f(&mut l.weight);
            f(&mut l.bias);
        }
    }
}

pub fn fnn_forward<'t>(p: &FnnVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let mut h = x;
    for &(w, b, act) in &p.layers {
        h = activation(act, affine(h, w, b)?);
    }
    Ok(h)
}
