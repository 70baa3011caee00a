//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value recorded on a [`Tape`] is a 2-D `f64` matrix; vectors are `1×k`
//! rows and batches stack samples along the row axis. Operations are recorded
//! in execution order, so the tape is a topologically sorted DAG and the
//! backward pass is a single reverse sweep.
//!
//! Binary elementwise operations broadcast any axis of length one, which is
//! all the batched model needs (bias rows, per-sample scalar columns).

use std::cell::RefCell;
use std::fmt;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

type Derivative = Box<dyn Fn(f64) -> f64 + Send>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMulT(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Silu(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Map(usize, Derivative),
    Clip(usize, f64, f64),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SumAll(usize),
    SumCols(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Huber {
        pred: usize,
        truth: Matrix,
        beta: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums a broadcast gradient back down to the parent's shape.
fn reduce_to(grad: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn dims(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Matrix> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a `1×1` output. Returns the gradient of the output
    /// with respect to every recorded node reachable from it.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = dims(&nodes[output.id].value);
        if out_shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), dims(&nodes[*a].value)));
                    acc(&mut grads, *b, reduce_to(g.clone(), dims(&nodes[*b].value)));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), dims(&nodes[*a].value)));
                    acc(&mut grads, *b, reduce_to(-&g, dims(&nodes[*b].value)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, reduce_to(&g * bv, dims(av)));
                    acc(&mut grads, *b, reduce_to(&g * av, dims(bv)));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = &g / bv;
                    let gb = -(&ga * y);
                    acc(&mut grads, *a, reduce_to(ga, dims(av)));
                    acc(&mut grads, *b, reduce_to(gb, dims(bv)));
                }
                Op::Neg(a) => acc(&mut grads, *a, -&g),
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::MatMulT(x, w) => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    acc(&mut grads, *x, g.dot(wv));
                    acc(&mut grads, *w, g.t().dot(xv));
                }
                Op::Sigmoid(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                    acc(&mut grads, *a, d);
                }
                Op::Silu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&nodes[*a].value).for_each(|d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * y),
                Op::Ln(a) => acc(&mut grads, *a, &g / &nodes[*a].value),
                Op::Recip(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &r| *d *= -r * r);
                    acc(&mut grads, *a, d);
                }
                Op::Map(a, deriv) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&nodes[*a].value)
                        .for_each(|d, &x| *d *= deriv(x));
                    acc(&mut grads, *a, d);
                }
                Op::Clip(a, lo, hi) => {
                    // boundary counts as inside
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&nodes[*a].value).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = nodes[p].value.ncols();
                        let slice = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        acc(&mut grads, p, slice);
                        start += width;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = &nodes[*a].value;
                    let mut d = Array2::zeros(dims(av));
                    d.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let av = &nodes[*a].value;
                    acc(&mut grads, *a, Array2::from_elem(dims(av), g[[0, 0]]));
                }
                Op::SumCols(a) => {
                    let av = &nodes[*a].value;
                    let d = g.broadcast(dims(av)).expect("row-sum broadcast").to_owned();
                    acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &nodes[*gamma].value;
                    let k = xhat.ncols() as f64;
                    let dxhat = &g * gv;
                    let mut dx = Array2::zeros(dims(xhat));
                    for (r, ((mut out, dh), xh)) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .enumerate()
                    {
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[r];
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &xv| {
                            *o = inv / k * (k * d - sum_dh - xv * sum_dh_xh);
                        });
                    }
                    acc(&mut grads, *x, dx);
                    acc(
                        &mut grads,
                        *gamma,
                        reduce_to(&g * xhat, dims(gv)),
                    );
                    acc(
                        &mut grads,
                        *beta,
                        reduce_to(g.clone(), dims(&nodes[*beta].value)),
                    );
                }
                Op::Huber { pred, truth, beta } => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&nodes[*pred].value)
                        .and(truth)
                        .for_each(|d, &p, &t| {
                            let diff = p - t;
                            *d *= if diff.abs() < *beta {
                                diff / beta
                            } else {
                                diff.signum()
                            };
                        });
                    acc(&mut grads, *pred, d);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by recorded node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the output does not depend on `var`.
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(var.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        dims(&self.tape.value_of(self.id))
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_of(self.id).clone()
    }

    /// Reads the single element of a `1×1` value.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_of(self.id);
        debug_assert_eq!(dims(&v), (1, 1));
        v[[0, 0]]
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.value_of(self.id))
    }

    /// Copies the value onto the tape as a fresh leaf: no gradient flows back.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.leaf(v)
    }

    fn unary(self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.tape.value_of(self.id).mapv(f);
        self.tape.push(value, op(self.id))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let shape = broadcast_shape(dims(&a), dims(&b)).ok_or_else(|| {
                Error::Shape(format!(
                    "{name}: cannot broadcast {:?} with {:?}",
                    dims(&a),
                    dims(&b)
                ))
            })?;
            let av = a.broadcast(shape).expect("checked broadcast");
            let bv = b.broadcast(shape).expect("checked broadcast");
            Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
        };
        Ok(self.tape.push(value, op(self.id, other.id)))
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn try_sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn try_div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|a| Op::Scale(a, c), |x| x * c)
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset, |x| x + c)
    }

    /// `c - self`, elementwise.
    pub fn rsub(self, c: f64) -> Var<'t> {
        self.neg().offset(c)
    }

    /// `self · wᵀ` for `self: B×d`, `w: k×d`.
    pub fn matmul_t(self, w: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let wv = self.tape.value_of(w.id);
            if x.ncols() != wv.ncols() {
                return Err(Error::Shape(format!(
                    "matmul: input has {} columns, weight expects {}",
                    x.ncols(),
                    wv.ncols()
                )));
            }
            x.dot(&wv.t())
        };
        Ok(self.tape.push(value, Op::MatMulT(self.id, w.id)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu, |x| x * sigmoid(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip, f64::recip)
    }

    /// Elementwise user function with its derivative.
    pub fn map(
        self,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + Send + 'static,
    ) -> Var<'t> {
        self.unary(|a| Op::Map(a, Box::new(derivative)), f)
    }

    /// Projection onto `[lo, hi]`.
    pub fn clip(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|a| Op::Clip(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.tape.value_of(self.id);
            if start + len > v.ncols() {
                return Err(Error::Shape(format!(
                    "slice {start}..{} out of {} columns",
                    start + len,
                    v.ncols()
                )));
            }
            v.slice(ndarray::s![.., start..start + len]).to_owned()
        };
        Ok(self.tape.push(value, Op::SliceCols(self.id, start)))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Array2::from_elem((1, 1), self.tape.value_of(self.id).sum());
        self.tape.push(value, Op::SumAll(self.id))
    }

    /// Per-row sum, `B×k → B×1`.
    pub fn sum_cols(self) -> Var<'t> {
        let value = self
            .tape
            .value_of(self.id)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.tape.push(value, Op::SumCols(self.id))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t> {
        let mut value = self.value();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.tape.push(value, Op::Softmax(self.id))
    }

    /// Row-wise layer normalization with `1×k` scale and shift.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, inv_std) = {
            let x = self.tape.value_of(self.id);
            let gv = self.tape.value_of(gamma.id);
            let bv = self.tape.value_of(beta.id);
            let k = x.ncols();
            if dims(&gv) != (1, k) || dims(&bv) != (1, k) {
                return Err(Error::Shape(format!(
                    "layer_norm: features {k}, gamma {:?}, beta {:?}",
                    dims(&gv),
                    dims(&bv)
                )));
            }
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(x.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / k as f64;
                let var = row.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / k as f64;
                let inv = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| (v - mean) * inv);
                inv_std.push(inv);
            }
            let value = &xhat * &*gv + &*bv;
            (value, xhat, inv_std)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Elementwise Huber loss against a constant target.
    pub fn huber(self, truth: &Matrix, beta: f64) -> Result<Var<'t>> {
        let value = {
            let p = self.tape.value_of(self.id);
            if dims(&p) != dims(truth) {
                return Err(Error::Shape(format!(
                    "huber: prediction {:?} vs target {:?}",
                    dims(&p),
                    dims(truth)
                )));
            }
            Zip::from(&*p)
                .and(truth)
                .map_collect(|&a, &b| crate::objective::huber(a, b, beta))
        };
        Ok(self.tape.push(
            value,
            Op::Huber {
                pred: self.id,
                truth: truth.clone(),
                beta,
            },
        ))
    }
}

/// Concatenates along columns; all parts must share a row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let tape = first.tape;
    let value = {
        let views: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
        let rows = views[0].nrows();
        if views.iter().any(|v| v.nrows() != rows) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let plain: Vec<_> = views.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(1), &plain).map_err(|e| Error::Shape(e.to_string()))?
    };
    Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $try:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            /// Panics on incompatible shapes; use the `try_` form to recover.
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.$try(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

impl_binop!(Add, add, try_add);
impl_binop!(Sub, sub, try_sub);
impl_binop!(Mul, mul, try_mul);
impl_binop!(Div, div, try_div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = x * x;
        let grads = tape.backward(y).unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let tape = Tape::new();
        let x = tape.row(&[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.row(&[10.0, 20.0]);
        let c = tape.column(&[2.0, 3.0]);
        let y = ((a + b) * c).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap(), &array![[5.0, 5.0]]);
        assert_eq!(g.get(c).unwrap(), &array![[33.0], [37.0]]);
        assert_eq!(g.get(a).unwrap(), &array![[2.0, 2.0], [3.0, 3.0]]);
    }

    #[test]
    fn clip_gradient_boundary_counts_inside() {
        let tape = Tape::new();
        let x = tape.row(&[-0.5, 0.0, 0.5, 1.0, 1.5]);
        let y = x.clip(0.0, 1.0).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[0.0, 1.0, 1.0, 1.0, 0.0]]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(1.0);
        let unused = tape.scalar(2.0);
        let g = tape.backward(x.exp()).unwrap();
        assert!(g.get(unused).is_none());
        assert_abs_diff_eq!(g.get(x).unwrap()[[0, 0]], 1f64.exp());
        assert_eq!(g.get_or_zeros(unused), array![[0.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = (x * x).detach() * x;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn shape_errors_surface() {
        let tape = Tape::new();
        let a = tape.row(&[1.0, 2.0, 3.0]);
        let b = tape.row(&[1.0, 2.0]);
        assert!(matches!(a.try_add(b), Err(Error::Shape(_))));
        assert!(matches!(a.matmul_t(b), Err(Error::Shape(_))));
    }
}
