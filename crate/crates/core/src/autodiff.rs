//! Minimal reverse-mode differentiation over row-major f64 matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse. Non-smooth operations (ReLU, clamps, log floors) fold
//! their branch decisions into a running signature so a finite-difference
//! check can tell when a perturbation crossed a kink.

use crate::numerics::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    LogFloor(Var, f64),
    RowNormalize(Var),
    RowSum(Var),
    RowDivide(Var, Var),
    RowScale(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, f64),
    Transpose(Var),
    Reshape(Var),
    BatchedOuter(Var, Var),
    BatchedMatVec(Var, Var),
    Columns(Var, usize),
    Concat(Vec<Var>),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Floor applied to row norms inside [`Tape::row_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

/// Gradients for every node of a tape, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not influence it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of all branch decisions taken by non-smooth operations so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, bits: impl Iterator<Item = bool>) {
        // FNV-1a over the decision bits.
        let mut h = self.signature ^ 0xcbf2_9ce4_8422_2325;
        for b in bits {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.signature = h;
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that takes part in the forward pass but never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x m` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), b.cols(), "bias width mismatch");
        let cols = v.cols();
        for r in 0..v.rows() {
            for (x, &bv) in v.row_mut(r).iter_mut().zip(&b.as_slice()[..cols]) {
                *x += bv;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p - q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).unwrap();
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).unwrap();
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with a constant mask or weight matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "mul_const shape mismatch");
        let data = x.as_slice().iter().zip(c.as_slice()).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).unwrap();
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a).scale(c);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        self.record(x.as_slice().iter().map(|&v| v > 0.0));
        let v = x.map(|v| v.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::numerics::log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a).clone();
        self.record(x.as_slice().iter().flat_map(|&v| [v < lo, v > hi]));
        let v = x.map(|v| v.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let x = self.value(a).clone();
        self.record(x.as_slice().iter().map(|&v| v > floor));
        let v = x.map(|v| v.max(floor).ln());
        self.push(v, Op::LogFloor(a, floor))
    }

    /// Scales each row to unit L2 norm (norm floored at [`NORM_FLOOR`]).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.push(v, Op::RowNormalize(a))
    }

    /// `n x m -> n x 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let v = Matrix::from_vec(x.rows(), 1, data).unwrap();
        self.push(v, Op::RowSum(a))
    }

    /// Divides row `r` of `a` by `s[r]` where `s` is `n x 1`.
    pub fn row_divide(&mut self, a: Var, s: Var) -> Var {
        let mut v = self.value(a).clone();
        let d = self.value(s);
        assert_eq!(d.shape(), (v.rows(), 1), "row_divide shape mismatch");
        for r in 0..v.rows() {
            let c = d.as_slice()[r];
            v.row_mut(r).iter_mut().for_each(|x| *x /= c);
        }
        self.push(v, Op::RowDivide(a, s))
    }

    /// Multiplies row `r` of `a` by `s[r]` where `s` is `n x 1`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let mut v = self.value(a).clone();
        let d = self.value(s);
        assert_eq!(d.shape(), (v.rows(), 1), "row_scale shape mismatch");
        for r in 0..v.rows() {
            let c = d.as_slice()[r];
            v.row_mut(r).iter_mut().for_each(|x| *x *= c);
        }
        self.push(v, Op::RowScale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let p = crate::numerics::softmax_unchecked(row, 1.0);
            row.copy_from_slice(&p);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise `max(log_softmax(x), ln floor)`, i.e. `ln(max(softmax, floor))`
    /// evaluated without underflow.
    pub fn log_softmax_rows(&mut self, a: Var, floor: f64) -> Var {
        let mut v = self.value(a).clone();
        let ln_floor = floor.ln();
        let mut bits = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                let l = *x - lse;
                bits.push(l > ln_floor);
                *x = l.max(ln_floor);
            }
        }
        self.record(bits.into_iter());
        self.push(v, Op::LogSoftmaxRows(a, floor))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    /// Row-wise outer products: `u: n x p`, `v: n x q` gives `n x (p*q)`
    /// where row `r` is `flatten(u_r v_r^T)`.
    pub fn batched_outer(&mut self, u: Var, v: Var) -> Var {
        let (x, y) = (self.value(u), self.value(v));
        assert_eq!(x.rows(), y.rows(), "batched_outer row mismatch");
        let (n, p, q) = (x.rows(), x.cols(), y.cols());
        let mut out = Matrix::zeros(n, p * q);
        for r in 0..n {
            let (xr, yr) = (x.row(r), y.row(r));
            let o = out.row_mut(r);
            for (i, &a) in xr.iter().enumerate() {
                for (j, &b) in yr.iter().enumerate() {
                    o[i * q + j] = a * b;
                }
            }
        }
        self.push(out, Op::BatchedOuter(u, v))
    }

    /// Row-wise matrix-vector products: `f: n x (l*l)` holds one `l x l`
    /// matrix per row, `x: n x l`; row `r` of the result is `F_r x_r`.
    pub fn batched_matvec(&mut self, f: Var, x: Var) -> Var {
        let (fm, xm) = (self.value(f), self.value(x));
        let (n, l) = (xm.rows(), xm.cols());
        assert_eq!(fm.shape(), (n, l * l), "batched_matvec shape mismatch");
        let mut out = Matrix::zeros(n, l);
        for r in 0..n {
            let (fr, xr) = (fm.row(r), xm.row(r));
            let o = out.row_mut(r);
            for i in 0..l {
                o[i] = crate::numerics::dot(&fr[i * l..(i + 1) * l], xr);
            }
        }
        self.push(out, Op::BatchedMatVec(f, x))
    }

    /// Columns `start..start + width`.
    pub fn columns(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols(), "column slice out of range");
        let mut out = Matrix::zeros(x.rows(), width);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + width]);
        }
        self.push(out, Op::Columns(a, start))
    }

    /// Horizontal concatenation of equal-height blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, width);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat height mismatch");
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
                offset += m.cols();
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul_t(bv));
                    accumulate(&mut grads, *b, av.t_matmul(&g));
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, &y) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, zip_map(&g, c, |x, y| x * y)),
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulScalar(a, s) => {
                    let av = self.value(*a);
                    let gs = crate::numerics::dot(g.as_slice(), av.as_slice());
                    accumulate(&mut grads, *s, Matrix::filled(1, 1, gs));
                    accumulate(&mut grads, *a, g.scale(self.scalar(*s)));
                }
                Op::Relu(a) => {
                    let gi = zip_map(&g, out, |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, gi);
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, zip_map(&g, out, |x, y| x * y * (1.0 - y)));
                }
                Op::LogSigmoid(a) => {
                    let gi = zip_map(&g, self.value(*a), |x, y| x * sigmoid(-y));
                    accumulate(&mut grads, *a, gi);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, zip_map(&g, out, |x, y| x * y)),
                Op::Clamp(a, lo, hi) => {
                    let gi = zip_map(&g, self.value(*a), |x, y| {
                        if y < *lo || y > *hi {
                            0.0
                        } else {
                            x
                        }
                    });
                    accumulate(&mut grads, *a, gi);
                }
                Op::LogFloor(a, floor) => {
                    let gi = zip_map(&g, self.value(*a), |x, y| if y > *floor { x / y } else { 0.0 });
                    accumulate(&mut grads, *a, gi);
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let mut gi = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = crate::numerics::l2_norm(x.row(r)).max(NORM_FLOOR);
                        let (yr, gr) = (out.row(r), g.row(r));
                        let inner = crate::numerics::dot(yr, gr);
                        for ((o, &y), &gv) in gi.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - y * inner) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, gi);
                }
                Op::RowSum(a) => {
                    let x = self.value(*a);
                    let mut gi = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let c = g.as_slice()[r];
                        gi.row_mut(r).iter_mut().for_each(|v| *v = c);
                    }
                    accumulate(&mut grads, *a, gi);
                }
                Op::RowDivide(a, s) => {
                    let d = self.value(*s);
                    let mut ga = g.clone();
                    let mut gs = Matrix::zeros(d.rows(), 1);
                    for r in 0..g.rows() {
                        let c = d.as_slice()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v /= c);
                        gs.as_mut_slice()[r] = -crate::numerics::dot(g.row(r), out.row(r)) / c;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, gs);
                }
                Op::RowScale(a, s) => {
                    let (x, d) = (self.value(*a), self.value(*s));
                    let mut ga = g.clone();
                    let mut gs = Matrix::zeros(d.rows(), 1);
                    for r in 0..g.rows() {
                        let c = d.as_slice()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= c);
                        gs.as_mut_slice()[r] = crate::numerics::dot(g.row(r), x.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, gs);
                }
                Op::SoftmaxRows(a) => {
                    let mut gi = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let d = crate::numerics::softmax_backward(out.row(r), g.row(r), 1.0);
                        gi.row_mut(r).copy_from_slice(&d);
                    }
                    accumulate(&mut grads, *a, gi);
                }
                Op::LogSoftmaxRows(a, floor) => {
                    let ln_floor = floor.ln();
                    let mut gi = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let (yr, gr) = (out.row(r), g.row(r));
                        // Floored entries are constant: they pass no gradient.
                        let active: Vec<f64> = yr
                            .iter()
                            .zip(gr)
                            .map(|(&y, &gv)| if y > ln_floor { gv } else { 0.0 })
                            .collect();
                        let total: f64 = active.iter().sum();
                        let x = self.value(*a).row(r);
                        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        for ((o, &xv), &av) in gi.row_mut(r).iter_mut().zip(x).zip(&active) {
                            *o = av - (xv - lse).exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, gi);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.reshaped(r, c).unwrap());
                }
                Op::BatchedOuter(u, v) => {
                    let (x, y) = (self.value(*u), self.value(*v));
                    let (p, q) = (x.cols(), y.cols());
                    let mut gu = Matrix::zeros(x.rows(), p);
                    let mut gv = Matrix::zeros(y.rows(), q);
                    for r in 0..x.rows() {
                        let (xr, yr, gr) = (x.row(r), y.row(r), g.row(r));
                        for i in 0..p {
                            let block = &gr[i * q..(i + 1) * q];
                            gu.row_mut(r)[i] = crate::numerics::dot(block, yr);
                            let xi = xr[i];
                            for (o, &b) in gv.row_mut(r).iter_mut().zip(block) {
                                *o += xi * b;
                            }
                        }
                    }
                    accumulate(&mut grads, *u, gu);
                    accumulate(&mut grads, *v, gv);
                }
                Op::BatchedMatVec(f, x) => {
                    let (fm, xm) = (self.value(*f), self.value(*x));
                    let l = xm.cols();
                    let mut gf = Matrix::zeros(fm.rows(), fm.cols());
                    let mut gx = Matrix::zeros(xm.rows(), l);
                    for r in 0..xm.rows() {
                        let (fr, xr, gr) = (fm.row(r), xm.row(r), g.row(r));
                        let gfr = gf.row_mut(r);
                        for i in 0..l {
                            let gi = gr[i];
                            for (o, &xv) in gfr[i * l..(i + 1) * l].iter_mut().zip(xr) {
                                *o = gi * xv;
                            }
                        }
                        let gxr = gx.row_mut(r);
                        for i in 0..l {
                            let gi = gr[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (o, &fv) in gxr.iter_mut().zip(&fr[i * l..(i + 1) * l]) {
                                *o += gi * fv;
                            }
                        }
                    }
                    accumulate(&mut grads, *f, gf);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Columns(a, start) => {
                    let x = self.value(*a);
                    let mut gi = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        gi.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, gi);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gi = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gi.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, gi);
                        offset += w;
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
                }
            }
        }

        // Interior gradients were consumed by the sweep; only leaves remain.
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_init, InitScheme};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        seeded_init(rows, cols, InitScheme::UniformScaled, seed).scale((rows as f64).sqrt() * 2.0)
    }

    /// Builds a scalar from `inputs` via `f`, then checks every input
    /// coordinate against central differences.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Matrix]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = f(&mut t, &vars);
            let w = random(t.value(out).rows(), t.value(out).cols(), 777);
            let weighted = t.mul_const(out, w);
            let loss = t.sum(weighted);
            (t, vars, loss)
        };
        let (tape, vars, loss) = eval(&inputs);
        let grads = tape.backward(loss);
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]);
            for i in 0..x.len() {
                let mut plus = inputs.clone();
                plus[k].as_mut_slice()[i] += h;
                let mut minus = inputs.clone();
                minus[k].as_mut_slice()[i] -= h;
                let (tp, _, lp) = eval(&plus);
                let (tm, _, lm) = eval(&minus);
                let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
                let a = analytic.as_slice()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {k}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn dense_ops() {
        check(vec![random(3, 4, 1), random(4, 2, 2), random(1, 2, 3)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.add_bias(m, v[2])
        });
        check(vec![random(3, 4, 1), random(3, 4, 2)], |t, v| {
            let a = t.add(v[0], v[1]);
            let s = t.sub(a, v[1]);
            let p = t.mul(s, v[1]);
            let q = t.scale(p, -1.5);
            t.add_scalar(q, 0.3)
        });
    }

    #[test]
    fn smooth_nonlinearities() {
        check(vec![random(2, 5, 4)], |t, v| {
            let s = t.sigmoid(v[0]);
            let e = t.exp(s);
            t.relu(e)
        });
        check(vec![random(3, 3, 5).map(|x| x.abs() + 0.2)], |t, v| t.log_floor(v[0], 1e-12));
        check(vec![random(2, 4, 18).scale(8.0)], |t, v| t.log_sigmoid(v[0]));
        check(vec![random(2, 2, 6), random(1, 1, 7)], |t, v| {
            let c = t.clamp(v[1], -5.0, 5.0);
            t.mul_scalar(v[0], c)
        });
    }

    #[test]
    fn row_ops() {
        check(vec![random(4, 3, 8)], |t, v| t.row_normalize(v[0]));
        check(vec![random(4, 3, 9)], |t, v| t.softmax_rows(v[0]));
        check(vec![random(4, 3, 10)], |t, v| t.log_softmax_rows(v[0], 1e-12));
        check(vec![random(4, 3, 11), random(4, 1, 12).map(|x| x.abs() + 0.5)], |t, v| {
            let s = t.row_sum(v[0]);
            let d = t.row_divide(v[0], v[1]);
            let r = t.row_scale(d, s);
            let st = t.concat(&[r, s]);
            t.columns(st, 1, 3)
        });
    }

    #[test]
    fn batched_ops() {
        check(vec![random(3, 2, 13), random(3, 4, 14)], |t, v| t.batched_outer(v[0], v[1]));
        check(vec![random(3, 9, 15), random(3, 3, 16)], |t, v| t.batched_matvec(v[0], v[1]));
        check(vec![random(2, 6, 17)], |t, v| {
            let r = t.reshape(v[0], 4, 3);
            let s = t.softmax_rows(r);
            let tr = t.transpose(s);
            t.mean(tr)
        });
    }

    #[test]
    fn unused_leaves_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(2, 2, 1.0));
        let b = t.leaf(Matrix::filled(3, 1, 1.0));
        let loss = t.sum(a);
        let g = t.backward(loss);
        assert_eq!(g.get(a).as_slice(), &[1.0; 4]);
        assert_eq!(g.get(b).as_slice(), &[0.0; 3]);
    }

    #[test]
    fn floored_log_softmax_passes_no_gradient_through_floor() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[0.0, -100.0]));
        let l = t.log_softmax_rows(x, 1e-12);
        assert_eq!(t.value(l).as_slice()[1], 1e-12f64.ln());
        let c = t.columns(l, 1, 1);
        let loss = t.sum(c);
        let g = t.backward(loss);
        assert!(g.get(x).max_abs() < 1e-30);
    }

    #[test]
    fn signature_tracks_relu_branches() {
        let sig = |x: f64| {
            let mut t = Tape::new();
            let v = t.leaf(Matrix::row_vector(&[x, 1.0]));
            t.relu(v);
            t.signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
