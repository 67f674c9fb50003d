//! Differentiable operators: elementwise arithmetic, axis permutation,
//! trailing-plane reductions, 1-D/2-D convolution, and the loss primitives.
//!
//! Every operator records a [`Vjp`] on the tape. Reductions fix their
//! tie-breaking and subgradient conventions here so backward passes are
//! deterministic:
//!
//! * max pooling routes the whole upstream gradient to the first maximal
//!   element in row-major order;
//! * std pooling has gradient 0 wherever the per-slice std is below 1e-12,
//!   so constant feature planes never produce NaN;
//! * `|x|`-style kinks (leaky relu, L1) take the left/zero subgradient at 0.

use crate::error::{Error, Result};
use crate::tape::{Node, Var, Vjp};
use crate::tensor::Tensor;

/// Std values below this are treated as exactly zero in the backward pass.
pub const STD_EPS: f64 = 1e-12;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let v = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // strictly inside (0,1) even where exp underflows
    v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

// ---------------------------------------------------------------------------
// op structs

struct AddOp;
struct SubOp;
struct MulOp;
struct ScaleOp(f64);
struct AddConstOp;
struct SigmoidOp;
struct SqrtOp;
struct LeakyReluOp(f64);
struct SumOp;
struct ReshapeOp(Vec<usize>);
struct Permute3Op {
    axes: [usize; 3],
}
struct ReduceMeanTail2Op;
struct ReduceStdTail2Op;
struct ReduceMaxTail2Op;
struct Conv1dSamePadOp;
struct BroadcastMulOp;
struct ScalarMulOp;
struct Conv2dOp {
    stride: usize,
    pad: usize,
}
struct BiasAddOp;
struct BceWithLogitsOp {
    targets: Tensor,
}
struct L1Op {
    targets: Tensor,
}
struct Index1Op(usize);
struct SliceChOp {
    start: usize,
    end: usize,
}
struct MulConstOp {
    factors: Tensor,
}

impl Vjp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![g.clone(), g.clone()]
    }
}

impl Vjp for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let neg = Tensor::from_fn(g.shape(), |i| -g.data()[i]);
        vec![g.clone(), neg]
    }
}

impl Vjp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = Tensor::from_fn(g.shape(), |i| g.data()[i] * b.data()[i]);
        let db = Tensor::from_fn(g.shape(), |i| g.data()[i] * a.data()[i]);
        vec![da, db]
    }
}

impl Vjp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![Tensor::from_fn(g.shape(), |i| g.data()[i] * self.0)]
    }
}

impl Vjp for AddConstOp {
    fn name(&self) -> &'static str {
        "add_const"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![g.clone()]
    }
}

impl Vjp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], out: &Tensor) -> Vec<Tensor> {
        let d = Tensor::from_fn(g.shape(), |i| {
            let s = out.data()[i];
            g.data()[i] * s * (1.0 - s)
        });
        vec![d]
    }
}

impl Vjp for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], out: &Tensor) -> Vec<Tensor> {
        let d = Tensor::from_fn(g.shape(), |i| g.data()[i] / (2.0 * out.data()[i]));
        vec![d]
    }
}

impl Vjp for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let d = Tensor::from_fn(g.shape(), |i| {
            let slope = if x.data()[i] > 0.0 { 1.0 } else { self.0 };
            g.data()[i] * slope
        });
        vec![d]
    }
}

impl Vjp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![Tensor::full(inputs[0].shape(), g.item())]
    }
}

impl Vjp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let _ = &self.0;
        vec![g.reshaped(inputs[0].shape()).expect("same element count")]
    }
}

pub(crate) fn invert_axes(axes: [usize; 3]) -> [usize; 3] {
    let mut inv = [0usize; 3];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute3_tensor(t: &Tensor, axes: [usize; 3]) -> Tensor {
    let s = t.shape();
    let out_shape = [s[axes[0]], s[axes[1]], s[axes[2]]];
    let mut out = vec![0.0; t.len()];
    let (s1, s2) = (s[1], s[2]);
    let (o1, o2) = (out_shape[1], out_shape[2]);
    for i0 in 0..s[0] {
        for i1 in 0..s1 {
            for i2 in 0..s2 {
                let src = [i0, i1, i2];
                let dst = [src[axes[0]], src[axes[1]], src[axes[2]]];
                out[(dst[0] * o1 + dst[1]) * o2 + dst[2]] = t.data()[(i0 * s1 + i1) * s2 + i2];
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("permutation preserves element count")
}

impl Vjp for Permute3Op {
    fn name(&self) -> &'static str {
        "permute3"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![permute3_tensor(g, invert_axes(self.axes))]
    }
}

impl Vjp for ReduceMeanTail2Op {
    fn name(&self) -> &'static str {
        "reduce_mean_tail2"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let (l, a, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let inv = 1.0 / (a * b) as f64;
        let mut d = vec![0.0; x.len()];
        for m in 0..l {
            let gm = g.data()[m] * inv;
            for e in &mut d[m * a * b..(m + 1) * a * b] {
                *e = gm;
            }
        }
        vec![Tensor::new(x.shape().to_vec(), d).expect("same shape")]
    }
}

impl Vjp for ReduceStdTail2Op {
    fn name(&self) -> &'static str {
        "reduce_std_tail2"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let (l, a, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (a * b) as f64;
        let mut d = vec![0.0; x.len()];
        for m in 0..l {
            let std = out.data()[m];
            if std < STD_EPS {
                continue; // documented subgradient: 0 at zero variance
            }
            let slice = &x.data()[m * a * b..(m + 1) * a * b];
            let mean = slice.iter().sum::<f64>() / n;
            let gm = g.data()[m];
            for (e, &v) in d[m * a * b..(m + 1) * a * b].iter_mut().zip(slice) {
                *e = gm * (v - mean) / (n * std);
            }
        }
        vec![Tensor::new(x.shape().to_vec(), d).expect("same shape")]
    }
}

impl Vjp for ReduceMaxTail2Op {
    fn name(&self) -> &'static str {
        "reduce_max_tail2"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let (l, a, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut d = vec![0.0; x.len()];
        for m in 0..l {
            let slice = &x.data()[m * a * b..(m + 1) * a * b];
            let mut arg = 0;
            for (i, &v) in slice.iter().enumerate() {
                if v > slice[arg] {
                    arg = i;
                }
            }
            d[m * a * b + arg] = g.data()[m];
        }
        vec![Tensor::new(x.shape().to_vec(), d).expect("same shape")]
    }
}

impl Vjp for Conv1dSamePadOp {
    fn name(&self) -> &'static str {
        "conv1d_samepad"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let (v, kern) = (inputs[0], inputs[1]);
        let (l, k) = (v.len(), kern.len());
        let h = (k - 1) / 2;
        let mut dv = vec![0.0; l];
        let mut dk = vec![0.0; k];
        for i in 0..l {
            let gi = g.data()[i];
            for j in 0..k {
                let p = i as isize + j as isize - h as isize;
                if p >= 0 && (p as usize) < l {
                    dv[p as usize] += gi * kern.data()[j];
                    dk[j] += gi * v.data()[p as usize];
                }
            }
        }
        vec![
            Tensor::new(vec![l], dv).expect("same shape"),
            Tensor::new(vec![k], dk).expect("same shape"),
        ]
    }
}

impl Vjp for BroadcastMulOp {
    fn name(&self) -> &'static str {
        "broadcast_mul"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let (gate, t) = (inputs[0], inputs[1]);
        let (l, a, b) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut dgate = vec![0.0; l];
        let mut dt = vec![0.0; t.len()];
        for m in 0..l {
            let gm = gate.data()[m];
            let mut acc = 0.0;
            for i in 0..a * b {
                let idx = m * a * b + i;
                acc += g.data()[idx] * t.data()[idx];
                dt[idx] = g.data()[idx] * gm;
            }
            dgate[m] = acc;
        }
        vec![
            Tensor::new(gate.shape().to_vec(), dgate).expect("same shape"),
            Tensor::new(t.shape().to_vec(), dt).expect("same shape"),
        ]
    }
}

impl Vjp for ScalarMulOp {
    fn name(&self) -> &'static str {
        "scalar_mul"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let (s, t) = (inputs[0], inputs[1]);
        let ds = g
            .data()
            .iter()
            .zip(t.data())
            .map(|(&gi, &ti)| gi * ti)
            .sum::<f64>();
        let dt = Tensor::from_fn(t.shape(), |i| g.data()[i] * s.item());
        vec![Tensor::scalar(ds), dt]
    }
}

/// Valid output-coordinate range so that `o*stride + k - pad` stays inside
/// `[0, extent)`.
#[inline]
fn conv_range(out_extent: usize, in_extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_in = in_extent + pad;
    let hi = if hi_in > k {
        ((hi_in - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Vjp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c_in, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let (s, p) = (self.stride, self.pad);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for o in 0..c_out {
            for c in 0..c_in {
                for u in 0..kh {
                    let (oy_lo, oy_hi) = conv_range(oh, h, s, u, p);
                    for v in 0..kw {
                        let (ox_lo, ox_hi) = conv_range(ow, wid, s, v, p);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wi = ((o * c_in + c) * kh + u) * kw + v;
                        let wv = w.data()[wi];
                        let mut dwv = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + u - p;
                            let grow = (o * oh + oy) * ow;
                            let xrow = (c * h + iy) * wid;
                            if s == 1 {
                                let gslice = &g.data()[grow + ox_lo..grow + ox_hi];
                                // ox_lo + v >= p by construction of the range
                                let xs = xrow + (ox_lo + v - p);
                                let xslice = &x.data()[xs..xs + gslice.len()];
                                let dxslice = &mut dx[xs..xs + gslice.len()];
                                // two plain loops vectorize; one mixed
                                // vector-store/scalar-reduce loop does not
                                for i in 0..gslice.len() {
                                    dxslice[i] += gslice[i] * wv;
                                }
                                for i in 0..gslice.len() {
                                    dwv += gslice[i] * xslice[i];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let gv = g.data()[grow + ox];
                                    let xi = xrow + (ox * s + v - p);
                                    dx[xi] += gv * wv;
                                    dwv += gv * x.data()[xi];
                                }
                            }
                        }
                        dw[wi] += dwv;
                    }
                }
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx).expect("same shape"),
            Tensor::new(w.shape().to_vec(), dw).expect("same shape"),
        ]
    }
}

impl Vjp for BiasAddOp {
    fn name(&self) -> &'static str {
        "bias_add"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut db = vec![0.0; c];
        for ch in 0..c {
            db[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
        }
        vec![g.clone(), Tensor::new(vec![c], db).expect("same shape")]
    }
}

impl Vjp for BceWithLogitsOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let z = inputs[0];
        let d = Tensor::from_fn(z.shape(), |i| {
            g.data()[i] * (sigmoid_scalar(z.data()[i]) - self.targets.data()[i])
        });
        vec![d]
    }
}

impl Vjp for L1Op {
    fn name(&self) -> &'static str {
        "l1"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let p = inputs[0];
        let d = Tensor::from_fn(p.shape(), |i| {
            let diff = p.data()[i] - self.targets.data()[i];
            // subgradient 0 at the kink
            g.data()[i] * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 }
        });
        vec![d]
    }
}

impl Vjp for Index1Op {
    fn name(&self) -> &'static str {
        "index1"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let mut d = Tensor::zeros(inputs[0].shape());
        d.data_mut()[self.0] = g.item();
        vec![d]
    }
}

impl Vjp for SliceChOp {
    fn name(&self) -> &'static str {
        "slice_ch"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let hw = x.shape()[1] * x.shape()[2];
        let mut d = vec![0.0; x.len()];
        d[self.start * hw..self.end * hw].copy_from_slice(g.data());
        vec![Tensor::new(x.shape().to_vec(), d).expect("same shape")]
    }
}

impl Vjp for MulConstOp {
    fn name(&self) -> &'static str {
        "mul_const"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![Tensor::from_fn(g.shape(), |i| {
            g.data()[i] * self.factors.data()[i]
        })]
    }
}

// ---------------------------------------------------------------------------
// Var surface

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Box<dyn Vjp>) -> Var<'t> {
        self.tape.push(Node {
            value,
            parents: vec![self.id],
            op: Some(op),
        })
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Box<dyn Vjp>) -> Var<'t> {
        debug_assert!(self.same_tape(&other), "vars from different tapes");
        self.tape.push(Node {
            value,
            parents: vec![self.id, other.id],
            op: Some(op),
        })
    }

    fn with_value<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn values2<R>(self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(other, |a, b| crate::tensor::zip_map("add", a, b, |x, y| x + y))?;
        Ok(self.binary(other, value, Box::new(AddOp)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(other, |a, b| crate::tensor::zip_map("sub", a, b, |x, y| x - y))?;
        Ok(self.binary(other, value, Box::new(SubOp)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(other, |a, b| crate::tensor::zip_map("mul", a, b, |x, y| x * y))?;
        Ok(self.binary(other, value, Box::new(MulOp)))
    }

    /// Multiply by a plain (non-differentiated) scalar.
    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.with_value(|a| Tensor::from_fn(a.shape(), |i| a.data()[i] * factor));
        self.unary(value, Box::new(ScaleOp(factor)))
    }

    /// Add a constant tensor of the same shape (no gradient flows into it).
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let value = self.with_value(|a| crate::tensor::zip_map("add_const", a, c, |x, y| x + y))?;
        Ok(self.unary(value, Box::new(AddConstOp)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value =
            self.with_value(|a| Tensor::from_fn(a.shape(), |i| sigmoid_scalar(a.data()[i])));
        self.unary(value, Box::new(SigmoidOp))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let value = self.with_value(|a| {
            if let Some(v) = a.data().iter().find(|v| **v < 0.0) {
                return Err(Error::invalid("sqrt", format!("negative input {v}")));
            }
            Ok(Tensor::from_fn(a.shape(), |i| a.data()[i].sqrt()))
        })?;
        Ok(self.unary(value, Box::new(SqrtOp)))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let value = self.with_value(|a| {
            Tensor::from_fn(a.shape(), |i| {
                let x = a.data()[i];
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            })
        });
        self.unary(value, Box::new(LeakyReluOp(slope)))
    }

    /// Sum of all elements, as a length-1 tensor.
    pub fn sum(self) -> Var<'t> {
        let value = self.with_value(|a| Tensor::scalar(a.data().iter().sum()));
        self.unary(value, Box::new(SumOp))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|a| a.reshaped(shape))?;
        Ok(self.unary(value, Box::new(ReshapeOp(shape.to_vec()))))
    }

    /// Permute the axes of a rank-3 tensor.
    pub fn permute3(self, axes: [usize; 3]) -> Result<Var<'t>> {
        let mut seen = [false; 3];
        for &a in &axes {
            if a > 2 || seen[a] {
                return Err(Error::invalid(
                    "permute3",
                    format!("{axes:?} is not a permutation of (0,1,2)"),
                ));
            }
            seen[a] = true;
        }
        let value = self.with_value(|a| {
            if a.rank() != 3 {
                return Err(Error::invalid(
                    "permute3",
                    format!("expected rank-3 input, got shape {:?}", a.shape()),
                ));
            }
            Ok(permute3_tensor(a, axes))
        })?;
        Ok(self.unary(value, Box::new(Permute3Op { axes })))
    }

    fn check_rank3(self, op: &'static str) -> Result<()> {
        self.with_value(|a| {
            if a.rank() != 3 {
                Err(Error::invalid(
                    op,
                    format!("expected rank-3 input, got shape {:?}", a.shape()),
                ))
            } else {
                Ok(())
            }
        })
    }

    /// Mean over the trailing two axes: L×A×B → L×1×1.
    pub fn reduce_mean_tail2(self) -> Result<Var<'t>> {
        self.check_rank3("reduce_mean_tail2")?;
        let value = self.with_value(|a| {
            let (l, ab) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
            let data = (0..l)
                .map(|m| a.data()[m * ab..(m + 1) * ab].iter().sum::<f64>() / ab as f64)
                .collect();
            Tensor::new(vec![l, 1, 1], data).expect("static shape")
        });
        Ok(self.unary(value, Box::new(ReduceMeanTail2Op)))
    }

    /// Population standard deviation over the trailing two axes: L×A×B → L×1×1.
    /// Constant slices yield exactly 0.
    pub fn reduce_std_tail2(self) -> Result<Var<'t>> {
        self.check_rank3("reduce_std_tail2")?;
        let value = self.with_value(|a| {
            let (l, ab) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
            let data = (0..l)
                .map(|m| {
                    let slice = &a.data()[m * ab..(m + 1) * ab];
                    // constant slices are exactly zero, with no rounding residue
                    if slice.iter().all(|&v| v == slice[0]) {
                        return 0.0;
                    }
                    let mean = slice.iter().sum::<f64>() / ab as f64;
                    let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                        / ab as f64;
                    var.sqrt()
                })
                .collect();
            Tensor::new(vec![l, 1, 1], data).expect("static shape")
        });
        Ok(self.unary(value, Box::new(ReduceStdTail2Op)))
    }

    /// Max over the trailing two axes: L×A×B → L×1×1.
    pub fn reduce_max_tail2(self) -> Result<Var<'t>> {
        self.check_rank3("reduce_max_tail2")?;
        let value = self.with_value(|a| {
            let (l, ab) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
            let data = (0..l)
                .map(|m| {
                    a.data()[m * ab..(m + 1) * ab]
                        .iter()
                        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v))
                })
                .collect();
            Tensor::new(vec![l, 1, 1], data).expect("static shape")
        });
        Ok(self.unary(value, Box::new(ReduceMaxTail2Op)))
    }

    /// Zero-padded same-length 1-D cross-correlation, stride 1, no bias.
    pub fn conv1d_samepad(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(kernel, |v, kern| {
            if v.rank() != 1 || kern.rank() != 1 {
                return Err(Error::invalid("conv1d_samepad", "inputs must be rank-1"));
            }
            let (l, k) = (v.len(), kern.len());
            if k % 2 == 0 {
                return Err(Error::invalid(
                    "conv1d_samepad",
                    format!("kernel length {k} must be odd"),
                ));
            }
            if k > 2 * l + 1 {
                return Err(Error::invalid(
                    "conv1d_samepad",
                    format!("kernel length {k} exceeds 2*{l}+1"),
                ));
            }
            let h = (k - 1) / 2;
            let data = (0..l)
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let p = i as isize + j as isize - h as isize;
                        if p >= 0 && (p as usize) < l {
                            acc += kern.data()[j] * v.data()[p as usize];
                        }
                    }
                    acc
                })
                .collect();
            Tensor::new(vec![l], data)
        })?;
        Ok(self.binary(kernel, value, Box::new(Conv1dSamePadOp)))
    }

    /// Gate an L×A×B tensor by an L×1×1 gate: out[m,i,j] = gate[m]·t[m,i,j].
    pub fn broadcast_mul(self, t: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(t, |gate, x| {
            if gate.rank() != 3 || x.rank() != 3 || gate.shape()[1] != 1 || gate.shape()[2] != 1 {
                return Err(Error::invalid(
                    "broadcast_mul",
                    format!("gate must be L×1×1, got {:?}", gate.shape()),
                ));
            }
            if gate.shape()[0] != x.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_mul",
                    left: gate.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            let (l, ab) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
            let mut data = vec![0.0; x.len()];
            for m in 0..l {
                let gm = gate.data()[m];
                for i in 0..ab {
                    data[m * ab + i] = gm * x.data()[m * ab + i];
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        })?;
        Ok(self.binary(t, value, Box::new(BroadcastMulOp)))
    }

    /// Multiply a tensor by a trainable scalar (length-1 var).
    pub fn scalar_mul(self, t: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(t, |s, x| {
            if s.len() != 1 {
                return Err(Error::invalid(
                    "scalar_mul",
                    format!("scalar operand must have one element, got {:?}", s.shape()),
                ));
            }
            Ok(Tensor::from_fn(x.shape(), |i| s.item() * x.data()[i]))
        })?;
        Ok(self.binary(t, value, Box::new(ScalarMulOp)))
    }

    /// 2-D cross-correlation of a C×H×W input with an O×C×kh×kw weight.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let value = self.values2(weight, |x, w| {
            if x.rank() != 3 || w.rank() != 4 {
                return Err(Error::invalid("conv2d", "expected C×H×W input and O×C×kh×kw weight"));
            }
            if x.shape()[0] != w.shape()[1] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: x.shape().to_vec(),
                    right: w.shape().to_vec(),
                });
            }
            let (c_in, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            if h + 2 * pad < kh || wid + 2 * pad < kw || stride == 0 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel {kh}x{kw} stride {stride} too large for {h}x{wid} with pad {pad}"),
                ));
            }
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (wid + 2 * pad - kw) / stride + 1;
            let (s, p) = (stride, pad);
            let mut out = vec![0.0; c_out * oh * ow];
            for o in 0..c_out {
                for c in 0..c_in {
                    for u in 0..kh {
                        let (oy_lo, oy_hi) = conv_range(oh, h, s, u, p);
                        for v in 0..kw {
                            let (ox_lo, ox_hi) = conv_range(ow, wid, s, v, p);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let wv = w.data()[((o * c_in + c) * kh + u) * kw + v];
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + u - p;
                                let orow = (o * oh + oy) * ow;
                                let xrow = (c * h + iy) * wid;
                                if s == 1 {
                                    let xs = xrow + (ox_lo + v - p);
                                    let n = ox_hi - ox_lo;
                                    let xslice = &x.data()[xs..xs + n];
                                    let oslice = &mut out[orow + ox_lo..orow + ox_hi];
                                    for i in 0..n {
                                        oslice[i] += wv * xslice[i];
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        out[orow + ox] += wv * x.data()[xrow + (ox * s + v - p)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![c_out, oh, ow], out)
        })?;
        Ok(self.binary(weight, value, Box::new(Conv2dOp { stride, pad })))
    }

    /// Add a per-channel bias (rank-1, length C) to a C×H×W tensor.
    pub fn bias_add(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = self.values2(bias, |x, b| {
            if x.rank() != 3 || b.rank() != 1 || b.len() != x.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "bias_add",
                    left: x.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let hw = x.shape()[1] * x.shape()[2];
            Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i / hw]))
        })?;
        Ok(self.binary(bias, value, Box::new(BiasAddOp)))
    }

    /// Numerically stable elementwise binary cross-entropy on logits against
    /// constant targets in [0,1].
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let value = self.with_value(|z| {
            if z.shape() != targets.shape() {
                return Err(Error::ShapeMismatch {
                    op: "bce_with_logits",
                    left: z.shape().to_vec(),
                    right: targets.shape().to_vec(),
                });
            }
            Ok(Tensor::from_fn(z.shape(), |i| {
                let (zi, yi) = (z.data()[i], targets.data()[i]);
                zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p()
            }))
        })?;
        Ok(self.unary(
            value,
            Box::new(BceWithLogitsOp {
                targets: targets.clone(),
            }),
        ))
    }

    /// Extract element `i` of a rank-1 tensor as a length-1 var.
    pub fn index1(self, i: usize) -> Result<Var<'t>> {
        let value = self.with_value(|a| {
            if a.rank() != 1 || i >= a.len() {
                return Err(Error::invalid(
                    "index1",
                    format!("index {i} out of range for shape {:?}", a.shape()),
                ));
            }
            Ok(Tensor::scalar(a.data()[i]))
        })?;
        Ok(self.unary(value, Box::new(Index1Op(i))))
    }

    /// Channels `[start, end)` of a rank-3 tensor.
    pub fn slice_ch(self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            if x.rank() != 3 || start >= end || end > x.shape()[0] {
                return Err(Error::invalid(
                    "slice_ch",
                    format!("invalid channel range {start}..{end} for shape {:?}", x.shape()),
                ));
            }
            let hw = x.shape()[1] * x.shape()[2];
            Tensor::new(
                vec![end - start, x.shape()[1], x.shape()[2]],
                x.data()[start * hw..end * hw].to_vec(),
            )
        })?;
        Ok(self.unary(value, Box::new(SliceChOp { start, end })))
    }

    /// Elementwise product with a constant tensor (masking).
    pub fn mul_const(self, factors: &Tensor) -> Result<Var<'t>> {
        let value =
            self.with_value(|a| crate::tensor::zip_map("mul_const", a, factors, |x, y| x * y))?;
        Ok(self.unary(
            value,
            Box::new(MulConstOp {
                factors: factors.clone(),
            }),
        ))
    }

    /// Elementwise absolute difference against a constant target.
    pub fn l1_dist(self, targets: &Tensor) -> Result<Var<'t>> {
        let value = self.with_value(|p| {
            if p.shape() != targets.shape() {
                return Err(Error::ShapeMismatch {
                    op: "l1_dist",
                    left: p.shape().to_vec(),
                    right: targets.shape().to_vec(),
                });
            }
            Ok(Tensor::from_fn(p.shape(), |i| {
                (p.data()[i] - targets.data()[i]).abs()
            }))
        })?;
        Ok(self.unary(
            value,
            Box::new(L1Op {
                targets: targets.clone(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(t1(&[0.0]));
        assert_eq!(x.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn add_and_scalar_scale() {
        let tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let c = tape.leaf(t1(&[1.0, 3.0]));
        assert_eq!(c.scale(2.0).value().data(), &[2.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn sqrt_rejects_negative() {
        let tape = Tape::new();
        let x = tape.leaf(t1(&[4.0, -1.0]));
        assert!(x.sqrt().is_err());
    }

    #[test]
    fn permute3_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        assert_eq!(x.permute3([2, 1, 0]).unwrap().shape(), vec![4, 3, 2]);
        assert_eq!(x.permute3([1, 0, 2]).unwrap().shape(), vec![3, 2, 4]);
        let id = x.permute3([0, 1, 2]).unwrap();
        assert_eq!(id.value(), x.value());
        assert!(x.permute3([0, 0, 2]).is_err());
    }

    #[test]
    fn permute3_round_trip_exact() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 4, 5], |i| (i as f64).sin()));
        for axes in [[2, 1, 0], [1, 0, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1]] {
            let p = x.permute3(axes).unwrap();
            let back = p.permute3(invert_axes(axes)).unwrap();
            assert_eq!(back.value(), x.value(), "axes {axes:?}");
        }
    }

    #[test]
    fn reduce_mean_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        assert_eq!(x.reduce_mean_tail2().unwrap().value().data(), &[2.0]);
        let ones = tape.leaf(Tensor::full(&[2, 3, 4], 1.0));
        assert_eq!(ones.reduce_mean_tail2().unwrap().value().data(), &[1.0, 1.0]);
        let y = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 6.0, 2.0]).unwrap());
        assert_eq!(y.reduce_mean_tail2().unwrap().value().data(), &[2.0]);
    }

    #[test]
    fn reduce_std_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        assert_eq!(x.reduce_std_tail2().unwrap().value().data(), &[1.0]);
        let c = tape.leaf(Tensor::full(&[2, 3, 4], 7.25));
        assert_eq!(c.reduce_std_tail2().unwrap().value().data(), &[0.0, 0.0]);
        let y = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 0.0, 4.0]).unwrap());
        let got = y.reduce_std_tail2().unwrap().value().data()[0];
        assert!((got - 3.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_slice_std_backward_is_exactly_zero() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[2, 3, 4], 5.0));
        let s = c.reduce_std_tail2().unwrap().sum();
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(c).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(c).all_finite());
    }

    #[test]
    fn reduce_max_examples_and_tie_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        assert_eq!(x.reduce_max_tail2().unwrap().value().data(), &[3.0]);
        let n = tape.leaf(Tensor::new(vec![1, 1, 2], vec![-2.0, -7.0]).unwrap());
        assert_eq!(n.reduce_max_tail2().unwrap().value().data(), &[-2.0]);

        // tie: gradient goes to the first maximal element in row-major order
        let t = tape.leaf(Tensor::new(vec![1, 1, 2], vec![5.0, 5.0]).unwrap());
        let s = t.reduce_max_tail2().unwrap().sum();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(t).data(), &[1.0, 0.0]);
    }

    #[test]
    fn conv1d_examples() {
        let tape = Tape::new();
        let v = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let delta = tape.leaf(t1(&[0.0, 1.0, 0.0]));
        assert_eq!(v.conv1d_samepad(delta).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let box3 = tape.leaf(t1(&[1.0, 1.0, 1.0]));
        assert_eq!(v.conv1d_samepad(box3).unwrap().value().data(), &[3.0, 6.0, 5.0]);
        let z = tape.leaf(t1(&[0.0, 0.0, 0.0]));
        assert_eq!(z.conv1d_samepad(box3).unwrap().value().data(), &[0.0, 0.0, 0.0]);
        let even = tape.leaf(t1(&[1.0, 1.0]));
        assert!(v.conv1d_samepad(even).is_err());

        // kernel longer than 2L+1 is rejected
        let short = tape.leaf(t1(&[1.0]));
        let long_kernel = tape.leaf(t1(&[1.0, 1.0, 1.0, 1.0, 1.0]));
        assert!(short.conv1d_samepad(long_kernel).is_err());
    }

    #[test]
    fn broadcast_mul_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let gate = tape.leaf(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        assert_eq!(gate.broadcast_mul(x).unwrap().value().data(), &[2.0, 6.0]);

        let ones = tape.leaf(Tensor::full(&[2, 1, 1], 1.0));
        let t = tape.leaf(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        assert_eq!(ones.broadcast_mul(t).unwrap().value(), t.value());

        let zeros = tape.leaf(Tensor::zeros(&[2, 1, 1]));
        assert!(zeros.broadcast_mul(t).unwrap().value().data().iter().all(|&v| v == 0.0));

        let bad = tape.leaf(Tensor::full(&[3, 1, 1], 1.0));
        assert!(bad.broadcast_mul(t).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        // 3x3 delta kernel centered => same-pad conv returns the input
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let weight = tape.leaf(Tensor::new(vec![1, 1, 3, 3], w).unwrap());
        let y = x.conv2d(weight, 1, 1).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let y = x.conv2d(w, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![4, 4, 4]);
    }

    #[test]
    fn bce_matches_closed_form() {
        let tape = Tape::new();
        let z = tape.leaf(t1(&[0.0, 2.0, -3.0]));
        let y = t1(&[1.0, 0.0, 1.0]);
        let loss = z.bce_with_logits(&y).unwrap().value();
        let expect = |zi: f64, yi: f64| -> f64 {
            let p = sigmoid_scalar(zi);
            -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
        };
        for i in 0..3 {
            assert!((loss.data()[i] - expect([0.0, 2.0, -3.0][i], y.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn(&[3, 4, 5], |i| (i as f64 * 0.37).sin()));
            let k = tape.leaf(t1(&[0.2, -0.4, 0.6]));
            let d = x.reduce_std_tail2().unwrap().reshape(&[3]).unwrap();
            let e = d.conv1d_samepad(k).unwrap().reshape(&[3, 1, 1]).unwrap();
            let out = e.sigmoid().broadcast_mul(x).unwrap();
            let loss = out.sum();
            let grads = tape.backward(loss).unwrap();
            (out.value(), grads.wrt(x).clone(), grads.wrt(k).clone())
        };
        let (a1, b1, c1) = run();
        let (a2, b2, c2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
    }
}
