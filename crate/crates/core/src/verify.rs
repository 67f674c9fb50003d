//! Independent verification: a central finite-difference engine, straight
//! scalar-loop oracles for the attention module, bilinear resampling, and
//! average precision, and the suite runners behind the `selftest` command.
//!
//! The oracles deliberately share no code with the modules they check: the
//! attention oracle does its own rotation index arithmetic, pooling loops,
//! and convolution; the resampling oracle re-derives the clamping and
//! interpolation; the AP oracle re-implements greedy matching and the
//! 101-point rule. Only the plain `Tensor` container is shared.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledBox;
use crate::detector::Detection;
use crate::dysample::{DysampleParams, RangeMode};
use crate::error::{Error, Result};
use crate::mcea::{BranchId, MceaParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with a floor that keeps near-zero gradients comparable.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-8_f64).max(a.abs() + b.abs())
}

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Gradients below this on both sides are treated as agreeing zeros; the
/// finite-difference noise floor sits well below it.
const ZERO_FLOOR: f64 = 1e-7;

/// Central finite differences of a scalar function, one evaluation pair per
/// input element.
pub fn finite_diff(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let fp = f(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fm = f(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff function evaluation".into()));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub worst_elem: usize,
    pub epsilon: f64,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradcheck {:<24} max_rel_err={:.3e} worst_elem={} eps={:.0e} {}",
            self.op,
            self.max_rel_err,
            self.worst_elem,
            self.epsilon,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Compare tape gradients against central differences for every element of
/// every input. `build` must return a scalar-valued root.
pub fn grad_check(
    name: &str,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    build: &Builder,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&tape, &vars)?;
        let v = root.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck {name}")));
        }
        Ok(v)
    };

    let mut max_rel_err = 0.0;
    let mut worst_elem = 0;
    let mut elem = 0usize;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + eps;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = x.data()[j] - eps;
            let fm = eval(&xs)?;
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic[i].data()[j];
            if !(an.abs() < ZERO_FLOOR && fd.abs() < ZERO_FLOOR) {
                let e = rel_err(an, fd);
                if e > max_rel_err {
                    max_rel_err = e;
                    worst_elem = elem;
                }
            }
            elem += 1;
        }
    }

    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err,
        worst_elem,
        epsilon: eps,
        pass: max_rel_err < tol,
    })
}

// ---------------------------------------------------------------------------
// attention oracle

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line scalar reimplementation of the full attention forward:
/// rotation by explicit index arithmetic, the three pooling reductions, the
/// weighted blend, same-pad 1-D convolution, sigmoid gating, inverse
/// rotation, and branch averaging.
pub fn mcea_oracle(f: &Tensor, params: &MceaParams) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::invalid("mcea_oracle", "input must be rank-3"));
    }
    if params.enabled.is_empty() {
        return Err(Error::invalid("mcea_oracle", "no branches enabled"));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let fd = f.data();
    let mut acc = vec![0.0; fd.len()];

    for &branch in &params.enabled {
        // rotated dims and a map from rotated (i,j,k) to the flat input index
        let (l, a, b): (usize, usize, usize);
        let src_index: Box<dyn Fn(usize, usize, usize) -> usize> = match branch {
            BranchId::Width => {
                l = w;
                a = h;
                b = c;
                Box::new(move |i, j, k| (k * h + j) * w + i)
            }
            BranchId::Height => {
                l = h;
                a = c;
                b = w;
                Box::new(move |i, j, k| (j * h + i) * w + k)
            }
            BranchId::Channel => {
                l = c;
                a = h;
                b = w;
                Box::new(move |i, j, k| (i * h + j) * w + k)
            }
        };

        let bp = params.branch(branch);
        let alpha = sigmoid(bp.squeeze.latents.data()[0]);
        let beta = sigmoid(bp.squeeze.latents.data()[1]);
        let gamma = sigmoid(bp.squeeze.latents.data()[2]);

        // pooling over the trailing plane of the rotated map
        let mut descriptor = vec![0.0; l];
        for i in 0..l {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for j in 0..a {
                for k in 0..b {
                    let v = fd[src_index(i, j, k)];
                    sum += v;
                    if v > max {
                        max = v;
                    }
                }
            }
            let n = (a * b) as f64;
            let mean = sum / n;
            let mut sq = 0.0;
            for j in 0..a {
                for k in 0..b {
                    let v = fd[src_index(i, j, k)];
                    sq += (v - mean) * (v - mean);
                }
            }
            let std = (sq / n).sqrt();
            descriptor[i] = (mean + std + max) / 3.0 + alpha * mean + beta * std + gamma * max;
        }

        // same-pad cross-correlation along the descriptor
        let kern = bp.kernel.data();
        let half = (kern.len() - 1) / 2;
        let mut excited = vec![0.0; l];
        for i in 0..l {
            let mut s = 0.0;
            for (j, &kv) in kern.iter().enumerate() {
                let p = i as isize + j as isize - half as isize;
                if p >= 0 && (p as usize) < l {
                    s += kv * descriptor[p as usize];
                }
            }
            excited[i] = s;
        }

        // gate the rotated map and rotate back (the source index map already
        // is the inverse map read in the other direction)
        for i in 0..l {
            let gate = sigmoid(excited[i]);
            for j in 0..a {
                for k in 0..b {
                    let idx = src_index(i, j, k);
                    acc[idx] += gate * fd[idx];
                }
            }
        }
    }

    let inv = 1.0 / params.enabled.len() as f64;
    for v in &mut acc {
        *v *= inv;
    }
    Tensor::new(f.shape().to_vec(), acc)
}

// ---------------------------------------------------------------------------
// bilinear oracle

/// Scalar-loop bilinear resampling with the module's clamping convention:
/// positions clamp to [−0.5, W−0.5]×[−0.5, H−0.5], neighbor indices clamp to
/// the border.
pub fn bilinear_oracle(x: &Tensor, positions: &Tensor, groups: usize) -> Result<Tensor> {
    if x.rank() != 3 || positions.rank() != 3 || positions.shape()[0] != 2 * groups {
        return Err(Error::invalid("bilinear_oracle", "bad input ranks"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c % groups != 0 {
        return Err(Error::invalid("bilinear_oracle", "groups must divide channels"));
    }
    let (oh, ow) = (positions.shape()[1], positions.shape()[2]);
    let cpg = c / groups;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let grp = ch / cpg;
        for u in 0..oh {
            for v in 0..ow {
                let px = positions.at3(grp, u, v).clamp(-0.5, w as f64 - 0.5);
                let py = positions.at3(groups + grp, u, v).clamp(-0.5, h as f64 - 0.5);
                let fx = px.floor();
                let fy = py.floor();
                let tx = px - fx;
                let ty = py - fy;
                let xi = |f: f64| -> usize { (f.max(0.0) as usize).min(w - 1) };
                let yi = |f: f64| -> usize { (f.max(0.0) as usize).min(h - 1) };
                let (x0, x1) = (xi(fx), xi(fx + 1.0));
                let (y0, y1) = (yi(fy), yi(fy + 1.0));
                let top = (1.0 - tx) * x.at3(ch, y0, x0) + tx * x.at3(ch, y0, x1);
                let bot = (1.0 - tx) * x.at3(ch, y1, x0) + tx * x.at3(ch, y1, x1);
                out[(ch * oh + u) * ow + v] = (1.0 - ty) * top + ty * bot;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

// ---------------------------------------------------------------------------
// AP oracle

fn corner(b: &crate::data::BoxCxcywh) -> (f64, f64, f64, f64) {
    (
        b.cx - b.w / 2.0,
        b.cy - b.h / 2.0,
        b.cx + b.w / 2.0,
        b.cy + b.h / 2.0,
    )
}

fn oracle_iou(a: &crate::data::BoxCxcywh, b: &crate::data::BoxCxcywh) -> f64 {
    let (ax0, ay0, ax1, ay1) = corner(a);
    let (bx0, by0, bx1, by1) = corner(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // same corner-derived-area convention the evaluator documents
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

/// Independent evaluation of greedy matching plus the 101-point rule for one
/// small instance (intended for a handful of boxes).
pub fn ap_oracle(preds: &[Detection], gts: &[LabeledBox], iou_threshold: f64) -> f64 {
    let num_gt = gts.len();
    if num_gt == 0 || preds.is_empty() {
        return 0.0;
    }
    // confidence order, ties by input position
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .confidence
            .partial_cmp(&preds[i].confidence)
            .expect("finite confidences")
            .then(i.cmp(&j))
    });

    let mut taken = vec![false; gts.len()];
    let mut tp_in_order = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.class_id != preds[pi].class_id {
                continue;
            }
            let v = oracle_iou(&preds[pi].bbox, &gt.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tp_in_order.push(true);
            }
            None => tp_in_order.push(false),
        }
    }

    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tp_in_order.len());
    for (k, &is_tp) in tp_in_order.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }

    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let mut best = 0.0;
        for &(rec, prec) in &points {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    total / 101.0
}

// ---------------------------------------------------------------------------
// suite runners

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: String,
    pub instances: usize,
    pub max_abs_err: f64,
    pub pass: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "oracle   {:<24} instances={} max_abs_err={:.3e} {}",
            self.name,
            self.instances,
            self.max_abs_err,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub struct SelftestOutcome {
    pub grad_reports: Vec<GradCheckReport>,
    pub oracle_reports: Vec<OracleReport>,
}

impl SelftestOutcome {
    pub fn pass(&self) -> bool {
        self.grad_reports.iter().all(|r| r.pass) && self.oracle_reports.iter().all(|r| r.pass)
    }

    pub fn first_failure(&self) -> Option<String> {
        self.grad_reports
            .iter()
            .find(|r| !r.pass)
            .map(|r| r.op.clone())
            .or_else(|| {
                self.oracle_reports
                    .iter()
                    .find(|r| !r.pass)
                    .map(|r| r.name.clone())
            })
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Push values away from a kink at `at` so the finite-difference window
/// never straddles it.
fn nudge_away(t: &mut Tensor, at: f64, margin: f64) {
    for v in t.data_mut() {
        if (*v - at).abs() < margin {
            *v = at + margin * if *v >= at { 1.0 } else { -1.0 };
        }
    }
}

/// Widen the gap between the top two elements of each trailing plane, so max
/// pooling has an unambiguous winner under finite-difference perturbation.
fn separate_max(t: &mut Tensor) {
    let (l, plane) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    for m in 0..l {
        let slice = &mut t.data_mut()[m * plane..(m + 1) * plane];
        if slice.len() < 2 {
            continue;
        }
        let mut arg = 0;
        for (i, &v) in slice.iter().enumerate() {
            if v > slice[arg] {
                arg = i;
            }
        }
        let second = slice
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if slice[arg] - second < 1e-3 {
            slice[arg] += 0.01;
        }
    }
}

/// Grid positions strictly off the interpolation lattice and inside the
/// clamp window.
fn off_lattice_grid(rng: &mut ChaCha8Rng, groups: usize, oh: usize, ow: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[2 * groups, oh, ow], |i| {
        let hi = if i < groups * oh * ow { w } else { h };
        let cell = rng.random_range(0..hi.max(2) - 1) as f64;
        cell + rng.random_range(0.1..0.9)
    })
}

pub type Builder = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn weighted_sum<'t>(v: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    Ok(v.mul_const(weights)?.sum())
}

/// Run the whole per-operator gradient suite: `instances` seeded random
/// instances per operator, each compared to central finite differences.
pub fn run_gradient_suite(instances: usize, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let mut check =
        |name: &str, gen: &mut dyn FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Builder>)| -> Result<()> {
            let mut worst = GradCheckReport {
                op: name.to_string(),
                max_rel_err: 0.0,
                worst_elem: 0,
                epsilon: DEFAULT_EPS,
                pass: true,
            };
            for inst in 0..instances {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(0xF00D + reports.len() as u64 * 1013 + inst as u64);
                let (inputs, build) = gen(&mut rng);
                let r = grad_check(name, &inputs, DEFAULT_EPS, tol, build.as_ref())?;
                if r.max_rel_err > worst.max_rel_err {
                    worst.max_rel_err = r.max_rel_err;
                    worst.worst_elem = r.worst_elem;
                }
                worst.pass &= r.pass;
            }
            reports.push(worst);
            Ok(())
        };

    let shape3 = [3usize, 4, 5];
    let n3: usize = shape3.iter().product();

    check("add", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0), rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].add(vs[1])?, &w)),
        )
    })?;
    check("sub", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0), rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].sub(vs[1])?, &w)),
        )
    })?;
    check("mul", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0), rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].mul(vs[1])?, &w)),
        )
    })?;
    check("scale", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].scale(1.37), &w)),
        )
    })?;
    check("add_const", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        let c = rand_tensor(rng, &shape3, -2.0, 2.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].add_const(&c)?, &w)),
        )
    })?;
    check("mul_const", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        let c = rand_tensor(rng, &shape3, -2.0, 2.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].mul_const(&c)?, &w)),
        )
    })?;
    check("sigmoid", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].sigmoid(), &w)),
        )
    })?;
    check("sqrt", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, 0.5, 2.5)],
            Box::new(move |_t, vs| weighted_sum(vs[0].sqrt()?, &w)),
        )
    })?;
    check("leaky_relu", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        let mut x = rand_tensor(rng, &shape3, -2.0, 2.0);
        nudge_away(&mut x, 0.0, 0.05);
        (
            vec![x],
            Box::new(move |_t, vs| weighted_sum(vs[0].leaky_relu(0.1), &w)),
        )
    })?;
    check("sum", &mut |rng| {
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| Ok(vs[0].sum())),
        )
    })?;
    check("reshape", &mut |rng| {
        let w = rand_tensor(rng, &[n3], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].reshape(&[60])?, &w)),
        )
    })?;
    check("index1", &mut |rng| {
        let i = rng.random_range(0..7usize);
        (
            vec![rand_tensor(rng, &[7], -2.0, 2.0)],
            Box::new(move |_t, vs| Ok(vs[0].index1(i)?.sigmoid())),
        )
    })?;
    check("slice_ch", &mut |rng| {
        let w = rand_tensor(rng, &[2, 4, 5], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].slice_ch(1, 3)?, &w)),
        )
    })?;
    check("permute3", &mut |rng| {
        let perms = [[2, 1, 0], [1, 0, 2], [0, 2, 1], [1, 2, 0], [2, 0, 1], [0, 1, 2]];
        let axes = perms[rng.random_range(0..perms.len())];
        let out_shape = [shape3[axes[0]], shape3[axes[1]], shape3[axes[2]]];
        let w = rand_tensor(rng, &out_shape, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].permute3(axes)?, &w)),
        )
    })?;
    check("reduce_mean_tail2", &mut |rng| {
        let w = rand_tensor(rng, &[3, 1, 1], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].reduce_mean_tail2()?, &w)),
        )
    })?;
    check("reduce_std_tail2", &mut |rng| {
        let w = rand_tensor(rng, &[3, 1, 1], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].reduce_std_tail2()?, &w)),
        )
    })?;
    check("reduce_max_tail2", &mut |rng| {
        let w = rand_tensor(rng, &[3, 1, 1], -1.0, 1.0);
        let mut x = rand_tensor(rng, &shape3, -2.0, 2.0);
        separate_max(&mut x);
        (
            vec![x],
            Box::new(move |_t, vs| weighted_sum(vs[0].reduce_max_tail2()?, &w)),
        )
    })?;
    check("conv1d_samepad", &mut |rng| {
        let w = rand_tensor(rng, &[7], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[7], -2.0, 2.0), rand_tensor(rng, &[3], -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].conv1d_samepad(vs[1])?, &w)),
        )
    })?;
    check("broadcast_mul", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[3, 1, 1], -2.0, 2.0), rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].broadcast_mul(vs[1])?, &w)),
        )
    })?;
    check("scalar_mul", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[1], -2.0, 2.0), rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].scalar_mul(vs[1])?, &w)),
        )
    })?;
    check("conv2d", &mut |rng| {
        let stride = 1 + rng.random_range(0..2usize);
        let (oh, ow) = ((5 + 2 - 3) / stride + 1, (6 + 2 - 3) / stride + 1);
        let w = rand_tensor(rng, &[3, oh, ow], -1.0, 1.0);
        (
            vec![
                rand_tensor(rng, &[2, 5, 6], -2.0, 2.0),
                rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0),
            ],
            Box::new(move |_t, vs| weighted_sum(vs[0].conv2d(vs[1], stride, 1)?, &w)),
        )
    })?;
    check("bias_add", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0), rand_tensor(rng, &[3], -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].bias_add(vs[1])?, &w)),
        )
    })?;
    check("bce_with_logits", &mut |rng| {
        let w = rand_tensor(rng, &shape3, 0.1, 1.0);
        let targets = rand_tensor(rng, &shape3, 0.0, 1.0);
        (
            vec![rand_tensor(rng, &shape3, -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].bce_with_logits(&targets)?, &w)),
        )
    })?;
    check("l1_dist", &mut |rng| {
        let w = rand_tensor(rng, &shape3, 0.1, 1.0);
        let targets = rand_tensor(rng, &shape3, -2.0, 2.0);
        let mut x = rand_tensor(rng, &shape3, -2.0, 2.0);
        // keep |x - target| away from the kink
        for (xv, tv) in x.data_mut().iter_mut().zip(targets.data()) {
            if (*xv - tv).abs() < 0.05 {
                *xv = tv + 0.1;
            }
        }
        (
            vec![x],
            Box::new(move |_t, vs| weighted_sum(vs[0].l1_dist(&targets)?, &w)),
        )
    })?;
    check("pixel_shuffle", &mut |rng| {
        let w = rand_tensor(rng, &[2, 6, 4], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[8, 3, 2], -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].pixel_shuffle(2)?, &w)),
        )
    })?;
    check("pixel_unshuffle", &mut |rng| {
        let w = rand_tensor(rng, &[8, 3, 2], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[2, 6, 4], -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(vs[0].pixel_unshuffle(2)?, &w)),
        )
    })?;
    check("grid_resample_bilinear", &mut |rng| {
        let groups = 2;
        let grid = off_lattice_grid(rng, groups, 3, 4, 5, 5);
        let w = rand_tensor(rng, &[4, 3, 4], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[4, 5, 5], -2.0, 2.0), grid],
            Box::new(move |_t, vs| weighted_sum(vs[0].grid_resample_bilinear(vs[1], groups)?, &w)),
        )
    })?;

    // attention-module composites
    check("triple_squeeze", &mut |rng| {
        let w = rand_tensor(rng, &[3, 1, 1], -1.0, 1.0);
        let mut x = rand_tensor(rng, &shape3, -2.0, 2.0);
        separate_max(&mut x);
        (
            vec![x, rand_tensor(rng, &[3], -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(crate::mcea::triple_squeeze(vs[0], vs[1])?, &w)),
        )
    })?;
    check("excite", &mut |rng| {
        let w = rand_tensor(rng, &[5, 1, 1], -1.0, 1.0);
        (
            vec![rand_tensor(rng, &[5, 1, 1], -2.0, 2.0), rand_tensor(rng, &[3], -2.0, 2.0)],
            Box::new(move |_t, vs| weighted_sum(crate::mcea::excite(vs[0], vs[1])?, &w)),
        )
    })?;
    check("branch_forward", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        let mut x = rand_tensor(rng, &shape3, -2.0, 2.0);
        // width branch: max pooling runs over H×C planes of the rotated map
        separate_max_rotated(&mut x, BranchId::Width);
        (
            vec![x, rand_tensor(rng, &[3], -2.0, 2.0), rand_tensor(rng, &[3], -1.0, 1.0)],
            Box::new(move |_t, vs| {
                let bv = crate::mcea::BranchVars {
                    latents: vs[1],
                    kernel: vs[2],
                };
                weighted_sum(crate::mcea::branch_forward(vs[0], BranchId::Width, &bv)?, &w)
            }),
        )
    })?;
    check("mcea_forward", &mut |rng| {
        let w = rand_tensor(rng, &shape3, -1.0, 1.0);
        let mut x = rand_tensor(rng, &shape3, -2.0, 2.0);
        for b in BranchId::ALL {
            separate_max_rotated(&mut x, b);
        }
        let mut inputs = vec![x];
        for _ in 0..3 {
            inputs.push(rand_tensor(rng, &[3], -2.0, 2.0)); // latents
            inputs.push(rand_tensor(rng, &[3], -1.0, 1.0)); // kernel
        }
        (
            inputs,
            Box::new(move |_t, vs| {
                let mk = |i: usize| crate::mcea::BranchVars {
                    latents: vs[1 + 2 * i],
                    kernel: vs[2 + 2 * i],
                };
                let vars = crate::mcea::MceaVars {
                    width: mk(0),
                    height: mk(1),
                    channel: mk(2),
                };
                weighted_sum(
                    crate::mcea::mcea_forward_graph(vs[0], &vars, &BranchId::ALL)?,
                    &w,
                )
            }),
        )
    })?;

    // upsampler composites
    check("gen_offsets", &mut |rng| {
        let (c, g, s) = (4, 2, 2);
        let dynamic = rng.random_range(0..2) == 1;
        let mut p = DysampleParams::new(c, if dynamic { RangeMode::Dynamic } else { RangeMode::Static }, s, g).unwrap();
        p.offset_w = rand_tensor(rng, &[2 * g * s * s, c, 1, 1], -0.5, 0.5);
        let w = rand_tensor(rng, &[2 * g, 6, 6], -1.0, 1.0);
        let mut inputs = vec![
            rand_tensor(rng, &[c, 3, 3], -2.0, 2.0),
            p.offset_w.clone(),
        ];
        if dynamic {
            inputs.push(rand_tensor(rng, &[2 * g * s * s, c, 1, 1], -0.5, 0.5));
        }
        (
            inputs,
            Box::new(move |_t, vs| {
                let vars = crate::dysample::DysampleVars {
                    offset_w: vs[1],
                    scope_w: if dynamic { Some(vs[2]) } else { None },
                };
                weighted_sum(crate::dysample::gen_offsets(vs[0], &vars, &p)?, &w)
            }),
        )
    })?;
    check("dysample_forward", &mut |rng| {
        let (c, g, s) = (4, 2, 2);
        let w = rand_tensor(rng, &[c, 6, 6], -1.0, 1.0);
        let (x, wproj) = loop {
            let x = rand_tensor(rng, &[c, 3, 3], -2.0, 2.0);
            let wproj = rand_tensor(rng, &[2 * g * s * s, c, 1, 1], -0.5, 0.5);
            if dysample_positions_off_lattice(&x, &wproj, s, g) {
                break (x, wproj);
            }
        };
        let p = {
            let mut p = DysampleParams::new(c, RangeMode::Static, s, g).unwrap();
            p.offset_w = wproj.clone();
            p
        };
        (
            vec![x, wproj],
            Box::new(move |_t, vs| {
                let vars = crate::dysample::DysampleVars {
                    offset_w: vs[1],
                    scope_w: None,
                };
                weighted_sum(crate::dysample::dysample_forward_graph(vs[0], &vars, &p)?, &w)
            }),
        )
    })?;

    // detection loss over a random head map
    check("loss", &mut |rng| {
        let classes = 3;
        let cells = 4;
        let gts = vec![
            LabeledBox {
                class_id: rng.random_range(0..classes),
                bbox: crate::data::BoxCxcywh::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.3),
                    rng.random_range(0.1..0.3),
                ),
            },
            LabeledBox {
                class_id: rng.random_range(0..classes),
                bbox: crate::data::BoxCxcywh::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.3),
                    rng.random_range(0.1..0.3),
                ),
            },
        ];
        (
            vec![rand_tensor(rng, &[5 + classes, cells, cells], -2.0, 2.0)],
            Box::new(move |_t, vs| {
                crate::detector::loss_graph(
                    vs[0],
                    &gts,
                    classes,
                    crate::detector::LossWeights::default(),
                )
            }),
        )
    })?;

    Ok(reports)
}

/// Like [`separate_max`], but on the plane layout a branch rotation induces.
fn separate_max_rotated(x: &mut Tensor, branch: BranchId) {
    let rotated = crate::ops::permute3_tensor(x, branch.axes());
    let mut sep = rotated;
    separate_max(&mut sep);
    *x = crate::ops::permute3_tensor(&sep, crate::ops::invert_axes(branch.axes()));
}

/// True when every sampling position implied by the offsets sits at least
/// 1e-4 away from the interpolation lattice.
fn dysample_positions_off_lattice(x: &Tensor, offset_w: &Tensor, s: usize, g: usize) -> bool {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = crate::dysample::DysampleVars {
        offset_w: tape.leaf(offset_w.clone()),
        scope_w: None,
    };
    let p = {
        let mut p = DysampleParams::new(x.shape()[0], RangeMode::Static, s, g).unwrap();
        p.offset_w = offset_w.clone();
        p
    };
    let offsets = match crate::dysample::gen_offsets(xv, &vars, &p) {
        Ok(o) => o.value(),
        Err(_) => return false,
    };
    let base = crate::dysample::base_grid(x.shape()[1], x.shape()[2], s).replicated(g);
    offsets
        .data()
        .iter()
        .zip(base.positions().data())
        .all(|(&o, &b)| {
            let pos = b + o / s as f64;
            (pos - pos.round()).abs() > 1e-4
        })
}

/// Oracle agreement suite: module implementations against the straight-line
/// reimplementations, `instances` seeded cases each.
pub fn run_oracle_suite(instances: usize) -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();

    // attention forward vs scalar-loop oracle
    {
        let mut max_err = 0.0f64;
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACE0 + inst as u64);
            let c = rng.random_range(1..6usize);
            let h = rng.random_range(1..6usize);
            let w = rng.random_range(1..6usize);
            let x = rand_tensor(&mut rng, &[c, h, w], -2.0, 2.0);
            let mut params = MceaParams::new(c, h, w);
            for b in BranchId::ALL {
                let bp = params.branch_mut(b);
                bp.squeeze.latents = rand_tensor(&mut rng, &[3], -2.0, 2.0);
                bp.kernel = rand_tensor(&mut rng, bp.kernel.shape(), -1.0, 1.0);
            }
            if inst % 4 == 3 {
                params.enabled = vec![BranchId::ALL[rng.random_range(0..3)]];
            }
            let got = crate::mcea::mcea_forward(&x, &params)?;
            let want = mcea_oracle(&x, &params)?;
            for i in 0..got.len() {
                max_err = max_err.max((got.data()[i] - want.data()[i]).abs());
            }
        }
        reports.push(OracleReport {
            name: "mcea_forward".into(),
            instances,
            max_abs_err: max_err,
            pass: max_err < 1e-12,
        });
    }

    // grid resampling vs scalar-loop oracle
    {
        let mut max_err = 0.0f64;
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF + inst as u64);
            let g = rng.random_range(1..3usize);
            let c = g * rng.random_range(1..3usize);
            let h = rng.random_range(1..6usize);
            let w = rng.random_range(1..6usize);
            let (oh, ow) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
            let x = rand_tensor(&mut rng, &[c, h, w], -2.0, 2.0);
            // positions include out-of-window values to exercise clamping
            let grid = rand_tensor(&mut rng, &[2 * g, oh, ow], -2.0, w.max(h) as f64 + 2.0);

            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let gv = tape.leaf(grid.clone());
            let got = xv.grid_resample_bilinear(gv, g)?.value();
            let want = bilinear_oracle(&x, &grid, g)?;
            for i in 0..got.len() {
                max_err = max_err.max((got.data()[i] - want.data()[i]).abs());
            }
        }
        reports.push(OracleReport {
            name: "grid_resample_bilinear".into(),
            instances,
            max_abs_err: max_err,
            pass: max_err < 1e-12,
        });
    }

    // AP vs exhaustive small-instance oracle (exact agreement required)
    {
        let mut max_err = 0.0f64;
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(0xCAFE + inst as u64);
            let n_gt = rng.random_range(0..5usize);
            let n_pred = rng.random_range(0..5usize);
            let classes = rng.random_range(1..4usize);
            let rand_box = |rng: &mut ChaCha8Rng| {
                crate::data::BoxCxcywh::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                )
            };
            let gts: Vec<LabeledBox> = (0..n_gt)
                .map(|_| LabeledBox {
                    class_id: rng.random_range(0..classes),
                    bbox: rand_box(&mut rng),
                })
                .collect();
            let preds: Vec<Detection> = (0..n_pred)
                .map(|_| {
                    let near_gt = !gts.is_empty() && rng.random_range(0..2) == 0;
                    let bbox = if near_gt {
                        let base = gts[rng.random_range(0..gts.len())].bbox;
                        crate::data::BoxCxcywh::new(
                            base.cx + rng.random_range(-0.05..0.05),
                            base.cy + rng.random_range(-0.05..0.05),
                            (base.w + rng.random_range(-0.05..0.05)).max(0.02),
                            (base.h + rng.random_range(-0.05..0.05)).max(0.02),
                        )
                    } else {
                        rand_box(&mut rng)
                    };
                    Detection {
                        class_id: rng.random_range(0..classes),
                        confidence: rng.random_range(0.05..1.0),
                        bbox,
                    }
                })
                .collect();

            // single-class pooled comparison per class
            for class in 0..classes {
                let cp: Vec<Detection> =
                    preds.iter().filter(|p| p.class_id == class).cloned().collect();
                let cg: Vec<LabeledBox> =
                    gts.iter().filter(|g| g.class_id == class).cloned().collect();
                let flags = crate::metrics::match_predictions(&cp, &cg, 0.5)?;
                let confs: Vec<f64> = cp.iter().map(|p| p.confidence).collect();
                let got = crate::metrics::ap_from_matches(&flags, &confs, cg.len());
                let want = ap_oracle(&cp, &cg, 0.5);
                max_err = max_err.max((got - want).abs());
            }
        }
        reports.push(OracleReport {
            name: "ap_from_matches".into(),
            instances,
            max_abs_err: max_err,
            pass: max_err == 0.0,
        });
    }

    Ok(reports)
}

/// Default tolerance for the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;
/// Default instance count per operator/oracle.
pub const DEFAULT_INSTANCES: usize = 50;

/// Run everything the `selftest` command reports.
pub fn selftest(instances: usize) -> Result<SelftestOutcome> {
    Ok(SelftestOutcome {
        grad_reports: run_gradient_suite(instances, GRAD_TOL)?,
        oracle_reports: run_oracle_suite(instances)?,
    })
}
