//! Sampling-based dynamic upsampling.
//!
//! The upsampler projects the input feature map to per-site offsets with a
//! 1×1 linear map, rearranges them to output resolution with a pixel shuffle,
//! bounds them with either a fixed range factor (static mode) or a
//! sigmoid-modulated one (dynamic mode), adds them to a half-pixel-center
//! base grid, and resamples the input bilinearly at the resulting positions.
//!
//! Conventions, fixed here because the zero-offset case must be bit-equal to
//! plain bilinear upsampling:
//!
//! * output pixel (u,v) of the s·H × s·W map has base position
//!   x = (v+0.5)/s − 0.5, y = (u+0.5)/s − 0.5 in input pixel coordinates;
//! * offsets are expressed in output-grid steps and divided by s when added
//!   to the base grid;
//! * positions are clamped to [−0.5, W−0.5] × [−0.5, H−0.5] and neighbor
//!   indices are border-clamped, so arbitrarily large offsets stay safe;
//! * offset/grid tensors hold 2g channels, coordinate-major: channels
//!   [0, g) are x sheets per group, [g, 2g) are y sheets.

use crate::error::{Error, Result};
use crate::tape::{Node, Var, Vjp};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeMode {
    /// Offsets scaled by a fixed range factor.
    Static,
    /// Offsets modulated by a sigmoid-gated, content-dependent range factor.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DysampleParams {
    pub mode: RangeMode,
    pub scale: usize,
    pub groups: usize,
    /// 1×1 projection producing 2·g·s² offset channels, stored O×C×1×1.
    pub offset_w: Tensor,
    /// Range-factor projection (dynamic mode only), same shape as `offset_w`.
    pub scope_w: Option<Tensor>,
    pub static_range: f64,
    pub dynamic_range: f64,
}

impl DysampleParams {
    pub fn new(channels: usize, mode: RangeMode, scale: usize, groups: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("dysample", "scale must be at least 1"));
        }
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(
                "dysample",
                format!("groups {groups} must divide channel count {channels}"),
            ));
        }
        let out_ch = 2 * groups * scale * scale;
        // zero init: the module starts exactly as fixed bilinear upsampling
        let proj = Tensor::zeros(&[out_ch, channels, 1, 1]);
        Ok(DysampleParams {
            mode,
            scale,
            groups,
            offset_w: proj.clone(),
            scope_w: match mode {
                RangeMode::Static => None,
                RangeMode::Dynamic => Some(proj),
            },
            static_range: 0.25,
            dynamic_range: 0.5,
        })
    }

    /// Published defaults: ×2 upsampling with 4 offset groups.
    pub fn defaults(channels: usize, mode: RangeMode) -> Result<Self> {
        DysampleParams::new(channels, mode, 2, 4)
    }

    pub fn num_scalars(&self) -> usize {
        self.offset_w.len() + self.scope_w.as_ref().map_or(0, |w| w.len())
    }
}

pub struct DysampleVars<'t> {
    pub offset_w: Var<'t>,
    pub scope_w: Option<Var<'t>>,
}

impl DysampleParams {
    pub fn vars<'t>(&self, tape: &'t crate::tape::Tape) -> DysampleVars<'t> {
        DysampleVars {
            offset_w: tape.leaf(self.offset_w.clone()),
            scope_w: self.scope_w.as_ref().map(|w| tape.leaf(w.clone())),
        }
    }
}

/// Continuous sampling positions in input pixel coordinates, one (x,y) sheet
/// pair per channel group.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    positions: Tensor, // (2g)×OH×OW, coordinate-major
    groups: usize,
}

impl SamplingGrid {
    pub fn new(positions: Tensor, groups: usize) -> Result<Self> {
        if positions.rank() != 3 || positions.shape()[0] != 2 * groups {
            return Err(Error::invalid(
                "sampling_grid",
                format!(
                    "positions must be (2·{groups})×H×W, got {:?}",
                    positions.shape()
                ),
            ));
        }
        if !positions.all_finite() {
            return Err(Error::NonFinite("sampling grid positions".into()));
        }
        Ok(SamplingGrid { positions, groups })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Copy the single sheet pair to `g` identical group sheets.
    pub fn replicated(&self, g: usize) -> SamplingGrid {
        debug_assert_eq!(self.groups, 1);
        let (oh, ow) = (self.positions.shape()[1], self.positions.shape()[2]);
        let plane = oh * ow;
        let mut data = Vec::with_capacity(2 * g * plane);
        for coord in 0..2 {
            for _ in 0..g {
                data.extend_from_slice(&self.positions.data()[coord * plane..(coord + 1) * plane]);
            }
        }
        SamplingGrid {
            positions: Tensor::new(vec![2 * g, oh, ow], data).expect("replication keeps layout"),
            groups: g,
        }
    }

    /// Positions clamped to the valid sampling window of an H×W input.
    pub fn clamped(&self, h: usize, w: usize) -> SamplingGrid {
        let (oh, ow) = (self.positions.shape()[1], self.positions.shape()[2]);
        let plane = oh * ow;
        let positions = Tensor::from_fn(self.positions.shape(), |i| {
            let v = self.positions.data()[i];
            if i < self.groups * plane {
                v.clamp(-0.5, w as f64 - 0.5)
            } else {
                v.clamp(-0.5, h as f64 - 0.5)
            }
        });
        SamplingGrid {
            positions,
            groups: self.groups,
        }
    }
}

/// Half-pixel-center base grid for ×s upsampling of an H×W map (one sheet
/// pair; replicate for grouped sampling).
pub fn base_grid(h: usize, w: usize, s: usize) -> SamplingGrid {
    let (oh, ow) = (h * s, w * s);
    let mut data = Vec::with_capacity(2 * oh * ow);
    for coord in 0..2 {
        for u in 0..oh {
            for v in 0..ow {
                let t = if coord == 0 { v } else { u };
                data.push((t as f64 + 0.5) / s as f64 - 0.5);
            }
        }
    }
    SamplingGrid {
        positions: Tensor::new(vec![2, oh, ow], data).expect("static shape"),
        groups: 1,
    }
}

// ---------------------------------------------------------------------------
// pixel shuffle

pub fn pixel_shuffle_tensor(t: &Tensor, s: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::invalid("pixel_shuffle", "input must be rank-3"));
    }
    let (cin, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if cin % (s * s) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("leading extent {cin} not divisible by {}", s * s),
        ));
    }
    let c = cin / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; t.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                for i in 0..s {
                    for j in 0..s {
                        out[(ch * oh + (y * s + i)) * ow + (x * s + j)] =
                            t.at3(ch * s * s + i * s + j, y, x);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn pixel_unshuffle_tensor(t: &Tensor, s: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::invalid("pixel_unshuffle", "input must be rank-3"));
    }
    let (c, oh, ow) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if oh % s != 0 || ow % s != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial extents {oh}x{ow} not divisible by {s}"),
        ));
    }
    let (h, w) = (oh / s, ow / s);
    let mut out = vec![0.0; t.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                for i in 0..s {
                    for j in 0..s {
                        out[((ch * s * s + i * s + j) * h + y) * w + x] =
                            t.at3(ch, y * s + i, x * s + j);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * s * s, h, w], out)
}

struct PixelShuffleOp(usize);
struct PixelUnshuffleOp(usize);

impl Vjp for PixelShuffleOp {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![pixel_unshuffle_tensor(g, self.0).expect("inverse of a valid shuffle")]
    }
}

impl Vjp for PixelUnshuffleOp {
    fn name(&self) -> &'static str {
        "pixel_unshuffle"
    }
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        vec![pixel_shuffle_tensor(g, self.0).expect("inverse of a valid unshuffle")]
    }
}

// ---------------------------------------------------------------------------
// bilinear grid resampling

struct ResamplePoint {
    ix0: usize,
    ix1: usize,
    iy0: usize,
    iy1: usize,
    tx: f64,
    ty: f64,
    /// position was strictly inside the clamp window, so it carries gradient
    live_x: bool,
    live_y: bool,
}

fn resolve_point(px: f64, py: f64, h: usize, w: usize) -> ResamplePoint {
    let (wf, hf) = (w as f64, h as f64);
    let qx = px.clamp(-0.5, wf - 0.5);
    let qy = py.clamp(-0.5, hf - 0.5);
    let fx = qx.floor();
    let fy = qy.floor();
    let clamp_i = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    ResamplePoint {
        ix0: clamp_i(fx, w),
        ix1: clamp_i(fx + 1.0, w),
        iy0: clamp_i(fy, h),
        iy1: clamp_i(fy + 1.0, h),
        tx: qx - fx,
        ty: qy - fy,
        live_x: px > -0.5 && px < wf - 0.5,
        live_y: py > -0.5 && py < hf - 0.5,
    }
}

fn resample_forward(x: &Tensor, grid: &Tensor, groups: usize) -> Result<Tensor> {
    if x.rank() != 3 || grid.rank() != 3 {
        return Err(Error::invalid("grid_resample_bilinear", "inputs must be rank-3"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if groups == 0 || c % groups != 0 || grid.shape()[0] != 2 * groups {
        return Err(Error::invalid(
            "grid_resample_bilinear",
            format!(
                "grid channels {} must equal 2·groups ({groups}) and groups must divide C={c}",
                grid.shape()[0]
            ),
        ));
    }
    if !grid.all_finite() {
        return Err(Error::NonFinite("sampling grid positions".into()));
    }
    let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
    let cpg = c / groups;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let k = ch / cpg;
        for u in 0..oh {
            for v in 0..ow {
                let p = resolve_point(grid.at3(k, u, v), grid.at3(groups + k, u, v), h, w);
                let v00 = x.at3(ch, p.iy0, p.ix0);
                let v01 = x.at3(ch, p.iy0, p.ix1);
                let v10 = x.at3(ch, p.iy1, p.ix0);
                let v11 = x.at3(ch, p.iy1, p.ix1);
                out[(ch * oh + u) * ow + v] = (1.0 - p.ty) * ((1.0 - p.tx) * v00 + p.tx * v01)
                    + p.ty * ((1.0 - p.tx) * v10 + p.tx * v11);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

struct GridResampleOp {
    groups: usize,
}

impl Vjp for GridResampleOp {
    fn name(&self) -> &'static str {
        "grid_resample_bilinear"
    }
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Tensor> {
        let (x, grid) = (inputs[0], inputs[1]);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
        let groups = self.groups;
        let cpg = c / groups;
        let mut dx = vec![0.0; x.len()];
        let mut dgrid = vec![0.0; grid.len()];
        for ch in 0..c {
            let k = ch / cpg;
            for u in 0..oh {
                for v in 0..ow {
                    let gv = g.at3(ch, u, v);
                    let p = resolve_point(grid.at3(k, u, v), grid.at3(groups + k, u, v), h, w);
                    let v00 = x.at3(ch, p.iy0, p.ix0);
                    let v01 = x.at3(ch, p.iy0, p.ix1);
                    let v10 = x.at3(ch, p.iy1, p.ix0);
                    let v11 = x.at3(ch, p.iy1, p.ix1);

                    dx[(ch * h + p.iy0) * w + p.ix0] += gv * (1.0 - p.ty) * (1.0 - p.tx);
                    dx[(ch * h + p.iy0) * w + p.ix1] += gv * (1.0 - p.ty) * p.tx;
                    dx[(ch * h + p.iy1) * w + p.ix0] += gv * p.ty * (1.0 - p.tx);
                    dx[(ch * h + p.iy1) * w + p.ix1] += gv * p.ty * p.tx;

                    if p.live_x {
                        dgrid[(k * oh + u) * ow + v] +=
                            gv * ((1.0 - p.ty) * (v01 - v00) + p.ty * (v11 - v10));
                    }
                    if p.live_y {
                        dgrid[((groups + k) * oh + u) * ow + v] +=
                            gv * ((1.0 - p.tx) * (v10 - v00) + p.tx * (v11 - v01));
                    }
                }
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx).expect("same shape"),
            Tensor::new(grid.shape().to_vec(), dgrid).expect("same shape"),
        ]
    }
}

impl<'t> Var<'t> {
    /// Rearrange (c·s²)×H×W into c×(sH)×(sW):
    /// out[c, h·s+i, w·s+j] = in[c·s² + i·s + j, h, w].
    pub fn pixel_shuffle(self, s: usize) -> Result<Var<'t>> {
        let value = { pixel_shuffle_tensor(&self.tape.nodes.borrow()[self.id].value, s) }?;
        Ok(self.tape.push(Node {
            value,
            parents: vec![self.id],
            op: Some(Box::new(PixelShuffleOp(s))),
        }))
    }

    /// Exact inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, s: usize) -> Result<Var<'t>> {
        let value = { pixel_unshuffle_tensor(&self.tape.nodes.borrow()[self.id].value, s) }?;
        Ok(self.tape.push(Node {
            value,
            parents: vec![self.id],
            op: Some(Box::new(PixelUnshuffleOp(s))),
        }))
    }

    /// Bilinear resampling of a C×H×W map at grouped grid positions
    /// (in input pixel coordinates), differentiable in both the map and the
    /// positions. Positions outside the clamp window read border texels and
    /// receive zero position gradient.
    pub fn grid_resample_bilinear(self, grid: Var<'t>, groups: usize) -> Result<Var<'t>> {
        debug_assert!(self.same_tape(&grid), "vars from different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            resample_forward(&nodes[self.id].value, &nodes[grid.id].value, groups)
        }?;
        Ok(self.tape.push(Node {
            value,
            parents: vec![self.id, grid.id],
            op: Some(Box::new(GridResampleOp { groups })),
        }))
    }
}

/// Content-conditioned offsets in output-grid steps, shape (2g)×(sH)×(sW).
///
/// Static mode: O = r_s · shuffle(offset_proj(x)).
/// Dynamic mode: O = (r_d · σ(shuffle(scope_proj(x)))) ⊙ shuffle(offset_proj(x)).
pub fn gen_offsets<'t>(
    x: Var<'t>,
    vars: &DysampleVars<'t>,
    p: &DysampleParams,
) -> Result<Var<'t>> {
    let raw = x
        .conv2d(vars.offset_w, 1, 0)?
        .pixel_shuffle(p.scale)?;
    match p.mode {
        RangeMode::Static => Ok(raw.scale(p.static_range)),
        RangeMode::Dynamic => {
            let scope_w = vars.scope_w.ok_or_else(|| {
                Error::invalid("gen_offsets", "dynamic mode requires scope projection weights")
            })?;
            let factor = x
                .conv2d(scope_w, 1, 0)?
                .pixel_shuffle(p.scale)?
                .sigmoid()
                .scale(p.dynamic_range);
            factor.mul(raw)
        }
    }
}

/// Full upsampler: sample the input at base grid + offsets/s.
pub fn dysample_forward_graph<'t>(
    x: Var<'t>,
    vars: &DysampleVars<'t>,
    p: &DysampleParams,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("dysample_forward", "input must be rank-3"));
    }
    let (h, w) = (shape[1], shape[2]);
    let offsets = gen_offsets(x, vars, p)?;
    let base = base_grid(h, w, p.scale).replicated(p.groups);
    let positions = offsets
        .scale(1.0 / p.scale as f64)
        .add_const(base.positions())?;
    x.grid_resample_bilinear(positions, p.groups)
}

/// Non-graph convenience forward.
pub fn dysample_forward(x: &Tensor, p: &DysampleParams) -> Result<Tensor> {
    let tape = crate::tape::Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = p.vars(&tape);
    Ok(dysample_forward_graph(xv, &vars, p)?.value())
}

/// Fixed bilinear ×s upsampling with half-pixel centers — the conventional
/// upsampler the dynamic one replaces; zero-initialized dynamic sampling
/// reduces to exactly this.
pub fn fixed_bilinear_graph<'t>(x: Var<'t>, s: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("fixed_bilinear", "input must be rank-3"));
    }
    let grid = x.tape.leaf(base_grid(shape[1], shape[2], s).positions().clone());
    x.grid_resample_bilinear(grid, 1)
}

pub fn fixed_bilinear(x: &Tensor, s: usize) -> Result<Tensor> {
    let tape = crate::tape::Tape::new();
    let xv = tape.leaf(x.clone());
    Ok(fixed_bilinear_graph(xv, s)?.value())
}
