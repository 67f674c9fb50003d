//! A desk-scale single-stage detector: strided stem, two residual stages with
//! optional attention on the residual branch, an upsample-and-fuse neck with
//! a swappable upsampler (fixed bilinear or dynamic sampling), and a
//! single-scale head predicting objectness, box offsets, and class logits on
//! a cells×cells grid.

mod checkpoint;
mod decode;
mod loss;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, load_params_into, save_checkpoint, save_params};
pub use decode::decode_and_nms;
pub use loss::{assign_targets, loss_graph, loss_value, LossWeights};
pub use optim::{lr_schedule, train_step, SgdState, TrainConfig};
pub use train::{
    batch_loss_and_grads, batch_loss_and_grads_seq, evaluate_model, predict, train, EpochLog,
    Sample, TrainResult, EVAL_CONF_THRESHOLD, EVAL_NMS_IOU,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BoxCxcywh;
use crate::dysample::{
    dysample_forward_graph, fixed_bilinear_graph, DysampleParams, DysampleVars, RangeMode,
};
use crate::error::{Error, Result};
use crate::mcea::{mcea_forward_graph, MceaParams, MceaVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsamplerKind {
    FixedBilinear,
    Dysample,
}

/// Total downsampling factor from image to head grid.
pub const HEAD_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FrsNanoConfig {
    /// Square input edge, divisible by the head stride.
    pub input_size: usize,
    /// Channel widths after the stem and the two downsampling stages.
    pub widths: [usize; 3],
    pub use_mcea: bool,
    /// Attention branches when `use_mcea` is set; must be non-empty then.
    pub mcea_branches: Vec<crate::mcea::BranchId>,
    pub upsampler: UpsamplerKind,
    /// Range-factor mode when the dynamic upsampler is selected.
    pub dysample_mode: RangeMode,
    pub classes: usize,
    /// Head grid edge; must equal input_size / 8.
    pub cells: usize,
}

impl Default for FrsNanoConfig {
    fn default() -> Self {
        FrsNanoConfig {
            input_size: 96,
            widths: [8, 16, 32],
            use_mcea: false,
            mcea_branches: crate::mcea::BranchId::ALL.to_vec(),
            upsampler: UpsamplerKind::FixedBilinear,
            dysample_mode: RangeMode::Static,
            classes: 8,
            cells: 12,
        }
    }
}

impl FrsNanoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % HEAD_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {HEAD_STRIDE}",
                self.input_size
            )));
        }
        if self.cells != self.input_size / HEAD_STRIDE {
            return Err(Error::Config(format!(
                "cells {} must equal input_size/{HEAD_STRIDE} = {}",
                self.cells,
                self.input_size / HEAD_STRIDE
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.use_mcea && self.mcea_branches.is_empty() {
            return Err(Error::Config(
                "attention enabled with an empty branch set".into(),
            ));
        }
        Ok(())
    }

    pub fn head_channels(&self) -> usize {
        5 + self.classes
    }
}

/// One decoded detection: class, confidence, normalized box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BoxCxcywh,
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor, // O×C×kh×kw
    pub bias: Tensor,   // O
}

impl ConvParams {
    fn init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Self {
        // He-scaled uniform: without normalization layers the trunk must
        // preserve activation variance through its full depth
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvParams {
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub mcea: Option<MceaParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpsamplerParams {
    Fixed,
    Dysample(DysampleParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NanoParams {
    pub stem: ConvParams,
    pub down1: ConvParams,
    pub stage1: BlockParams,
    pub down2: ConvParams,
    pub stage2: BlockParams,
    pub lateral: ConvParams,
    pub fuse_down: ConvParams,
    pub head1: ConvParams,
    pub head2: ConvParams,
    pub upsampler: UpsamplerParams,
}

/// Initial objectness bias. The loss normalizes positive and negative cells
/// separately, so a neutral start works better than the usual strongly
/// negative prior.
const OBJ_BIAS_INIT: f64 = 0.0;

impl NanoParams {
    /// Seeded initialization. The convolution draws happen in a fixed order
    /// before any module-specific parameters, so configurations that differ
    /// only in `use_mcea`/`upsampler` share identical backbone weights for
    /// the same seed.
    pub fn init(cfg: &FrsNanoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [w0, w1, w2] = cfg.widths;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvParams::init(&mut rng, w0, 3, 3);
        let down1 = ConvParams::init(&mut rng, w1, w0, 3);
        let s1c1 = ConvParams::init(&mut rng, w1, w1, 3);
        let s1c2 = ConvParams::init(&mut rng, w1, w1, 3);
        let down2 = ConvParams::init(&mut rng, w2, w1, 3);
        let s2c1 = ConvParams::init(&mut rng, w2, w2, 3);
        let s2c2 = ConvParams::init(&mut rng, w2, w2, 3);
        let lateral = ConvParams::init(&mut rng, w1, w2, 1);
        let fuse_down = ConvParams::init(&mut rng, w2, w1, 3);
        let head1 = ConvParams::init(&mut rng, w2, w2, 3);
        let mut head2 = ConvParams::init(&mut rng, cfg.head_channels(), w2, 1);
        head2.bias.data_mut()[0] = OBJ_BIAS_INIT;

        let s4 = cfg.input_size / 4;
        let s8 = cfg.input_size / 8;
        let make_mcea = |c: usize, hw: usize| {
            let mut m = MceaParams::new(c, hw, hw);
            m.enabled = cfg.mcea_branches.clone();
            m
        };
        let mcea1 = cfg.use_mcea.then(|| make_mcea(w1, s4));
        let mcea2 = cfg.use_mcea.then(|| make_mcea(w2, s8));

        let upsampler = match cfg.upsampler {
            UpsamplerKind::FixedBilinear => UpsamplerParams::Fixed,
            UpsamplerKind::Dysample => {
                UpsamplerParams::Dysample(DysampleParams::defaults(w2, cfg.dysample_mode)?)
            }
        };

        Ok(NanoParams {
            stem,
            down1,
            stage1: BlockParams {
                conv1: s1c1,
                conv2: s1c2,
                mcea: mcea1,
            },
            down2,
            stage2: BlockParams {
                conv1: s2c1,
                conv2: s2c2,
                mcea: mcea2,
            },
            lateral,
            fuse_down,
            head1,
            head2,
            upsampler,
        })
    }

    /// Visit every trainable tensor with a stable name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&str, &'a Tensor)) {
        let conv = |name: &str, c: &'a ConvParams, f: &mut dyn FnMut(&str, &'a Tensor)| {
            f(&format!("{name}.weight"), &c.weight);
            f(&format!("{name}.bias"), &c.bias);
        };
        let mcea = |name: &str, m: &'a MceaParams, f: &mut dyn FnMut(&str, &'a Tensor)| {
            for b in crate::mcea::BranchId::ALL {
                let bp = m.branch(b);
                f(&format!("{name}.{}.latents", b.name()), &bp.squeeze.latents);
                f(&format!("{name}.{}.kernel", b.name()), &bp.kernel);
            }
        };
        conv("stem", &self.stem, f);
        conv("down1", &self.down1, f);
        conv("stage1.conv1", &self.stage1.conv1, f);
        conv("stage1.conv2", &self.stage1.conv2, f);
        if let Some(m) = &self.stage1.mcea {
            mcea("stage1.mcea", m, f);
        }
        conv("down2", &self.down2, f);
        conv("stage2.conv1", &self.stage2.conv1, f);
        conv("stage2.conv2", &self.stage2.conv2, f);
        if let Some(m) = &self.stage2.mcea {
            mcea("stage2.mcea", m, f);
        }
        conv("lateral", &self.lateral, f);
        conv("fuse_down", &self.fuse_down, f);
        conv("head1", &self.head1, f);
        conv("head2", &self.head2, f);
        if let UpsamplerParams::Dysample(d) = &self.upsampler {
            f("up.offset_w", &d.offset_w);
            if let Some(sw) = &d.scope_w {
                f("up.scope_w", sw);
            }
        }
    }

    /// Mutable counterpart of [`NanoParams::visit`], same order and names.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        let conv = |name: &str, c: &mut ConvParams, f: &mut dyn FnMut(&str, &mut Tensor)| {
            f(&format!("{name}.weight"), &mut c.weight);
            f(&format!("{name}.bias"), &mut c.bias);
        };
        let mcea = |name: &str, m: &mut MceaParams, f: &mut dyn FnMut(&str, &mut Tensor)| {
            for b in crate::mcea::BranchId::ALL {
                let bp = m.branch_mut(b);
                f(&format!("{name}.{}.latents", b.name()), &mut bp.squeeze.latents);
                f(&format!("{name}.{}.kernel", b.name()), &mut bp.kernel);
            }
        };
        conv("stem", &mut self.stem, f);
        conv("down1", &mut self.down1, f);
        conv("stage1.conv1", &mut self.stage1.conv1, f);
        conv("stage1.conv2", &mut self.stage1.conv2, f);
        if let Some(m) = &mut self.stage1.mcea {
            mcea("stage1.mcea", m, f);
        }
        conv("down2", &mut self.down2, f);
        conv("stage2.conv1", &mut self.stage2.conv1, f);
        conv("stage2.conv2", &mut self.stage2.conv2, f);
        if let Some(m) = &mut self.stage2.mcea {
            mcea("stage2.mcea", m, f);
        }
        conv("lateral", &mut self.lateral, f);
        conv("fuse_down", &mut self.fuse_down, f);
        conv("head1", &mut self.head1, f);
        conv("head2", &mut self.head2, f);
        if let UpsamplerParams::Dysample(d) = &mut self.upsampler {
            f("up.offset_w", &mut d.offset_w);
            if let Some(sw) = &mut d.scope_w {
                f("up.scope_w", sw);
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

// ---------------------------------------------------------------------------
// forward graph

pub struct ConvVars<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

pub struct BlockVars<'t> {
    pub conv1: ConvVars<'t>,
    pub conv2: ConvVars<'t>,
    pub mcea: Option<MceaVars<'t>>,
}

/// Parameter leaves for one forward/backward pass, with a name registry used
/// to pair gradients back to parameter tensors.
pub struct NanoVars<'t> {
    pub stem: ConvVars<'t>,
    pub down1: ConvVars<'t>,
    pub stage1: BlockVars<'t>,
    pub down2: ConvVars<'t>,
    pub stage2: BlockVars<'t>,
    pub lateral: ConvVars<'t>,
    pub fuse_down: ConvVars<'t>,
    pub head1: ConvVars<'t>,
    pub head2: ConvVars<'t>,
    pub upsampler: Option<DysampleVars<'t>>,
    registry: Vec<(String, Var<'t>)>,
}

impl NanoParams {
    pub fn vars<'t>(&self, tape: &'t Tape) -> NanoVars<'t> {
        let mut registry: Vec<(String, Var<'t>)> = Vec::new();
        let mut reg = |name: String, t: &Tensor| -> Var<'t> {
            let v = tape.leaf(t.clone());
            registry.push((name, v));
            v
        };
        let conv = |name: &str, c: &ConvParams, reg: &mut dyn FnMut(String, &Tensor) -> Var<'t>| ConvVars {
            w: reg(format!("{name}.weight"), &c.weight),
            b: reg(format!("{name}.bias"), &c.bias),
        };
        let mcea = |name: &str, m: &MceaParams, reg: &mut dyn FnMut(String, &Tensor) -> Var<'t>| {
            let branch = |b: crate::mcea::BranchId, reg: &mut dyn FnMut(String, &Tensor) -> Var<'t>| {
                crate::mcea::BranchVars {
                    latents: reg(format!("{name}.{}.latents", b.name()), &m.branch(b).squeeze.latents),
                    kernel: reg(format!("{name}.{}.kernel", b.name()), &m.branch(b).kernel),
                }
            };
            MceaVars {
                width: branch(crate::mcea::BranchId::Width, reg),
                height: branch(crate::mcea::BranchId::Height, reg),
                channel: branch(crate::mcea::BranchId::Channel, reg),
            }
        };

        let stem = conv("stem", &self.stem, &mut reg);
        let down1 = conv("down1", &self.down1, &mut reg);
        let stage1 = BlockVars {
            conv1: conv("stage1.conv1", &self.stage1.conv1, &mut reg),
            conv2: conv("stage1.conv2", &self.stage1.conv2, &mut reg),
            mcea: self.stage1.mcea.as_ref().map(|m| mcea("stage1.mcea", m, &mut reg)),
        };
        let down2 = conv("down2", &self.down2, &mut reg);
        let stage2 = BlockVars {
            conv1: conv("stage2.conv1", &self.stage2.conv1, &mut reg),
            conv2: conv("stage2.conv2", &self.stage2.conv2, &mut reg),
            mcea: self.stage2.mcea.as_ref().map(|m| mcea("stage2.mcea", m, &mut reg)),
        };
        let lateral = conv("lateral", &self.lateral, &mut reg);
        let fuse_down = conv("fuse_down", &self.fuse_down, &mut reg);
        let head1 = conv("head1", &self.head1, &mut reg);
        let head2 = conv("head2", &self.head2, &mut reg);
        let upsampler = match &self.upsampler {
            UpsamplerParams::Fixed => None,
            UpsamplerParams::Dysample(d) => Some(DysampleVars {
                offset_w: reg("up.offset_w".into(), &d.offset_w),
                scope_w: d.scope_w.as_ref().map(|sw| reg("up.scope_w".into(), sw)),
            }),
        };

        NanoVars {
            stem,
            down1,
            stage1,
            down2,
            stage2,
            lateral,
            fuse_down,
            head1,
            head2,
            upsampler,
            registry,
        }
    }
}

impl<'t> NanoVars<'t> {
    /// Accumulated gradient per parameter name, in registration order.
    pub fn named_grads(&self, grads: &crate::tape::Gradients) -> Vec<(String, Tensor)> {
        self.registry
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(*v).clone()))
            .collect()
    }

    pub fn registry(&self) -> &[(String, Var<'t>)] {
        &self.registry
    }
}

fn conv_act<'t>(x: Var<'t>, cv: &ConvVars<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
    Ok(x.conv2d(cv.w, stride, pad)?.bias_add(cv.b)?.leaky_relu(0.1))
}

/// Residual block with optional attention on the residual branch:
/// out = x + MCEA(act(conv2(act(conv1(x))))) when enabled, plain residual
/// otherwise.
pub fn a2c2f_mcea_lite<'t>(
    x: Var<'t>,
    block: &BlockVars<'t>,
    mcea_params: Option<&MceaParams>,
) -> Result<Var<'t>> {
    let r = conv_act(x, &block.conv1, 1, 1)?;
    let r = conv_act(r, &block.conv2, 1, 1)?;
    let r = match (&block.mcea, mcea_params) {
        (Some(vars), Some(params)) => mcea_forward_graph(r, vars, &params.enabled)?,
        _ => r,
    };
    x.add(r)
}

/// Full per-sample forward pass: 3×S×S image to (5+classes)×cells×cells
/// logits.
pub fn nano_forward_graph<'t>(
    img: Var<'t>,
    cfg: &FrsNanoConfig,
    params: &NanoParams,
    vars: &NanoVars<'t>,
) -> Result<Var<'t>> {
    let shape = img.shape();
    if shape != [3, cfg.input_size, cfg.input_size] {
        return Err(Error::invalid(
            "nano_forward",
            format!(
                "expected 3×{0}×{0} sample, got {1:?}",
                cfg.input_size, shape
            ),
        ));
    }
    let x = conv_act(img, &vars.stem, 2, 1)?;
    let x = conv_act(x, &vars.down1, 2, 1)?;
    let c2 = a2c2f_mcea_lite(x, &vars.stage1, params.stage1.mcea.as_ref())?;
    let x = conv_act(c2, &vars.down2, 2, 1)?;
    let c3 = a2c2f_mcea_lite(x, &vars.stage2, params.stage2.mcea.as_ref())?;

    let up = match (&params.upsampler, &vars.upsampler) {
        (UpsamplerParams::Fixed, _) => fixed_bilinear_graph(c3, 2)?,
        (UpsamplerParams::Dysample(d), Some(dv)) => dysample_forward_graph(c3, dv, d)?,
        (UpsamplerParams::Dysample(_), None) => {
            return Err(Error::Config("dynamic upsampler parameters not registered".into()))
        }
    };
    let lat = conv_act(up, &vars.lateral, 1, 0)?;
    let fused = lat.add(c2)?;
    let x = conv_act(fused, &vars.fuse_down, 2, 1)?;
    let x = conv_act(x, &vars.head1, 1, 1)?;
    // raw logits: no activation on the head output
    x.conv2d(vars.head2.w, 1, 0)?.bias_add(vars.head2.b)
}

/// Batched convenience forward: N×3×S×S to N×(5+classes)×cells×cells.
pub fn nano_forward(batch: &Tensor, cfg: &FrsNanoConfig, params: &NanoParams) -> Result<Tensor> {
    cfg.validate()?;
    if batch.rank() != 4 || batch.shape()[1] != 3 || batch.shape()[2] != cfg.input_size {
        return Err(Error::invalid(
            "nano_forward",
            format!(
                "expected N×3×{0}×{0} batch, got {1:?}",
                cfg.input_size,
                batch.shape()
            ),
        ));
    }
    let outs: Result<Vec<Tensor>> = crate::par::map_range(batch.shape()[0], |i| {
        let sample = batch.sample(i)?;
        let tape = Tape::new();
        let img = tape.leaf(sample);
        let vars = params.vars(&tape);
        Ok(nano_forward_graph(img, cfg, params, &vars)?.value())
    })
    .into_iter()
    .collect();
    Tensor::stack(&outs?)
}
