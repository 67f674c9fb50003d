//! Multi-dimensional collaborative enhancement attention.
//!
//! Three parallel branches (width, height, channel) each rotate the C×H×W
//! feature map so their target axis leads, squeeze the trailing plane into a
//! descriptor with a weighted blend of average, population-std, and max
//! pooling, pass it through a small same-length 1-D excitation convolution,
//! gate the rotated map with the sigmoid of the result, and rotate back. The
//! module output is the mean of the enabled branch outputs.
//!
//! The pooling blend weights α, β, γ are sigmoids of unconstrained trainable
//! latents, which keeps them strictly inside (0,1) under plain SGD.

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchId {
    Width,
    Height,
    Channel,
}

impl BranchId {
    pub const ALL: [BranchId; 3] = [BranchId::Width, BranchId::Height, BranchId::Channel];

    /// Axis permutation applied to a (C,H,W) map so this branch's axis leads.
    /// All three permutations are involutions, so the inverse rotation reuses
    /// the same axes.
    pub fn axes(self) -> [usize; 3] {
        match self {
            BranchId::Width => [2, 1, 0],   // (C,H,W) -> (W,H,C)
            BranchId::Height => [1, 0, 2],  // (C,H,W) -> (H,C,W)
            BranchId::Channel => [0, 1, 2], // identity
        }
    }

    pub fn inverse_axes(self) -> [usize; 3] {
        // each permutation is its own inverse
        self.axes()
    }

    /// Descriptor length for an input of shape (C,H,W).
    pub fn descriptor_len(self, c: usize, h: usize, w: usize) -> usize {
        match self {
            BranchId::Width => w,
            BranchId::Height => h,
            BranchId::Channel => c,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchId::Width => "width",
            BranchId::Height => "height",
            BranchId::Channel => "channel",
        }
    }
}

/// Unconstrained latents behind the pooling blend weights.
/// Effective weights are α = σ(latents[0]), β = σ(latents[1]), γ = σ(latents[2]).
#[derive(Clone, Debug, PartialEq)]
pub struct TripleSqueezeParams {
    pub latents: Tensor, // rank-1, length 3: (alpha, beta, gamma) latents
}

impl TripleSqueezeParams {
    /// Zero latents, so every effective weight starts at 0.5.
    pub fn new() -> Self {
        TripleSqueezeParams {
            latents: Tensor::zeros(&[3]),
        }
    }

    pub fn alpha_latent(&self) -> f64 {
        self.latents.data()[0]
    }

    pub fn beta_latent(&self) -> f64 {
        self.latents.data()[1]
    }

    pub fn gamma_latent(&self) -> f64 {
        self.latents.data()[2]
    }

    /// (α, β, γ), each strictly in (0,1).
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        (
            sigmoid_scalar(self.alpha_latent()),
            sigmoid_scalar(self.beta_latent()),
            sigmoid_scalar(self.gamma_latent()),
        )
    }
}

impl Default for TripleSqueezeParams {
    fn default() -> Self {
        TripleSqueezeParams::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub squeeze: TripleSqueezeParams,
    /// Odd-length excitation kernel, initialized to the centered delta.
    pub kernel: Tensor,
}

impl BranchParams {
    pub fn new(descriptor_len: usize) -> Self {
        let k = excitation_kernel_len(descriptor_len);
        let mut kernel = Tensor::zeros(&[k]);
        kernel.data_mut()[(k - 1) / 2] = 1.0;
        BranchParams {
            squeeze: TripleSqueezeParams::new(),
            kernel,
        }
    }
}

/// Adaptive excitation kernel size: the nearest odd integer to
/// |log2(L)/2 + 1/2|, floored at 3 and capped so the same-pad precondition
/// k <= 2L+1 always holds.
pub fn excitation_kernel_len(descriptor_len: usize) -> usize {
    let v = ((descriptor_len as f64).log2() / 2.0 + 0.5).abs();
    let k = 2 * (v / 2.0).floor() as usize + 1;
    k.max(3).min(2 * descriptor_len + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MceaParams {
    pub width: BranchParams,
    pub height: BranchParams,
    pub channel: BranchParams,
    /// Branches participating in the fusion; must be non-empty.
    pub enabled: Vec<BranchId>,
}

impl MceaParams {
    /// Parameters for a module applied to (C,H,W) feature maps, all three
    /// branches enabled, each with its own weight triple and kernel.
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        MceaParams {
            width: BranchParams::new(BranchId::Width.descriptor_len(c, h, w)),
            height: BranchParams::new(BranchId::Height.descriptor_len(c, h, w)),
            channel: BranchParams::new(BranchId::Channel.descriptor_len(c, h, w)),
            enabled: BranchId::ALL.to_vec(),
        }
    }

    pub fn branch(&self, b: BranchId) -> &BranchParams {
        match b {
            BranchId::Width => &self.width,
            BranchId::Height => &self.height,
            BranchId::Channel => &self.channel,
        }
    }

    pub fn branch_mut(&mut self, b: BranchId) -> &mut BranchParams {
        match b {
            BranchId::Width => &mut self.width,
            BranchId::Height => &mut self.height,
            BranchId::Channel => &mut self.channel,
        }
    }

    /// Trainable tensor count (latents and kernels over all branches).
    pub fn num_scalars(&self) -> usize {
        BranchId::ALL
            .iter()
            .map(|&b| self.branch(b).squeeze.latents.len() + self.branch(b).kernel.len())
            .sum()
    }
}

/// Per-branch parameter leaves registered on a tape.
pub struct BranchVars<'t> {
    pub latents: Var<'t>,
    pub kernel: Var<'t>,
}

pub struct MceaVars<'t> {
    pub width: BranchVars<'t>,
    pub height: BranchVars<'t>,
    pub channel: BranchVars<'t>,
}

impl MceaParams {
    pub fn vars<'t>(&self, tape: &'t Tape) -> MceaVars<'t> {
        let reg = |bp: &BranchParams| BranchVars {
            latents: tape.leaf(bp.squeeze.latents.clone()),
            kernel: tape.leaf(bp.kernel.clone()),
        };
        MceaVars {
            width: reg(&self.width),
            height: reg(&self.height),
            channel: reg(&self.channel),
        }
    }
}

impl<'t> MceaVars<'t> {
    pub fn branch(&self, b: BranchId) -> &BranchVars<'t> {
        match b {
            BranchId::Width => &self.width,
            BranchId::Height => &self.height,
            BranchId::Channel => &self.channel,
        }
    }
}

/// Rotate a C×H×W map so the branch axis leads.
pub fn rotate<'t>(f: Var<'t>, b: BranchId) -> Result<Var<'t>> {
    f.permute3(b.axes())
}

pub fn inverse_rotate<'t>(f: Var<'t>, b: BranchId) -> Result<Var<'t>> {
    f.permute3(b.inverse_axes())
}

/// Weighted pooling blend over the trailing plane of an L×A×B map:
/// (1/3)(avg + std + max) + α·avg + β·std + γ·max, with α, β, γ sigmoids of
/// the latents so the blend stays differentiable through them.
pub fn triple_squeeze<'t>(fhat: Var<'t>, latents: Var<'t>) -> Result<Var<'t>> {
    let avg = fhat.reduce_mean_tail2()?;
    let std = fhat.reduce_std_tail2()?;
    let max = fhat.reduce_max_tail2()?;

    let base = avg.add(std)?.add(max)?.scale(1.0 / 3.0);
    let alpha = latents.index1(0)?.sigmoid();
    let beta = latents.index1(1)?.sigmoid();
    let gamma = latents.index1(2)?.sigmoid();

    base.add(alpha.scalar_mul(avg)?)?
        .add(beta.scalar_mul(std)?)?
        .add(gamma.scalar_mul(max)?)
}

/// Same-length 1-D convolution of an L×1×1 descriptor along its leading axis.
pub fn excite<'t>(descriptor: Var<'t>, kernel: Var<'t>) -> Result<Var<'t>> {
    let l = descriptor.shape()[0];
    descriptor
        .reshape(&[l])?
        .conv1d_samepad(kernel)?
        .reshape(&[l, 1, 1])
}

/// One attention branch: rotate, squeeze, excite, sigmoid-gate, rotate back.
pub fn branch_forward<'t>(f: Var<'t>, b: BranchId, vars: &BranchVars<'t>) -> Result<Var<'t>> {
    let rotated = rotate(f, b)?;
    let descriptor = triple_squeeze(rotated, vars.latents)?;
    let gate = excite(descriptor, vars.kernel)?.sigmoid();
    inverse_rotate(gate.broadcast_mul(rotated)?, b)
}

/// Mean of the enabled branch outputs. With a single enabled branch this is
/// that branch's output unscaled.
pub fn mcea_forward_graph<'t>(
    f: Var<'t>,
    vars: &MceaVars<'t>,
    enabled: &[BranchId],
) -> Result<Var<'t>> {
    if enabled.is_empty() {
        return Err(Error::invalid("mcea_forward", "no branches enabled"));
    }
    let mut acc: Option<Var<'t>> = None;
    for &b in enabled {
        let out = branch_forward(f, b, vars.branch(b))?;
        acc = Some(match acc {
            Some(a) => a.add(out)?,
            None => out,
        });
    }
    let acc = acc.expect("non-empty branch set");
    Ok(if enabled.len() > 1 {
        acc.scale(1.0 / enabled.len() as f64)
    } else {
        acc
    })
}

/// Convenience forward over a plain tensor. Rank-3 inputs are processed
/// directly; rank-4 batches are processed as independent samples sharing the
/// same parameters.
pub fn mcea_forward(f: &Tensor, params: &MceaParams) -> Result<Tensor> {
    match f.rank() {
        3 => {
            let tape = Tape::new();
            let x = tape.leaf(f.clone());
            let vars = params.vars(&tape);
            Ok(mcea_forward_graph(x, &vars, &params.enabled)?.value())
        }
        4 => {
            let samples: Result<Vec<Tensor>> = (0..f.shape()[0])
                .map(|i| mcea_forward(&f.sample(i)?, params))
                .collect();
            Tensor::stack(&samples?)
        }
        _ => Err(Error::invalid(
            "mcea_forward",
            format!("expected rank-3 or rank-4 input, got shape {:?}", f.shape()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn rotate_shapes_follow_branch() {
        let tape = Tape::new();
        let f = tape.leaf(rand_tensor(&[2, 3, 4], 1));
        assert_eq!(rotate(f, BranchId::Width).unwrap().shape(), vec![4, 3, 2]);
        assert_eq!(rotate(f, BranchId::Height).unwrap().shape(), vec![3, 2, 4]);
        let ch = rotate(f, BranchId::Channel).unwrap();
        assert_eq!(ch.value(), f.value());
    }

    #[test]
    fn rotate_then_inverse_is_identity() {
        let tape = Tape::new();
        let f = tape.leaf(rand_tensor(&[3, 4, 5], 2));
        for b in BranchId::ALL {
            let back = inverse_rotate(rotate(f, b).unwrap(), b).unwrap();
            assert_eq!(back.value(), f.value());
        }
    }

    #[test]
    fn triple_squeeze_constant_input() {
        // constant input: avg = max = c, std = 0
        // => c·(2/3) + α·c + γ·c with α = γ = 0.5 when latents are zero
        let tape = Tape::new();
        let f = tape.leaf(Tensor::full(&[2, 3, 4], 1.0));
        let latents = tape.leaf(Tensor::zeros(&[3]));
        let d = triple_squeeze(f, latents).unwrap().value();
        for &v in d.data() {
            assert!((v - 5.0 / 3.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn triple_squeeze_hand_example() {
        // slice {1,3}: avg 2, population std 1, max 3
        // α=0.2, β=0.3, γ=0.4 → (2+1+3)/3 + 0.4 + 0.3 + 1.2 = 3.9
        let tape = Tape::new();
        let f = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let inv_sigmoid = |p: f64| (p / (1.0 - p)).ln();
        let latents = tape.leaf(
            Tensor::new(
                vec![3],
                vec![inv_sigmoid(0.2), inv_sigmoid(0.3), inv_sigmoid(0.4)],
            )
            .unwrap(),
        );
        let d = triple_squeeze(f, latents).unwrap().value();
        assert!((d.data()[0] - 3.9).abs() < 1e-12, "{}", d.data()[0]);
    }

    #[test]
    fn triple_squeeze_equal_weights_factor() {
        // with α=β=γ=w the blend equals (1/3 + w)·(avg+std+max)
        let tape = Tape::new();
        let f = tape.leaf(rand_tensor(&[3, 4, 5], 3));
        let latent = 0.73_f64;
        let w = sigmoid_scalar(latent);
        let latents = tape.leaf(Tensor::full(&[3], latent));
        let got = triple_squeeze(f, latents).unwrap().value();

        let avg = f.reduce_mean_tail2().unwrap().value();
        let std = f.reduce_std_tail2().unwrap().value();
        let max = f.reduce_max_tail2().unwrap().value();
        for i in 0..got.len() {
            let expect = (1.0 / 3.0 + w) * (avg.data()[i] + std.data()[i] + max.data()[i]);
            assert!((got.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn excite_examples() {
        let tape = Tape::new();
        let d = tape.leaf(Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let delta = tape.leaf(Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap());
        assert_eq!(excite(d, delta).unwrap().value(), d.value());

        let zero = tape.leaf(Tensor::zeros(&[3]));
        assert!(excite(d, zero).unwrap().value().data().iter().all(|&v| v == 0.0));

        let box3 = tape.leaf(Tensor::full(&[3], 1.0));
        assert_eq!(excite(d, box3).unwrap().value().data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn zero_kernel_halves_the_input() {
        // zero excitation → gate σ(0) = 0.5 in every branch → output 0.5·f
        let f = rand_tensor(&[3, 4, 5], 4);
        let mut params = MceaParams::new(3, 4, 5);
        for b in BranchId::ALL {
            params.branch_mut(b).kernel = Tensor::zeros(params.branch(b).kernel.shape());
        }
        let out = mcea_forward(&f, &params).unwrap();
        for i in 0..f.len() {
            assert!((out.data()[i] - 0.5 * f.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_branch_equals_identity_rotation_pipeline() {
        let tape = Tape::new();
        let f = tape.leaf(rand_tensor(&[3, 4, 5], 5));
        let params = MceaParams::new(3, 4, 5);
        let vars = params.vars(&tape);

        let direct = branch_forward(f, BranchId::Channel, &vars.channel).unwrap();
        // same machinery, explicit identity rotations
        let rotated = f.permute3([0, 1, 2]).unwrap();
        let d = triple_squeeze(rotated, vars.channel.latents).unwrap();
        let gate = excite(d, vars.channel.kernel).unwrap().sigmoid();
        let manual = gate
            .broadcast_mul(rotated)
            .unwrap()
            .permute3([0, 1, 2])
            .unwrap();
        assert_eq!(direct.value(), manual.value());
    }

    #[test]
    fn branch_consistency_via_rotation() {
        // branch_forward(f, b) == PM_b⁻¹(channel_pipeline(PM_b(f))) exactly
        let f = rand_tensor(&[3, 4, 5], 6);
        for b in [BranchId::Width, BranchId::Height] {
            let tape = Tape::new();
            let fv = tape.leaf(f.clone());
            let params = MceaParams::new(3, 4, 5);
            let vars = params.vars(&tape);
            let direct = branch_forward(fv, b, &vars.branch(b)).unwrap();

            let rotated = rotate(fv, b).unwrap();
            let via_channel = {
                let d = triple_squeeze(rotated, vars.branch(b).latents).unwrap();
                let gate = excite(d, vars.branch(b).kernel).unwrap().sigmoid();
                gate.broadcast_mul(rotated).unwrap()
            };
            let back = inverse_rotate(via_channel, b).unwrap();
            assert_eq!(direct.value(), back.value());
        }
    }

    #[test]
    fn forward_preserves_shape_even_degenerate() {
        for shape in [[3usize, 4, 5], [2, 1, 6], [4, 3, 1], [1, 1, 1]] {
            let f = rand_tensor(&shape, 7);
            let params = MceaParams::new(shape[0], shape[1], shape[2]);
            let out = mcea_forward(&f, &params).unwrap();
            assert_eq!(out.shape(), &shape);
        }
    }

    #[test]
    fn gates_are_strictly_inside_unit_interval() {
        let tape = Tape::new();
        let f = tape.leaf(rand_tensor(&[3, 4, 5], 8));
        let params = MceaParams::new(3, 4, 5);
        let vars = params.vars(&tape);
        for b in BranchId::ALL {
            let rotated = rotate(f, b).unwrap();
            let d = triple_squeeze(rotated, vars.branch(b).latents).unwrap();
            let gate = excite(d, vars.branch(b).kernel).unwrap().sigmoid().value();
            assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn empty_branch_set_is_an_error() {
        let f = rand_tensor(&[2, 2, 2], 9);
        let mut params = MceaParams::new(2, 2, 2);
        params.enabled.clear();
        assert!(mcea_forward(&f, &params).is_err());
    }

    #[test]
    fn identical_branch_outputs_average_to_themselves() {
        // on a 1×1×1 input every branch computes the same thing, so the
        // three-branch mean equals any single branch's output
        let f = Tensor::new(vec![1, 1, 1], vec![0.8]).unwrap();
        let params = MceaParams::new(1, 1, 1);
        let fused = mcea_forward(&f, &params).unwrap();

        let mut single = params.clone();
        single.enabled = vec![BranchId::Width];
        let branch = mcea_forward(&f, &single).unwrap();
        assert_eq!(fused, branch);
    }

    #[test]
    fn single_branch_is_unscaled() {
        let f = rand_tensor(&[3, 4, 5], 10);
        let mut params = MceaParams::new(3, 4, 5);
        params.enabled = vec![BranchId::Width];
        let single = mcea_forward(&f, &params).unwrap();

        let tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let vars = MceaParams::new(3, 4, 5).vars(&tape);
        let branch = branch_forward(fv, BranchId::Width, &vars.width).unwrap();
        assert_eq!(single, branch.value());
    }

    #[test]
    fn batch_forward_matches_per_sample() {
        let a = rand_tensor(&[3, 4, 5], 11);
        let b = rand_tensor(&[3, 4, 5], 12);
        let params = MceaParams::new(3, 4, 5);
        let batch = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        let out = mcea_forward(&batch, &params).unwrap();
        assert_eq!(out.sample(0).unwrap(), mcea_forward(&a, &params).unwrap());
        assert_eq!(out.sample(1).unwrap(), mcea_forward(&b, &params).unwrap());
    }

    #[test]
    fn kernel_len_rule() {
        assert_eq!(excitation_kernel_len(1), 3);
        assert_eq!(excitation_kernel_len(8), 3);
        assert_eq!(excitation_kernel_len(16), 3);
        assert_eq!(excitation_kernel_len(32), 3);
        assert_eq!(excitation_kernel_len(256), 5);
        assert_eq!(excitation_kernel_len(1024), 5);
        // always odd, never below 3, never beyond the same-pad precondition
        for l in 1..2000 {
            let k = excitation_kernel_len(l);
            assert!(k % 2 == 1 && k >= 3 && k <= 2 * l + 1);
        }
    }
}
