//! The reward-providing discriminator.
//!
//! Three conditioning modes: unconditional single canvases, fully-conditioned
//! (target, render) pairs, and the complement mode where a half-canvas mask
//! `m` builds disjoint-support pairs `((1-m)*target, m*render)` so a
//! pixel-equality shortcut carries no signal. Two loss modes: the standard
//! GAN loss with spectral normalization on every layer, and the WGAN-GP
//! baseline whose gradient penalty is built symbolically on the tape (the
//! network is piecewise linear, so the input gradient with frozen relu masks
//! is exact).

use crate::nn::adam::{clip_global_norm, AdamConfig, ParameterSet};
use crate::nn::layers::{advance_spectral_state, Conv2d, Dense, ParamVars};
use crate::nn::ops::ConvMeta;
use crate::nn::tape::{Graph, Var};
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;
use crate::render::Canvas;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSpec {
    LeftHalf,
    RightHalf,
    TopHalf,
    BottomHalf,
}

impl MaskSpec {
    pub const ALL: [MaskSpec; 4] = [
        MaskSpec::LeftHalf,
        MaskSpec::RightHalf,
        MaskSpec::TopHalf,
        MaskSpec::BottomHalf,
    ];

    pub fn sample(rng: &mut ChaCha12Rng) -> MaskSpec {
        Self::ALL[rng.random_range(0..4)]
    }

    /// Whether the mask keeps pixel (row, col) of an h x w canvas.
    pub fn contains(&self, row: usize, col: usize, h: usize, w: usize) -> bool {
        match self {
            MaskSpec::LeftHalf => col < w / 2,
            MaskSpec::RightHalf => col >= w / 2,
            MaskSpec::TopHalf => row < h / 2,
            MaskSpec::BottomHalf => row >= h / 2,
        }
    }

    pub fn complement(&self) -> MaskSpec {
        match self {
            MaskSpec::LeftHalf => MaskSpec::RightHalf,
            MaskSpec::RightHalf => MaskSpec::LeftHalf,
            MaskSpec::TopHalf => MaskSpec::BottomHalf,
            MaskSpec::BottomHalf => MaskSpec::TopHalf,
        }
    }

    /// `m * canvas`: zeroes everything the mask drops.
    pub fn apply(&self, canvas: &Canvas) -> Canvas {
        let (h, w) = (canvas.height(), canvas.width());
        let mut out = canvas.clone();
        for row in 0..h {
            for col in 0..w {
                if !self.contains(row, col, h, w) {
                    out.set(row, col, [0.0, 0.0, 0.0]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSlot {
    Real,
    Fake,
}

/// Builds one complement-discriminator input pair.
///
/// Fake slot: `((1-m)*target, m*render)`; real slot: `((1-m)*target,
/// m*target)`. The two components always have disjoint support.
pub fn make_complement_pair(
    target: &Canvas,
    render: &Canvas,
    mask: MaskSpec,
    slot: PairSlot,
) -> (Canvas, Canvas) {
    let visible = mask.complement().apply(target);
    let masked = match slot {
        PairSlot::Real => mask.apply(target),
        PairSlot::Fake => mask.apply(render),
    };
    (visible, masked)
}

/// The pixel-equality shortcut a fully-conditioned discriminator can learn:
/// call a pair real iff the components agree everywhere both have support
/// (any nonzero channel). Vacuously true on complement pairs.
pub fn pixel_equality_probe(a: &Canvas, b: &Canvas) -> PairSlot {
    let (h, w) = (a.height(), a.width());
    for row in 0..h {
        for col in 0..w {
            let pa = a.get(row, col);
            let pb = b.get(row, col);
            let support_a = pa.iter().any(|&v| v != 0.0);
            let support_b = pb.iter().any(|&v| v != 0.0);
            if support_a && support_b && pa != pb {
                return PairSlot::Fake;
            }
        }
    }
    PairSlot::Real
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    StandardGanSpectralNorm,
    WganGp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionalMode {
    None,
    FullyConditioned,
    Complement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub loss_mode: LossMode,
    pub conditional_mode: ConditionalMode,
    /// Train on intermediate canvases as fakes, not only final renders.
    pub train_on_intermediate: bool,
    /// Gradient-penalty weight (WGAN-GP mode only).
    pub gp_weight: f64,
    pub optimizer: AdamConfig,
    /// Power iterations per training step.
    pub sn_iters: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            loss_mode: LossMode::StandardGanSpectralNorm,
            conditional_mode: ConditionalMode::None,
            train_on_intermediate: true,
            gp_weight: 10.0,
            optimizer: AdamConfig::disc_default(),
            sn_iters: 1,
        }
    }
}

impl DiscConfig {
    /// Channels the score function expects given the conditioning mode.
    pub fn input_channels(&self) -> usize {
        match self.conditional_mode {
            ConditionalMode::None => 3,
            _ => 6,
        }
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Conv { convs: Vec<Conv2d>, head: Dense, in_ch: usize, size: usize },
    Mlp { layers: Vec<Dense> },
}

/// Discriminator network description; weights live in a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Discriminator {
    arch: Arch,
}

impl Discriminator {
    /// Default conv stack at 32-64 px inputs: 4 stride-2 convolutions and a
    /// dense head, all spectrally normalized when `spectral` is set.
    pub fn conv_default(in_ch: usize, size: usize, spectral: bool, width: usize) -> Self {
        assert!(size % 16 == 0, "conv discriminator expects size divisible by 16");
        let chans = [width, 2 * width, 2 * width, 4 * width];
        let mut convs = Vec::new();
        let mut c_in = in_ch;
        for (i, &c_out) in chans.iter().enumerate() {
            let mut conv = Conv2d::new(&format!("disc.conv{i}"), c_in, c_out, 3, 2, 1);
            if spectral {
                conv = conv.spectral();
            }
            convs.push(conv);
            c_in = c_out;
        }
        let flat = c_in * (size / 16) * (size / 16);
        let head = if spectral {
            Dense::spectral("disc.head", flat, 1)
        } else {
            Dense::new("disc.head", flat, 1)
        };
        Discriminator { arch: Arch::Conv { convs, head, in_ch, size } }
    }

    /// Small dense discriminator over flat feature vectors (tests, toys).
    pub fn mlp(dims: &[usize], spectral: bool) -> Self {
        assert!(dims.len() >= 2 && dims[dims.len() - 1] == 1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                if spectral {
                    Dense::spectral(&format!("disc.fc{i}"), d[0], d[1])
                } else {
                    Dense::new(&format!("disc.fc{i}"), d[0], d[1])
                }
            })
            .collect();
        Discriminator { arch: Arch::Mlp { layers } }
    }

    pub fn input_channels(&self) -> Option<usize> {
        match &self.arch {
            Arch::Conv { in_ch, .. } => Some(*in_ch),
            Arch::Mlp { .. } => None,
        }
    }

    pub fn init<S: Scalar>(&self, rng: &mut ChaCha12Rng) -> ParameterSet<S> {
        let mut ps = ParameterSet::new();
        match &self.arch {
            Arch::Conv { convs, head, .. } => {
                for c in convs {
                    c.init(&mut ps, rng);
                }
                head.init(&mut ps, rng);
            }
            Arch::Mlp { layers } => {
                for l in layers {
                    l.init(&mut ps, rng);
                }
            }
        }
        ps
    }

    /// Names of spectrally normalized weight parameters.
    pub fn spectral_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.arch {
            Arch::Conv { convs, head, .. } => {
                for c in convs {
                    if c.spectral {
                        names.push(format!("{}.w", c.name));
                    }
                }
                if head.spectral {
                    names.push(format!("{}.w", head.name));
                }
            }
            Arch::Mlp { layers } => {
                for l in layers {
                    if l.spectral {
                        names.push(format!("{}.w", l.name));
                    }
                }
            }
        }
        names
    }

    fn check_input<S: Scalar>(&self, x: &Tensor<S>) -> Result<(), NnError> {
        match &self.arch {
            Arch::Conv { in_ch, size, .. } => {
                let s = x.shape();
                if s.len() != 4 || s[1] != *in_ch || s[2] != *size || s[3] != *size {
                    return Err(NnError::ShapeMismatch {
                        op: "discriminator input",
                        lhs: s.to_vec(),
                        rhs: vec![0, *in_ch, *size, *size],
                    });
                }
            }
            Arch::Mlp { layers } => {
                let s = x.shape();
                if s.len() != 2 || s[1] != layers[0].input {
                    return Err(NnError::ShapeMismatch {
                        op: "discriminator input",
                        lhs: s.to_vec(),
                        rhs: vec![0, layers[0].input],
                    });
                }
            }
        }
        Ok(())
    }

    /// Forward pass producing per-sample logits `[n]`, capturing relu
    /// activation masks for the symbolic input-gradient expression.
    fn forward_capturing<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        x: Var,
        masks: &mut Vec<Tensor<S>>,
    ) -> Result<Var, NnError> {
        match &self.arch {
            Arch::Conv { convs, head, .. } => {
                let mut cur = x;
                for c in convs {
                    let pre = c.forward(g, ps, vars, cur)?;
                    masks.push(relu_mask(g.value(pre)));
                    cur = g.relu(pre)?;
                }
                let shape = g.shape(cur).to_vec();
                let flat = shape[1] * shape[2] * shape[3];
                let f = g.reshape(cur, &[shape[0], flat])?;
                let logits = head.forward(g, ps, vars, f)?;
                let n = g.shape(logits)[0];
                g.reshape(logits, &[n])
            }
            Arch::Mlp { layers } => {
                let mut cur = x;
                for (i, l) in layers.iter().enumerate() {
                    let pre = l.forward(g, ps, vars, cur)?;
                    if i + 1 < layers.len() {
                        masks.push(relu_mask(g.value(pre)));
                        cur = g.relu(pre)?;
                    } else {
                        cur = pre;
                    }
                }
                let n = g.shape(cur)[0];
                g.reshape(cur, &[n])
            }
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        x: Var,
    ) -> Result<Var, NnError> {
        let mut masks = Vec::new();
        self.forward_capturing(g, ps, vars, x, &mut masks)
    }

    /// Symbolic `dD/dx` with the captured relu masks held constant. Because
    /// every op in the expression is itself on the tape, a backward pass
    /// through it yields the exact gradient-penalty gradients.
    fn input_gradient_expr<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        n: usize,
        masks: &[Tensor<S>],
    ) -> Result<Var, NnError> {
        let ones = g.constant(Tensor::full(&[n, 1], S::ONE))?;
        match &self.arch {
            Arch::Conv { convs, head, in_ch, size } => {
                let w_head = vars.effective(g, ps, &format!("{}.w", head.name))?;
                let grad = g.matmul_nn(ones, w_head)?; // [n, flat]
                let mut dims = Vec::new();
                let mut cur = (*in_ch, *size);
                for c in convs {
                    let meta = ConvMeta {
                        in_ch: c.in_ch,
                        out_ch: c.out_ch,
                        kh: c.k,
                        kw: c.k,
                        stride: c.stride,
                        pad: c.pad,
                        in_h: cur.1,
                        in_w: cur.1,
                    };
                    dims.push(meta);
                    cur = (c.out_ch, meta.out_h());
                }
                let last = dims.last().expect("conv stack is non-empty");
                let mut gimg = g.reshape(grad, &[n, last.out_ch, last.out_h(), last.out_w()])?;
                for (i, meta) in dims.iter().enumerate().rev() {
                    let w = vars.effective(g, ps, &format!("{}.w", convs[i].name))?;
                    gimg = g.mul_const(gimg, masks[i].clone())?;
                    gimg = g.conv2d_input_grad(gimg, w, *meta)?;
                }
                g.reshape(gimg, &[n, in_ch * size * size])
            }
            Arch::Mlp { layers } => {
                let w_last = vars.effective(g, ps, &format!("{}.w", layers[layers.len() - 1].name))?;
                let mut grad = g.matmul_nn(ones, w_last)?;
                for (i, l) in layers.iter().enumerate().rev().skip(1) {
                    let w = vars.effective(g, ps, &format!("{}.w", l.name))?;
                    grad = g.mul_const(grad, masks[i].clone())?;
                    grad = g.matmul_nn(grad, w)?;
                }
                Ok(grad)
            }
        }
    }

    /// Scores a batch without training: builds a forward graph on a
    /// read-only parameter snapshot and returns the logits. The persisted
    /// power-iteration state is not advanced.
    pub fn score_batch<S: Scalar>(&self, ps: &ParameterSet<S>, x: Tensor<S>) -> Result<Vec<f64>, NnError> {
        self.check_input(&x)?;
        let mut g = Graph::new();
        let mut vars = ParamVars::new();
        let xv = g.constant(x)?;
        let logits = self.forward(&mut g, ps, &mut vars, xv)?;
        let out = g.value(logits).to_f64_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("discriminator logits".into()));
        }
        Ok(out)
    }
}

fn relu_mask<S: Scalar>(pre: &Tensor<S>) -> Tensor<S> {
    pre.map(|v| if v > S::ZERO { S::ONE } else { S::ZERO })
}

#[derive(Debug, Clone)]
pub struct DiscBatch<S: Scalar> {
    /// Assembled real inputs `[n, c, h, w]` (already paired/masked).
    pub real: Tensor<S>,
    /// Assembled fake inputs, same shape.
    pub fake: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct DiscMetrics {
    pub loss: f64,
    pub real_acc: f64,
    pub fake_acc: f64,
    /// Estimated top singular value per spectral layer (pre-normalization).
    pub sigma_per_layer: Vec<(String, f64)>,
    pub grad_norm: f64,
}

/// One discriminator training step: loss, backward, clipped Adam update.
///
/// `interp_rng` drives gradient-penalty interpolation points (WGAN-GP only).
pub fn disc_train_step<S: Scalar>(
    disc: &Discriminator,
    params: &mut ParameterSet<S>,
    batch: &DiscBatch<S>,
    cfg: &DiscConfig,
    interp_rng: &mut ChaCha12Rng,
) -> Result<DiscMetrics, NnError> {
    disc.check_input(&batch.real)?;
    disc.check_input(&batch.fake)?;
    if batch.real.shape() != batch.fake.shape() {
        return Err(NnError::ShapeMismatch {
            op: "disc_train_step",
            lhs: batch.real.shape().to_vec(),
            rhs: batch.fake.shape().to_vec(),
        });
    }
    if cfg.loss_mode == LossMode::StandardGanSpectralNorm {
        advance_spectral_state(params, cfg.sn_iters.max(1));
    }

    let mut g: Graph<S> = Graph::new();
    let mut vars = ParamVars::new();
    let real = g.constant(batch.real.clone())?;
    let fake = g.constant(batch.fake.clone())?;
    let logits_r = disc.forward(&mut g, params, &mut vars, real)?;
    let logits_f = disc.forward(&mut g, params, &mut vars, fake)?;

    let loss = match cfg.loss_mode {
        LossMode::StandardGanSpectralNorm => {
            // -E[log sigmoid(D(real))] - E[log(1 - sigmoid(D(fake)))]
            let neg_r = g.scale(logits_r, -1.0)?;
            let sp_r = g.softplus(neg_r)?;
            let term_r = g.mean_all(sp_r)?;
            let sp_f = g.softplus(logits_f)?;
            let term_f = g.mean_all(sp_f)?;
            g.add(term_r, term_f)?
        }
        LossMode::WganGp => {
            // E[D(fake)] - E[D(real)] + gp_weight * E[(|grad D(x_hat)| - 1)^2]
            let mean_f = g.mean_all(logits_f)?;
            let mean_r = g.mean_all(logits_r)?;
            let neg_r = g.scale(mean_r, -1.0)?;
            let wgan = g.add(mean_f, neg_r)?;
            let gp = gradient_penalty(disc, params, &mut g, &mut vars, batch, interp_rng)?;
            let gp_scaled = g.scale(gp, cfg.gp_weight)?;
            g.add(wgan, gp_scaled)?
        }
    };

    g.backward(loss).map_err(|e| match e {
        NnError::NonFinite(what) => NnError::NonFinite(format!(
            "{what} (disc step {}, batch of {})",
            params.step_count(),
            batch.real.shape()[0]
        )),
        other => other,
    })?;
    let mut grads = vars.grads(&g);
    let grad_norm = clip_global_norm(&mut grads, 10.0);
    params.adam_step(&grads, &cfg.optimizer)?;

    let lr = g.value(logits_r).to_f64_vec();
    let lf = g.value(logits_f).to_f64_vec();
    let real_acc = lr.iter().filter(|&&v| v > 0.0).count() as f64 / lr.len() as f64;
    let fake_acc = lf.iter().filter(|&&v| v < 0.0).count() as f64 / lf.len() as f64;
    Ok(DiscMetrics {
        loss: g.value(loss).item().to_f64(),
        real_acc,
        fake_acc,
        sigma_per_layer: sigma_estimates(disc, params),
        grad_norm,
    })
}

/// Mean squared distance of the interpolate gradient norm from 1.
fn gradient_penalty<S: Scalar>(
    disc: &Discriminator,
    params: &ParameterSet<S>,
    g: &mut Graph<S>,
    vars: &mut ParamVars,
    batch: &DiscBatch<S>,
    rng: &mut ChaCha12Rng,
) -> Result<Var, NnError> {
    let shape = batch.real.shape().to_vec();
    let n = shape[0];
    let per = batch.real.len() / n;
    let mut interp = vec![S::ZERO; batch.real.len()];
    for s in 0..n {
        let eps = S::from_f64(rng.random::<f64>());
        for i in 0..per {
            let idx = s * per + i;
            interp[idx] = eps * batch.real.data()[idx] + (S::ONE - eps) * batch.fake.data()[idx];
        }
    }
    let x_hat = g.constant(Tensor::from_vec(&shape, interp))?;
    let mut masks = Vec::new();
    let _logits = disc.forward_capturing(g, params, vars, x_hat, &mut masks)?;
    let grad = disc.input_gradient_expr(g, params, vars, n, &masks)?;
    let sq = g.square(grad)?;
    let row = g.row_sums(sq)?;
    let row2 = g.reshape(row, &[n, 1])?;
    let norm = g.sqrt_guard(row2)?;
    let minus_one = g.add_const(norm, Tensor::full(&[n, 1], S::from_f64(-1.0)))?;
    let pen = g.square(minus_one)?;
    g.mean_all(pen)
}

/// Current sigma estimate per spectral layer, from the persisted `u`.
pub fn sigma_estimates<S: Scalar>(disc: &Discriminator, params: &ParameterSet<S>) -> Vec<(String, f64)> {
    disc.spectral_params()
        .into_iter()
        .map(|name| {
            let entry = params.entry(&name);
            let state = entry.spectral.as_ref().expect("spectral param has state");
            let mut probe = state.clone();
            let sigma = crate::nn::spectral::spectral_normalize(&entry.value, &mut probe, 1).sigma;
            (name, sigma)
        })
        .collect()
}

/// Converts canvases to a `[n, 3, h, w]` tensor batch.
pub fn canvases_to_tensor<S: Scalar>(canvases: &[&Canvas]) -> Tensor<S> {
    assert!(!canvases.is_empty());
    let (h, w) = (canvases[0].height(), canvases[0].width());
    let mut data = Vec::with_capacity(canvases.len() * 3 * h * w);
    for c in canvases {
        assert_eq!((c.height(), c.width()), (h, w));
        // HWC -> CHW
        for chan in 0..3 {
            for px in 0..h * w {
                data.push(S::from_f64(c.pixels()[px * 3 + chan]));
            }
        }
    }
    Tensor::from_vec(&[canvases.len(), 3, h, w], data)
}

/// Converts (first, second) canvas pairs to a `[n, 6, h, w]` tensor batch
/// (channel-concatenated before the first layer).
pub fn pairs_to_tensor<S: Scalar>(pairs: &[(&Canvas, &Canvas)]) -> Tensor<S> {
    assert!(!pairs.is_empty());
    let (h, w) = (pairs[0].0.height(), pairs[0].0.width());
    let mut data = Vec::with_capacity(pairs.len() * 6 * h * w);
    for (a, b) in pairs {
        for c in [a, b] {
            assert_eq!((c.height(), c.width()), (h, w));
            for chan in 0..3 {
                for px in 0..h * w {
                    data.push(S::from_f64(c.pixels()[px * 3 + chan]));
                }
            }
        }
    }
    Tensor::from_vec(&[pairs.len(), 6, h, w], data)
}

/// Assembles the discriminator input for one (target, render) sample under
/// the given conditioning mode. `mask` is used only in complement mode.
pub fn assemble_input<S: Scalar>(
    mode: ConditionalMode,
    target: Option<&Canvas>,
    render: &Canvas,
    mask: MaskSpec,
    slot: PairSlot,
) -> Tensor<S> {
    match mode {
        ConditionalMode::None => canvases_to_tensor(&[render]),
        ConditionalMode::FullyConditioned => {
            let t = target.expect("conditional mode requires a target");
            match slot {
                PairSlot::Real => pairs_to_tensor(&[(t, t)]),
                PairSlot::Fake => pairs_to_tensor(&[(t, render)]),
            }
        }
        ConditionalMode::Complement => {
            let t = target.expect("conditional mode requires a target");
            let (a, b) = make_complement_pair(t, render, mask, slot);
            pairs_to_tensor(&[(&a, &b)])
        }
    }
}

/// Stacks per-sample input tensors (each `[1, c, h, w]`) into one batch.
pub fn stack_inputs<S: Scalar>(inputs: &[Tensor<S>]) -> Tensor<S> {
    assert!(!inputs.is_empty());
    let shape = inputs[0].shape().to_vec();
    let mut data = Vec::with_capacity(inputs.len() * inputs[0].len());
    for t in inputs {
        assert_eq!(t.shape(), &shape[..]);
        data.extend_from_slice(t.data());
    }
    let mut out_shape = shape;
    out_shape[0] = inputs.len();
    Tensor::from_vec(&out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::Rng;

    fn random_canvas(seed: u64, size: usize) -> Canvas {
        let mut rng = crate::util::rng_for(seed, &[77]);
        let pixels = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
        Canvas::from_pixels(size, size, pixels)
    }

    #[test]
    fn masks_partition_the_canvas() {
        for mask in MaskSpec::ALL {
            for (h, w) in [(8, 8), (10, 6)] {
                for row in 0..h {
                    for col in 0..w {
                        let a = mask.contains(row, col, h, w);
                        let b = mask.complement().contains(row, col, h, w);
                        assert!(a ^ b, "mask {mask:?} at ({row},{col}) of {h}x{w}");
                    }
                }
            }
        }
    }

    #[test]
    fn complement_pair_components_have_disjoint_support() {
        for mask in MaskSpec::ALL {
            for seed in 0..8 {
                let target = random_canvas(seed, 8);
                let render = random_canvas(seed + 100, 8);
                for slot in [PairSlot::Real, PairSlot::Fake] {
                    let (a, b) = make_complement_pair(&target, &render, mask, slot);
                    for (x, y) in a.pixels().iter().zip(b.pixels().iter()) {
                        assert_eq!(x * y, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_render_makes_fake_pair_equal_real_pair() {
        let target = random_canvas(3, 8);
        for mask in MaskSpec::ALL {
            let fake = make_complement_pair(&target, &target, mask, PairSlot::Fake);
            let real = make_complement_pair(&target, &target, mask, PairSlot::Real);
            assert_eq!(fake, real);
        }
    }

    #[test]
    fn two_by_two_left_mask_arithmetic() {
        // target [[a,b],[c,d]], render [[p,q],[r,s]] per channel; left mask
        // keeps column 0. Fake pair = ([[0,b],[0,d]], [[p,0],[r,0]]).
        let mut target = Canvas::white(2, 2);
        target.set(0, 0, [0.1; 3]);
        target.set(0, 1, [0.2; 3]);
        target.set(1, 0, [0.3; 3]);
        target.set(1, 1, [0.4; 3]);
        let mut render = Canvas::white(2, 2);
        render.set(0, 0, [0.5; 3]);
        render.set(0, 1, [0.6; 3]);
        render.set(1, 0, [0.7; 3]);
        render.set(1, 1, [0.8; 3]);
        let (vis, masked) = make_complement_pair(&target, &render, MaskSpec::LeftHalf, PairSlot::Fake);
        assert_eq!(vis.get(0, 0), [0.0; 3]);
        assert_eq!(vis.get(0, 1), [0.2; 3]);
        assert_eq!(vis.get(1, 0), [0.0; 3]);
        assert_eq!(vis.get(1, 1), [0.4; 3]);
        assert_eq!(masked.get(0, 0), [0.5; 3]);
        assert_eq!(masked.get(0, 1), [0.0; 3]);
        assert_eq!(masked.get(1, 0), [0.7; 3]);
        assert_eq!(masked.get(1, 1), [0.0; 3]);
    }

    #[test]
    fn mask_plus_complement_reconstructs() {
        for seed in 0..100 {
            let x = random_canvas(seed, 6);
            for mask in MaskSpec::ALL {
                let m = mask.apply(&x);
                let c = mask.complement().apply(&x);
                for (i, v) in m.pixels().iter().enumerate() {
                    assert_eq!(v + c.pixels()[i], x.pixels()[i]);
                }
            }
        }
    }

    #[test]
    fn probe_is_blind_on_complement_pairs_and_perfect_on_full_pairs() {
        let mut correct_complement = 0usize;
        let mut total = 0usize;
        let mut correct_full = 0usize;
        for seed in 0..50 {
            let target = random_canvas(seed, 8);
            let mut render = random_canvas(seed + 1000, 8);
            render.set(0, 0, [0.9, 0.1, 0.9]);
            let mask = MaskSpec::ALL[(seed % 4) as usize];
            for slot in [PairSlot::Real, PairSlot::Fake] {
                let (a, b) = make_complement_pair(&target, &render, mask, slot);
                if pixel_equality_probe(&a, &b) == slot {
                    correct_complement += 1;
                }
                let (fa, fb) = match slot {
                    PairSlot::Real => (target.clone(), target.clone()),
                    PairSlot::Fake => (target.clone(), render.clone()),
                };
                if pixel_equality_probe(&fa, &fb) == slot {
                    correct_full += 1;
                }
                total += 1;
            }
        }
        // The probe always answers "real": exactly chance on balanced
        // complement pairs, perfect on fully conditioned pairs.
        assert_eq!(correct_complement * 2, total);
        assert_eq!(correct_full, total);
    }

    #[test]
    fn scoring_is_deterministic_and_batch_consistent() {
        let disc = Discriminator::conv_default(3, 32, true, 8);
        let mut rng = crate::util::rng_for(5, &[1]);
        let ps: ParameterSet<f64> = disc.init(&mut rng);
        let c1 = random_canvas(1, 32);
        let c2 = random_canvas(2, 32);
        let single1 = disc.score_batch(&ps, canvases_to_tensor(&[&c1])).unwrap();
        let single1_again = disc.score_batch(&ps, canvases_to_tensor(&[&c1])).unwrap();
        assert_eq!(single1, single1_again);
        let single2 = disc.score_batch(&ps, canvases_to_tensor(&[&c2])).unwrap();
        let batch = disc.score_batch(&ps, canvases_to_tensor(&[&c1, &c2])).unwrap();
        assert!((batch[0] - single1[0]).abs() < 1e-12);
        assert!((batch[1] - single2[0]).abs() < 1e-12);
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let disc = Discriminator::conv_default(6, 32, true, 8);
        let mut rng = crate::util::rng_for(5, &[2]);
        let ps: ParameterSet<f64> = disc.init(&mut rng);
        let c = random_canvas(1, 32);
        let err = disc.score_batch(&ps, canvases_to_tensor(&[&c])).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }

    #[test]
    fn separable_toy_data_is_learned_quickly() {
        // 1-D inputs: real at +2, fake at -2 (sigma 0.5). 500 steps of the
        // standard loss with spectral norm must exceed 95% on both sides.
        let disc = Discriminator::mlp(&[1, 16, 1], true);
        let mut rng = crate::util::rng_for(11, &[3]);
        let mut ps: ParameterSet<f32> = disc.init(&mut rng);
        let cfg = DiscConfig {
            conditional_mode: ConditionalMode::None,
            optimizer: AdamConfig { learning_rate: 5e-3, ..AdamConfig::disc_default() },
            ..DiscConfig::default()
        };
        let mut metrics = None;
        for step in 0..500u64 {
            let mut brng = crate::util::rng_for(11, &[4, step]);
            let real: Vec<f32> = (0..32)
                .map(|_| 2.0 + 0.5 * crate::nn::layers::sample_normal(&mut brng) as f32)
                .collect();
            let fake: Vec<f32> = (0..32)
                .map(|_| -2.0 + 0.5 * crate::nn::layers::sample_normal(&mut brng) as f32)
                .collect();
            let batch = DiscBatch {
                real: Tensor::from_vec(&[32, 1], real),
                fake: Tensor::from_vec(&[32, 1], fake),
            };
            let mut irng = crate::util::rng_for(11, &[5, step]);
            metrics = Some(disc_train_step(&disc, &mut ps, &batch, &cfg, &mut irng).unwrap());
        }
        let m = metrics.unwrap();
        assert!(m.real_acc > 0.95, "real acc {}", m.real_acc);
        assert!(m.fake_acc > 0.95, "fake acc {}", m.fake_acc);
    }

    #[test]
    fn gradient_penalty_closed_form_for_linear_disc() {
        // D(x) = w . x  =>  grad_x D = w everywhere, so the penalty is
        // (|w| - 1)^2 independent of the interpolation points.
        let disc = Discriminator::mlp(&[3, 1], false);
        let mut rng = crate::util::rng_for(21, &[6]);
        let mut ps: ParameterSet<f64> = disc.init(&mut rng);
        // Kill the bias so D is exactly linear (it does not matter for the
        // penalty, which only sees the gradient).
        for v in ps.get_mut("disc.fc0.b").data_mut() {
            *v = 0.0;
        }
        let w = ps.get("disc.fc0.w").to_f64_vec();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = (norm - 1.0) * (norm - 1.0);

        let mut g: Graph<f64> = Graph::new();
        let mut vars = ParamVars::new();
        let batch = DiscBatch {
            real: Tensor::from_vec(&[4, 3], (0..12).map(|i| i as f64 * 0.25).collect()),
            fake: Tensor::from_vec(&[4, 3], (0..12).map(|i| 1.0 - i as f64 * 0.125).collect()),
        };
        let mut irng = crate::util::rng_for(21, &[7]);
        let gp = gradient_penalty(&disc, &ps, &mut g, &mut vars, &batch, &mut irng).unwrap();
        assert!((g.value(gp).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_penalty_gradients_match_finite_differences() {
        // Two-parameter discriminator: full WGAN-GP loss checked against
        // central differences.
        let disc = Discriminator::mlp(&[2, 1], false);
        let mut rng = crate::util::rng_for(31, &[8]);
        let ps0: ParameterSet<f64> = disc.init(&mut rng);
        let batch = DiscBatch {
            real: Tensor::from_vec(&[3, 2], vec![1.0, 0.2, 0.8, -0.3, 1.2, 0.5]),
            fake: Tensor::from_vec(&[3, 2], vec![-0.5, 0.9, 0.1, 0.4, -1.0, -0.2]),
        };

        let loss_parts = |ps: &ParameterSet<f64>, want_grads: bool| {
            let mut g: Graph<f64> = Graph::new();
            let mut vars = ParamVars::new();
            let real = g.constant(batch.real.clone()).unwrap();
            let fake = g.constant(batch.fake.clone()).unwrap();
            let lr = disc.forward(&mut g, ps, &mut vars, real).unwrap();
            let lf = disc.forward(&mut g, ps, &mut vars, fake).unwrap();
            let mf = g.mean_all(lf).unwrap();
            let mr = g.mean_all(lr).unwrap();
            let neg = g.scale(mr, -1.0).unwrap();
            let wg = g.add(mf, neg).unwrap();
            let mut irng = crate::util::rng_for(31, &[9]);
            let gp = gradient_penalty(&disc, ps, &mut g, &mut vars, &batch, &mut irng).unwrap();
            let gps = g.scale(gp, 10.0).unwrap();
            let total = g.add(wg, gps).unwrap();
            let val = g.value(total).item();
            let grads = if want_grads {
                g.backward(total).unwrap();
                Some(vars.grads(&g))
            } else {
                None
            };
            (val, grads)
        };

        let (_, grads) = loss_parts(&ps0, true);
        let gw = grads.unwrap()["disc.fc0.w"].clone();
        let w0 = ps0.get("disc.fc0.w").to_f64_vec();
        let h = 1e-5;
        for i in 0..2 {
            let mut up = ps0.clone();
            up.get_mut("disc.fc0.w").data_mut()[i] = w0[i] + h;
            let mut dn = ps0.clone();
            dn.get_mut("disc.fc0.w").data_mut()[i] = w0[i] - h;
            let numeric = (loss_parts(&up, false).0 - loss_parts(&dn, false).0) / (2.0 * h);
            let a = gw.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "w[{i}]: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn gp_gradients_through_conv_stack_match_finite_differences() {
        // The full symbolic double-backward path through conv + relu.
        let disc = Discriminator::conv_default(3, 32, false, 2);
        let mut rng = crate::util::rng_for(41, &[10]);
        let ps0: ParameterSet<f64> = disc.init(&mut rng);
        let mut crng = crate::util::rng_for(41, &[11]);
        let real = Tensor::from_vec(
            &[2, 3, 32, 32],
            (0..2 * 3 * 32 * 32).map(|_| crng.random::<f64>()).collect(),
        );
        let fake = real.map(|v| 1.0 - v);
        let batch = DiscBatch { real, fake };

        let gp_value = |ps: &ParameterSet<f64>| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let mut vars = ParamVars::new();
            let mut irng = crate::util::rng_for(41, &[12]);
            let gp = gradient_penalty(&disc, ps, &mut g, &mut vars, &batch, &mut irng).unwrap();
            g.value(gp).item()
        };

        let mut g: Graph<f64> = Graph::new();
        let mut vars = ParamVars::new();
        let mut irng = crate::util::rng_for(41, &[12]);
        let gp = gradient_penalty(&disc, &ps0, &mut g, &mut vars, &batch, &mut irng).unwrap();
        g.backward(gp).unwrap();
        let grads = vars.grads(&g);

        let h = 1e-5;
        for (name, idx) in [("disc.conv0.w", 3usize), ("disc.conv0.w", 17), ("disc.head.w", 5)] {
            let mut up = ps0.clone();
            up.get_mut(name).data_mut()[idx] += h;
            let mut dn = ps0.clone();
            dn.get_mut(name).data_mut()[idx] -= h;
            let numeric = (gp_value(&up) - gp_value(&dn)) / (2.0 * h);
            let a = grads[name].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{idx}]: analytic {a} vs numeric {numeric} rel {rel}");
        }
    }

    #[test]
    fn spectral_layers_stay_normalized_during_training() {
        let disc = Discriminator::mlp(&[4, 8, 1], true);
        let mut rng = crate::util::rng_for(51, &[13]);
        let mut ps: ParameterSet<f64> = disc.init(&mut rng);
        let cfg = DiscConfig::default();
        for step in 0..50u64 {
            let mut brng = crate::util::rng_for(51, &[14, step]);
            let real: Vec<f64> = (0..8 * 4).map(|_| brng.random::<f64>() + 0.5).collect();
            let fake: Vec<f64> = (0..8 * 4).map(|_| -brng.random::<f64>() - 0.5).collect();
            let batch = DiscBatch {
                real: Tensor::from_vec(&[8, 4], real),
                fake: Tensor::from_vec(&[8, 4], fake),
            };
            let mut irng = crate::util::rng_for(51, &[15, step]);
            disc_train_step(&disc, &mut ps, &batch, &cfg, &mut irng).unwrap();
        }
        // The effective weight of every spectral layer keeps top singular
        // value within 1e-3 of 1 (checked with 50 test-mode iterations).
        for name in disc.spectral_params() {
            let entry = ps.entry(&name);
            let mut probe = entry.spectral.clone().unwrap();
            let r = crate::nn::spectral::spectral_normalize(&entry.value, &mut probe, 50);
            let dims = crate::nn::spectral::as_matrix_dims(entry.value.shape());
            let top = crate::oracle::top_singular_value(&r.normalized.to_f64_vec(), dims.0, dims.1);
            assert!((top - 1.0).abs() < 1e-3, "{name}: sigma {top}");
        }
    }

    #[test]
    fn lipschitz_product_bound_holds_on_random_pairs() {
        let disc = Discriminator::conv_default(3, 32, true, 4);
        let mut rng = crate::util::rng_for(61, &[16]);
        let mut ps: ParameterSet<f64> = disc.init(&mut rng);
        advance_spectral_state(&mut ps, 50);

        // Product of per-layer operator-norm bounds. A stride-2 3x3 conv
        // whose reshaped matrix has top singular value sigma has operator
        // norm at most 2 * sigma (each input pixel feeds at most 2x2 output
        // positions); relu is 1-Lipschitz; the dense head contributes sigma.
        let mut bound = 1.0;
        for name in disc.spectral_params() {
            let entry = ps.entry(&name);
            let dims = crate::nn::spectral::as_matrix_dims(entry.value.shape());
            let mut probe = entry.spectral.clone().unwrap();
            let r = crate::nn::spectral::spectral_normalize(&entry.value, &mut probe, 50);
            let sigma = crate::oracle::top_singular_value(&r.normalized.to_f64_vec(), dims.0, dims.1);
            let overlap = if name.contains("conv") { 2.0 } else { 1.0 };
            bound *= sigma * overlap;
        }

        for seed in 0..10 {
            let a = random_canvas(seed, 32);
            let mut b = a.clone();
            let mut prng = crate::util::rng_for(62, &[seed]);
            for _ in 0..40 {
                let r = prng.random_range(0..32);
                let c = prng.random_range(0..32);
                let mut px = b.get(r, c);
                for chan in px.iter_mut() {
                    *chan = (*chan + 0.3 * (prng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
                }
                b.set(r, c, px);
            }
            let sa = disc.score_batch(&ps, canvases_to_tensor(&[&a])).unwrap()[0];
            let sb = disc.score_batch(&ps, canvases_to_tensor(&[&b])).unwrap()[0];
            let dist: f64 = a
                .pixels()
                .iter()
                .zip(b.pixels().iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((sa - sb).abs() <= bound * dist + 1e-9, "|{sa} - {sb}| > {bound} * {dist}");
        }
    }
}
