//! Encoder-decoder pixel classifier with skip connections.
//!
//! Each encoder level is a 3x3 convolution, ReLU and dropout followed by 2x2
//! max pooling. A bottleneck convolution sits at the coarsest scale. Each
//! decoder level upsamples by 2, concatenates the matching encoder output and
//! applies a 3x3 convolution, ReLU and dropout. A 1x1 projection and a sigmoid
//! give the lesion probability. Dropout is applied after every convolution
//! except the final projection.
//!
//! Parameters live in one flat buffer so the optimizer and checkpoints can
//! treat them uniformly; [`SegModel::named_params`] exposes the per-layer view.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::layers;
use crate::transform::TransformOp;

/// Subtracted from every input value before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub input_noise_sigma: f64,
    pub size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            dropout_rate: 0.1,
            input_noise_sigma: 0.05,
            size: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if !(self.input_noise_sigma >= 0.0 && self.input_noise_sigma.is_finite()) {
            return Err(Error::Config("input_noise_sigma must be finite and >= 0".into()));
        }
        let stride = 1usize << self.depth;
        if self.size == 0 || self.size % stride != 0 {
            return Err(Error::Config(format!(
                "size {} is not divisible by 2^depth = {stride}",
                self.size
            )));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvSpec {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvSpec {
    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k
    }
}

fn layout(config: &ModelConfig) -> (Vec<ConvSpec>, usize) {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, in_ch: usize, out_ch: usize, k: usize| {
        let w_off = offset;
        let b_off = w_off + out_ch * in_ch * k * k;
        offset = b_off + out_ch;
        specs.push(ConvSpec {
            name,
            in_ch,
            out_ch,
            k,
            w_off,
            b_off,
        });
    };
    let d = config.depth;
    let mut in_ch = crate::data::IMAGE_CHANNELS;
    for level in 0..d {
        let out = config.level_channels(level);
        push(format!("enc{level}"), in_ch, out, 3);
        in_ch = out;
    }
    push("bottleneck".into(), in_ch, config.level_channels(d), 3);
    for level in (0..d).rev() {
        let from_below = config.level_channels(level + 1);
        push(
            format!("dec{level}"),
            from_below + config.level_channels(level),
            config.level_channels(level),
            3,
        );
    }
    push("head".into(), config.base_channels, 1, 1);
    (specs, offset)
}

/// Activation record of one convolution + ReLU + dropout block.
#[derive(Debug, Clone)]
struct BlockTape {
    col: Vec<f64>,
    /// Per output element: 0 when ReLU or dropout zeroed it, else the dropout scale.
    gate: Vec<f64>,
    n: usize,
}

/// Everything a single-image forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    enc: Vec<BlockTape>,
    pool_arg: Vec<Vec<u32>>,
    bottleneck: BlockTape,
    dec: Vec<BlockTape>,
    head_col: Vec<f64>,
    probs: Vec<f64>,
}

impl Tape {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Stochastic perturbation source for one forward pass.
pub struct Perturbation<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    config: ModelConfig,
    specs: Vec<ConvSpec>,
    params: Vec<f64>,
}

impl SegModel {
    /// He-initialized weights and zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (specs, total) = layout(&config);
        let mut params = vec![0.0; total];
        for spec in &specs {
            let fan_in = (spec.in_ch * spec.k * spec.k) as f64;
            let gain = if spec.name == "head" { 1.0 } else { 2.0 };
            let dist = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            for w in &mut params[spec.w_off..spec.w_off + spec.weight_len()] {
                *w = dist.sample(rng);
            }
        }
        Ok(Self {
            config,
            specs,
            params,
        })
    }

    /// Rebuilds a model from a flat parameter buffer.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (specs, total) = layout(&config);
        if params.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Per-layer `(name, values)` slices, weights before biases.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        self.specs
            .iter()
            .flat_map(|s| {
                [
                    (
                        format!("{}.weight", s.name),
                        &self.params[s.w_off..s.w_off + s.weight_len()],
                    ),
                    (
                        format!("{}.bias", s.name),
                        &self.params[s.b_off..s.b_off + s.out_ch],
                    ),
                ]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, image: &Grid<f64>) -> Result<()> {
        let n = self.config.size;
        if image.channels() != crate::data::IMAGE_CHANNELS
            || image.height() != n
            || image.width() != n
        {
            return Err(Error::Shape(format!(
                "model expects {}x{n}x{n} input, got {}x{}x{}",
                crate::data::IMAGE_CHANNELS,
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn weights(&self, spec: &ConvSpec) -> (&[f64], &[f64]) {
        (
            &self.params[spec.w_off..spec.w_off + spec.weight_len()],
            &self.params[spec.b_off..spec.b_off + spec.out_ch],
        )
    }

    fn block_forward<R: Rng + ?Sized>(
        &self,
        spec: &ConvSpec,
        input: &[f64],
        n: usize,
        perturb: &mut Option<Perturbation<'_, R>>,
    ) -> (Vec<f64>, BlockTape) {
        let (w, b) = self.weights(spec);
        let (mut out, col) = layers::conv_forward(input, spec.in_ch, spec.out_ch, n, spec.k, w, b);
        let mut gate = vec![1.0; out.len()];
        let dropout = match perturb {
            Some(p) if p.dropout_rate > 0.0 => Some(p),
            _ => None,
        };
        match dropout {
            Some(p) => {
                let keep_scale = 1.0 / (1.0 - p.dropout_rate);
                for (v, g) in out.iter_mut().zip(gate.iter_mut()) {
                    let dropped = p.rng.random::<f64>() < p.dropout_rate;
                    if *v <= 0.0 || dropped {
                        *v = 0.0;
                        *g = 0.0;
                    } else {
                        *v *= keep_scale;
                        *g = keep_scale;
                    }
                }
            }
            None => {
                for (v, g) in out.iter_mut().zip(gate.iter_mut()) {
                    if *v <= 0.0 {
                        *v = 0.0;
                        *g = 0.0;
                    }
                }
            }
        }
        (out, BlockTape { col, gate, n })
    }

    /// Single-image forward pass that records what backward needs.
    ///
    /// With a perturbation, Gaussian noise is added to the input and fresh
    /// dropout masks are drawn; without one the pass is deterministic.
    pub fn forward_taped<R: Rng + ?Sized>(
        &self,
        image: &Grid<f64>,
        mut perturb: Option<Perturbation<'_, R>>,
    ) -> Result<Tape> {
        self.check_input(image)?;
        let d = self.config.depth;
        let mut n = self.config.size;
        // fixed centering of [0,1] inputs
        let mut x: Vec<f64> = image.data().iter().map(|v| v - INPUT_CENTER).collect();
        if let Some(p) = perturb.as_mut() {
            if p.noise_sigma > 0.0 {
                let noise = Normal::new(0.0, p.noise_sigma).expect("positive std");
                for v in &mut x {
                    *v += noise.sample(p.rng);
                }
            }
        }

        let mut enc = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        let mut pool_arg = Vec::with_capacity(d);
        for level in 0..d {
            let spec = &self.specs[level];
            let (out, tape) = self.block_forward(spec, &x, n, &mut perturb);
            let (pooled, arg) = layers::maxpool_forward(&out, spec.out_ch, n);
            enc.push(tape);
            skips.push(out);
            pool_arg.push(arg);
            x = pooled;
            n /= 2;
        }
        let (mut x, bottleneck) = self.block_forward(&self.specs[d], &x, n, &mut perturb);

        let mut dec = Vec::with_capacity(d);
        for (i, level) in (0..d).rev().enumerate() {
            let spec = &self.specs[d + 1 + i];
            let below = self.config.level_channels(level + 1);
            let mut cat = layers::upsample_forward(&x, below, n);
            n *= 2;
            cat.extend_from_slice(&skips[level]);
            let (out, tape) = self.block_forward(spec, &cat, n, &mut perturb);
            dec.push(tape);
            x = out;
        }

        let head = &self.specs[2 * d + 1];
        let (w, b) = self.weights(head);
        let (logits, head_col) = layers::conv_forward(&x, head.in_ch, 1, n, 1, w, b);
        let probs = logits.into_iter().map(layers::sigmoid).collect();
        Ok(Tape {
            enc,
            pool_arg,
            bottleneck,
            dec,
            head_col,
            probs,
        })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d probs`.
    pub fn backward(&self, tape: &Tape, grad_probs: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(grad_probs.len(), tape.probs.len());
        let d = self.config.depth;
        let n_full = self.config.size;

        let grad_logits: Vec<f64> = grad_probs
            .iter()
            .zip(&tape.probs)
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        let head = &self.specs[2 * d + 1];
        let mut g = self
            .conv_grad(head, &grad_logits, &tape.head_col, n_full, grad, true)
            .expect("input gradient requested");

        let mut skip_grads: Vec<Vec<f64>> = vec![Vec::new(); d];
        let mut n = n_full;
        for level in 0..d {
            let i = d - 1 - level;
            let spec = &self.specs[d + 1 + i];
            let block = &tape.dec[i];
            let g_cat = self.block_grad(spec, block, g, grad);
            let below = self.config.level_channels(level + 1);
            let split = below * n * n;
            skip_grads[level] = g_cat[split..].to_vec();
            n /= 2;
            g = layers::upsample_backward(&g_cat[..split], below, n);
        }

        g = self.block_grad(&self.specs[d], &tape.bottleneck, g, grad);

        for level in (0..d).rev() {
            let spec = &self.specs[level];
            let size = n * 2;
            let mut g_out = std::mem::take(&mut skip_grads[level]);
            layers::maxpool_backward(&g, &tape.pool_arg[level], &mut g_out);
            let block = &tape.enc[level];
            debug_assert_eq!(block.n, size);
            if level == 0 {
                self.block_grad_no_input(spec, block, g_out, grad);
                g = Vec::new();
            } else {
                g = self.block_grad(spec, block, g_out, grad);
            }
            n = size;
        }
        debug_assert!(g.is_empty());
    }

    fn conv_grad(
        &self,
        spec: &ConvSpec,
        grad_out: &[f64],
        col: &[f64],
        n: usize,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let w = &self.params[spec.w_off..spec.w_off + spec.weight_len()];
        let (gw, gb) = grad[spec.w_off..spec.b_off + spec.out_ch].split_at_mut(spec.weight_len());
        layers::conv_backward(
            grad_out, col, spec.in_ch, spec.out_ch, n, spec.k, w, gw, gb, need_input,
        )
    }

    fn gated(block: &BlockTape, mut g: Vec<f64>) -> Vec<f64> {
        for (v, s) in g.iter_mut().zip(&block.gate) {
            *v *= s;
        }
        g
    }

    fn block_grad(&self, spec: &ConvSpec, block: &BlockTape, g: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let g = Self::gated(block, g);
        self.conv_grad(spec, &g, &block.col, block.n, grad, true)
            .expect("input gradient requested")
    }

    fn block_grad_no_input(&self, spec: &ConvSpec, block: &BlockTape, g: Vec<f64>, grad: &mut [f64]) {
        let g = Self::gated(block, g);
        self.conv_grad(spec, &g, &block.col, block.n, grad, false);
    }

    /// Probability maps for a stack of images.
    ///
    /// `perturb = true` adds input noise and samples dropout masks from `rng`;
    /// `perturb = false` is the deterministic inference mode and leaves `rng`
    /// untouched.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        images: &[Grid<f64>],
        perturb: bool,
        rng: &mut R,
    ) -> Result<Vec<Grid<f64>>> {
        let n = self.config.size;
        images
            .iter()
            .map(|img| {
                let p = perturb.then(|| self.perturbation(rng));
                let tape = self.forward_taped(img, p)?;
                Grid::new(1, n, n, tape.probs)
            })
            .collect()
    }

    /// Deterministic forward pass of one image.
    pub fn predict(&self, image: &Grid<f64>) -> Result<Grid<f64>> {
        let n = self.config.size;
        let tape = self.forward_taped::<rand_chacha::ChaCha8Rng>(image, None)?;
        Grid::new(1, n, n, tape.probs)
    }

    pub fn perturbation<'a, R: Rng + ?Sized>(&self, rng: &'a mut R) -> Perturbation<'a, R> {
        Perturbation {
            rng,
            noise_sigma: self.config.input_noise_sigma,
            dropout_rate: self.config.dropout_rate,
        }
    }
}

/// Mean squared difference between `op(f(x))` and `f(op(x))` over all
/// `(image, op)` pairs, using deterministic forward passes.
pub fn equivariance_gap(model: &SegModel, images: &[Grid<f64>], ops: &[TransformOp]) -> Result<f64> {
    if images.is_empty() || ops.is_empty() {
        return Err(Error::Parameter(
            "equivariance gap needs at least one image and one op".into(),
        ));
    }
    let mut total = 0.0;
    for image in images {
        let base = model.predict(image)?;
        for &op in ops {
            let lhs = op.apply(&base)?;
            let rhs = model.predict(&op.apply(image)?)?;
            let mse = lhs
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / lhs.data().len() as f64;
            total += mse;
        }
    }
    Ok(total / (images.len() * ops.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            depth: 1,
            base_channels: 2,
            dropout_rate: 0.1,
            input_noise_sigma: 0.05,
            size: 8,
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Grid<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
                Grid::new(3, size, size, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = ModelConfig::default();
        let a = SegModel::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = SegModel::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.params(), b.params());
        let bad = ModelConfig { size: 62, ..cfg };
        assert!(matches!(
            SegModel::init(bad, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_count_closed_form() {
        // depth 1, base 4, 3 input channels:
        //   enc0        3 -> 4, 3x3:  3*4*9 + 4 = 112
        //   bottleneck  4 -> 8, 3x3:  4*8*9 + 8 = 296
        //   dec0   (8+4) -> 4, 3x3: 12*4*9 + 4 = 436
        //   head        4 -> 1, 1x1:    4*1 + 1 = 5
        let cfg = ModelConfig {
            depth: 1,
            base_channels: 4,
            size: 8,
            ..ModelConfig::default()
        };
        let m = SegModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.param_count(), 112 + 296 + 436 + 5);
        let names: Vec<_> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "enc0.weight");
        assert_eq!(names.last().unwrap(), "head.bias");
    }

    #[test]
    fn output_shape_and_range() {
        for depth in 1..=3 {
            let cfg = ModelConfig {
                depth,
                base_channels: 3,
                size: 16,
                ..ModelConfig::default()
            };
            let m = SegModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(depth as u64)).unwrap();
            let imgs = random_images(2, 16, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for perturb in [false, true] {
                let out = m.forward(&imgs, perturb, &mut rng).unwrap();
                for p in &out {
                    assert_eq!((p.channels(), p.height(), p.width()), (1, 16, 16));
                    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let m = SegModel::init(tiny_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let imgs = random_images(3, 8, 9);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            m.forward(&imgs, false, &mut r1).unwrap(),
            m.forward(&imgs, false, &mut r2).unwrap()
        );
    }

    #[test]
    fn perturbed_passes_differ_across_rng_states() {
        let m = SegModel::init(tiny_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let imgs = random_images(1, 8, 9);
        let a = m.forward(&imgs, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = m.forward(&imgs, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let again = m.forward(&imgs, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, again);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = SegModel::init(tiny_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let imgs = random_images(1, 16, 9);
        assert!(matches!(
            m.forward(&imgs, false, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn equivariance_gap_basics() {
        let cfg = ModelConfig {
            depth: 2,
            base_channels: 4,
            size: 16,
            ..ModelConfig::default()
        };
        let m = SegModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let imgs = random_images(4, 16, 5);
        assert_eq!(equivariance_gap(&m, &imgs, &[TransformOp::IDENTITY]).unwrap(), 0.0);
        let all = TransformOp::all();
        let gap = equivariance_gap(&m, &imgs, &all).unwrap();
        assert!(gap > 0.0);
        let reversed: Vec<_> = imgs.iter().rev().cloned().collect();
        let gap_rev = equivariance_gap(&m, &reversed, &all).unwrap();
        assert!((gap - gap_rev).abs() <= 1e-15 * gap.max(1.0));
        assert!(equivariance_gap(&m, &[], &all).is_err());
        assert!(equivariance_gap(&m, &imgs, &[]).is_err());
    }

    /// Central finite differences over every parameter.
    fn check_gradients(config: ModelConfig) {
        let n = config.size;
        let m = SegModel::init(config, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let img = &random_images(1, n, 22)[0];
        let weights: Vec<f64> = (0..n * n).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        // scalar loss: sum_j w_j * p_j^2, perturbed with a fixed dropout/noise draw
        let loss = |model: &SegModel| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = model.forward_taped(img, Some(model.perturbation(&mut rng))).unwrap();
            tape.probs().iter().zip(&weights).map(|(p, w)| w * p * p).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tape = m.forward_taped(img, Some(m.perturbation(&mut rng))).unwrap();
        let gp: Vec<f64> = tape.probs().iter().zip(&weights).map(|(p, w)| 2.0 * w * p).collect();
        let mut grad = vec![0.0; m.param_count()];
        m.backward(&tape, &gp, &mut grad);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..m.param_count() {
            let mut plus = m.clone();
            plus.params_mut()[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max((fd - grad[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(tiny_config());
    }

    #[test]
    fn gradients_match_finite_differences_two_levels() {
        check_gradients(ModelConfig {
            depth: 2,
            base_channels: 2,
            size: 8,
            ..tiny_config()
        });
    }
}
