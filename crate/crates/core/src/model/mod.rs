//! 3D encoder-decoder segmentation network with four sigmoid heads.
//!
//! The structure follows the usual volumetric segmentation recipe: paired
//! 3x3x3 convolutions with instance normalization and PReLU per resolution
//! level, strided-convolution downsampling, transposed-convolution
//! upsampling with skip concatenation, and 1x1x1 heads for the four tasks
//! (all lesions at either timepoint, new lesions, vanishing lesions).
//!
//! The first-timepoint all-lesion prediction must not see the label input
//! channel. The network runs two passes sharing all parameters: one with
//! that channel zeroed (producing the first-timepoint head) and one with
//! the full input (producing the other three). When the channel is zero
//! anyway the passes coincide and only one is run.

pub mod checkpoint;
pub mod layers;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{extract_patch, InputBundle};
use crate::error::{Error, Result};
use crate::exec;
use layers::{sigmoid, sigmoid_backward, Conv3, ConvDown, ConvUp, HeadConv, InstanceNorm, PRelu};
use tensor::Tensor;

pub const IN_CHANNELS: usize = 4;
pub const N_HEADS: usize = 4;

/// Network size settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of downsampling layers.
    pub depth: usize,
    /// Channel width at the first resolution level; doubles per level.
    pub base_width: usize,
    pub patch_size: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale defaults; `paper_scale` holds the full-size settings.
        ModelConfig {
            depth: 3,
            base_width: 8,
            patch_size: [32, 32, 32],
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> ModelConfig {
        ModelConfig {
            depth: 5,
            base_width: 16,
            patch_size: [96, 96, 96],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be at least 1".into()));
        }
        let divisor = 1usize << self.depth;
        for &d in &self.patch_size {
            if d == 0 || d % divisor != 0 {
                return Err(Error::Config(format!(
                    "patch size {:?} must be divisible by 2^depth = {divisor}",
                    self.patch_size
                )));
            }
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// The four output probability maps for one input pair.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    pub shape: [usize; 3],
    pub p_all_t1: Vec<f64>,
    pub p_all_t2: Vec<f64>,
    pub p_new_t2: Vec<f64>,
    pub p_vanish_t2: Vec<f64>,
}

impl PredictionBundle {
    pub fn heads(&self) -> [&[f64]; N_HEADS] {
        [
            &self.p_all_t1,
            &self.p_all_t2,
            &self.p_new_t2,
            &self.p_vanish_t2,
        ]
    }

    pub fn zeros(shape: [usize; 3]) -> PredictionBundle {
        let n = shape[0] * shape[1] * shape[2];
        PredictionBundle {
            shape,
            p_all_t1: vec![0.0; n],
            p_all_t2: vec![0.0; n],
            p_new_t2: vec![0.0; n],
            p_vanish_t2: vec![0.0; n],
        }
    }

    fn head_mut(&mut self, h: usize) -> &mut Vec<f64> {
        match h {
            0 => &mut self.p_all_t1,
            1 => &mut self.p_all_t2,
            2 => &mut self.p_new_t2,
            _ => &mut self.p_vanish_t2,
        }
    }
}

// ------------------------------------------------------------------ network

/// Two convolutions with normalization and activation.
#[derive(Debug, Clone)]
struct Block {
    conv1: Conv3,
    norm1: InstanceNorm,
    act1: PRelu,
    conv2: Conv3,
    norm2: InstanceNorm,
    act2: PRelu,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, width: usize) -> Block {
        Block {
            conv1: Conv3::new(rng, in_ch, width),
            norm1: InstanceNorm::new(width),
            act1: PRelu::new(width),
            conv2: Conv3::new(rng, width, width),
            norm2: InstanceNorm::new(width),
            act2: PRelu::new(width),
        }
    }
}

struct BlockCache {
    input: Tensor,
    norm1: layers::NormCache,
    z1: Tensor,
    y1: Tensor,
    norm2: layers::NormCache,
    z2: Tensor,
    out: Tensor,
}

impl Block {
    fn forward(&self, input: Tensor) -> BlockCache {
        let c1 = self.conv1.forward(&input);
        let (z1, norm1) = self.norm1.forward(&c1);
        let y1 = self.act1.forward(&z1);
        let c2 = self.conv2.forward(&y1);
        let (z2, norm2) = self.norm2.forward(&c2);
        let out = self.act2.forward(&z2);
        BlockCache {
            input,
            norm1,
            z1,
            y1,
            norm2,
            z2,
            out,
        }
    }

    /// Backward through the block; the grads slice layout must match
    /// `push_params`. Returns the gradient w.r.t. the block input.
    fn backward(&self, cache: &BlockCache, grad_out: &Tensor, grads: &mut [Vec<f64>]) -> Tensor {
        let [gw1, gb1, gg1, gbeta1, ga1, gw2, gb2, gg2, gbeta2, ga2] = grads else {
            unreachable!("block grad arity")
        };
        let g_z2 = self.act2.backward(&cache.z2, grad_out, ga2);
        let g_c2 = self.norm2.backward(&cache.norm2, &g_z2, gg2, gbeta2);
        let g_y1 = self.conv2.backward(&cache.y1, &g_c2, gw2, gb2);
        let g_z1 = self.act1.backward(&cache.z1, &g_y1, ga1);
        let g_c1 = self.norm1.backward(&cache.norm1, &g_z1, gg1, gbeta1);
        self.conv1.backward(&cache.input, &g_c1, gw1, gb1)
    }

    fn push_params<'a>(&'a self, out: &mut Vec<&'a Vec<f64>>) {
        out.push(&self.conv1.weight);
        out.push(&self.conv1.bias);
        out.push(&self.norm1.gamma);
        out.push(&self.norm1.beta);
        out.push(&self.act1.alpha);
        out.push(&self.conv2.weight);
        out.push(&self.conv2.bias);
        out.push(&self.norm2.gamma);
        out.push(&self.norm2.beta);
        out.push(&self.act2.alpha);
    }

    fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        out.push(&mut self.conv1.weight);
        out.push(&mut self.conv1.bias);
        out.push(&mut self.norm1.gamma);
        out.push(&mut self.norm1.beta);
        out.push(&mut self.act1.alpha);
        out.push(&mut self.conv2.weight);
        out.push(&mut self.conv2.bias);
        out.push(&mut self.norm2.gamma);
        out.push(&mut self.norm2.beta);
        out.push(&mut self.act2.alpha);
    }

    const N_PARAMS: usize = 10;
}

/// The segmentation network.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    enc: Vec<Block>,
    downs: Vec<ConvDown>,
    ups: Vec<ConvUp>,
    dec: Vec<Block>,
    heads: [HeadConv; N_HEADS],
}

/// Cached activations for one forward pass.
pub struct PassCache {
    enc: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    probs: [Vec<f64>; N_HEADS],
}

impl PassCache {
    pub fn probs(&self) -> &[Vec<f64>; N_HEADS] {
        &self.probs
    }
}

/// Forward result honoring the label-channel independence contract: the
/// first-timepoint all-lesion head is taken from a pass with the label
/// channel zeroed.
pub struct TwoPassForward {
    /// Pass with the label channel zeroed; `None` when the input channel was
    /// already all zero and the full pass doubles for it.
    pub masked: Option<PassCache>,
    pub full: PassCache,
    pub shape: [usize; 3],
}

impl TwoPassForward {
    pub fn predictions(&self) -> PredictionBundle {
        let masked = self.masked.as_ref().unwrap_or(&self.full);
        PredictionBundle {
            shape: self.shape,
            p_all_t1: masked.probs[0].clone(),
            p_all_t2: self.full.probs[1].clone(),
            p_new_t2: self.full.probs[2].clone(),
            p_vanish_t2: self.full.probs[3].clone(),
        }
    }
}

/// Build a network with deterministic parameter initialization.
pub fn build_network(cfg: &ModelConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.depth;
    let mut enc = Vec::with_capacity(d + 1);
    for level in 0..=d {
        let in_ch = if level == 0 {
            IN_CHANNELS
        } else {
            cfg.width_at(level)
        };
        enc.push(Block::new(&mut rng, in_ch, cfg.width_at(level)));
    }
    let mut downs = Vec::with_capacity(d);
    for level in 0..d {
        downs.push(ConvDown::new(
            &mut rng,
            cfg.width_at(level),
            cfg.width_at(level + 1),
        ));
    }
    let mut ups = Vec::with_capacity(d);
    let mut dec = Vec::with_capacity(d);
    for level in (0..d).rev() {
        ups.push(ConvUp::new(
            &mut rng,
            cfg.width_at(level + 1),
            cfg.width_at(level),
        ));
        dec.push(Block::new(
            &mut rng,
            2 * cfg.width_at(level),
            cfg.width_at(level),
        ));
    }
    let heads = std::array::from_fn(|_| HeadConv::new(&mut rng, cfg.base_width));
    Ok(Network {
        cfg: *cfg,
        enc,
        downs,
        ups,
        dec,
        heads,
    })
}

impl Network {
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for b in &self.enc {
            b.push_params(&mut out);
        }
        for d in &self.downs {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        for u in &self.ups {
            out.push(&u.weight);
            out.push(&u.bias);
        }
        for b in &self.dec {
            b.push_params(&mut out);
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.enc {
            b.push_params_mut(&mut out);
        }
        for d in &mut self.downs {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for u in &mut self.ups {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
        }
        for b in &mut self.dec {
            b.push_params_mut(&mut out);
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Gradient buffers matching `params()` in shape and order.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn check_input_shape(&self, shape: [usize; 3]) -> Result<()> {
        if shape != self.cfg.patch_size {
            return Err(Error::Validation(format!(
                "input shape {:?} does not match the configured patch size {:?}",
                shape, self.cfg.patch_size
            )));
        }
        Ok(())
    }

    /// One plain forward pass over a 4-channel tensor.
    fn forward_pass(&self, input: Tensor) -> PassCache {
        let d = self.cfg.depth;
        let mut enc_caches: Vec<BlockCache> = Vec::with_capacity(d + 1);
        let mut x = input;
        for level in 0..=d {
            let cache = self.enc[level].forward(x);
            x = if level < d {
                self.downs[level].forward(&cache.out)
            } else {
                Tensor::zeros(0, [0, 0, 0])
            };
            enc_caches.push(cache);
        }

        let mut dec_caches: Vec<BlockCache> = Vec::with_capacity(d);
        let mut current = enc_caches[d].out.clone();
        for (k, level) in (0..d).rev().enumerate() {
            let up = self.ups[k].forward(&current);
            let joined = Tensor::concat(&up, &enc_caches[level].out);
            let cache = self.dec[k].forward(joined);
            current = cache.out.clone();
            dec_caches.push(cache);
        }

        let final_features = if d == 0 {
            &enc_caches[0].out
        } else {
            &dec_caches[d - 1].out
        };
        let probs: [Vec<f64>; N_HEADS] = std::array::from_fn(|h| {
            let logits = self.heads[h].forward(final_features);
            sigmoid(&logits)
        });
        PassCache {
            enc: enc_caches,
            dec: dec_caches,
            probs,
        }
    }

    /// Forward with the label-channel independence contract.
    pub fn forward_bundle(&self, bundle: &InputBundle) -> Result<TwoPassForward> {
        self.check_input_shape(bundle.shape())?;
        let shape = bundle.shape();
        let full_input = Tensor::from_volumes(&bundle.channels());
        let label_channel_zero = bundle.y_a_t1_channel.data.iter().all(|&v| v == 0.0);
        let full = self.forward_pass(full_input.clone());
        let masked = if label_channel_zero {
            None
        } else {
            let mut masked_input = full_input;
            masked_input.channel_mut(2).fill(0.0);
            Some(self.forward_pass(masked_input))
        };
        Ok(TwoPassForward {
            masked,
            full,
            shape,
        })
    }

    /// Backward through one pass given per-head probability gradients.
    /// Parameter gradients accumulate into `grads` (from `zero_grads`).
    pub fn backward_pass(
        &self,
        cache: &PassCache,
        head_grads: [Option<&[f64]>; N_HEADS],
        grads: &mut [Vec<f64>],
    ) {
        let d = self.cfg.depth;
        let block_n = Block::N_PARAMS;
        // Grad slice layout mirrors params(): enc blocks, downs, ups,
        // dec blocks, heads.
        let downs_base = (d + 1) * block_n;
        let ups_base = downs_base + 2 * d;
        let dec_base = ups_base + 2 * d;
        let heads_base = dec_base + d * block_n;

        let final_features = if d == 0 {
            &cache.enc[0].out
        } else {
            &cache.dec[d - 1].out
        };
        let mut g_features = Tensor::zeros(self.cfg.base_width, final_features.shape);
        for h in 0..N_HEADS {
            if let Some(gp) = head_grads[h] {
                let gz = sigmoid_backward(&cache.probs[h], gp);
                let (a, b) = grads.split_at_mut(heads_base + 2 * h + 1);
                self.heads[h].backward(
                    final_features,
                    &gz,
                    &mut a[heads_base + 2 * h],
                    &mut b[0],
                    &mut g_features,
                );
            }
        }

        // Decoder chain in reverse; collect skip gradients per level.
        let mut g_skip: Vec<Option<Tensor>> = (0..=d).map(|_| None).collect();
        let mut g_current = g_features;
        for k in (0..d).rev() {
            let level = d - 1 - k;
            let g_joined = self.dec[k].backward(
                &cache.dec[k],
                &g_current,
                &mut grads[dec_base + k * block_n..dec_base + (k + 1) * block_n],
            );
            let (g_up_out, g_skip_k) = g_joined.split(self.ups[k].out_ch);
            g_skip[level] = Some(g_skip_k);
            let up_input = if k == 0 {
                &cache.enc[d].out
            } else {
                &cache.dec[k - 1].out
            };
            let (a, b) = grads.split_at_mut(ups_base + 2 * k + 1);
            g_current =
                self.ups[k].backward(up_input, &g_up_out, &mut a[ups_base + 2 * k], &mut b[0]);
        }

        // Encoder chain in reverse. At the bottleneck the incoming gradient
        // is what flowed through the first up-convolution (or the head
        // gradient when there is no decoder).
        let mut g_out = g_current;
        for level in (0..=d).rev() {
            let mut total = g_out;
            if let Some(skip) = g_skip[level].take() {
                for (t, s) in total.data.iter_mut().zip(skip.data.iter()) {
                    *t += s;
                }
            }
            let g_in = self.enc[level].backward(
                &cache.enc[level],
                &total,
                &mut grads[level * block_n..(level + 1) * block_n],
            );
            if level > 0 {
                let (a, b) = grads.split_at_mut(downs_base + 2 * (level - 1) + 1);
                g_out = self.downs[level - 1].backward(
                    &cache.enc[level - 1].out,
                    &g_in,
                    &mut a[downs_base + 2 * (level - 1)],
                    &mut b[0],
                );
            } else {
                g_out = g_in; // gradient w.r.t. the network input; unused
            }
        }
    }

    /// Route per-head gradients to the correct pass and accumulate
    /// parameter gradients from both passes.
    pub fn backward_two_pass(
        &self,
        forward: &TwoPassForward,
        head_grads: [Option<&[f64]>; N_HEADS],
        grads: &mut [Vec<f64>],
    ) {
        match &forward.masked {
            Some(masked) => {
                if head_grads[0].is_some() {
                    self.backward_pass(masked, [head_grads[0], None, None, None], grads);
                }
                if head_grads[1..].iter().any(Option::is_some) {
                    self.backward_pass(
                        &forward.full,
                        [None, head_grads[1], head_grads[2], head_grads[3]],
                        grads,
                    );
                }
            }
            None => {
                if head_grads.iter().any(Option::is_some) {
                    self.backward_pass(&forward.full, head_grads, grads);
                }
            }
        }
    }
}

/// Inference entry point: four probability maps for a patch-sized bundle.
pub fn forward(network: &Network, bundle: &InputBundle) -> Result<PredictionBundle> {
    Ok(network.forward_bundle(bundle)?.predictions())
}

/// Tiled inference over a volume of any size at least the patch size.
/// Tile predictions are averaged where they overlap.
pub fn sliding_inference(
    network: &Network,
    bundle: &InputBundle,
    overlap: f64,
) -> Result<PredictionBundle> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!(
            "overlap must be in [0, 1), got {overlap}"
        )));
    }
    let shape = bundle.shape();
    let patch = network.cfg.patch_size;
    for a in 0..3 {
        if shape[a] < patch[a] {
            return Err(Error::Range(format!(
                "volume shape {shape:?} smaller than patch {patch:?}; padding is not applied"
            )));
        }
    }

    let origins_axis = |n: usize, p: usize| -> Vec<usize> {
        let stride = ((p as f64) * (1.0 - overlap)).floor().max(1.0) as usize;
        let mut out = Vec::new();
        let mut o = 0;
        loop {
            out.push(o.min(n - p));
            if o + p >= n {
                break;
            }
            o += stride;
        }
        out.dedup();
        out
    };
    let ox = origins_axis(shape[0], patch[0]);
    let oy = origins_axis(shape[1], patch[1]);
    let oz = origins_axis(shape[2], patch[2]);
    let mut origins = Vec::new();
    for &x in &ox {
        for &y in &oy {
            for &z in &oz {
                origins.push([x as isize, y as isize, z as isize]);
            }
        }
    }

    // Tiles run in parallel; accumulation happens sequentially in tile
    // order so the result does not depend on scheduling.
    let tiles: Vec<Result<PredictionBundle>> = exec::map_indexed(origins.len(), |t| {
        let tile = extract_patch(bundle, origins[t], patch, false)?;
        forward(network, &tile)
    });

    let n = shape[0] * shape[1] * shape[2];
    let mut sums = PredictionBundle::zeros(shape);
    let mut counts = vec![0.0f64; n];
    for (t, tile) in tiles.into_iter().enumerate() {
        let tile = tile?;
        let o = origins[t];
        for pz in 0..patch[0] {
            for py in 0..patch[1] {
                let dst_base = ((o[0] as usize + pz) * shape[1] + (o[1] as usize + py))
                    * shape[2]
                    + o[2] as usize;
                let src_base = (pz * patch[1] + py) * patch[2];
                for h in 0..N_HEADS {
                    let dst = sums.head_mut(h);
                    let src = match h {
                        0 => &tile.p_all_t1,
                        1 => &tile.p_all_t2,
                        2 => &tile.p_new_t2,
                        _ => &tile.p_vanish_t2,
                    };
                    for px in 0..patch[2] {
                        dst[dst_base + px] += src[src_base + px];
                    }
                }
                for px in 0..patch[2] {
                    counts[dst_base + px] += 1.0;
                }
            }
        }
    }
    for h in 0..N_HEADS {
        let head = sums.head_mut(h);
        for i in 0..n {
            head[i] /= counts[i];
        }
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelAvailability;
    use crate::volume::{Dtype, Volume3D};
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_width: 2,
            patch_size: [8, 8, 8],
        }
    }

    fn random_bundle(shape: [usize; 3], seed: u64, with_label: bool) -> InputBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vol = |lo: f32, hi: f32| {
            Volume3D::new(
                Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.gen_range(lo..hi)),
                [1.0, 1.0, 1.0],
            )
            .unwrap()
        };
        let x_t1 = vol(0.0, 1.0);
        let x_t2 = vol(0.0, 1.0);
        let mut label = Array3::zeros((shape[0], shape[1], shape[2]));
        if with_label {
            label[[1, 1, 1]] = 1.0;
            label[[2, 3, 1]] = 1.0;
        }
        let wm = Volume3D {
            data: Array3::from_elem((shape[0], shape[1], shape[2]), 1.0),
            spacing: [1.0, 1.0, 1.0],
            dtype: Dtype::Uint8,
        };
        InputBundle {
            x_t1,
            x_t2,
            y_a_t1_channel: Volume3D {
                data: label,
                spacing: [1.0, 1.0, 1.0],
                dtype: Dtype::Uint8,
            },
            wm_t2: wm,
            availability: LabelAvailability::all(),
            interval_years: 1.0,
        }
    }

    #[test]
    fn build_reports_deterministic_parameters() {
        let cfg = tiny_cfg();
        let a = build_network(&cfg, 9).unwrap();
        let b = build_network(&cfg, 9).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa, pb);
        }
        let c = build_network(&cfg, 10).unwrap();
        assert!(a.params().iter().zip(c.params().iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn incompatible_patch_and_depth_is_a_config_error() {
        let cfg = ModelConfig {
            depth: 5,
            base_width: 4,
            patch_size: [48, 48, 48],
        };
        assert!(matches!(build_network(&cfg, 0), Err(Error::Config(_))));
        let ok = ModelConfig {
            depth: 5,
            base_width: 1,
            patch_size: [96, 96, 96],
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn outputs_are_probabilities_of_input_shape() {
        let net = build_network(&tiny_cfg(), 1).unwrap();
        let bundle = random_bundle([8, 8, 8], 2, true);
        let pred = forward(&net, &bundle).unwrap();
        assert_eq!(pred.shape, [8, 8, 8]);
        for head in pred.heads() {
            assert_eq!(head.len(), 512);
            assert!(head.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn first_timepoint_head_ignores_label_channel() {
        let net = build_network(&tiny_cfg(), 3).unwrap();
        let bundle = random_bundle([8, 8, 8], 4, true);
        let pred = forward(&net, &bundle).unwrap();

        let mut perturbed = bundle.clone();
        perturbed.y_a_t1_channel.data[[4, 4, 4]] = 1.0;
        perturbed.y_a_t1_channel.data[[1, 1, 1]] = 0.0;
        let pred2 = forward(&net, &perturbed).unwrap();

        assert_eq!(pred.p_all_t1, pred2.p_all_t1, "p_all_t1 must be invariant");
        assert_ne!(pred.p_all_t2, pred2.p_all_t2, "other heads should react");
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_network(&tiny_cfg(), 5).unwrap();
        let bundle = random_bundle([8, 8, 8], 6, true);
        let a = forward(&net, &bundle).unwrap();
        let b = forward(&net, &bundle).unwrap();
        assert_eq!(a.p_all_t1, b.p_all_t1);
        assert_eq!(a.p_vanish_t2, b.p_vanish_t2);
    }

    #[test]
    fn network_backward_matches_finite_differences_on_params() {
        // Scalar objective: weighted sum of all four heads.
        let cfg = ModelConfig {
            depth: 1,
            base_width: 2,
            patch_size: [4, 4, 4],
        };
        let mut net = build_network(&cfg, 7).unwrap();
        let bundle = random_bundle([4, 4, 4], 8, true);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out_w: [Vec<f64>; 4] =
            std::array::from_fn(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let objective = |net: &Network| -> f64 {
            let f = net.forward_bundle(&bundle).unwrap();
            let pred = f.predictions();
            pred.heads()
                .iter()
                .zip(&out_w)
                .map(|(h, w)| h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };

        let fwd = net.forward_bundle(&bundle).unwrap();
        let mut grads = net.zero_grads();
        net.backward_two_pass(
            &fwd,
            [
                Some(&out_w[0]),
                Some(&out_w[1]),
                Some(&out_w[2]),
                Some(&out_w[3]),
            ],
            &mut grads,
        );

        // Check a spread of parameters across layers.
        let step = 1e-5;
        let n_layers = grads.len();
        for layer in (0..n_layers).step_by(3) {
            let len = grads[layer].len();
            for &idx in [0usize, len / 2, len - 1].iter() {
                let orig = net.params()[layer][idx];
                net.params_mut()[layer][idx] = orig + step;
                let plus = objective(&net);
                net.params_mut()[layer][idx] = orig - step;
                let minus = objective(&net);
                net.params_mut()[layer][idx] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads[layer][idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "layer {layer} idx {idx}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_reach_every_stage() {
        let net = build_network(&tiny_cfg(), 11).unwrap();
        let bundle = random_bundle([8, 8, 8], 12, true);
        let fwd = net.forward_bundle(&bundle).unwrap();
        let g: Vec<f64> = vec![1.0; 512];
        let mut grads = net.zero_grads();
        net.backward_two_pass(&fwd, [Some(&g), Some(&g), Some(&g), Some(&g)], &mut grads);
        for (i, layer) in grads.iter().enumerate() {
            assert!(
                layer.iter().any(|&v| v != 0.0),
                "layer {i} received no gradient"
            );
        }
    }

    #[test]
    fn tiled_inference_covers_the_volume() {
        let net = build_network(&tiny_cfg(), 13).unwrap();
        let bundle = random_bundle([16, 12, 8], 14, false);
        let pred = sliding_inference(&net, &bundle, 0.5).unwrap();
        assert_eq!(pred.shape, [16, 12, 8]);
        assert!(pred.p_all_t2.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn single_tile_inference_equals_forward() {
        let net = build_network(&tiny_cfg(), 15).unwrap();
        let bundle = random_bundle([8, 8, 8], 16, true);
        let direct = forward(&net, &bundle).unwrap();
        let tiled = sliding_inference(&net, &bundle, 0.0).unwrap();
        assert_eq!(direct.p_all_t1, tiled.p_all_t1);
        assert_eq!(direct.p_new_t2, tiled.p_new_t2);
    }

    #[test]
    fn undersized_volume_is_a_range_error() {
        let net = build_network(&tiny_cfg(), 17).unwrap();
        let bundle = random_bundle([4, 8, 8], 18, false);
        assert!(matches!(
            sliding_inference(&net, &bundle, 0.0),
            Err(Error::Range(_))
        ));
    }
}
