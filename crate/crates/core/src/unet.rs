//! Configurable encoder–decoder U-Net over the layer primitives.
//!
//! Structure per resolution level: two 3x3 conv+ReLU blocks, 2x2 max-pool
//! down the encoder, nearest-neighbour x2 upsampling followed by a 3x3
//! convolution up the decoder (prunable like any other convolution), skip
//! concatenation, and a per-task 1x1 output convolution with a sigmoid.
//!
//! Kernel masks restrict a forward pass to one task's subnetwork: kernels
//! outside the mask contribute exactly zero. Biases always propagate; the
//! continual engine freezes every bias the first time a task claims any
//! kernel of its filter, which in practice freezes all biases with the first
//! task, so masked replays of finished tasks are bit-identical for the rest
//! of the run.

use crate::autograd::{NodeId, Trace};
use crate::bitset::Bitset;
use crate::error::{Error, Result};
use crate::masks::{KernelLayout, LayerDims};
use crate::params::{ConvParams, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub kernel_size: usize,
    pub side: usize,
}

impl UNetConfig {
    /// Compact variant: encoder widths 16..128 with a 256-channel bottleneck.
    pub fn small_preset(side: usize) -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            encoder_channels: alloc::vec![16, 32, 64, 128],
            bottleneck_channels: 256,
            kernel_size: 3,
            side,
        }
    }

    /// Original-size variant: encoder widths 64..512, 1024-channel bottleneck.
    pub fn full_preset(side: usize) -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            encoder_channels: alloc::vec![64, 128, 256, 512],
            bottleneck_channels: 1024,
            kernel_size: 3,
            side,
        }
    }

    pub fn with_encoder(encoder: &[usize], side: usize) -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            encoder_channels: encoder.to_vec(),
            bottleneck_channels: encoder.last().copied().unwrap_or(8) * 2,
            kernel_size: 3,
            side,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        if self.encoder_channels.iter().any(|&c| c == 0)
            || self.bottleneck_channels == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        let div = 1usize << self.depth();
        if self.side == 0 || self.side % div != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by 2^depth = {div}",
                self.side
            )));
        }
        Ok(())
    }

    /// Channel dimensions of every body convolution, in forward order.
    fn body_layers(&self) -> Vec<(String, usize, usize)> {
        let depth = self.depth();
        let mut layers = Vec::new();
        let mut prev = self.in_channels;
        for (i, &ch) in self.encoder_channels.iter().enumerate() {
            layers.push((format!("enc{i}.conv1"), prev, ch));
            layers.push((format!("enc{i}.conv2"), ch, ch));
            prev = ch;
        }
        layers.push(("bottleneck.conv1".into(), prev, self.bottleneck_channels));
        layers.push((
            "bottleneck.conv2".into(),
            self.bottleneck_channels,
            self.bottleneck_channels,
        ));
        let mut above = self.bottleneck_channels;
        for i in (0..depth).rev() {
            let ch = self.encoder_channels[i];
            layers.push((format!("dec{i}.up"), above, ch));
            layers.push((format!("dec{i}.conv1"), 2 * ch, ch));
            layers.push((format!("dec{i}.conv2"), ch, ch));
            above = ch;
        }
        layers
    }
}

/// The shared U-Net: body parameters, per-task output heads, mask layout.
#[derive(Debug, Clone)]
pub struct UNetModel<S: Scalar = f32> {
    config: UNetConfig,
    store: ParamStore<S>,
    layout: KernelLayout,
    body_count: usize,
    head_count: usize,
    seed: u64,
}

/// Build a model deterministically from (config, seed).
pub fn build_unet<S: Scalar>(config: &UNetConfig, seed: u64) -> Result<UNetModel<S>> {
    config.validate()?;
    let body = config.body_layers();
    let mut store = ParamStore::new();
    let pad = config.kernel_size / 2;
    let mut init_rng = rng::stream(seed, &["init", "body"]);
    let mut dims = Vec::with_capacity(body.len());
    for (name, in_ch, out_ch) in &body {
        let params = ConvParams::init(
            *out_ch,
            *in_ch,
            config.kernel_size,
            1,
            pad,
            &mut init_rng,
        )?;
        store.push(name.clone(), params)?;
        dims.push(LayerDims {
            out_ch: *out_ch,
            in_ch: *in_ch,
        });
    }
    let layout = KernelLayout::new(dims);
    let mut model = UNetModel {
        config: config.clone(),
        store,
        layout,
        body_count: body.len(),
        head_count: 0,
        seed,
    };
    model.add_head()?; // head 0 always exists
    log::info!(
        "built U-Net: depth {}, {} body convolutions, {} parameters",
        config.depth(),
        model.body_count,
        model.store.param_count()
    );
    Ok(model)
}

impl<S: Scalar> UNetModel<S> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &KernelLayout {
        &self.layout
    }

    pub fn fingerprint(&self) -> u64 {
        self.layout.fingerprint()
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn body_count(&self) -> usize {
        self.body_count
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Store slot of a task's output head.
    pub fn head_slot(&self, head: usize) -> Result<usize> {
        if head >= self.head_count {
            return Err(Error::UnknownTask(head));
        }
        Ok(self.body_count + head)
    }

    /// Create the next output head (1x1 convolution). Initialization depends
    /// only on (seed, head index), not on when the head is created.
    pub fn add_head(&mut self) -> Result<usize> {
        let head = self.head_count;
        let mut head_rng = rng::stream_indexed(self.seed, "init/head", &[head as u64]);
        let params = ConvParams::init(
            self.config.out_channels,
            self.config.encoder_channels[0],
            1,
            1,
            0,
            &mut head_rng,
        )?;
        self.store.push(format!("head{head}"), params)?;
        self.head_count += 1;
        Ok(head)
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        let shape = batch.shape();
        if shape.c != self.config.in_channels || shape.h != self.config.side || shape.w != self.config.side {
            return Err(Error::shape(
                "unet_forward",
                format!(
                    "batch {} does not match config (channels {}, side {})",
                    shape, self.config.in_channels, self.config.side
                ),
            ));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &Bitset) -> Result<()> {
        if mask.len() != self.layout.kernel_count() {
            return Err(Error::Registry(format!(
                "mask addresses {} kernels, architecture has {}",
                mask.len(),
                self.layout.kernel_count()
            )));
        }
        Ok(())
    }

    /// Forward pass recording a trace for backprop. Kernels outside `mask`
    /// (if given) are treated as zero-valued. Returns the trace and the node
    /// id of the sigmoid output.
    pub fn forward_traced(
        &self,
        batch: &Tensor<S>,
        mask: Option<&Bitset>,
        head: usize,
    ) -> Result<(Trace<S>, NodeId)> {
        self.check_batch(batch)?;
        let head_slot = self.head_slot(head)?;
        let masking = match mask {
            Some(bits) => {
                self.check_mask(bits)?;
                Some((self.layout.clone(), bits.clone()))
            }
            None => None,
        };
        let mut tr = Trace::new(masking);
        let mut x = tr.input(batch.clone());
        let depth = self.config.depth();
        let mut slot = 0;
        let mut skips = Vec::with_capacity(depth);
        for _ in 0..depth {
            x = tr.conv(&self.store, slot, Some(slot), x)?;
            x = tr.relu(x);
            slot += 1;
            x = tr.conv(&self.store, slot, Some(slot), x)?;
            x = tr.relu(x);
            slot += 1;
            skips.push(x);
            x = tr.maxpool2(x)?;
        }
        for _ in 0..2 {
            x = tr.conv(&self.store, slot, Some(slot), x)?;
            x = tr.relu(x);
            slot += 1;
        }
        for level in (0..depth).rev() {
            x = tr.upsample2(x);
            x = tr.conv(&self.store, slot, Some(slot), x)?;
            x = tr.relu(x);
            slot += 1;
            x = tr.concat(x, skips[level])?;
            x = tr.conv(&self.store, slot, Some(slot), x)?;
            x = tr.relu(x);
            slot += 1;
            x = tr.conv(&self.store, slot, Some(slot), x)?;
            x = tr.relu(x);
            slot += 1;
        }
        debug_assert_eq!(slot, self.body_count);
        x = tr.conv(&self.store, head_slot, None, x)?;
        let out = tr.sigmoid(x);
        Ok((tr, out))
    }

    /// Forward pass returning per-pixel probabilities in [0, 1].
    pub fn forward(
        &self,
        batch: &Tensor<S>,
        mask: Option<&Bitset>,
        head: usize,
    ) -> Result<Tensor<S>> {
        let (tr, out) = self.forward_traced(batch, mask, head)?;
        Ok(tr.output(out).clone())
    }

    /// Reverse pass: fills gradients in this model's store.
    pub fn backprop(
        &mut self,
        trace: &Trace<S>,
        output: NodeId,
        loss_grad: &Tensor<S>,
    ) -> Result<()> {
        // split borrow: trace never aliases the store
        let store = &mut self.store;
        trace.backprop(store, output, loss_grad)
    }

    pub fn cast<T: Scalar>(&self) -> UNetModel<T> {
        UNetModel {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            body_count: self.body_count,
            head_count: self.head_count,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_f32};
    use crate::tensor::Shape;

    fn toy_config() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            encoder_channels: alloc::vec![4, 6],
            bottleneck_channels: 8,
            kernel_size: 3,
            side: 16,
        }
    }

    fn random_batch(side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = stream(seed, &["batch"]);
        Tensor::from_fn(Shape::new(2, 1, side, side).unwrap(), |_| {
            uniform_f32(&mut rng)
        })
    }

    #[test]
    fn small_preset_builds_with_expected_widths() {
        let cfg = UNetConfig::small_preset(224);
        assert_eq!(cfg.encoder_channels, [16, 32, 64, 128]);
        assert_eq!(cfg.bottleneck_channels, 256);
        let model: UNetModel<f32> = build_unet(&cfg, 3).unwrap();
        assert!(model.param_count() > 0);
        assert_eq!(model.body_count(), 5 * 4 + 2);
    }

    #[test]
    fn toy_forward_output_shape_matches_input() {
        let cfg = UNetConfig {
            encoder_channels: alloc::vec![8, 16],
            bottleneck_channels: 32,
            side: 64,
            ..toy_config()
        };
        let model: UNetModel<f32> = build_unet(&cfg, 1).unwrap();
        let batch = random_batch(64, 5);
        let out = model.forward(&batch, None, 0).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 1, 64, 64).unwrap());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_side_is_a_config_error() {
        let mut cfg = toy_config();
        cfg.encoder_channels = alloc::vec![4, 4, 4];
        cfg.side = 50;
        assert!(matches!(build_unet::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_deterministic_in_config_and_seed() {
        let cfg = toy_config();
        let a: UNetModel<f32> = build_unet(&cfg, 9).unwrap();
        let b: UNetModel<f32> = build_unet(&cfg, 9).unwrap();
        for (sa, sb) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(sa.params.kernels.data(), sb.params.kernels.data());
            assert_eq!(sa.params.bias, sb.params.bias);
        }
        let c: UNetModel<f32> = build_unet(&cfg, 10).unwrap();
        assert_ne!(
            a.store().slot(0).params.kernels.data(),
            c.store().slot(0).params.kernels.data()
        );
    }

    #[test]
    fn all_ones_mask_equals_unmasked_bitwise() {
        let cfg = toy_config();
        let model: UNetModel<f32> = build_unet(&cfg, 2).unwrap();
        let batch = random_batch(16, 6);
        let ones = Bitset::ones(model.layout().kernel_count());
        let unmasked = model.forward(&batch, None, 0).unwrap();
        let masked = model.forward(&batch, Some(&ones), 0).unwrap();
        let lhs: alloc::vec::Vec<u32> = unmasked.data().iter().map(|v| v.to_bits()).collect();
        let rhs: alloc::vec::Vec<u32> = masked.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn empty_mask_propagates_biases_only() {
        // depth-1 net, all kernels masked out: every body conv output is a
        // constant relu(bias) map, so the head sees constants and the output
        // is one constant per channel, computable by hand.
        let cfg = UNetConfig {
            in_channels: 1,
            out_channels: 1,
            encoder_channels: alloc::vec![3],
            bottleneck_channels: 4,
            kernel_size: 3,
            side: 8,
        };
        let model: UNetModel<f32> = build_unet(&cfg, 4).unwrap();
        let batch = random_batch(8, 7);
        let empty = Bitset::zeros(model.layout().kernel_count());
        let out = model.forward(&batch, Some(&empty), 0).unwrap();

        // hand propagation: dec0.conv2 is the last body layer (slot 6)
        let dec2 = &model.store().slot(6).params;
        let consts: alloc::vec::Vec<f32> =
            dec2.bias.iter().map(|&b| b.max(0.0)).collect();
        let head = &model.store().slot(model.head_slot(0).unwrap()).params;
        let mut logit = head.bias[0];
        for (ic, &c) in consts.iter().enumerate() {
            logit += head.kernel(0, ic)[0] * c;
        }
        let expect = 1.0 / (1.0 + (-logit).exp());
        for &v in out.data() {
            assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
        }
    }

    #[test]
    fn masked_forward_ignores_parameters_outside_the_mask() {
        let cfg = toy_config();
        let mut model: UNetModel<f32> = build_unet(&cfg, 11).unwrap();
        model.add_head().unwrap();
        let batch = random_batch(16, 12);
        // random mask with about half the kernels
        let mut mask = Bitset::zeros(model.layout().kernel_count());
        let mut rng = stream(13, &["mask"]);
        for i in 0..mask.len() {
            if uniform_f32(&mut rng) < 0.5 {
                mask.set(i, true);
            }
        }
        // ensure at least one active kernel
        mask.set(0, true);
        let before = model.forward(&batch, Some(&mask), 0).unwrap();

        // perturb every kernel outside the mask and the unused head
        for i in 0..mask.len() {
            if !mask.get(i) {
                let addr = model.layout().address_of(i);
                let slot = model.store_mut().slot_mut(addr.layer);
                let r = slot.params.ksize();
                let base = (addr.out_ch * slot.params.in_ch() + addr.in_ch) * r * r;
                for k in 0..r * r {
                    slot.params.kernels.data_mut()[base + k] += 7.5;
                }
            }
        }
        let other_head = model.head_slot(1).unwrap();
        for v in model.store_mut().slot_mut(other_head).params.kernels.data_mut() {
            *v += 3.0;
        }
        let after = model.forward(&batch, Some(&mask), 0).unwrap();
        assert_eq!(
            before.data().iter().map(|v| v.to_bits()).collect::<alloc::vec::Vec<_>>(),
            after.data().iter().map(|v| v.to_bits()).collect::<alloc::vec::Vec<_>>()
        );

        // sanity: perturbing an active kernel does change the output
        let active = mask.iter_ones().next().unwrap();
        let addr = model.layout().address_of(active);
        let slot = model.store_mut().slot_mut(addr.layer);
        let r = slot.params.ksize();
        let base = (addr.out_ch * slot.params.in_ch() + addr.in_ch) * r * r;
        slot.params.kernels.data_mut()[base] += 1.0;
        let changed = model.forward(&batch, Some(&mask), 0).unwrap();
        assert_ne!(changed.data(), after.data());
    }

    #[test]
    fn mask_with_wrong_length_is_rejected() {
        let cfg = toy_config();
        let model: UNetModel<f32> = build_unet(&cfg, 1).unwrap();
        let batch = random_batch(16, 1);
        let bad = Bitset::zeros(3);
        assert!(matches!(
            model.forward(&batch, Some(&bad), 0),
            Err(Error::Registry(_))
        ));
    }
}
