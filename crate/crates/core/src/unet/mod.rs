//! 2D U-Net with an Early Segmentation Head (ESH) on the encoder output,
//! per-tensor freeze flags and low-rank adapter injection into the encoder.

mod config;
mod layers;

pub use config::{InjectionSelector, UNetConfig};
pub use layers::{ConvBnRelu, ConvLayer, Grads, Param, ParamView, UnitCache};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adabn::BnMode;
use crate::error::{Error, Result};
use crate::tensor::{
    cross_entropy_loss, maxpool2d, maxpool2d_backward, upsample_nearest, upsample_nearest_backward, Adam,
    ConvSpec, LabelMap, Scalar, Tensor,
};

/// Training phase, selecting which tensors are trainable and how BN behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Encoder, decoder and final head train; ESH frozen; BN in `Train`.
    Pretrain,
    /// Only the ESH trains; the rest of the network is frozen and in `Eval`.
    Esh,
    /// Only adapter factors train; every BN layer in `Adapt` (AdaBN).
    Adapt,
}

/// Groups of layers for BN mode switching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Esh,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T: Scalar> {
    config: UNetConfig,
    encoder: Vec<Vec<ConvBnRelu<T>>>,
    bottleneck: Vec<ConvBnRelu<T>>,
    /// `decoder[i]` consumes the skip of encoder block `i + 1`.
    decoder: Vec<Vec<ConvBnRelu<T>>>,
    head: ConvLayer<T>,
    esh: Vec<ConvBnRelu<T>>,
    esh_head: ConvLayer<T>,
}

/// Encoder activations and everything needed to backpropagate through them.
pub struct Encoded<T: Scalar> {
    pub skips: Vec<Tensor<T>>,
    pub features: Tensor<T>,
    blocks: Vec<Vec<UnitCache<T>>>,
    pools: Vec<(Vec<usize>, Vec<usize>)>,
    bottleneck: Vec<UnitCache<T>>,
}

pub struct DecoderCache<T: Scalar> {
    stages: Vec<Vec<UnitCache<T>>>,
    head_input: Tensor<T>,
}

pub struct EshCache<T: Scalar> {
    units: Vec<UnitCache<T>>,
    head_input: Tensor<T>,
}

const ESH_CONVS: usize = 3;

fn block_path(i: usize, j: usize) -> String {
    format!("enc{i}.{j}")
}

fn bottleneck_path(j: usize) -> String {
    format!("bottleneck.{j}")
}

fn decoder_path(i: usize, j: usize) -> String {
    format!("dec{i}.{j}")
}

fn esh_path(j: usize) -> String {
    format!("esh.{j}")
}

/// Per-layer seed for adapter initialisation (splitmix64 of seed and site).
fn site_seed(seed: u64, site: u64) -> u64 {
    let mut z = seed ^ site.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> UNet<T> {
    /// Deterministic He-initialised model; every tensor starts frozen.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cpb = config.convs_per_block;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut ch = config.input_channels;
        for i in 1..=config.depth {
            let w = config.block_width(i);
            let block = (0..cpb)
                .map(|j| ConvBnRelu::new(if j == 0 { ch } else { w }, w, &mut rng))
                .collect();
            encoder.push(block);
            ch = w;
        }
        let bw = config.bottleneck_width();
        let bottleneck = (0..cpb)
            .map(|j| ConvBnRelu::new(if j == 0 { ch } else { bw }, bw, &mut rng))
            .collect();
        let mut decoder: Vec<Vec<ConvBnRelu<T>>> = (0..config.depth).map(|_| Vec::new()).collect();
        let mut cur = bw;
        for i in (1..=config.depth).rev() {
            let w = config.block_width(i);
            decoder[i - 1] = (0..cpb)
                .map(|j| ConvBnRelu::new(if j == 0 { cur + w } else { w }, w, &mut rng))
                .collect();
            cur = w;
        }
        let head = ConvLayer::he_init(ConvSpec::same(cur, config.num_classes, 1), &mut rng);
        let esh = (0..ESH_CONVS).map(|_| ConvBnRelu::new(bw, bw, &mut rng)).collect();
        let esh_head = ConvLayer::he_init(ConvSpec::same(bw, config.num_classes, 1), &mut rng);
        Ok(Self {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
            esh,
            esh_head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4("UNet::forward")?;
        if c != self.config.input_channels {
            return Err(Error::Shape {
                op: "UNet::forward",
                detail: format!("input has {c} channels, model expects {}", self.config.input_channels),
            });
        }
        self.config.check_input(h, w)
    }

    // ---- forward -------------------------------------------------------

    pub fn encode(&mut self, x: &Tensor<T>) -> Result<Encoded<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut blocks = Vec::with_capacity(self.config.depth);
        let mut pools = Vec::with_capacity(self.config.depth);
        for block in &mut self.encoder {
            let mut caches = Vec::with_capacity(block.len());
            for unit in block.iter_mut() {
                let (y, c) = unit.forward(&cur)?;
                caches.push(c);
                cur = y;
            }
            let (pooled, idx) = maxpool2d(&cur, 2)?;
            pools.push((idx, cur.shape().to_vec()));
            skips.push(cur);
            blocks.push(caches);
            cur = pooled;
        }
        let mut bottleneck = Vec::with_capacity(self.bottleneck.len());
        for unit in &mut self.bottleneck {
            let (y, c) = unit.forward(&cur)?;
            bottleneck.push(c);
            cur = y;
        }
        Ok(Encoded {
            skips,
            features: cur,
            blocks,
            pools,
            bottleneck,
        })
    }

    pub fn decode(&mut self, enc: &Encoded<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let mut cur = enc.features.clone();
        let mut stages: Vec<Vec<UnitCache<T>>> = (0..self.config.depth).map(|_| Vec::new()).collect();
        for i in (0..self.config.depth).rev() {
            let up = upsample_nearest(&cur, 2)?;
            cur = up.concat_channels(&enc.skips[i])?;
            for unit in &mut self.decoder[i] {
                let (y, c) = unit.forward(&cur)?;
                stages[i].push(c);
                cur = y;
            }
        }
        let logits = self.head.forward(&cur)?;
        Ok((logits, DecoderCache { stages, head_input: cur }))
    }

    /// ESH logits at encoder resolution, nearest-upsampled to input size.
    pub fn esh_forward(&mut self, features: &Tensor<T>) -> Result<(Tensor<T>, EshCache<T>)> {
        let mut cur = features.clone();
        let mut units = Vec::with_capacity(self.esh.len());
        for unit in &mut self.esh {
            let (y, c) = unit.forward(&cur)?;
            units.push(c);
            cur = y;
        }
        let logits = self.esh_head.forward(&cur)?;
        let logits = upsample_nearest(&logits, self.config.reduction())?;
        Ok((logits, EshCache { units, head_input: cur }))
    }

    /// Encoder → decoder → final head.
    pub fn forward_full(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encode(x)?;
        Ok(self.decode(&enc)?.0)
    }

    /// Encoder → ESH.
    pub fn forward_esh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encode(x)?;
        Ok(self.esh_forward(&enc.features)?.0)
    }

    /// Both heads from a single encoder pass.
    pub fn forward_both(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let enc = self.encode(x)?;
        let full = self.decode(&enc)?.0;
        let esh = self.esh_forward(&enc.features)?.0;
        Ok((full, esh))
    }

    // ---- backward ------------------------------------------------------

    fn encoder_trainable_upto(&self) -> (Vec<bool>, bool) {
        let mut per_block = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            let mut any = false;
            for (j, unit) in block.iter().enumerate() {
                unit.visit(&block_path(i + 1, j), &mut |_, p| any |= p.trainable);
            }
            per_block.push(any);
        }
        let mut bott = false;
        for (j, unit) in self.bottleneck.iter().enumerate() {
            unit.visit(&bottleneck_path(j), &mut |_, p| bott |= p.trainable);
        }
        (per_block, bott)
    }

    /// Backpropagates into the encoder. `grad_skips` carries decoder
    /// gradients for the skip connections, if any.
    pub fn encoder_backward(
        &self,
        enc: &Encoded<T>,
        grad_features: Tensor<T>,
        mut grad_skips: Option<Vec<Tensor<T>>>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let (per_block, bott_trainable) = self.encoder_trainable_upto();
        // any trainable tensor at or before each block index
        let mut prefix = vec![false; per_block.len()];
        let mut acc = false;
        for (i, &b) in per_block.iter().enumerate() {
            acc |= b;
            prefix[i] = acc;
        }
        let encoder_any = acc;
        if !encoder_any && !bott_trainable {
            return Ok(());
        }
        let mut g = grad_features;
        for (j, unit) in self.bottleneck.iter().enumerate().rev() {
            let want_input = j > 0 || encoder_any;
            match unit.backward(&enc.bottleneck[j], &g, want_input, &bottleneck_path(j), grads)? {
                Some(gi) => g = gi,
                None => return Ok(()),
            }
        }
        for i in (0..self.encoder.len()).rev() {
            if !prefix[i] {
                return Ok(());
            }
            let (idx, shape) = &enc.pools[i];
            let mut gb = maxpool2d_backward(&g, idx, shape)?;
            if let Some(skips) = grad_skips.as_mut() {
                gb.add_assign(&skips[i])?;
            }
            g = gb;
            let block = &self.encoder[i];
            for (j, unit) in block.iter().enumerate().rev() {
                let want_input = j > 0 || (i > 0 && prefix[i - 1]);
                match unit.backward(&enc.blocks[i][j], &g, want_input, &block_path(i + 1, j), grads)? {
                    Some(gi) => g = gi,
                    None => return Ok(()),
                }
            }
        }
        Ok(())
    }

    /// Full-path backward; returns nothing, gradients land in `grads`.
    pub fn full_backward(
        &self,
        enc: &Encoded<T>,
        dec: &DecoderCache<T>,
        grad_logits: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let mut g = self
            .head
            .backward(&dec.head_input, grad_logits, true, "head", grads)?
            .expect("input grad requested");
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; self.config.depth];
        for i in 0..self.config.depth {
            for (j, unit) in self.decoder[i].iter().enumerate().rev() {
                g = unit
                    .backward(&dec.stages[i][j], &g, true, &decoder_path(i + 1, j), grads)?
                    .expect("input grad requested");
            }
            let skip_ch = enc.skips[i].shape()[1];
            let up_ch = g.shape()[1] - skip_ch;
            let (g_up, g_skip) = g.split_channels(up_ch)?;
            skip_grads[i] = Some(g_skip);
            g = upsample_nearest_backward(&g_up, 2)?;
        }
        let skips = skip_grads.into_iter().map(|s| s.expect("filled")).collect();
        self.encoder_backward(enc, g, Some(skips), grads)
    }

    pub fn esh_backward(
        &self,
        enc: &Encoded<T>,
        esh: &EshCache<T>,
        grad_logits: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let g = upsample_nearest_backward(grad_logits, self.config.reduction())?;
        let mut g = self
            .esh_head
            .backward(&esh.head_input, &g, true, "esh.head", grads)?
            .expect("input grad requested");
        for (j, unit) in self.esh.iter().enumerate().rev() {
            g = unit
                .backward(&esh.units[j], &g, true, &esh_path(j), grads)?
                .expect("input grad requested");
        }
        self.encoder_backward(enc, g, None, grads)
    }

    /// Cross-entropy of the full path against `labels`, with gradients of
    /// every trainable tensor.
    pub fn full_loss_and_grads(&mut self, x: &Tensor<T>, labels: &LabelMap) -> Result<(T, Grads<T>)> {
        let enc = self.encode(x)?;
        let (logits, dec) = self.decode(&enc)?;
        let (loss, g) = cross_entropy_loss(&logits, labels)?;
        let mut grads = Grads::new();
        self.full_backward(&enc, &dec, &g, &mut grads)?;
        Ok((loss, grads))
    }

    /// Cross-entropy of the ESH path against `labels`. With
    /// `decoder_stats_pass`, the decoder also runs on the same encoder
    /// activations so that its BN layers see the batch (no gradient flows
    /// through it).
    pub fn esh_loss_and_grads(
        &mut self,
        x: &Tensor<T>,
        labels: &LabelMap,
        decoder_stats_pass: bool,
    ) -> Result<(T, Grads<T>)> {
        let enc = self.encode(x)?;
        if decoder_stats_pass {
            self.decode(&enc)?;
        }
        let (logits, esh) = self.esh_forward(&enc.features)?;
        let (loss, g) = cross_entropy_loss(&logits, labels)?;
        let mut grads = Grads::new();
        self.esh_backward(&enc, &esh, &g, &mut grads)?;
        Ok((loss, grads))
    }

    /// Applies one optimizer step to every tensor that has a gradient.
    /// Fails if a gradient targets a frozen or unknown tensor.
    pub fn apply_grads(&mut self, grads: &Grads<T>, opt: &mut Adam<T>) -> Result<()> {
        let mut applied = 0usize;
        let mut err = None;
        self.visit_mut(&mut |name, value, trainable| {
            if err.is_some() {
                return;
            }
            if let Some(g) = grads.get(name) {
                if !*trainable {
                    err = Some(Error::InvalidArgument(format!("gradient for frozen tensor {name}")));
                    return;
                }
                if let Err(e) = opt.step(name, value, g) {
                    err = Some(e);
                }
                applied += 1;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if applied != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients but only {applied} matched model tensors",
                grads.len()
            )));
        }
        Ok(())
    }

    // ---- parameters ----------------------------------------------------

    /// Visits every parameter tensor (not BN buffers) with its freeze flag.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamView<'_, T>)) {
        for (i, block) in self.encoder.iter().enumerate() {
            for (j, unit) in block.iter().enumerate() {
                unit.visit(&block_path(i + 1, j), f);
            }
        }
        for (j, unit) in self.bottleneck.iter().enumerate() {
            unit.visit(&bottleneck_path(j), f);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            for (j, unit) in stage.iter().enumerate() {
                unit.visit(&decoder_path(i + 1, j), f);
            }
        }
        self.head.visit("head", f);
        for (j, unit) in self.esh.iter().enumerate() {
            unit.visit(&esh_path(j), f);
        }
        self.esh_head.visit("esh.head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, &mut bool)) {
        for (i, block) in self.encoder.iter_mut().enumerate() {
            for (j, unit) in block.iter_mut().enumerate() {
                unit.visit_mut(&block_path(i + 1, j), f);
            }
        }
        for (j, unit) in self.bottleneck.iter_mut().enumerate() {
            unit.visit_mut(&bottleneck_path(j), f);
        }
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            for (j, unit) in stage.iter_mut().enumerate() {
                unit.visit_mut(&decoder_path(i + 1, j), f);
            }
        }
        self.head.visit_mut("head", f);
        for (j, unit) in self.esh.iter_mut().enumerate() {
            unit.visit_mut(&esh_path(j), f);
        }
        self.esh_head.visit_mut("esh.head", f);
    }

    /// `(name, element count, trainable)` for every parameter tensor.
    pub fn param_table(&self) -> Vec<(String, usize, bool)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name.to_string(), p.value.len(), p.trainable)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_table().iter().map(|(_, n, _)| n).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.param_table().iter().filter(|(_, _, t)| *t).map(|(_, n, _)| n).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.param_table()
            .into_iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, _, _)| n)
            .collect()
    }

    /// Sets every freeze flag at once.
    pub fn freeze_all(&mut self) {
        self.visit_mut(&mut |_, _, t| *t = false);
    }

    /// Sets freeze flags and BN modes for a training phase.
    pub fn apply_freeze_policy(&mut self, phase: Phase) {
        match phase {
            Phase::Pretrain => {
                self.visit_mut(&mut |name, _, t| {
                    *t = !name.starts_with("esh.") && !name.ends_with(".lora_x") && !name.ends_with(".lora_y");
                });
                self.set_bn_mode(Part::Encoder, BnMode::Train);
                self.set_bn_mode(Part::Decoder, BnMode::Train);
                self.set_bn_mode(Part::Esh, BnMode::Eval);
            }
            Phase::Esh => {
                self.visit_mut(&mut |name, _, t| *t = name.starts_with("esh."));
                self.set_bn_mode(Part::Encoder, BnMode::Eval);
                self.set_bn_mode(Part::Decoder, BnMode::Eval);
                self.set_bn_mode(Part::Esh, BnMode::Train);
            }
            Phase::Adapt => {
                self.visit_mut(&mut |name, _, t| *t = name.ends_with(".lora_x") || name.ends_with(".lora_y"));
                self.set_bn_mode(Part::All, BnMode::Adapt);
            }
        }
    }

    pub fn set_bn_mode(&mut self, part: Part, mode: BnMode) {
        let enc = matches!(part, Part::Encoder | Part::All);
        let dec = matches!(part, Part::Decoder | Part::All);
        let esh = matches!(part, Part::Esh | Part::All);
        if enc {
            self.encoder
                .iter_mut()
                .flatten()
                .chain(self.bottleneck.iter_mut())
                .for_each(|u| u.set_bn_mode(mode));
        }
        if dec {
            self.decoder.iter_mut().flatten().for_each(|u| u.set_bn_mode(mode));
        }
        if esh {
            self.esh.iter_mut().for_each(|u| u.set_bn_mode(mode));
        }
    }

    /// All BN layers to `Eval`.
    pub fn set_eval(&mut self) {
        self.set_bn_mode(Part::All, BnMode::Eval);
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) -> Result<()> {
        for (_, u) in self.units_mut() {
            u.bn.set_momentum(momentum)?;
        }
        Ok(())
    }

    fn units(&self) -> Vec<(String, &ConvBnRelu<T>)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            for (j, unit) in block.iter().enumerate() {
                out.push((block_path(i + 1, j), unit));
            }
        }
        for (j, unit) in self.bottleneck.iter().enumerate() {
            out.push((bottleneck_path(j), unit));
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            for (j, unit) in stage.iter().enumerate() {
                out.push((decoder_path(i + 1, j), unit));
            }
        }
        for (j, unit) in self.esh.iter().enumerate() {
            out.push((esh_path(j), unit));
        }
        out
    }

    fn units_mut(&mut self) -> Vec<(String, &mut ConvBnRelu<T>)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter_mut().enumerate() {
            for (j, unit) in block.iter_mut().enumerate() {
                out.push((block_path(i + 1, j), unit));
            }
        }
        for (j, unit) in self.bottleneck.iter_mut().enumerate() {
            out.push((bottleneck_path(j), unit));
        }
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            for (j, unit) in stage.iter_mut().enumerate() {
                out.push((decoder_path(i + 1, j), unit));
            }
        }
        for (j, unit) in self.esh.iter_mut().enumerate() {
            out.push((esh_path(j), unit));
        }
        out
    }

    /// BN layer paths (`<unit>.bn`) with their running statistics.
    pub fn bn_stats(&self) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        self.units()
            .into_iter()
            .map(|(p, u)| (format!("{p}.bn"), u.bn.running_mean().clone(), u.bn.running_var().clone()))
            .collect()
    }

    pub fn set_bn_stats(&mut self, path: &str, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        for (p, u) in self.units_mut() {
            if format!("{p}.bn") == path {
                return u.bn.set_running_stats(mean, var);
            }
        }
        Err(Error::InvalidArgument(format!("no BN layer at {path}")))
    }

    /// Stores the current running statistics of every BN layer as the
    /// source snapshot.
    pub fn snapshot_source_stats(&mut self) {
        for (_, u) in self.units_mut() {
            u.bn.snapshot_source();
        }
    }

    pub fn source_stats(&self) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        self.units()
            .into_iter()
            .filter_map(|(p, u)| {
                u.bn.source_snapshot()
                    .map(|(m, v)| (format!("{p}.bn"), m.clone(), v.clone()))
            })
            .collect()
    }

    pub fn set_source_stats(&mut self, path: &str, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        for (p, u) in self.units_mut() {
            if format!("{p}.bn") == path {
                u.bn.set_source_snapshot(mean, var);
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("no BN layer at {path}")))
    }

    /// Restores every BN layer to its source snapshot.
    pub fn reset_bn_stats(&mut self) -> Result<()> {
        for (_, u) in self.units_mut() {
            u.bn.reset_stats()?;
        }
        Ok(())
    }

    /// Overwrites parameter tensors by name. Adapter factors are addressed
    /// as `<conv>.lora_x` / `<conv>.lora_y`.
    pub fn set_params(&mut self, values: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut err = None;
        let mut hit = 0usize;
        self.visit_mut(&mut |name, value, _| {
            if let Some(v) = values.get(name) {
                if v.shape() != value.shape() {
                    err.get_or_insert(Error::Shape {
                        op: "UNet::set_params",
                        detail: format!("{name}: stored {:?}, model {:?}", v.shape(), value.shape()),
                    });
                    return;
                }
                *value = v.clone();
                hit += 1;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if hit != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors supplied but only {hit} matched model parameters",
                values.len()
            )));
        }
        Ok(())
    }

    // ---- adapters ------------------------------------------------------

    /// Wraps every convolution of the selected encoder stages with a rank-`rank`
    /// adapter. The model output is unchanged; afterwards only the adapter
    /// factors are trainable.
    pub fn inject_convlora(&mut self, selector: &InjectionSelector, rank: usize, seed: u64) -> Result<()> {
        selector.validate(self.config.depth)?;
        // validate everything before mutating
        for (i, block) in self.encoder.iter().enumerate() {
            if selector.contains(i + 1) {
                if let Some(j) = block.iter().position(|u| u.conv.is_lora()) {
                    return Err(Error::InvalidArgument(format!(
                        "{} already carries an adapter",
                        block_path(i + 1, j)
                    )));
                }
            }
        }
        if selector.includes_bottleneck() && self.bottleneck.iter().any(|u| u.conv.is_lora()) {
            return Err(Error::InvalidArgument("bottleneck already carries adapters".into()));
        }
        let mut site = 0u64;
        for (i, block) in self.encoder.iter_mut().enumerate() {
            for (j, unit) in block.iter_mut().enumerate() {
                site += 1;
                if selector.contains(i + 1) {
                    unit.conv.inject(rank, site_seed(seed, site), &block_path(i + 1, j))?;
                }
            }
        }
        for (j, unit) in self.bottleneck.iter_mut().enumerate() {
            site += 1;
            if selector.includes_bottleneck() {
                unit.conv.inject(rank, site_seed(seed, site), &bottleneck_path(j))?;
            }
        }
        self.visit_mut(&mut |name, _, t| *t = name.ends_with(".lora_x") || name.ends_with(".lora_y"));
        Ok(())
    }

    /// `(conv path, adapter)` for every injected site.
    pub fn adapters(&self) -> Vec<(String, &crate::convlora::ConvLoraAdapter<T>)> {
        let mut out = Vec::new();
        for (p, u) in self.units() {
            if let Some(a) = u.conv.adapter() {
                out.push((format!("{p}.conv"), a));
            }
        }
        out
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters().len()
    }

    /// Folds every adapter into its frozen kernel, yielding a plain model.
    pub fn merge_adapters(&mut self) {
        for (_, u) in self.units_mut() {
            u.conv.merge();
        }
    }

    /// Parameter tensors plus BN running statistics and source snapshots,
    /// keyed by path. This is the content of a base checkpoint.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name.to_string(), p.value.clone())));
        for (p, m, v) in self.bn_stats() {
            out.push((format!("{p}.running_mean"), m));
            out.push((format!("{p}.running_var"), v));
        }
        for (p, m, v) in self.source_stats() {
            out.push((format!("{p}.source_mean"), m));
            out.push((format!("{p}.source_var"), v));
        }
        out
    }

    /// Inverse of [`Self::state_tensors`] for a plain (adapter-free) model.
    pub fn load_state_tensors(&mut self, tensors: BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut params = BTreeMap::new();
        let mut stats: BTreeMap<String, [Option<Tensor<T>>; 4]> = BTreeMap::new();
        for (name, t) in tensors {
            let slot = [".running_mean", ".running_var", ".source_mean", ".source_var"]
                .iter()
                .position(|s| name.ends_with(s));
            match slot {
                Some(k) => {
                    let suffix = [".running_mean", ".running_var", ".source_mean", ".source_var"][k];
                    let path = name[..name.len() - suffix.len()].to_string();
                    stats.entry(path).or_default()[k] = Some(t);
                }
                None => {
                    params.insert(name, t);
                }
            }
        }
        let expected = self.param_table().len();
        if params.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameter tensors, model has {expected}",
                params.len()
            )));
        }
        self.set_params(&params)?;
        for (path, [rm, rv, sm, sv]) in stats {
            match (rm, rv) {
                (Some(m), Some(v)) => self.set_bn_stats(&path, m, v)?,
                _ => return Err(Error::Format(format!("incomplete running statistics for {path}"))),
            }
            match (sm, sv) {
                (Some(m), Some(v)) => self.set_source_stats(&path, m, v)?,
                (None, None) => {}
                _ => return Err(Error::Format(format!("incomplete source statistics for {path}"))),
            }
        }
        Ok(())
    }

    /// Parameter-tensor names that belong to the encoder blocks in `selector`.
    pub fn selected_conv_specs(&self, selector: &InjectionSelector) -> Vec<(String, ConvSpec)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            if selector.contains(i + 1) {
                for (j, u) in block.iter().enumerate() {
                    out.push((format!("{}.conv", block_path(i + 1, j)), *u.conv.spec()));
                }
            }
        }
        if selector.includes_bottleneck() {
            for (j, u) in self.bottleneck.iter().enumerate() {
                out.push((format!("{}.conv", bottleneck_path(j)), *u.conv.spec()));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        fn conv<T: Scalar, U: Scalar>(c: &ConvLayer<T>) -> ConvLayer<U> {
            match c {
                ConvLayer::Plain { spec, kernel, bias } => ConvLayer::Plain {
                    spec: *spec,
                    kernel: Param {
                        value: kernel.value.cast(),
                        trainable: kernel.trainable,
                    },
                    bias: Param {
                        value: bias.value.cast(),
                        trainable: bias.trainable,
                    },
                },
                ConvLayer::Lora {
                    adapter,
                    x_trainable,
                    y_trainable,
                } => ConvLayer::Lora {
                    adapter: crate::convlora::ConvLoraAdapter::from_parts(
                        adapter.frozen_kernel().cast(),
                        adapter.frozen_bias().cast(),
                        *adapter.spec(),
                        adapter.x.cast(),
                        adapter.y.cast(),
                    )
                    .expect("same shapes"),
                    x_trainable: *x_trainable,
                    y_trainable: *y_trainable,
                },
            }
        }
        fn unit<T: Scalar, U: Scalar>(u: &ConvBnRelu<T>) -> ConvBnRelu<U> {
            let mut bn = crate::adabn::BatchNorm::<U>::new(u.bn.channels());
            bn.gamma = u.bn.gamma.cast();
            bn.beta = u.bn.beta.cast();
            bn.set_running_stats(u.bn.running_mean().cast(), u.bn.running_var().cast())
                .expect("same shapes");
            bn.set_momentum(u.bn.momentum().as_f64()).expect("valid momentum");
            if let Some((m, v)) = u.bn.source_snapshot() {
                bn.set_source_snapshot(m.cast(), v.cast());
            }
            bn.set_mode(u.bn.mode());
            ConvBnRelu {
                conv: conv(&u.conv),
                bn,
                gamma_trainable: u.gamma_trainable,
                beta_trainable: u.beta_trainable,
            }
        }
        UNet {
            config: self.config,
            encoder: self.encoder.iter().map(|b| b.iter().map(unit).collect()).collect(),
            bottleneck: self.bottleneck.iter().map(unit).collect(),
            decoder: self.decoder.iter().map(|b| b.iter().map(unit).collect()).collect(),
            head: conv(&self.head),
            esh: self.esh.iter().map(unit).collect(),
            esh_head: conv(&self.esh_head),
        }
    }
}
