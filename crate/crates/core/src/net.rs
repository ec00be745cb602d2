//! Compact encoder-decoder built from strip (or square) convolution blocks,
//! with a segmentation head and an eight-channel connectivity head.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::grid::{
    concat_channels, conv2d_backward, conv2d_forward, instance_norm, instance_norm_backward, pointwise, pointwise_backward, pool_down2,
    pool_down2_backward, split_channels, upsample2, upsample2_backward, Activation, BinaryPlane,
    ConvContext, NormContext, PlainKernel, Plane, Shape4, Tensor4,
};
use crate::real::Real;
use crate::sslconv::{
    ssl_layer_backward, ssl_layer_forward, DirectionSet, OffsetGrads, OffsetMode, OffsetSource,
    SslLayerContext, StripKernelSet, DEFAULT_STRIP_LENGTH,
};
use crate::topo::{connectivity_cube_with, loss_total_grad, ConnectivityCube, ConnectivityRule, LossBreakdown, LossConfig};

const CHECKPOINT_MAGIC: &[u8; 6] = b"PASC1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Square,
    SslXy,
    SslZw,
    SslXyzw,
}

impl ConvKind {
    pub const ALL: [ConvKind; 4] = [ConvKind::Square, ConvKind::SslXy, ConvKind::SslZw, ConvKind::SslXyzw];

    /// Strip directions, or `None` for plain 3x3 convolutions.
    pub fn directions(self) -> Option<DirectionSet> {
        match self {
            ConvKind::Square => None,
            ConvKind::SslXy => Some(DirectionSet::XY),
            ConvKind::SslZw => Some(DirectionSet::ZW),
            ConvKind::SslXyzw => Some(DirectionSet::ALL),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Square => "square",
            ConvKind::SslXy => "ssl_xy",
            ConvKind::SslZw => "ssl_zw",
            ConvKind::SslXyzw => "ssl_xyzw",
        }
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ConvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown conv_kind `{s}` (square, ssl_xy, ssl_zw, ssl_xyzw)"))
    }
}

impl FromStr for OffsetMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(OffsetMode::Dynamic),
            "static" => Ok(OffsetMode::Static),
            "off" => Ok(OffsetMode::Off),
            _ => Err(format!("unknown offset_mode `{s}` (dynamic, static, off)")),
        }
    }
}

impl OffsetMode {
    pub fn name(self) -> &'static str {
        match self {
            OffsetMode::Dynamic => "dynamic",
            OffsetMode::Static => "static",
            OffsetMode::Off => "off",
        }
    }
}

/// Architecture, loss and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub conv_kind: ConvKind,
    pub offset_mode: OffsetMode,
    pub strip_length: usize,
    pub loss: LossConfig,
    pub connectivity_rule: ConnectivityRule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            conv_kind: ConvKind::SslXyzw,
            offset_mode: OffsetMode::Dynamic,
            strip_length: DEFAULT_STRIP_LENGTH,
            loss: LossConfig::default(),
            connectivity_rule: ConnectivityRule::ForegroundPair,
            learning_rate: 0.01,
            batch_size: 2,
            epochs: 20,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(contract("levels must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(contract("base_channels must be at least 1"));
        }
        if self.strip_length < 3 || self.strip_length % 2 == 0 {
            return Err(contract(format!(
                "strip length must be odd and >= 3, got {}",
                self.strip_length
            )));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("learning rate {} is not a finite non-negative number", self.learning_rate)));
        }
        if self.loss.skeleton_iterations == 0 {
            return Err(contract("skeleton iterations must be at least 1"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// The convolution inside a block: plain 3x3 or a strip layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Conv<T> {
    Square(PlainKernel<T>),
    Strip(StripKernelSet<T>),
}

enum ConvCtx<T> {
    Square(ConvContext<T>),
    Strip(SslLayerContext<T>),
}

/// Convolution followed by instance normalization with a learned
/// per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub conv: Conv<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

struct BlockCtx<T> {
    conv: ConvCtx<T>,
    norm: NormContext<T>,
}

impl<T: Real> Block<T> {
    fn zeros(config: &NetConfig, c_in: usize, c_out: usize) -> Result<Self> {
        let conv = match config.conv_kind.directions() {
            None => Conv::Square(PlainKernel::zeros(c_out, c_in, 3, 3)),
            Some(dirs) => Conv::Strip(StripKernelSet::zeros(
                config.strip_length,
                c_in,
                c_out,
                dirs,
                config.offset_mode,
            )?),
        };
        Ok(Block {
            conv,
            gamma: vec![T::zero(); c_out],
            beta: vec![T::zero(); c_out],
        })
    }

    fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BlockCtx<T>)> {
        let (y, conv) = match &self.conv {
            Conv::Square(k) => conv2d_forward(x, k, 1).map(|(y, c)| (y, ConvCtx::Square(c)))?,
            Conv::Strip(k) => ssl_layer_forward(x, k).map(|(y, c)| (y, ConvCtx::Strip(c)))?,
        };
        let (z, norm) = instance_norm(&y, &self.gamma, &self.beta)?;
        Ok((z, BlockCtx { conv, norm }))
    }

    /// Returns the input gradient and adds parameter gradients into `grads`.
    fn backward(&self, ctx: &BlockCtx<T>, g: &Tensor4<T>, grads: &mut Block<T>) -> Result<Tensor4<T>> {
        let ng = instance_norm_backward(&ctx.norm, &self.gamma, g)?;
        add_into(&mut grads.gamma, &ng.gamma);
        add_into(&mut grads.beta, &ng.beta);
        let g = &ng.input;
        match (&self.conv, &ctx.conv, &mut grads.conv) {
            (Conv::Square(k), ConvCtx::Square(c), Conv::Square(acc)) => {
                let cg = conv2d_backward(c, k, g)?;
                add_into(&mut acc.weights, &cg.weights);
                add_into(&mut acc.bias, &cg.bias);
                Ok(cg.input)
            }
            (Conv::Strip(k), ConvCtx::Strip(c), Conv::Strip(acc)) => {
                let sg = ssl_layer_backward(c, k, g)?;
                add_into(&mut acc.weights, &sg.weights);
                add_into(&mut acc.bias, &sg.bias);
                match (&mut acc.offsets, &sg.offsets) {
                    (OffsetSource::Dynamic(p), OffsetGrads::Dynamic { weights, bias }) => {
                        add_into(&mut p.weights, weights);
                        add_into(&mut p.bias, bias);
                    }
                    (OffsetSource::Static(v), OffsetGrads::Static(gv)) => add_into(v, gv),
                    (OffsetSource::Off, OffsetGrads::Off) => {}
                    _ => return Err(contract("offset gradient kind does not match the layer")),
                }
                Ok(sg.input)
            }
            _ => Err(contract("block context does not match the block kind")),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &Vec<T>)> {
        let mut v = match &self.conv {
            Conv::Square(k) => vec![
                ("conv.weight", vec![k.c_out, k.c_in, k.k_h, k.k_w], &k.weights),
                ("conv.bias", vec![k.c_out], &k.bias),
            ],
            Conv::Strip(k) => {
                let mut v = vec![
                    ("strip.weight", vec![4, k.c_out, k.c_in, k.m], &k.weights),
                    ("strip.bias", vec![k.c_out], &k.bias),
                ];
                match &k.offsets {
                    OffsetSource::Dynamic(p) => {
                        v.push(("offset.weight", vec![p.c_out, p.c_in, p.k_h, p.k_w], &p.weights));
                        v.push(("offset.bias", vec![p.c_out], &p.bias));
                    }
                    OffsetSource::Static(s) => v.push(("offset.static", vec![4, k.m - 1], s)),
                    OffsetSource::Off => {}
                }
                v
            }
        };
        v.push(("norm.gamma", vec![self.gamma.len()], &self.gamma));
        v.push(("norm.beta", vec![self.beta.len()], &self.beta));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = match &mut self.conv {
            Conv::Square(k) => vec![&mut k.weights, &mut k.bias],
            Conv::Strip(k) => {
                let mut v = vec![&mut k.weights, &mut k.bias];
                match &mut k.offsets {
                    OffsetSource::Dynamic(p) => {
                        v.push(&mut p.weights);
                        v.push(&mut p.bias);
                    }
                    OffsetSource::Static(s) => v.push(s),
                    OffsetSource::Off => {}
                }
                v
            }
        };
        v.push(&mut self.gamma);
        v.push(&mut self.beta);
        v
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// A named parameter tensor as seen by the optimizer and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Network weights. The same type also carries gradients and optimizer
/// moments, so every buffer has the parameter's exact dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    levels: usize,
    /// `enc0 .. enc{L-1}`, `mid`, `dec{L-1} .. dec0`.
    blocks: Vec<(String, Block<T>)>,
    seg_head: PlainKernel<T>,
    nc_head: PlainKernel<T>,
}

impl<T: Real> Network<T> {
    /// Zero parameters with the geometry `config` describes.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let mut blocks = Vec::with_capacity(2 * l + 1);
        for level in 0..l {
            let c_in = if level == 0 { 1 } else { config.channels(level - 1) };
            blocks.push((format!("enc{level}"), Block::zeros(config, c_in, config.channels(level))?));
        }
        let deepest = config.channels(l - 1);
        blocks.push(("mid".to_string(), Block::zeros(config, deepest, deepest)?));
        for level in (0..l).rev() {
            let c_out = config.channels(level.max(1) - 1);
            blocks.push((format!("dec{level}"), Block::zeros(config, 2 * config.channels(level), c_out)?));
        }
        let c0 = config.channels(0);
        Ok(Self {
            levels: l,
            blocks,
            seg_head: PlainKernel::zeros(1, c0, 1, 1),
            nc_head: PlainKernel::zeros(8, c0, 1, 1),
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for v in z.tensors_mut() {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let k = |p: &PlainKernel<T>| PlainKernel {
            c_out: p.c_out,
            c_in: p.c_in,
            k_h: p.k_h,
            k_w: p.k_w,
            weights: p.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: p.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let blocks = self
            .blocks
            .iter()
            .map(|(name, b)| {
                let layer = match &b.conv {
                    Conv::Square(p) => Conv::Square(k(p)),
                    Conv::Strip(s) => Conv::Strip(StripKernelSet {
                        m: s.m,
                        c_in: s.c_in,
                        c_out: s.c_out,
                        directions: s.directions,
                        weights: conv(&s.weights),
                        bias: conv(&s.bias),
                        offsets: match &s.offsets {
                            OffsetSource::Dynamic(p) => OffsetSource::Dynamic(k(p)),
                            OffsetSource::Static(v) => OffsetSource::Static(conv(v)),
                            OffsetSource::Off => OffsetSource::Off,
                        },
                    }),
                };
                let nb = Block {
                    conv: layer,
                    gamma: conv(&b.gamma),
                    beta: conv(&b.beta),
                };
                (name.clone(), nb)
            })
            .collect();
        Network {
            levels: self.levels,
            blocks,
            seg_head: k(&self.seg_head),
            nc_head: k(&self.nc_head),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn param_blocks(&self) -> Vec<ParamBlock<'_, T>> {
        let mut out = Vec::new();
        for (layer, b) in &self.blocks {
            for (suffix, dims, data) in b.tensors() {
                out.push(ParamBlock {
                    name: format!("{layer}.{suffix}"),
                    dims,
                    data,
                });
            }
        }
        for (head, k) in [("head.seg", &self.seg_head), ("head.nc", &self.nc_head)] {
            out.push(ParamBlock {
                name: format!("{head}.weight"),
                dims: vec![k.c_out, k.c_in, k.k_h, k.k_w],
                data: &k.weights,
            });
            out.push(ParamBlock {
                name: format!("{head}.bias"),
                dims: vec![k.c_out],
                data: &k.bias,
            });
        }
        out
    }

    /// Every parameter tensor, mutably, in [`Network::param_blocks`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for (_, b) in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        for k in [&mut self.seg_head, &mut self.nc_head] {
            out.push(&mut k.weights);
            out.push(&mut k.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.data.len()).sum()
    }

    /// Flat copy of all parameters in block order.
    pub fn flatten(&self) -> Vec<T> {
        self.param_blocks().iter().flat_map(|b| b.data.iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in block order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(contract(format!(
                "flat parameter vector has {} values, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for v in self.tensors_mut() {
            let len = v.len();
            v.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        Ok(())
    }

    /// Name of the first parameter block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.param_blocks()
            .into_iter()
            .find(|b| b.data.iter().any(|v| !v.is_finite()))
            .map(|b| b.name)
    }

    pub fn has_offset_predictors(&self) -> bool {
        self.blocks
            .iter()
            .any(|(_, b)| matches!(&b.conv, Conv::Strip(s) if !matches!(s.offsets, OffsetSource::Off)))
    }
}

/// Parameters plus the gradient and Adam moment buffers that mirror them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T = f32> {
    pub net: Network<T>,
    pub grads: Network<T>,
    pub moment1: Network<T>,
    pub moment2: Network<T>,
    pub step: u64,
}

impl<T: Real> NetParams<T> {
    pub fn new(net: Network<T>) -> Self {
        let z = net.zeros_like();
        Self {
            grads: z.clone(),
            moment1: z.clone(),
            moment2: z,
            net,
            step: 0,
        }
    }
}

/// Deterministic initialization: weights uniform in `(-b, b)` with
/// `b = sqrt(1 / fan_in)`, biases and offset sources zero, norm scales one.
pub fn init_network<T: Real>(config: &NetConfig, seed: u64) -> Result<Network<T>> {
    let mut net = Network::<T>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = |w: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng| {
        let b = (1.0 / fan_in as f64).sqrt();
        for v in w {
            *v = T::lit(rng.gen_range(-b..b));
        }
    };
    for (_, block) in &mut net.blocks {
        block.gamma.iter_mut().for_each(|g| *g = T::one());
        match &mut block.conv {
            Conv::Square(k) => fill(&mut k.weights, k.c_in * k.k_h * k.k_w, &mut rng),
            Conv::Strip(k) => {
                let fan_in = k.c_in * k.m * k.directions.count();
                let dir_len = k.c_out * k.c_in * k.m;
                for d in k.directions.iter() {
                    let start = d.slot() * dir_len;
                    fill(&mut k.weights[start..start + dir_len], fan_in, &mut rng);
                }
            }
        }
    }
    for head in [&mut net.seg_head, &mut net.nc_head] {
        let fan_in = head.c_in;
        fill(&mut head.weights, fan_in, &mut rng);
    }
    Ok(net)
}

pub fn init_params(config: &NetConfig, seed: u64) -> Result<NetParams<f32>> {
    init_network(config, seed).map(NetParams::new)
}

/// Saved activations for [`backward`].
pub struct Tape<T> {
    enc: Vec<EncoderTape<T>>,
    mid: (BlockCtx<T>, Tensor4<T>),
    dec: Vec<(BlockCtx<T>, Tensor4<T>, usize)>,
    seg_ctx: ConvContext<T>,
    nc_ctx: ConvContext<T>,
    seg: Tensor4<T>,
    nc: Tensor4<T>,
}

struct EncoderTape<T> {
    ctx: BlockCtx<T>,
    activated: Tensor4<T>,
    argmax: Vec<u32>,
}

fn check_input<T: Real>(image: &Tensor4<T>, levels: usize) -> Result<()> {
    let s = image.shape();
    let f = 1usize << levels;
    if s.c != 1 {
        return Err(contract(format!("network input must have 1 channel, got {s}")));
    }
    if s.h % f != 0 || s.w % f != 0 || s.h == 0 || s.w == 0 {
        return Err(contract(format!(
            "input {}x{} is not divisible by 2^{levels} = {f}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Segmentation and connectivity probabilities, dims `(n,1,h,w)` and `(n,8,h,w)`.
pub fn forward<T: Real>(image: &Tensor4<T>, net: &Network<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
    forward_tape(image, net).map(|t| (t.seg, t.nc))
}

pub fn forward_tape<T: Real>(image: &Tensor4<T>, net: &Network<T>) -> Result<Tape<T>> {
    let l = net.levels;
    check_input(image, l)?;
    let mut x = image.clone();
    let mut enc = Vec::with_capacity(l);
    for (_, block) in &net.blocks[..l] {
        let (y, ctx) = block.forward(&x)?;
        let activated = pointwise(&y, Activation::Relu);
        let (pooled, argmax) = pool_down2(&activated)?;
        enc.push(EncoderTape { ctx, activated, argmax });
        x = pooled;
    }
    let (y, ctx) = net.blocks[l].1.forward(&x)?;
    let mut x = pointwise(&y, Activation::Relu);
    let mid = (ctx, x.clone());
    let mut dec = Vec::with_capacity(l);
    for (k, (_, block)) in net.blocks[l + 1..].iter().enumerate() {
        let level = l - 1 - k;
        let up = upsample2(&x);
        let up_c = up.shape().c;
        let joined = concat_channels(&up, &enc[level].activated)?;
        let (y, ctx) = block.forward(&joined)?;
        x = pointwise(&y, Activation::Relu);
        dec.push((ctx, x.clone(), up_c));
    }
    let (seg_logit, seg_ctx) = conv2d_forward(&x, &net.seg_head, 0)?;
    let (nc_logit, nc_ctx) = conv2d_forward(&x, &net.nc_head, 0)?;
    Ok(Tape {
        enc,
        mid,
        dec,
        seg_ctx,
        nc_ctx,
        seg: pointwise(&seg_logit, Activation::Sigmoid),
        nc: pointwise(&nc_logit, Activation::Sigmoid),
    })
}

impl<T> Tape<T> {
    pub fn seg(&self) -> &Tensor4<T> {
        &self.seg
    }

    pub fn nc(&self) -> &Tensor4<T> {
        &self.nc
    }
}

/// Parameter gradients given gradients on both probability outputs.
pub fn backward<T: Real>(
    tape: &Tape<T>,
    net: &Network<T>,
    grad_seg: &Tensor4<T>,
    grad_nc: &Tensor4<T>,
) -> Result<Network<T>> {
    let l = net.levels;
    let mut grads = net.zeros_like();
    let g_seg = pointwise_backward(&tape.seg, grad_seg, Activation::Sigmoid)?;
    let g_nc = pointwise_backward(&tape.nc, grad_nc, Activation::Sigmoid)?;
    let sg = conv2d_backward(&tape.seg_ctx, &net.seg_head, &g_seg)?;
    let ng = conv2d_backward(&tape.nc_ctx, &net.nc_head, &g_nc)?;
    add_into(&mut grads.seg_head.weights, &sg.weights);
    add_into(&mut grads.seg_head.bias, &sg.bias);
    add_into(&mut grads.nc_head.weights, &ng.weights);
    add_into(&mut grads.nc_head.bias, &ng.bias);
    let mut g = sg.input;
    g.add_assign(&ng.input)?;

    let mut skip_grads: Vec<Option<Tensor4<T>>> = (0..l).map(|_| None).collect();
    for k in (0..l).rev() {
        let level = l - 1 - k;
        let (ctx, activated, up_c) = &tape.dec[k];
        let gy = pointwise_backward(activated, &g, Activation::Relu)?;
        let gin = net.blocks[l + 1 + k].1.backward(ctx, &gy, &mut grads.blocks[l + 1 + k].1)?;
        let (g_up, g_skip) = split_channels(&gin, *up_c)?;
        skip_grads[level] = Some(g_skip);
        g = upsample2_backward(&g_up)?;
    }
    let gy = pointwise_backward(&tape.mid.1, &g, Activation::Relu)?;
    g = net.blocks[l].1.backward(&tape.mid.0, &gy, &mut grads.blocks[l].1)?;
    for level in (0..l).rev() {
        let e = &tape.enc[level];
        let mut ga = pool_down2_backward(&g, &e.argmax, e.activated.shape())?;
        if let Some(s) = &skip_grads[level] {
            ga.add_assign(s)?;
        }
        let gy = pointwise_backward(&e.activated, &ga, Activation::Relu)?;
        g = net.blocks[level].1.backward(&e.ctx, &gy, &mut grads.blocks[level].1)?;
    }
    Ok(grads)
}

/// Ground-truth connectivity cubes for a batch of masks.
pub fn target_cubes(masks: &[BinaryPlane], rule: ConnectivityRule) -> Vec<ConnectivityCube<u8>> {
    masks.iter().map(|m| connectivity_cube_with(m, rule)).collect()
}

/// Batch-mean loss without the backward pass.
pub fn batch_loss<T: Real>(
    images: &Tensor4<T>,
    masks: &[BinaryPlane],
    net: &Network<T>,
    config: &NetConfig,
) -> Result<LossBreakdown> {
    let s = images.shape();
    check_masks(s, masks)?;
    let (seg, nc) = forward(images, net)?;
    let cubes = target_cubes(masks, config.connectivity_rule);
    let mut sums = [0.0f64; 3];
    for b in 0..s.n {
        let (pred, cube) = sample_outputs(&seg, &nc, b);
        let br = crate::topo::loss_total(&pred, &masks[b], &cube, &cubes[b], &config.loss)?;
        sums[0] += br.l_mask;
        sums[1] += br.l_cl;
        sums[2] += br.l_con;
    }
    let n = s.n as f64;
    Ok(LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n))
}

fn check_masks(s: Shape4, masks: &[BinaryPlane]) -> Result<()> {
    if masks.len() != s.n || masks.iter().any(|m| m.h != s.h || m.w != s.w) {
        return Err(contract(format!(
            "batch of {s} images needs {} masks of {}x{}",
            s.n, s.h, s.w
        )));
    }
    Ok(())
}

fn sample_outputs<T: Real>(seg: &Tensor4<T>, nc: &Tensor4<T>, b: usize) -> (Plane<T>, ConnectivityCube<T>) {
    let s = seg.shape();
    (
        Plane {
            h: s.h,
            w: s.w,
            data: seg.item(b).to_vec(),
        },
        ConnectivityCube {
            h: s.h,
            w: s.w,
            data: nc.item(b).to_vec(),
        },
    )
}

/// Batch-mean loss and its parameter gradient.
pub fn batch_loss_grad<T: Real>(
    images: &Tensor4<T>,
    masks: &[BinaryPlane],
    net: &Network<T>,
    config: &NetConfig,
) -> Result<(LossBreakdown, Network<T>)> {
    let s = images.shape();
    check_masks(s, masks)?;
    let tape = forward_tape(images, net)?;
    let cubes = target_cubes(masks, config.connectivity_rule);
    let inv_n = T::lit(1.0 / s.n as f64);
    let mut grad_seg = Tensor4::zeros(tape.seg.shape());
    let mut grad_nc = Tensor4::zeros(tape.nc.shape());
    let mut sums = [0.0f64; 3];
    for b in 0..s.n {
        let (pred, cube) = sample_outputs(&tape.seg, &tape.nc, b);
        let (br, lg) = loss_total_grad(&pred, &masks[b], &cube, &cubes[b], &config.loss)?;
        sums[0] += br.l_mask;
        sums[1] += br.l_cl;
        sums[2] += br.l_con;
        for (d, &v) in grad_seg.item_mut(b).iter_mut().zip(&lg.mask.data) {
            *d = v * inv_n;
        }
        for (d, &v) in grad_nc.item_mut(b).iter_mut().zip(&lg.cube.data) {
            *d = v * inv_n;
        }
    }
    let n = s.n as f64;
    let breakdown = LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n);
    if let Some(term) = breakdown.first_non_finite() {
        let block = net.first_non_finite().unwrap_or_else(|| format!("loss term {term}"));
        return Err(Error::NonFinite { block });
    }
    let grads = backward(&tape, net, &grad_seg, &grad_nc)?;
    if let Some(block) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            block: format!("gradient of {block}"),
        });
    }
    Ok((breakdown, grads))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update from the gradients currently in `params.grads`.
pub fn adam_update<T: Real>(params: &mut NetParams<T>, learning_rate: f64) {
    params.step += 1;
    let t = params.step as i32;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::lit(learning_rate);
    let eps = T::lit(ADAM_EPS);
    let NetParams {
        net,
        grads,
        moment1,
        moment2,
        ..
    } = params;
    let g = grads.param_blocks();
    let tensors = net.tensors_mut().into_iter().zip(moment1.tensors_mut()).zip(moment2.tensors_mut());
    for (((p, a), b), g) in tensors.zip(&g) {
        for k in 0..p.len() {
            let gk = g.data[k];
            a[k] = b1 * a[k] + (T::one() - b1) * gk;
            b[k] = b2 * b[k] + (T::one() - b2) * gk * gk;
            let delta = lr * (a[k] / c1) / ((b[k] / c2).sqrt() + eps);
            if delta != T::zero() {
                p[k] -= delta;
            }
        }
    }
}

/// Forward, loss, backward and one Adam step on a batch. Returns the
/// pre-update loss.
pub fn train_step<T: Real>(
    images: &Tensor4<T>,
    masks: &[BinaryPlane],
    params: &mut NetParams<T>,
    config: &NetConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = batch_loss_grad(images, masks, &params.net, config)?;
    params.grads = grads;
    adam_update(params, config.learning_rate);
    if let Some(block) = params.net.first_non_finite() {
        return Err(Error::NonFinite { block });
    }
    Ok(breakdown)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    let blocks = net.param_blocks();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in b.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads parameters saved by [`save_checkpoint`] into the architecture
/// `config` describes.
pub fn load_checkpoint(path: &Path, config: &NetConfig) -> Result<NetParams<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic { path: path.to_path_buf() });
    }
    let truncated = |tensor: &str| Error::CheckpointTruncated {
        path: path.to_path_buf(),
        tensor: tensor.to_string(),
    };
    let mut r = Reader {
        buf: &bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let mut net = Network::<f32>::zeros(config)?;
    let expected: Vec<(String, Vec<usize>)> =
        net.param_blocks().into_iter().map(|b| (b.name, b.dims)).collect();
    let count = r.u32().ok_or_else(|| truncated("block count"))? as usize;
    if count != expected.len() {
        return Err(Error::CheckpointBlockCount {
            expected: expected.len(),
            found: count,
        });
    }
    let mut loaded: Vec<Vec<f32>> = Vec::with_capacity(count);
    for (want_name, want_dims) in &expected {
        let name_len = r.u32().ok_or_else(|| truncated(want_name))? as usize;
        let name = r.take(name_len).ok_or_else(|| truncated(want_name))?;
        let name = String::from_utf8_lossy(name).into_owned();
        if &name != want_name {
            return Err(contract(format!(
                "checkpoint block `{name}` found where `{want_name}` was expected"
            )));
        }
        let ndim = r.u32().ok_or_else(|| truncated(&name))? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32().ok_or_else(|| truncated(&name))? as usize);
        }
        if &dims != want_dims {
            return Err(Error::CheckpointDims {
                name,
                expected: want_dims.clone(),
                found: dims,
            });
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4).ok_or_else(|| truncated(&name))?;
        loaded.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    for (v, src) in net.tensors_mut().into_iter().zip(&loaded) {
        v.copy_from_slice(src);
    }
    Ok(NetParams::new(net))
}
