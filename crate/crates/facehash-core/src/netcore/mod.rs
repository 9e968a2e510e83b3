//! The hashing network: a residual convolutional feature extractor feeding a
//! latent vector `f`, a single-layer projection head producing `g` for
//! similarity learning, and a hashing head (fully-connected + batch norm)
//! producing the pre-activation `q`, with `h = tanh(q)` and identity logits
//! from a classifier on `h`.
//!
//! Two backbone scales exist: `paper` (ResNet18-style, four stages of two
//! blocks, 512 channels, 512-d latent) and `tiny` (one stem conv plus two
//! single-block stages ending at 64 channels, 128-d latent) for fast
//! desk-scale runs. Downsampling uses stride-2 first blocks; the stem keeps
//! full resolution.

mod ops;

pub use ops::{BatchNorm1d, BnCache, Conv2d, LinearLayer};
pub(crate) use ops::par_matmul as ops_par_matmul;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datapipe::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, SALT_INIT};
use ops::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneScale {
    Paper,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneScale,
    pub input_size: usize,
    pub code_bits: usize,
    pub identity_count: usize,
    pub latent_dim: usize,
    pub projection_dim: usize,
}

/// (channels, blocks, stride of the first block) per residual stage.
struct StageSpec {
    channels: usize,
    blocks: usize,
    stride: usize,
}

impl ModelConfig {
    pub fn paper(input_size: usize, code_bits: usize, identity_count: usize) -> Self {
        ModelConfig {
            backbone: BackboneScale::Paper,
            input_size,
            code_bits,
            identity_count,
            latent_dim: 512,
            projection_dim: 128,
        }
    }

    pub fn tiny(input_size: usize, code_bits: usize, identity_count: usize) -> Self {
        ModelConfig {
            backbone: BackboneScale::Tiny,
            input_size,
            code_bits,
            identity_count,
            latent_dim: 128,
            projection_dim: 128,
        }
    }

    fn stem_channels(&self) -> usize {
        match self.backbone {
            BackboneScale::Paper => 64,
            BackboneScale::Tiny => 16,
        }
    }

    fn stages(&self) -> Vec<StageSpec> {
        match self.backbone {
            BackboneScale::Paper => vec![
                StageSpec { channels: 64, blocks: 2, stride: 1 },
                StageSpec { channels: 128, blocks: 2, stride: 2 },
                StageSpec { channels: 256, blocks: 2, stride: 2 },
                StageSpec { channels: 512, blocks: 2, stride: 2 },
            ],
            BackboneScale::Tiny => vec![
                StageSpec { channels: 32, blocks: 1, stride: 2 },
                StageSpec { channels: 64, blocks: 1, stride: 2 },
            ],
        }
    }

    /// Total spatial downsampling factor of the conv stack.
    pub fn downsample_factor(&self) -> usize {
        self.stages().iter().map(|s| s.stride).product()
    }

    /// Channel count entering the average pool.
    pub fn pooled_channels(&self) -> usize {
        self.stages().last().map(|s| s.channels).unwrap_or(0)
    }

    /// (channels, height, width) after the stem and after each stage, for a
    /// square input of `input_size`.
    pub fn stage_output_sizes(&self) -> Vec<(usize, usize, usize)> {
        let mut sizes = vec![(self.stem_channels(), self.input_size, self.input_size)];
        let mut hw = self.input_size;
        for stage in self.stages() {
            hw /= stage.stride;
            sizes.push((stage.channels, hw, hw));
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_bits < 4 {
            return Err(Error::InvalidArgument(format!(
                "code_bits must be at least 4, got {}",
                self.code_bits
            )));
        }
        if self.identity_count == 0 {
            return Err(Error::InvalidArgument("identity_count must be positive".into()));
        }
        if self.latent_dim == 0 || self.projection_dim == 0 {
            return Err(Error::InvalidArgument("latent/projection dims must be positive".into()));
        }
        let ds = self.downsample_factor();
        if self.input_size < ds || self.input_size % ds != 0 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} must be a positive multiple of {ds} for this backbone",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Basic residual block: relu(conv2(relu(conv1(x))) + shortcut(x)).
/// The projection shortcut (1x1, stride-matched) exists iff the block
/// changes resolution or width.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

/// All trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv_stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub fc_latent: LinearLayer,
    pub fc_proj: LinearLayer,
    pub fc_hash: LinearLayer,
    pub bn_hash: BatchNorm1d,
    pub fc_cls: LinearLayer,
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1d(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Which update rule a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature extractor: conv stack + FC_latent. Receives all loss terms.
    Extractor,
    /// Projection head FC_proj. Receives the similarity and norm terms only.
    Projection,
    /// Hashing head: FC_hash + its batch-norm scale/shift. Receives the
    /// quantization and classification terms only.
    Hashing,
    /// Identity classifier on h.
    Classifier,
}

fn init_conv(conv: &mut Conv2d, rng: &mut ChaCha8Rng) {
    let fan_in = (conv.c_in * conv.kernel * conv.kernel) as f64;
    let std = (2.0 / fan_in).sqrt();
    for v in conv.weight.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = n * std;
    }
}

fn init_linear(fc: &mut LinearLayer, rng: &mut ChaCha8Rng) {
    let fan_in = fc.weight.nrows() as f64;
    let std = (1.0 / fan_in).sqrt();
    for v in fc.weight.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = n * std;
    }
}

/// Build the parameter structure for a config with all weights zero.
/// The checkpoint loader fills one of these in place.
pub fn model_skeleton(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut blocks = Vec::new();
    let mut c_in = config.stem_channels();
    for stage in config.stages() {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let c_out = stage.channels;
            let shortcut = if stride != 1 || c_in != c_out {
                Some(Conv2d::zeros(c_in, c_out, 1, stride, 0))
            } else {
                None
            };
            blocks.push(ResidualBlock {
                conv1: Conv2d::zeros(c_in, c_out, 3, stride, 1),
                conv2: Conv2d::zeros(c_out, c_out, 3, 1, 1),
                shortcut,
            });
            c_in = c_out;
        }
    }
    Ok(ModelParams {
        config: *config,
        conv_stem: Conv2d::zeros(3, config.stem_channels(), 3, 1, 1),
        blocks,
        fc_latent: LinearLayer::zeros(config.pooled_channels(), config.latent_dim),
        fc_proj: LinearLayer::zeros(config.latent_dim, config.projection_dim),
        fc_hash: LinearLayer::zeros(config.latent_dim, config.code_bits),
        bn_hash: BatchNorm1d::new(config.code_bits),
        fc_cls: LinearLayer::zeros(config.code_bits, config.identity_count),
    })
}

/// Build a model with fan-in-scaled normal weights, zero biases, and unit
/// batch-norm scale. Bit-identical for a fixed (config, seed).
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = model_skeleton(config)?;
    let mut rng = stream_rng(seed, SALT_INIT);
    init_conv(&mut params.conv_stem, &mut rng);
    for block in params.blocks.iter_mut() {
        init_conv(&mut block.conv1, &mut rng);
        init_conv(&mut block.conv2, &mut rng);
        if let Some(sc) = &mut block.shortcut {
            init_conv(sc, &mut rng);
        }
    }
    init_linear(&mut params.fc_latent, &mut rng);
    init_linear(&mut params.fc_proj, &mut rng);
    init_linear(&mut params.fc_hash, &mut rng);
    init_linear(&mut params.fc_cls, &mut rng);
    Ok(params)
}

impl ModelParams {
    /// Trainable tensors in a fixed order, with their update group.
    /// Batch-norm running statistics are state, not parameters, and are
    /// deliberately absent here.
    pub fn trainable(&self) -> Vec<(ParamGroup, String, &[f64])> {
        let mut out: Vec<(ParamGroup, String, &[f64])> = Vec::new();
        let slice = slice2;
        let slice1 = slice1d;

        out.push((ParamGroup::Extractor, "conv_stem.weight".into(), slice(&self.conv_stem.weight)));
        out.push((ParamGroup::Extractor, "conv_stem.bias".into(), slice1(&self.conv_stem.bias)));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((ParamGroup::Extractor, format!("block{i}.conv1.weight"), slice(&b.conv1.weight)));
            out.push((ParamGroup::Extractor, format!("block{i}.conv1.bias"), slice1(&b.conv1.bias)));
            out.push((ParamGroup::Extractor, format!("block{i}.conv2.weight"), slice(&b.conv2.weight)));
            out.push((ParamGroup::Extractor, format!("block{i}.conv2.bias"), slice1(&b.conv2.bias)));
            if let Some(sc) = &b.shortcut {
                out.push((ParamGroup::Extractor, format!("block{i}.shortcut.weight"), slice(&sc.weight)));
                out.push((ParamGroup::Extractor, format!("block{i}.shortcut.bias"), slice1(&sc.bias)));
            }
        }
        out.push((ParamGroup::Extractor, "fc_latent.weight".into(), slice(&self.fc_latent.weight)));
        out.push((ParamGroup::Extractor, "fc_latent.bias".into(), slice1(&self.fc_latent.bias)));
        out.push((ParamGroup::Projection, "fc_proj.weight".into(), slice(&self.fc_proj.weight)));
        out.push((ParamGroup::Projection, "fc_proj.bias".into(), slice1(&self.fc_proj.bias)));
        out.push((ParamGroup::Hashing, "fc_hash.weight".into(), slice(&self.fc_hash.weight)));
        out.push((ParamGroup::Hashing, "fc_hash.bias".into(), slice1(&self.fc_hash.bias)));
        out.push((ParamGroup::Hashing, "bn_hash.gamma".into(), slice1(&self.bn_hash.gamma)));
        out.push((ParamGroup::Hashing, "bn_hash.beta".into(), slice1(&self.bn_hash.beta)));
        out.push((ParamGroup::Classifier, "fc_cls.weight".into(), slice(&self.fc_cls.weight)));
        out.push((ParamGroup::Classifier, "fc_cls.bias".into(), slice1(&self.fc_cls.bias)));
        out
    }

    /// Mutable view of the trainable tensors, same order as [`trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        let g = ParamGroup::Extractor;
        out.push((g, self.conv_stem.weight.as_slice_mut().expect("layout")));
        out.push((g, self.conv_stem.bias.as_slice_mut().expect("layout")));
        for b in self.blocks.iter_mut() {
            out.push((g, b.conv1.weight.as_slice_mut().expect("layout")));
            out.push((g, b.conv1.bias.as_slice_mut().expect("layout")));
            out.push((g, b.conv2.weight.as_slice_mut().expect("layout")));
            out.push((g, b.conv2.bias.as_slice_mut().expect("layout")));
            if let Some(sc) = &mut b.shortcut {
                out.push((g, sc.weight.as_slice_mut().expect("layout")));
                out.push((g, sc.bias.as_slice_mut().expect("layout")));
            }
        }
        out.push((g, self.fc_latent.weight.as_slice_mut().expect("layout")));
        out.push((g, self.fc_latent.bias.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Projection, self.fc_proj.weight.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Projection, self.fc_proj.bias.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Hashing, self.fc_hash.weight.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Hashing, self.fc_hash.bias.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Hashing, self.bn_hash.gamma.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Hashing, self.bn_hash.beta.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Classifier, self.fc_cls.weight.as_slice_mut().expect("layout")));
        out.push((ParamGroup::Classifier, self.fc_cls.bias.as_slice_mut().expect("layout")));
        out
    }

    /// Concatenated copy of one group's parameters, for change tracking.
    pub fn group_snapshot(&self, group: ParamGroup) -> Vec<f64> {
        self.trainable()
            .into_iter()
            .filter(|(g, _, _)| *g == group)
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect()
    }
}

/// Batch outputs at every head of the network.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub f: Array2<f64>,
    pub g: Array2<f64>,
    pub q: Array2<f64>,
    pub h: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Array4<f64>,
    z1: Array4<f64>,
    a1: Array4<f64>,
    r: Array4<f64>,
}

/// Intermediate activations retained by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array4<f64>,
    stem_z: Array4<f64>,
    blocks: Vec<BlockCache>,
    pool_hw: (usize, usize),
    pooled: Array2<f64>,
    f: Array2<f64>,
    h: Array2<f64>,
    bn: BnCache,
}

/// Loss gradients entering at the network heads. Absent entries are zero.
#[derive(Debug, Clone, Default)]
pub struct HeadGradients {
    pub d_g: Option<Array2<f64>>,
    pub d_q: Option<Array2<f64>>,
    pub d_h: Option<Array2<f64>>,
    pub d_logits: Option<Array2<f64>>,
}

/// Gradients for every trainable tensor, in [`ModelParams::trainable`] order.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub conv1: LayerGrads,
    pub conv2: LayerGrads,
    pub shortcut: Option<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv_stem: LayerGrads,
    pub blocks: Vec<BlockGrads>,
    pub fc_latent: LayerGrads,
    pub fc_proj: LayerGrads,
    pub fc_hash: LayerGrads,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub fc_cls: LayerGrads,
}

impl Gradients {
    /// Flat views aligned with [`ModelParams::trainable`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        let s2 = slice2;
        let s1 = slice1d;
        out.push(s2(&self.conv_stem.weight));
        out.push(s1(&self.conv_stem.bias));
        for b in &self.blocks {
            out.push(s2(&b.conv1.weight));
            out.push(s1(&b.conv1.bias));
            out.push(s2(&b.conv2.weight));
            out.push(s1(&b.conv2.bias));
            if let Some(sc) = &b.shortcut {
                out.push(s2(&sc.weight));
                out.push(s1(&sc.bias));
            }
        }
        out.push(s2(&self.fc_latent.weight));
        out.push(s1(&self.fc_latent.bias));
        out.push(s2(&self.fc_proj.weight));
        out.push(s1(&self.fc_proj.bias));
        out.push(s2(&self.fc_hash.weight));
        out.push(s1(&self.fc_hash.bias));
        out.push(s1(&self.bn_gamma));
        out.push(s1(&self.bn_beta));
        out.push(s2(&self.fc_cls.weight));
        out.push(s1(&self.fc_cls.bias));
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flat()
            .into_iter()
            .flat_map(|s| s.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Stack a batch of images into an (N, 3, H, W) array, checking the size
/// expected by the model.
pub fn batch_to_array(images: &[ImageTensor], expected_size: usize) -> Result<Array4<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    for img in images {
        if img.height() != expected_size || img.width() != expected_size {
            return Err(Error::WrongInputSize {
                expected: expected_size,
                got_h: img.height(),
                got_w: img.width(),
            });
        }
    }
    let n = images.len();
    let mut x = Array4::zeros((n, 3, expected_size, expected_size));
    for (i, img) in images.iter().enumerate() {
        for y in 0..expected_size {
            for xx in 0..expected_size {
                for c in 0..3 {
                    x[(i, c, y, xx)] = img.get(y, xx, c);
                }
            }
        }
    }
    Ok(x)
}

fn block_forward(block: &ResidualBlock, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
    let z1 = block.conv1.forward(x);
    let a1 = relu(&z1);
    let z2 = block.conv2.forward(&a1);
    let s = match &block.shortcut {
        Some(sc) => sc.forward(x),
        None => x.clone(),
    };
    let r = &z2 + &s;
    let out = relu(&r);
    (
        out,
        BlockCache {
            x_in: x.clone(),
            z1,
            a1,
            r,
        },
    )
}

fn conv_stack(params: &ModelParams, x: &Array4<f64>) -> (Array2<f64>, (usize, usize), Array4<f64>, Vec<BlockCache>) {
    let stem_z = params.conv_stem.forward(x);
    let mut cur = relu(&stem_z);
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (out, cache) = block_forward(block, &cur);
        caches.push(cache);
        cur = out;
    }
    let (_, _, h, w) = cur.dim();
    let pooled = global_avg_pool(&cur);
    (pooled, (h, w), stem_z, caches)
}

/// Train-mode forward: batch-norm uses batch statistics and folds them into
/// the running estimates; intermediate activations are cached for backward.
pub fn forward_train(
    params: &mut ModelParams,
    images: &[ImageTensor],
) -> Result<(ForwardOutputs, ForwardCache)> {
    let x = batch_to_array(images, params.config.input_size)?;
    let (pooled, pool_hw, stem_z, blocks) = conv_stack(params, &x);
    let f = params.fc_latent.forward(&pooled);
    let g = params.fc_proj.forward(&f);
    let u = params.fc_hash.forward(&f);
    let (q, bn) = params.bn_hash.forward_train(&u);
    let h = q.mapv(f64::tanh);
    let logits = params.fc_cls.forward(&h);
    Ok((
        ForwardOutputs {
            f: f.clone(),
            g,
            q,
            h: h.clone(),
            logits,
        },
        ForwardCache {
            x,
            stem_z,
            blocks,
            pool_hw,
            pooled,
            f,
            h,
            bn,
        },
    ))
}

/// Eval-mode forward: a pure function of (params, images); batch norm uses
/// the running statistics.
pub fn forward_eval(params: &ModelParams, images: &[ImageTensor]) -> Result<ForwardOutputs> {
    let x = batch_to_array(images, params.config.input_size)?;
    let (pooled, _, _, _) = conv_stack(params, &x);
    let f = params.fc_latent.forward(&pooled);
    let g = params.fc_proj.forward(&f);
    let u = params.fc_hash.forward(&f);
    let q = params.bn_hash.forward_eval(&u);
    let h = q.mapv(f64::tanh);
    let logits = params.fc_cls.forward(&h);
    Ok(ForwardOutputs { f, g, q, h, logits })
}

fn check_shape(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!(
            "{name}: got {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

/// Exact reverse-mode gradients for every trainable parameter, given loss
/// gradients at the heads. The head structure routes terms automatically:
/// gradients entering at `g` touch only the projection head and extractor,
/// while gradients at `q`/`h`/`logits` touch the hashing head, classifier,
/// and extractor.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    heads: &HeadGradients,
) -> Result<Gradients> {
    let rows = cache.h.nrows();
    let dg_dim = params.config.projection_dim;
    let k = params.config.code_bits;
    let c = params.config.identity_count;

    let mut d_h = match &heads.d_h {
        Some(d) => {
            check_shape("d_h", d.dim(), (rows, k))?;
            d.clone()
        }
        None => Array2::zeros((rows, k)),
    };
    let (fc_cls_grads, d_h_cls) = match &heads.d_logits {
        Some(d) => {
            check_shape("d_logits", d.dim(), (rows, c))?;
            let (dx, gw, gb) = params.fc_cls.backward(&cache.h, d);
            (LayerGrads { weight: gw, bias: gb }, Some(dx))
        }
        None => (
            LayerGrads {
                weight: Array2::zeros(params.fc_cls.weight.dim()),
                bias: Array1::zeros(params.fc_cls.bias.len()),
            },
            None,
        ),
    };
    if let Some(dx) = d_h_cls {
        d_h += &dx;
    }

    // through tanh: dq += dh * (1 - h^2)
    let mut d_q = match &heads.d_q {
        Some(d) => {
            check_shape("d_q", d.dim(), (rows, k))?;
            d.clone()
        }
        None => Array2::zeros((rows, k)),
    };
    for ((dq, &dh), &h) in d_q.iter_mut().zip(d_h.iter()).zip(cache.h.iter()) {
        *dq += dh * (1.0 - h * h);
    }

    let (d_u, bn_gamma, bn_beta) = params.bn_hash.backward(&cache.bn, &d_q);
    let (d_f_hash, hash_w, hash_b) = params.fc_hash.backward(&cache.f, &d_u);

    let d_g = match &heads.d_g {
        Some(d) => {
            check_shape("d_g", d.dim(), (rows, dg_dim))?;
            d.clone()
        }
        None => Array2::zeros((rows, dg_dim)),
    };
    let (d_f_proj, proj_w, proj_b) = params.fc_proj.backward(&cache.f, &d_g);

    let d_f = &d_f_hash + &d_f_proj;
    let (d_pooled, lat_w, lat_b) = params.fc_latent.backward(&cache.pooled, &d_f);
    let mut d_cur = global_avg_pool_backward(&d_pooled, cache.pool_hw.0, cache.pool_hw.1);

    let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(params.blocks.len());
    for (block, bc) in params.blocks.iter().zip(&cache.blocks).rev() {
        let d_r = relu_backward(&d_cur, &bc.r);
        let (d_a1, c2_w, c2_b) = block.conv2.backward(&bc.a1, &d_r);
        let d_z1 = relu_backward(&d_a1, &bc.z1);
        let (d_x_main, c1_w, c1_b) = block.conv1.backward(&bc.x_in, &d_z1);
        let (d_x_sc, sc_grads) = match &block.shortcut {
            Some(sc) => {
                let (dx, gw, gb) = sc.backward(&bc.x_in, &d_r);
                (dx, Some(LayerGrads { weight: gw, bias: gb }))
            }
            None => (d_r, None),
        };
        d_cur = &d_x_main + &d_x_sc;
        block_grads.push(BlockGrads {
            conv1: LayerGrads { weight: c1_w, bias: c1_b },
            conv2: LayerGrads { weight: c2_w, bias: c2_b },
            shortcut: sc_grads,
        });
    }
    block_grads.reverse();

    let d_stem_z = relu_backward(&d_cur, &cache.stem_z);
    let (_, stem_w, stem_b) = params.conv_stem.backward(&cache.x, &d_stem_z);

    Ok(Gradients {
        conv_stem: LayerGrads { weight: stem_w, bias: stem_b },
        blocks: block_grads,
        fc_latent: LayerGrads { weight: lat_w, bias: lat_b },
        fc_proj: LayerGrads { weight: proj_w, bias: proj_b },
        fc_hash: LayerGrads { weight: hash_w, bias: hash_b },
        bn_gamma,
        bn_beta,
        fc_cls: LayerGrads { weight: fc_cls_grads.weight, bias: fc_cls_grads.bias },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::make_synthetic_dataset;

    fn tiny_images(n: usize, size: usize) -> Vec<ImageTensor> {
        let ds = make_synthetic_dataset(2, n.max(2), size, 42).unwrap();
        ds.samples()[..n].iter().map(|s| s.image.clone()).collect()
    }

    #[test]
    fn table_shapes_paper_backbone() {
        let cfg = ModelConfig::paper(96, 48, 10);
        assert_eq!(
            cfg.stage_output_sizes(),
            vec![
                (64, 96, 96),
                (64, 96, 96),
                (128, 48, 48),
                (256, 24, 24),
                (512, 12, 12)
            ]
        );
        let cfg32 = ModelConfig::paper(32, 48, 10);
        assert_eq!(
            cfg32.stage_output_sizes(),
            vec![
                (64, 32, 32),
                (64, 32, 32),
                (128, 16, 16),
                (256, 8, 8),
                (512, 4, 4)
            ]
        );
    }

    #[test]
    fn fc_shapes_follow_config() {
        let params = init_model(&ModelConfig::paper(32, 48, 7), 0).unwrap();
        assert_eq!(params.fc_latent.weight.dim(), (512, 512));
        assert_eq!(params.fc_proj.weight.dim(), (512, 128));
        assert_eq!(params.fc_hash.weight.dim(), (512, 48));
        assert_eq!(params.fc_cls.weight.dim(), (48, 7));

        let tiny = init_model(&ModelConfig::tiny(32, 16, 10), 0).unwrap();
        assert_eq!(tiny.fc_latent.weight.dim(), (64, 128));
        assert_eq!(tiny.fc_hash.weight.dim(), (128, 16));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny(16, 8, 3);
        let a = init_model(&cfg, 5).unwrap();
        let b = init_model(&cfg, 5).unwrap();
        for ((_, _, x), (_, _, y)) in a.trainable().iter().zip(b.trainable().iter()) {
            assert_eq!(x, y);
        }
        let c = init_model(&cfg, 6).unwrap();
        assert_ne!(
            a.trainable()[0].2, c.trainable()[0].2,
            "different seed, different weights"
        );
    }

    #[test]
    fn forward_shapes_and_tanh_range() {
        let cfg = ModelConfig::tiny(16, 8, 4);
        let mut params = init_model(&cfg, 1).unwrap();
        let imgs = tiny_images(6, 16);
        let (out, _) = forward_train(&mut params, &imgs).unwrap();
        assert_eq!(out.f.dim(), (6, 128));
        assert_eq!(out.g.dim(), (6, 128));
        assert_eq!(out.q.dim(), (6, 8));
        assert_eq!(out.h.dim(), (6, 8));
        assert_eq!(out.logits.dim(), (6, 4));
        assert!(out.h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn eval_forward_is_pure() {
        let cfg = ModelConfig::tiny(16, 8, 4);
        let params = init_model(&cfg, 1).unwrap();
        let imgs = tiny_images(3, 16);
        let a = forward_eval(&params, &imgs).unwrap();
        let b = forward_eval(&params, &imgs).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn wrong_input_size_is_reported() {
        let cfg = ModelConfig::tiny(16, 8, 4);
        let params = init_model(&cfg, 1).unwrap();
        let imgs = tiny_images(2, 32);
        match forward_eval(&params, &imgs) {
            Err(Error::WrongInputSize { expected: 16, .. }) => {}
            other => panic!("expected WrongInputSize, got {other:?}"),
        }
    }

    #[test]
    fn zero_head_gradients_give_zero_param_gradients() {
        let cfg = ModelConfig::tiny(16, 8, 4);
        let mut params = init_model(&cfg, 1).unwrap();
        let imgs = tiny_images(4, 16);
        let (_, cache) = forward_train(&mut params, &imgs).unwrap();
        let grads = backward(&params, &cache, &HeadGradients::default()).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn head_routing_is_structural() {
        let cfg = ModelConfig::tiny(16, 8, 4);
        let mut params = init_model(&cfg, 1).unwrap();
        let imgs = tiny_images(4, 16);
        let (out, cache) = forward_train(&mut params, &imgs).unwrap();

        // gradient entering only at g: hashing head and classifier untouched
        let heads = HeadGradients {
            d_g: Some(Array2::ones(out.g.dim())),
            ..Default::default()
        };
        let grads = backward(&params, &cache, &heads).unwrap();
        let zero = |l: &LayerGrads| {
            l.weight.iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0)
        };
        assert!(zero(&grads.fc_hash) && zero(&grads.fc_cls));
        assert!(grads.bn_gamma.iter().all(|&v| v == 0.0));
        assert!(!zero(&grads.fc_proj), "projection head must receive gradient");
        assert!(!zero(&grads.conv_stem), "extractor must receive gradient");

        // gradient entering only at q and logits: projection head untouched
        let heads = HeadGradients {
            d_q: Some(Array2::ones(out.q.dim())),
            d_logits: Some(Array2::ones(out.logits.dim())),
            ..Default::default()
        };
        let grads = backward(&params, &cache, &heads).unwrap();
        assert!(zero(&grads.fc_proj));
        assert!(!zero(&grads.fc_hash) && !zero(&grads.fc_cls));
        assert!(!zero(&grads.conv_stem));
    }
}
