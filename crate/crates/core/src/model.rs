//! Small encoder-decoder segmentation network with skip connections.
//!
//! The network maps an image `[in_channels, H, W]` to per-voxel class
//! probabilities `[classes, H, W]`. It is deliberately tiny: a stem
//! convolution, `depth` stride-2 downsampling convolutions, a bottleneck
//! convolution, and a mirrored decoder of transposed convolutions with
//! skip concatenations, finished by a 1x1 classifier head and a channel
//! softmax. All parameters live in autodiff tensors so the whole forward
//! pass is differentiable.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::constraints::ClassProbs;
use crate::error::{Error, Result};
use crate::io::{put_f64, put_u32, put_u64, ByteReader};
use crate::rng::stream;
use crate::scalar::Real;
use rand::Rng;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SLSGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters. The channel width at pyramid level `i`
/// is `base_width * 2^i`, so the bottleneck runs at `base_width * 2^depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegModelConfig {
    /// Channels of the input image.
    pub in_channels: usize,
    /// Channel width at full resolution.
    pub base_width: usize,
    /// Number of stride-2 downsampling stages.
    pub depth: usize,
    /// Number of output classes (softmax channels), background included.
    pub classes: usize,
    /// Seed for the deterministic parameter initialization.
    pub seed: u64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            in_channels: 1,
            base_width: 8,
            depth: 2,
            classes: 3,
            seed: 0,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.classes < 2 {
            return Err(Error::Parameter(format!(
                "need in_channels >= 1, base_width >= 1, classes >= 2, got {self:?}"
            )));
        }
        // 2^depth must fit comfortably in the spatial dimensions.
        if self.depth > 16 {
            return Err(Error::Parameter(format!("depth {} too large", self.depth)));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// One convolution layer: weight `[Co, Ci, Kh, Kw]`, bias `[Co]`.
struct Conv<T: Real> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    pad: usize,
}

impl<T: Real> Conv<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }

    fn push_params(&self, out: &mut Vec<Tensor<T>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

/// One transposed convolution layer: weight `[Ci, Co, Kh, Kw]`, bias `[Co]`.
struct ConvT<T: Real> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
}

impl<T: Real> ConvT<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv_transpose2d(&self.weight, &self.bias, self.stride)
    }
}

/// Encoder-decoder segmentation model with deterministic initialization.
pub struct SegModel<T: Real> {
    config: SegModelConfig,
    stem: Conv<T>,
    downs: Vec<Conv<T>>,
    mid: Conv<T>,
    /// Decoder stages ordered from the deepest level up to full resolution.
    ups: Vec<ConvT<T>>,
    decs: Vec<Conv<T>>,
    head: Conv<T>,
}

/// Kaiming-style fan-in uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
fn init_weight<T: Real>(shape: &[usize], fan_in: usize, seed: u64, layer: u64) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = stream(&[seed, 0x6d6f_64656c, layer]);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
            T::from_f64(u * bound).unwrap()
        })
        .collect();
    Tensor::param(shape, data).expect("init shape is consistent by construction")
}

fn zero_bias<T: Real>(co: usize) -> Tensor<T> {
    Tensor::param(&[co], vec![T::zero(); co]).expect("bias shape is consistent")
}

fn make_conv<T: Real>(
    seed: u64,
    layer: &mut u64,
    co: usize,
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Conv<T> {
    let w = init_weight(&[co, ci, k, k], ci * k * k, seed, *layer);
    *layer += 1;
    Conv { weight: w, bias: zero_bias(co), stride, pad }
}

impl<T: Real> SegModel<T> {
    /// Builds the model and initializes all parameters from `config.seed`.
    /// The same config always yields bit-identical parameters.
    pub fn new(config: SegModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut layer = 0u64;

        let stem = make_conv(seed, &mut layer, config.width_at(0), config.in_channels, 3, 1, 1);
        let downs: Vec<Conv<T>> = (0..config.depth)
            .map(|i| make_conv(seed, &mut layer, config.width_at(i + 1), config.width_at(i), 3, 2, 1))
            .collect();
        let bw = config.width_at(config.depth);
        let mid = make_conv(seed, &mut layer, bw, bw, 3, 1, 1);

        let mut ups = Vec::with_capacity(config.depth);
        let mut decs = Vec::with_capacity(config.depth);
        for i in (0..config.depth).rev() {
            let ci = config.width_at(i + 1);
            let co = config.width_at(i);
            // Transposed conv weight layout is [Ci, Co, Kh, Kw].
            let w = init_weight(&[ci, co, 2, 2], ci * 2 * 2, seed, layer);
            layer += 1;
            ups.push(ConvT { weight: w, bias: zero_bias(co), stride: 2 });
            decs.push(make_conv(seed, &mut layer, co, 2 * co, 3, 1, 1));
        }
        let head = make_conv(seed, &mut layer, config.classes, config.width_at(0), 1, 1, 0);

        Ok(SegModel { config, stem, downs, mid, ups, decs, head })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    /// All trainable tensors in a stable order (weight then bias per layer,
    /// encoder to decoder). Checkpoints and optimizers rely on this order.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.stem.push_params(&mut out);
        for d in &self.downs {
            d.push_params(&mut out);
        }
        self.mid.push_params(&mut out);
        for i in 0..self.ups.len() {
            out.push(self.ups[i].weight.clone());
            out.push(self.ups[i].bias.clone());
            self.decs[i].push_params(&mut out);
        }
        self.head.push_params(&mut out);
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "seg_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.config.in_channels, 0, 0],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!(
                "spatial dims {h}x{w} must be positive and divisible by 2^depth = {div}"
            )));
        }
        Ok((h, w))
    }

    /// Forward pass producing a probability simplex per voxel.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ClassProbs<T>> {
        let probs = self.forward_tensor(image)?;
        ClassProbs::new(probs)
    }

    /// Forward pass as a raw `[classes, H, W]` tensor for loss pipelines
    /// that keep building on the autodiff graph.
    pub fn forward_tensor(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let mut acts = Vec::with_capacity(self.config.depth + 1);
        let mut x = self.stem.apply(image)?.relu();
        for down in &self.downs {
            acts.push(x.clone());
            x = down.apply(&x)?.relu();
        }
        x = self.mid.apply(&x)?.relu();
        for (up, dec) in self.ups.iter().zip(&self.decs) {
            let risen = up.apply(&x)?;
            let skip = acts.pop().expect("one skip per decoder stage");
            x = dec.apply(&risen.concat_channels(&skip)?)?.relu();
        }
        let logits = self.head.apply(&x)?;
        logits.softmax(0)
    }

    /// Hard segmentation: per-voxel argmax class, ties to the lowest id.
    pub fn predict_mask(&self, image: &Tensor<T>) -> Result<Vec<u8>> {
        Ok(self.forward(image)?.argmax_labels())
    }

    /// Serializes config and parameters. Layout: magic, format version,
    /// config block, then each parameter tensor as rank/dims/f64 data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, self.config.in_channels as u32);
        put_u32(&mut buf, self.config.base_width as u32);
        put_u32(&mut buf, self.config.depth as u32);
        put_u32(&mut buf, self.config.classes as u32);
        put_u64(&mut buf, self.config.seed);
        for p in self.parameters() {
            buf.push(p.shape().len() as u8);
            for &d in p.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in p.to_vec() {
                put_f64(&mut buf, v.to_f64().expect("finite parameter"));
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`SegModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path)?;
        let mut r = ByteReader::new(&raw);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let config = SegModelConfig {
            in_channels: r.u32("in_channels")? as usize,
            base_width: r.u32("base_width")? as usize,
            depth: r.u32("depth")? as usize,
            classes: r.u32("classes")? as usize,
            seed: r.u64("seed")?,
        };
        let model = SegModel::new(config)?;
        for p in model.parameters() {
            let rank = r.u8("tensor rank")? as usize;
            if rank != p.shape().len() {
                return Err(Error::Parse {
                    offset: r.offset(),
                    msg: format!("tensor rank {rank}, expected {}", p.shape().len()),
                });
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("tensor dim")? as usize);
            }
            if dims != p.shape() {
                return Err(Error::Parse {
                    offset: r.offset(),
                    msg: format!("tensor dims {dims:?}, expected {:?}", p.shape()),
                });
            }
            let data = r.f64_vec(p.len(), "tensor data")?;
            let converted: Vec<T> = data
                .iter()
                .map(|&v| T::from_f64(v))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Parse {
                    offset: r.offset(),
                    msg: "parameter value not representable".into(),
                })?;
            p.with_data_mut(|d| d.copy_from_slice(&converted));
        }
        r.finish()?;
        Ok(model)
    }
}

/// Closed-form parameter count for a given config; mirrors the layer list
/// in [`SegModel::new`] so tests can cross-check construction.
pub fn expected_param_count(config: &SegModelConfig) -> usize {
    let w = |l: usize| config.base_width << l;
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let mut n = conv(w(0), config.in_channels, 3);
    for i in 0..config.depth {
        n += conv(w(i + 1), w(i), 3);
    }
    n += conv(w(config.depth), w(config.depth), 3);
    for i in (0..config.depth).rev() {
        n += w(i + 1) * w(i) * 4 + w(i); // transposed conv
        n += conv(w(i), 2 * w(i), 3);
    }
    n + conv(config.classes, w(0), 1)
}
