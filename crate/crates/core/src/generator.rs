//! x4 SR generators: the RRDB backbone (residual-in-residual dense blocks,
//! nearest-upsample + conv tail) and the Se-RRDB variant in which selected
//! trunk blocks are replaced by semantic-aware fusion blocks fed with
//! semantics extracted from the low-resolution input.
//!
//! The discriminator and extractor are training-time companions only: plain
//! RRDB inference needs neither, and switching the training discriminator
//! never changes the generator's parameter count.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::extractor::SemanticMap;
use crate::nn::{leaky_relu, upsample_nearest_x2, Conv2d, Params};
use crate::sefb::{FusionBlock, FusionMode, SefbConfig};

pub const SCALE_FACTOR: usize = 4;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub num_blocks: usize,
    pub feature_channels: usize,
    pub growth_channels: usize,
    pub residual_scale: f64,
    /// 1-based trunk block indices replaced by fusion blocks (Se-RRDB).
    #[serde(default)]
    pub sefb_block_indices: Vec<usize>,
    /// Pixel-shuffle upsampling instead of nearest+conv.
    #[serde(default)]
    pub pixel_shuffle: bool,
    #[serde(default = "default_heads")]
    pub sefb_heads: usize,
    /// Semantic channel width for the Se-RRDB fusion blocks.
    #[serde(default)]
    pub semantic_channels: usize,
}

fn default_heads() -> usize {
    4
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_blocks: 23,
            feature_channels: 64,
            growth_channels: 32,
            residual_scale: 0.2,
            sefb_block_indices: Vec::new(),
            pixel_shuffle: false,
            sefb_heads: 4,
            semantic_channels: 1024,
        }
    }
}

impl GenConfig {
    /// Tiny preset for desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            num_blocks: 4,
            feature_channels: 32,
            growth_channels: 16,
            ..Default::default()
        }
    }

    /// The appendix Se-RRDB preset: 11 blocks with the 5th and 11th fused.
    pub fn se_rrdb_preset() -> Self {
        Self {
            num_blocks: 11,
            sefb_block_indices: vec![5, 11],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::invalid_spec("num_blocks must be >= 1".to_string()));
        }
        for &i in &self.sefb_block_indices {
            if i == 0 || i > self.num_blocks {
                return Err(Error::invalid_spec(format!(
                    "sefb block index {i} outside 1..={}",
                    self.num_blocks
                )));
            }
        }
        Ok(())
    }

    pub fn is_semantic(&self) -> bool {
        !self.sefb_block_indices.is_empty()
    }
}

/// Five densely connected convs with residual scaling.
#[derive(Debug)]
struct DenseBlock {
    convs: [Conv2d; 5],
    scale: f64,
}

impl DenseBlock {
    fn new(p: &Params, name: &str, nf: usize, gc: usize, scale: f64) -> Result<Self> {
        // residual-branch convs use the small-init convention
        let convs = [
            Conv2d::new(p, &format!("{name}.conv1"), nf, gc, 3, 1, 1, 0.1)?,
            Conv2d::new(p, &format!("{name}.conv2"), nf + gc, gc, 3, 1, 1, 0.1)?,
            Conv2d::new(p, &format!("{name}.conv3"), nf + 2 * gc, gc, 3, 1, 1, 0.1)?,
            Conv2d::new(p, &format!("{name}.conv4"), nf + 3 * gc, gc, 3, 1, 1, 0.1)?,
            Conv2d::new(p, &format!("{name}.conv5"), nf + 4 * gc, nf, 3, 1, 1, 0.1)?,
        ];
        Ok(Self { convs, scale })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x1 = leaky_relu(&self.convs[0].forward(x)?, LRELU_SLOPE)?;
        let x2 = leaky_relu(
            &self.convs[1].forward(&Tensor::cat(&[x, &x1], 1)?)?,
            LRELU_SLOPE,
        )?;
        let x3 = leaky_relu(
            &self.convs[2].forward(&Tensor::cat(&[x, &x1, &x2], 1)?)?,
            LRELU_SLOPE,
        )?;
        let x4 = leaky_relu(
            &self.convs[3].forward(&Tensor::cat(&[x, &x1, &x2, &x3], 1)?)?,
            LRELU_SLOPE,
        )?;
        let x5 = self.convs[4].forward(&Tensor::cat(&[x, &x1, &x2, &x3, &x4], 1)?)?;
        Ok((x5.affine(self.scale, 0.0)? + x)?)
    }
}

/// Residual-in-residual dense block: three dense blocks, outer residual.
#[derive(Debug)]
struct Rrdb {
    dense: [DenseBlock; 3],
    scale: f64,
}

impl Rrdb {
    fn new(p: &Params, name: &str, nf: usize, gc: usize, scale: f64) -> Result<Self> {
        Ok(Self {
            dense: [
                DenseBlock::new(p, &format!("{name}.db1"), nf, gc, scale)?,
                DenseBlock::new(p, &format!("{name}.db2"), nf, gc, scale)?,
                DenseBlock::new(p, &format!("{name}.db3"), nf, gc, scale)?,
            ],
            scale,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for d in &self.dense {
            h = d.forward(&h)?;
        }
        Ok((h.affine(self.scale, 0.0)? + x)?)
    }
}

#[derive(Debug)]
enum TrunkBlock {
    Rrdb(Rrdb),
    Fusion(FusionBlock),
}

#[derive(Debug)]
pub struct Generator {
    pub cfg: GenConfig,
    conv_first: Conv2d,
    blocks: Vec<TrunkBlock>,
    trunk_conv: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    hr_conv: Conv2d,
    conv_last: Conv2d,
}

impl Generator {
    pub fn new(p: &Params, cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let nf = cfg.feature_channels;
        let gc = cfg.growth_channels;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 1..=cfg.num_blocks {
            if cfg.sefb_block_indices.contains(&i) {
                // trunk fusion keeps the query at the semantic width; this is
                // the parameter-heavy in-generator fusion whose cost (unlike
                // the discriminator-side SeFB) is paid at inference
                let sefb = SefbConfig {
                    image_channels: nf,
                    semantic_channels: cfg.semantic_channels,
                    embed_dim: cfg.semantic_channels,
                    heads: cfg.sefb_heads,
                    groupnorm_groups: 8,
                    out_channels: nf,
                };
                blocks.push(TrunkBlock::Fusion(FusionBlock::new(
                    p,
                    &format!("block{i}.sefb"),
                    FusionMode::Sefb,
                    sefb,
                )?));
            } else {
                blocks.push(TrunkBlock::Rrdb(Rrdb::new(
                    p,
                    &format!("block{i}"),
                    nf,
                    gc,
                    cfg.residual_scale,
                )?));
            }
        }
        let up_out = if cfg.pixel_shuffle { nf * 4 } else { nf };
        Ok(Self {
            cfg: cfg.clone(),
            conv_first: Conv2d::new(p, "conv_first", 3, nf, 3, 1, 1, 1.0)?,
            blocks,
            trunk_conv: Conv2d::new(p, "trunk_conv", nf, nf, 3, 1, 1, 1.0)?,
            up1: Conv2d::new(p, "up1", nf, up_out, 3, 1, 1, 1.0)?,
            up2: Conv2d::new(p, "up2", nf, up_out, 3, 1, 1, 1.0)?,
            hr_conv: Conv2d::new(p, "hr_conv", nf, nf, 3, 1, 1, 1.0)?,
            conv_last: Conv2d::new(p, "conv_last", nf, 3, 3, 1, 1, 1.0)?,
        })
    }

    fn upsample(&self, conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
        if self.cfg.pixel_shuffle {
            let y = conv.forward(x)?;
            let (b, c, h, w) = y.dims4()?;
            let c_out = c / 4;
            // depth-to-space, r = 2
            let y = y.reshape((b, c_out, 2, 2, h, w))?;
            let y = y.permute((0, 1, 4, 2, 5, 3))?.contiguous()?;
            leaky_relu(&y.reshape((b, c_out, 2 * h, 2 * w))?, LRELU_SLOPE)
        } else {
            leaky_relu(&conv.forward(&upsample_nearest_x2(x)?)?, LRELU_SLOPE)
        }
    }

    /// Unclamped x4 output (training path). Se-RRDB configs require the
    /// semantics of the low-resolution input; plain RRDB forbids them.
    pub fn forward(&self, lr: &Tensor, semantics: Option<&SemanticMap>) -> Result<Tensor> {
        if self.cfg.is_semantic() && semantics.is_none() {
            return Err(Error::contract(
                "se-rrdb generator requires low-resolution semantics".to_string(),
            ));
        }
        let shallow = self.conv_first.forward(lr)?;
        let mut h = shallow.clone();
        for block in &self.blocks {
            h = match block {
                TrunkBlock::Rrdb(b) => b.forward(&h)?,
                TrunkBlock::Fusion(fb) => {
                    let s = semantics.expect("checked above");
                    fb.forward(&h, s, None)?
                }
            };
        }
        let trunk = self.trunk_conv.forward(&h)?;
        let mut x = (trunk + shallow)?;
        x = self.upsample(&self.up1, &x)?;
        x = self.upsample(&self.up2, &x)?;
        x = leaky_relu(&self.hr_conv.forward(&x)?, LRELU_SLOPE)?;
        self.conv_last.forward(&x)
    }

    /// Inference: forward + clamp to [0,1].
    pub fn infer(&self, lr: &Tensor) -> Result<Tensor> {
        Ok(self.forward(lr, None)?.clamp(0f32, 1f32)?)
    }
}

/// Exact trainable parameter count for a generator spec.
pub fn count_parameters(cfg: &GenConfig) -> Result<usize> {
    let p = Params::new(&candle_core::Device::Cpu, candle_core::DType::F32, 0, true);
    let _ = Generator::new(&p, cfg)?;
    Ok(p.num_params())
}
