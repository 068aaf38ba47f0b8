//! Semantic-conditioned discriminators at three granularities — patch
//! (PatchGAN-style, logits at H/8), pixel (U-Net, logits at H x W) and image
//! (VGG-style, one logit per image) — plus unconditioned baselines with the
//! same backbones and channel widths. All heads emit raw logits; the losses
//! are BCE-with-logits.

use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::extractor::SemanticMap;
use crate::nn::{
    bilinear_resize, leaky_relu, BatchNorm2d, Conv2d, Linear, Params, SpectralConv2d, Taps,
};
use crate::sefb::{FusionBlock, FusionMode, SefbConfig};

const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscFamily {
    PatchSed,
    UnetSed,
    VggSed,
    PatchVanilla,
    UnetVanilla,
    VggVanilla,
}

impl DiscFamily {
    pub fn is_sed(self) -> bool {
        matches!(self, Self::PatchSed | Self::UnetSed | Self::VggSed)
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Self::PatchSed | Self::PatchVanilla => Granularity::Patch,
            Self::UnetSed | Self::UnetVanilla => Granularity::Pixel,
            Self::VggSed | Self::VggVanilla => Granularity::Image,
        }
    }
}

impl FromStr for DiscFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_sed" => Ok(Self::PatchSed),
            "unet_sed" => Ok(Self::UnetSed),
            "vgg_sed" => Ok(Self::VggSed),
            "patch_vanilla" => Ok(Self::PatchVanilla),
            "unet_vanilla" => Ok(Self::UnetVanilla),
            "vgg_vanilla" => Ok(Self::VggVanilla),
            other => Err(Error::config(format!("unknown discriminator family {other:?}"))),
        }
    }
}

impl std::fmt::Display for DiscFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::PatchSed => "patch_sed",
            Self::UnetSed => "unet_sed",
            Self::VggSed => "vgg_sed",
            Self::PatchVanilla => "patch_vanilla",
            Self::UnetVanilla => "unet_vanilla",
            Self::VggVanilla => "vgg_vanilla",
        };
        write!(f, "{s}")
    }
}

/// Logit shape per discriminator family for an H x W input:
/// patch -> (B,1,H/8,W/8), pixel -> (B,1,H,W), image -> (B,1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Patch,
    Pixel,
    Image,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiscConfig {
    pub family: DiscFamily,
    pub base_channels: usize,
    pub spectral_norm: bool,
    /// How many of the shallow encoder stages use fusion blocks (sed only).
    pub sefb_stages: usize,
    /// Fixed input size for the VGG families.
    pub input_size: usize,
    pub fusion_mode: FusionMode,
    pub sefb_heads: usize,
    pub sefb_embed_dim: usize,
    pub sefb_groupnorm_groups: usize,
    /// Channel width of the semantic maps this discriminator is built for.
    pub semantic_channels: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            family: DiscFamily::PatchSed,
            base_channels: 64,
            spectral_norm: true,
            sefb_stages: 2,
            input_size: 256,
            fusion_mode: FusionMode::Sefb,
            sefb_heads: 4,
            sefb_embed_dim: 0,
            sefb_groupnorm_groups: 8,
            semantic_channels: 1024,
        }
    }
}

impl DiscConfig {
    fn sefb_cfg(&self, image_channels: usize) -> SefbConfig {
        SefbConfig {
            image_channels,
            semantic_channels: self.semantic_channels,
            embed_dim: self.sefb_embed_dim,
            heads: self.sefb_heads,
            groupnorm_groups: self.sefb_groupnorm_groups,
            out_channels: 0,
        }
    }
}

/// A conditioned stage is either a fusion block (sed) or a plain
/// conv-BN-LeakyReLU block of matched width (vanilla).
#[derive(Debug)]
enum Stage {
    Fusion(FusionBlock),
    PlainBn { conv: Conv2d, bn: BatchNorm2d },
    Plain { conv: SpectralConv2d },
}

impl Stage {
    fn forward(
        &self,
        p: &Params,
        x: &Tensor,
        s: Option<&SemanticMap>,
        train: bool,
        taps: Option<&mut Taps>,
        tap_prefix: &str,
    ) -> Result<Tensor> {
        match self {
            Stage::Fusion(fb) => {
                let s = s.ok_or_else(|| {
                    Error::contract("sed discriminator forward requires a semantic map".to_string())
                })?;
                let mut local = Taps::new();
                let out = fb.forward(x, s, Some(&mut local))?;
                if let Some(taps) = taps {
                    for (k, v) in local.0 {
                        taps.record(&format!("{tap_prefix}.{k}"), &v);
                    }
                }
                Ok(out)
            }
            Stage::PlainBn { conv, bn } => {
                let y = bn.forward(p, &conv.forward(x)?, train)?;
                if let Some(taps) = taps {
                    taps.record(&format!("{tap_prefix}.bn"), &y);
                }
                leaky_relu(&y, LRELU_SLOPE)
            }
            Stage::Plain { conv } => leaky_relu(&conv.forward(p, x)?, LRELU_SLOPE),
        }
    }
}

/// PatchGAN-style discriminator: stem conv, three fusion stages interleaved
/// with stride-2 convs (64 -> 128 -> 256 -> 256), 1x1 head. Logits at H/8.
#[derive(Debug)]
pub struct PatchDisc {
    stem: Conv2d,
    stages: [Stage; 3],
    downs: [Conv2d; 3],
    head: Conv2d,
}

impl PatchDisc {
    fn new(p: &Params, cfg: &DiscConfig, sed: bool) -> Result<Self> {
        let c = cfg.base_channels;
        let widths = [c, 2 * c, 4 * c];
        let mk_stage = |i: usize, ch: usize| -> Result<Stage> {
            if sed {
                Ok(Stage::Fusion(FusionBlock::new(
                    p,
                    &format!("fb{}", i + 1),
                    cfg.fusion_mode,
                    cfg.sefb_cfg(ch),
                )?))
            } else {
                Ok(Stage::PlainBn {
                    conv: Conv2d::new(p, &format!("block{}.conv", i + 1), ch, ch, 3, 1, 1, 1.0)?,
                    bn: BatchNorm2d::new(p, &format!("block{}", i + 1), ch)?,
                })
            }
        };
        Ok(Self {
            stem: Conv2d::new(p, "stem", 3, c, 3, 1, 1, 1.0)?,
            stages: [mk_stage(0, widths[0])?, mk_stage(1, widths[1])?, mk_stage(2, widths[2])?],
            downs: [
                Conv2d::new(p, "down1", c, 2 * c, 3, 2, 1, 1.0)?,
                Conv2d::new(p, "down2", 2 * c, 4 * c, 3, 2, 1, 1.0)?,
                Conv2d::new(p, "down3", 4 * c, 4 * c, 3, 2, 1, 1.0)?,
            ],
            head: Conv2d::new(p, "head", 4 * c, 1, 1, 1, 0, 1.0)?,
        })
    }

    fn forward(
        &self,
        p: &Params,
        img: &Tensor,
        s: Option<&SemanticMap>,
        train: bool,
        mut taps: Option<&mut Taps>,
    ) -> Result<Tensor> {
        let (_b, _c, h, w) = img.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!(
                "patch discriminator input {h}x{w} must be divisible by 8"
            )));
        }
        let mut x = leaky_relu(&self.stem.forward(img)?, LRELU_SLOPE)?;
        for i in 0..3 {
            let prefix = match self.stages[i] {
                Stage::Fusion(_) => ["fb1", "fb2", "fb3"][i],
                _ => ["block1", "block2", "block3"][i],
            };
            x = self.stages[i].forward(p, &x, s, train, taps.as_deref_mut(), prefix)?;
            x = leaky_relu(&self.downs[i].forward(&x)?, LRELU_SLOPE)?;
        }
        self.head.forward(&x)
    }
}

/// U-Net pixel-wise discriminator (three downs, three ups with additive
/// skips). The first `sefb_stages` encoder stages are fusion blocks in the
/// sed variant; interior convs carry spectral norm when enabled.
#[derive(Debug)]
pub struct UnetDisc {
    stem: Conv2d,
    enc1: Stage,
    enc2: Stage,
    enc3: Stage,
    down1: SpectralConv2d,
    down2: SpectralConv2d,
    down3: SpectralConv2d,
    body: SpectralConv2d,
    up1: SpectralConv2d,
    up2: SpectralConv2d,
    up3: SpectralConv2d,
    tail: SpectralConv2d,
    head: Conv2d,
}

impl UnetDisc {
    fn new(p: &Params, cfg: &DiscConfig, sed: bool) -> Result<Self> {
        let c = cfg.base_channels;
        let sn = cfg.spectral_norm;
        let mk_stage = |i: usize, ch: usize| -> Result<Stage> {
            if sed && i < cfg.sefb_stages {
                Ok(Stage::Fusion(FusionBlock::new(
                    p,
                    &format!("fb{}", i + 1),
                    cfg.fusion_mode,
                    cfg.sefb_cfg(ch),
                )?))
            } else {
                Ok(Stage::Plain {
                    conv: SpectralConv2d::new(p, &format!("enc{}", i + 1), ch, ch, 3, 1, 1, sn)?,
                })
            }
        };
        Ok(Self {
            stem: Conv2d::new(p, "stem", 3, c, 3, 1, 1, 1.0)?,
            enc1: mk_stage(0, c)?,
            enc2: mk_stage(1, 2 * c)?,
            enc3: mk_stage(2, 4 * c)?,
            down1: SpectralConv2d::new(p, "down1", c, 2 * c, 3, 2, 1, sn)?,
            down2: SpectralConv2d::new(p, "down2", 2 * c, 4 * c, 3, 2, 1, sn)?,
            down3: SpectralConv2d::new(p, "down3", 4 * c, 8 * c, 3, 2, 1, sn)?,
            body: SpectralConv2d::new(p, "body", 8 * c, 8 * c, 3, 1, 1, sn)?,
            up1: SpectralConv2d::new(p, "up1", 8 * c, 4 * c, 3, 1, 1, sn)?,
            up2: SpectralConv2d::new(p, "up2", 4 * c, 2 * c, 3, 1, 1, sn)?,
            up3: SpectralConv2d::new(p, "up3", 2 * c, c, 3, 1, 1, sn)?,
            tail: SpectralConv2d::new(p, "tail", c, c, 3, 1, 1, sn)?,
            head: Conv2d::new(p, "head", c, 1, 3, 1, 1, 1.0)?,
        })
    }

    fn forward(
        &self,
        p: &Params,
        img: &Tensor,
        s: Option<&SemanticMap>,
        train: bool,
        mut taps: Option<&mut Taps>,
    ) -> Result<Tensor> {
        let (_b, _c, h, w) = img.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!(
                "unet discriminator input {h}x{w} must be divisible by 16"
            )));
        }
        let x0 = leaky_relu(&self.stem.forward(img)?, LRELU_SLOPE)?;
        let e1 = self.enc1.forward(p, &x0, s, train, taps.as_deref_mut(), "fb1")?;
        let x1 = leaky_relu(&self.down1.forward(p, &e1)?, LRELU_SLOPE)?;
        let e2 = self.enc2.forward(p, &x1, s, train, taps.as_deref_mut(), "fb2")?;
        let x2 = leaky_relu(&self.down2.forward(p, &e2)?, LRELU_SLOPE)?;
        let e3 = self.enc3.forward(p, &x2, s, train, taps.as_deref_mut(), "fb3")?;
        let x3 = leaky_relu(&self.down3.forward(p, &e3)?, LRELU_SLOPE)?;
        let b = leaky_relu(&self.body.forward(p, &x3)?, LRELU_SLOPE)?;

        let u1 = bilinear_resize(&b, e3.dims()[2], e3.dims()[3])?;
        let u1 = (leaky_relu(&self.up1.forward(p, &u1)?, LRELU_SLOPE)? + &e3)?;
        let u2 = bilinear_resize(&u1, e2.dims()[2], e2.dims()[3])?;
        let u2 = (leaky_relu(&self.up2.forward(p, &u2)?, LRELU_SLOPE)? + &e2)?;
        let u3 = bilinear_resize(&u2, e1.dims()[2], e1.dims()[3])?;
        let u3 = (leaky_relu(&self.up3.forward(p, &u3)?, LRELU_SLOPE)? + &e1)?;
        let t = leaky_relu(&self.tail.forward(p, &u3)?, LRELU_SLOPE)?;
        self.head.forward(&t)
    }
}

/// VGG-style image-wise discriminator: stride-halving stages with fusion
/// blocks after the first two, global average pooling, two-layer head.
/// Input must match the configured fixed size.
#[derive(Debug)]
pub struct VggDisc {
    input_size: usize,
    convs_a: Vec<Conv2d>,
    convs_b: Vec<Conv2d>,
    stages: Vec<Option<Stage>>,
    fc1: Linear,
    fc2: Linear,
}

impl VggDisc {
    fn widths(c: usize, n: usize) -> Vec<usize> {
        (0..n).map(|i| c * (1 << i.min(3))).collect()
    }

    fn new(p: &Params, cfg: &DiscConfig, sed: bool) -> Result<Self> {
        let size = cfg.input_size;
        if size < 16 || !size.is_power_of_two() {
            return Err(Error::config(format!(
                "vgg discriminator input_size {size} must be a power of two >= 16"
            )));
        }
        // halve until 4x4
        let n_stages = (size / 4).trailing_zeros() as usize;
        let widths = Self::widths(cfg.base_channels, n_stages);
        let mut convs_a = Vec::new();
        let mut convs_b = Vec::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &wch) in widths.iter().enumerate() {
            convs_a.push(Conv2d::new(p, &format!("s{i}.conv_a"), cin, wch, 3, 1, 1, 1.0)?);
            convs_b.push(Conv2d::new(p, &format!("s{i}.conv_b"), wch, wch, 3, 2, 1, 1.0)?);
            let stage = if i < 2 {
                Some(if sed {
                    Stage::Fusion(FusionBlock::new(
                        p,
                        &format!("fb{}", i + 1),
                        cfg.fusion_mode,
                        cfg.sefb_cfg(wch),
                    )?)
                } else {
                    Stage::PlainBn {
                        conv: Conv2d::new(p, &format!("block{}.conv", i + 1), wch, wch, 3, 1, 1, 1.0)?,
                        bn: BatchNorm2d::new(p, &format!("block{}", i + 1), wch)?,
                    }
                })
            } else {
                None
            };
            stages.push(stage);
            cin = wch;
        }
        let last = *widths.last().expect("at least one stage");
        Ok(Self {
            input_size: size,
            convs_a,
            convs_b,
            stages,
            fc1: Linear::new(p, "fc1", last, 100)?,
            fc2: Linear::new(p, "fc2", 100, 1)?,
        })
    }

    fn forward(
        &self,
        p: &Params,
        img: &Tensor,
        s: Option<&SemanticMap>,
        train: bool,
        mut taps: Option<&mut Taps>,
    ) -> Result<Tensor> {
        let (_b, _c, h, w) = img.dims4()?;
        if h != self.input_size || w != self.input_size {
            return Err(Error::shape(format!(
                "vgg discriminator expects {0}x{0} input, got {h}x{w}",
                self.input_size
            )));
        }
        let mut x = img.clone();
        for i in 0..self.convs_a.len() {
            x = leaky_relu(&self.convs_a[i].forward(&x)?, LRELU_SLOPE)?;
            x = leaky_relu(&self.convs_b[i].forward(&x)?, LRELU_SLOPE)?;
            if let Some(stage) = &self.stages[i] {
                let prefix = match stage {
                    Stage::Fusion(_) => ["fb1", "fb2"][i],
                    _ => ["block1", "block2"][i],
                };
                x = stage.forward(p, &x, s, train, taps.as_deref_mut(), prefix)?;
            }
        }
        let pooled = x.mean(3)?.mean(2)?; // (B, C)
        let h1 = leaky_relu(&self.fc1.forward(&pooled)?, LRELU_SLOPE)?;
        self.fc2.forward(&h1)
    }
}

#[derive(Debug)]
enum Net {
    Patch(PatchDisc),
    Unet(UnetDisc),
    Vgg(VggDisc),
}

/// One discriminator (conditioned or vanilla) plus its parameter store.
#[derive(Debug)]
pub struct Discriminator {
    pub cfg: DiscConfig,
    net: Net,
}

impl Discriminator {
    pub fn new(p: &Params, cfg: &DiscConfig) -> Result<Self> {
        let sed = cfg.family.is_sed();
        let net = match cfg.family.granularity() {
            Granularity::Patch => Net::Patch(PatchDisc::new(p, cfg, sed)?),
            Granularity::Pixel => Net::Unet(UnetDisc::new(p, cfg, sed)?),
            Granularity::Image => Net::Vgg(VggDisc::new(p, cfg, sed)?),
        };
        Ok(Self { cfg: cfg.clone(), net })
    }

    pub fn granularity(&self) -> Granularity {
        self.cfg.family.granularity()
    }

    /// Raw logits. `s` is required for sed families and rejected for
    /// vanilla families.
    pub fn forward(
        &self,
        p: &Params,
        img: &Tensor,
        s: Option<&SemanticMap>,
        train: bool,
        taps: Option<&mut Taps>,
    ) -> Result<Tensor> {
        if self.cfg.family.is_sed() && s.is_none() {
            return Err(Error::contract(format!(
                "{} requires a semantic map",
                self.cfg.family
            )));
        }
        if !self.cfg.family.is_sed() && s.is_some() {
            return Err(Error::contract(format!(
                "{} accepts no semantic map",
                self.cfg.family
            )));
        }
        match &self.net {
            Net::Patch(n) => n.forward(p, img, s, train, taps),
            Net::Unet(n) => n.forward(p, img, s, train, taps),
            Net::Vgg(n) => n.forward(p, img, s, train, taps),
        }
    }

    /// Name of the activation used for feature export: the first fusion
    /// block's output for sed families, the first BN activation for the
    /// patch/vgg vanilla baselines.
    pub fn feature_tap_name(&self) -> Result<&'static str> {
        match (self.cfg.family.is_sed(), self.cfg.family.granularity()) {
            (true, _) => Ok("fb1.out"),
            (false, Granularity::Patch) | (false, Granularity::Image) => Ok("block1.bn"),
            (false, Granularity::Pixel) => Err(Error::config(
                "unet_vanilla has no BN tap; use a sed family or patch/vgg vanilla".to_string(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn store(seed: u64) -> Params {
        Params::new(&dev(), DType::F32, seed, true)
    }

    fn img(b: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 3 * hw * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, hw, hw), &dev()).unwrap()
    }

    fn sem(b: usize, cs: usize, hw: usize, seed: u64) -> SemanticMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * cs * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SemanticMap {
            data: Tensor::from_vec(v, (b, cs, hw, hw), &dev()).unwrap(),
            layer_index: 3,
            source_id: "test".into(),
        }
    }

    fn tiny_cfg(family: DiscFamily) -> DiscConfig {
        DiscConfig {
            family,
            base_channels: 8,
            input_size: 32,
            semantic_channels: 12,
            sefb_heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn patch_logit_shape_law() {
        let p = store(1);
        let d = Discriminator::new(&p, &tiny_cfg(DiscFamily::PatchSed)).unwrap();
        for hw in [64usize, 32] {
            let out = d
                .forward(&p, &img(2, hw, 3), Some(&sem(2, 12, hw / 16, 4)), true, None)
                .unwrap();
            assert_eq!(out.dims(), &[2, 1, hw / 8, hw / 8]);
        }
    }

    #[test]
    fn unet_logit_shape_law() {
        let p = store(2);
        let d = Discriminator::new(&p, &tiny_cfg(DiscFamily::UnetSed)).unwrap();
        for hw in [32usize, 64] {
            let out = d
                .forward(&p, &img(1, hw, 5), Some(&sem(1, 12, hw / 16, 6)), true, None)
                .unwrap();
            assert_eq!(out.dims(), &[1, 1, hw, hw]);
        }
    }

    #[test]
    fn vgg_logit_shape_and_purity() {
        let p = store(3);
        let d = Discriminator::new(&p, &tiny_cfg(DiscFamily::VggSed)).unwrap();
        let im = img(2, 32, 7);
        // duplicate the batch images: logits must duplicate too
        let im4 = Tensor::cat(&[&im, &im], 0).unwrap();
        let s = sem(2, 12, 2, 8);
        let s4 = SemanticMap {
            data: Tensor::cat(&[&s.data, &s.data], 0).unwrap(),
            layer_index: 3,
            source_id: "test".into(),
        };
        let out = d.forward(&p, &im4, Some(&s4), false, None).unwrap();
        assert_eq!(out.dims(), &[4, 1]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((v[0] - v[2]).abs() < 1e-5);
        assert!((v[1] - v[3]).abs() < 1e-5);
        // wrong input size -> shape error
        match d.forward(&p, &img(1, 64, 9), Some(&sem(1, 12, 4, 10)), false, None) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn vanilla_shapes_and_param_counts() {
        let pv = store(4);
        let dv = Discriminator::new(&pv, &tiny_cfg(DiscFamily::PatchVanilla)).unwrap();
        let out = dv.forward(&pv, &img(1, 32, 11), None, true, None).unwrap();
        assert_eq!(out.dims(), &[1, 1, 4, 4]);

        let ps = store(5);
        let _ds = Discriminator::new(&ps, &tiny_cfg(DiscFamily::PatchSed)).unwrap();
        assert!(
            pv.num_params() < ps.num_params(),
            "vanilla {} vs sed {}",
            pv.num_params(),
            ps.num_params()
        );

        let pu = store(6);
        let du = Discriminator::new(&pu, &tiny_cfg(DiscFamily::UnetVanilla)).unwrap();
        let out = du.forward(&pu, &img(1, 64, 12), None, true, None).unwrap();
        assert_eq!(out.dims(), &[1, 1, 64, 64]);
    }

    #[test]
    fn sed_requires_semantics_and_vanilla_rejects_them() {
        let p = store(7);
        let d = Discriminator::new(&p, &tiny_cfg(DiscFamily::PatchSed)).unwrap();
        match d.forward(&p, &img(1, 32, 13), None, true, None) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
        let pv = store(8);
        let dv = Discriminator::new(&pv, &tiny_cfg(DiscFamily::PatchVanilla)).unwrap();
        match dv.forward(&pv, &img(1, 32, 14), Some(&sem(1, 12, 2, 15)), true, None) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn query_depends_only_on_semantics() {
        // same S_h, two different images: logits differ, query tensors are
        // bitwise identical
        let p = store(9);
        let d = Discriminator::new(&p, &tiny_cfg(DiscFamily::PatchSed)).unwrap();
        let s = sem(1, 12, 2, 16);
        let mut taps_a = Taps::new();
        let mut taps_b = Taps::new();
        let la = d
            .forward(&p, &img(1, 32, 17), Some(&s), true, Some(&mut taps_a))
            .unwrap();
        let lb = d
            .forward(&p, &img(1, 32, 18), Some(&s), true, Some(&mut taps_b))
            .unwrap();
        let dl = (la - lb)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(dl > 1e-6, "different images should give different logits");
        for name in ["fb1.query", "fb2.query", "fb3.query"] {
            let qa = taps_a.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let qb = taps_b.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(
                qa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                qb.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "{name} must not depend on the image"
            );
        }
    }

    #[test]
    fn unet_zeroed_decoder_gives_constant_bias_map() {
        let p = store(10);
        let d = Discriminator::new(&p, &tiny_cfg(DiscFamily::UnetSed)).unwrap();
        // zero everything the decoder and head touch, then set the head bias
        for name in p.names() {
            if name.starts_with("up") || name.starts_with("tail") || name.starts_with("head") {
                if let Some(t) = p.get(&name) {
                    if p.set_value(&name, &t.zeros_like().unwrap()).is_err() {
                        // buffers may be absent for disabled spectral norm
                    }
                }
            }
        }
        let bias = 0.37f32;
        let head_b = p.get("head.bias").unwrap();
        p.set_value("head.bias", &(head_b.ones_like().unwrap() * bias as f64).unwrap())
            .unwrap();
        let out = d
            .forward(&p, &img(1, 32, 19), Some(&sem(1, 12, 2, 20)), true, None)
            .unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for x in v {
            assert!((x - bias).abs() < 1e-6);
        }
    }

    #[test]
    fn spectral_norm_flag_is_respected() {
        let p_on = store(11);
        let mut cfg = tiny_cfg(DiscFamily::UnetVanilla);
        cfg.spectral_norm = true;
        let _ = Discriminator::new(&p_on, &cfg).unwrap();
        assert!(p_on.names().iter().any(|n| n.contains("sn_u")));

        let p_off = store(12);
        cfg.spectral_norm = false;
        let _ = Discriminator::new(&p_off, &cfg).unwrap();
        assert!(!p_off.names().iter().any(|n| n.contains("sn_u")));
    }

    #[test]
    fn fusion_mode_variants_run() {
        for mode in [
            FusionMode::Concat,
            FusionMode::ChannelAttention,
            FusionMode::SpatialAttention,
        ] {
            let p = store(13);
            let mut cfg = tiny_cfg(DiscFamily::PatchSed);
            cfg.fusion_mode = mode;
            let d = Discriminator::new(&p, &cfg).unwrap();
            let out = d
                .forward(&p, &img(1, 32, 21), Some(&sem(1, 12, 2, 22)), true, None)
                .unwrap();
            assert_eq!(out.dims(), &[1, 1, 4, 4], "{mode}");
        }
    }
}
