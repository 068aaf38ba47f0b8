//! Semantic-aware fusion block (SeFB) and the ablation fusion variants.
//!
//! The SeFB turns the semantic map into the query of a cross-attention over
//! image features:
//!
//!   Q  = LN(SA(LN(proj(GN(S)))))          query path, S aligned to the
//!                                          feature grid and tokenized
//!   f' = softmax(Q K^T / sqrt(d_k)) V      K, V are 1x1 conv projections of f
//!   out = Conv(Concat(GELU(LN(f')), Conv(f)))
//!
//! SA is the raw attention primitive applied with q = k = v followed by one
//! output projection. The semantics enter detached: the extractor stays
//! frozen and the block's gradients flow only into its own parameters and
//! the image features.

use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::extractor::SemanticMap;
use crate::nn::{
    bilinear_resize, multi_head_attention, to_spatial, to_tokens, Conv2d, GroupNorm, LayerNorm,
    Linear, Params, Taps,
};

/// Bilinear alignment of a semantic map to the image-feature grid. Identity
/// (bitwise) when the grids already match; constants are preserved.
pub fn align_semantics(s: &SemanticMap, target_hw: (usize, usize)) -> Result<SemanticMap> {
    let (th, tw) = target_hw;
    Ok(SemanticMap {
        data: bilinear_resize(&s.data, th, tw)?,
        layer_index: s.layer_index,
        source_id: s.source_id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sefb,
    Concat,
    ChannelAttention,
    SpatialAttention,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sefb" => Ok(Self::Sefb),
            "concat" => Ok(Self::Concat),
            "channel_attention" => Ok(Self::ChannelAttention),
            "spatial_attention" => Ok(Self::SpatialAttention),
            other => Err(Error::config(format!(
                "unknown fusion mode {other:?} (expected sefb|concat|channel_attention|spatial_attention)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Sefb => "sefb",
            Self::Concat => "concat",
            Self::ChannelAttention => "channel_attention",
            Self::SpatialAttention => "spatial_attention",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SefbConfig {
    pub image_channels: usize,
    pub semantic_channels: usize,
    /// 0 means "image_channels at this stage".
    pub embed_dim: usize,
    pub heads: usize,
    pub groupnorm_groups: usize,
    /// 0 means "image_channels".
    pub out_channels: usize,
}

impl SefbConfig {
    pub fn new(image_channels: usize, semantic_channels: usize) -> Self {
        Self {
            image_channels,
            semantic_channels,
            embed_dim: 0,
            heads: 4,
            groupnorm_groups: 8,
            out_channels: 0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        if self.embed_dim == 0 {
            self.image_channels
        } else {
            self.embed_dim
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.out_channels == 0 {
            self.image_channels
        } else {
            self.out_channels
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid_spec(format!(
                "sefb embed dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Sefb {
    cfg: SefbConfig,
    pub gn: GroupNorm,
    pub proj_q: Linear,
    pub ln1: LayerNorm,
    pub sa_proj: Linear,
    pub ln2: LayerNorm,
    pub conv_k: Conv2d,
    pub conv_v: Conv2d,
    pub ln_out: LayerNorm,
    pub conv_img: Conv2d,
    pub conv_fuse: Conv2d,
}

impl Sefb {
    pub fn new(p: &Params, name: &str, cfg: SefbConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        let cf = cfg.image_channels;
        let cs = cfg.semantic_channels;
        Ok(Self {
            cfg,
            gn: GroupNorm::new(p, &format!("{name}.gn"), cs, cfg.groupnorm_groups)?,
            proj_q: Linear::new(p, &format!("{name}.proj_q"), cs, d)?,
            ln1: LayerNorm::new(p, &format!("{name}.ln1"), d)?,
            sa_proj: Linear::new(p, &format!("{name}.sa_proj"), d, d)?,
            ln2: LayerNorm::new(p, &format!("{name}.ln2"), d)?,
            conv_k: Conv2d::new(p, &format!("{name}.conv_k"), cf, d, 1, 1, 0, 1.0)?,
            conv_v: Conv2d::new(p, &format!("{name}.conv_v"), cf, d, 1, 1, 0, 1.0)?,
            ln_out: LayerNorm::new(p, &format!("{name}.ln_out"), d)?,
            conv_img: Conv2d::new(p, &format!("{name}.conv_img"), cf, cf, 3, 1, 1, 1.0)?,
            conv_fuse: Conv2d::new(
                p,
                &format!("{name}.conv_fuse"),
                d + cf,
                cfg.out_channels(),
                1,
                1,
                0,
                1.0,
            )?,
        })
    }

    pub fn config(&self) -> &SefbConfig {
        &self.cfg
    }

    /// Query path on an already-aligned semantic map (B, Cs, Hf, Wf).
    pub fn build_query(&self, s_aligned: &Tensor) -> Result<Tensor> {
        let (_b, cs, _h, _w) = s_aligned.dims4()?;
        if cs != self.cfg.semantic_channels {
            return Err(Error::contract(format!(
                "semantic channels {cs} != configured {}",
                self.cfg.semantic_channels
            )));
        }
        let x = self.gn.forward(s_aligned)?;
        let t = self.proj_q.forward(&to_tokens(&x)?)?;
        let t = self.ln1.forward(&t)?;
        let sa = self
            .sa_proj
            .forward(&multi_head_attention(&t, &t, &t, self.cfg.heads)?)?;
        self.ln2.forward(&sa)
    }

    pub fn forward(&self, f: &Tensor, s: &SemanticMap, taps: Option<&mut Taps>) -> Result<Tensor> {
        let (_b, cf, hf, wf) = f.dims4()?;
        if cf != self.cfg.image_channels {
            return Err(Error::contract(format!(
                "image channels {cf} != configured {}",
                self.cfg.image_channels
            )));
        }
        let s_aligned = align_semantics(s, (hf, wf))?.data.detach();
        let q = self.build_query(&s_aligned)?;
        let k = to_tokens(&self.conv_k.forward(f)?)?;
        let v = to_tokens(&self.conv_v.forward(f)?)?;
        let warped = multi_head_attention(&q, &k, &v, self.cfg.heads)?;
        let gated = self.ln_out.forward(&warped)?.gelu_erf()?;
        let gated = to_spatial(&gated, hf, wf)?;
        let img = self.conv_img.forward(f)?;
        let out = self
            .conv_fuse
            .forward(&Tensor::cat(&[&gated, &img], 1)?)?;
        if let Some(taps) = taps {
            taps.record("query", &q);
            taps.record("out", &out);
        }
        Ok(out)
    }
}

/// Squeeze-excite gate for the channel-attention variant.
#[derive(Debug)]
pub struct ChannelGate {
    fc1: Linear,
    fc2: Linear,
}

/// One fusion block in any of the four modes, behind the interface the
/// discriminators use. `concat` / `channel_attention` / `spatial_attention`
/// are the ablation variants.
#[derive(Debug)]
pub enum FusionBlock {
    Sefb(Sefb),
    Concat {
        cfg: SefbConfig,
        conv: Conv2d,
    },
    Channel {
        cfg: SefbConfig,
        gate: ChannelGate,
        conv: Conv2d,
    },
    Spatial {
        cfg: SefbConfig,
        gate_conv: Conv2d,
        conv: Conv2d,
    },
}

impl FusionBlock {
    pub fn new(p: &Params, name: &str, mode: FusionMode, cfg: SefbConfig) -> Result<Self> {
        let cf = cfg.image_channels;
        let cs = cfg.semantic_channels;
        let cout = cfg.out_channels();
        match mode {
            FusionMode::Sefb => Ok(Self::Sefb(Sefb::new(p, name, cfg)?)),
            FusionMode::Concat => Ok(Self::Concat {
                cfg,
                conv: Conv2d::new(p, &format!("{name}.conv"), cf + cs, cout, 1, 1, 0, 1.0)?,
            }),
            FusionMode::ChannelAttention => {
                let hidden = (cs / 8).max(4);
                Ok(Self::Channel {
                    cfg,
                    gate: ChannelGate {
                        fc1: Linear::new(p, &format!("{name}.gate_fc1"), cs, hidden)?,
                        fc2: Linear::new(p, &format!("{name}.gate_fc2"), hidden, cf)?,
                    },
                    conv: Conv2d::new(p, &format!("{name}.conv"), cf, cout, 1, 1, 0, 1.0)?,
                })
            }
            FusionMode::SpatialAttention => Ok(Self::Spatial {
                cfg,
                gate_conv: Conv2d::new(p, &format!("{name}.gate"), cs, 1, 1, 1, 0, 1.0)?,
                conv: Conv2d::new(p, &format!("{name}.conv"), cf, cout, 1, 1, 0, 1.0)?,
            }),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Sefb(b) => b.cfg.out_channels(),
            Self::Concat { cfg, .. }
            | Self::Channel { cfg, .. }
            | Self::Spatial { cfg, .. } => cfg.out_channels(),
        }
    }

    pub fn forward(&self, f: &Tensor, s: &SemanticMap, taps: Option<&mut Taps>) -> Result<Tensor> {
        let (_b, _cf, hf, wf) = f.dims4()?;
        match self {
            Self::Sefb(block) => block.forward(f, s, taps),
            Self::Concat { conv, .. } => {
                let s_aligned = align_semantics(s, (hf, wf))?.data.detach();
                let out = conv.forward(&Tensor::cat(&[f, &s_aligned], 1)?)?;
                if let Some(taps) = taps {
                    taps.record("out", &out);
                }
                Ok(out)
            }
            Self::Channel { gate, conv, .. } => {
                // squeeze: global average pool of the semantics
                let pooled = s.data.detach().mean(3)?.mean(2)?; // (B, Cs)
                let z = gate.fc1.forward(&pooled)?.relu()?;
                let g = candle_nn::ops::sigmoid(&gate.fc2.forward(&z)?)?; // (B, Cf)
                let (b, cf) = g.dims2()?;
                let gated = f.broadcast_mul(&g.reshape((b, cf, 1, 1))?)?;
                let out = conv.forward(&gated)?;
                if let Some(taps) = taps {
                    taps.record("gated", &gated);
                    taps.record("out", &out);
                }
                Ok(out)
            }
            Self::Spatial { gate_conv, conv, .. } => {
                let s_aligned = align_semantics(s, (hf, wf))?.data.detach();
                let g = candle_nn::ops::sigmoid(&gate_conv.forward(&s_aligned)?)?; // (B,1,H,W)
                let gated = f.broadcast_mul(&g)?;
                let out = conv.forward(&gated)?;
                if let Some(taps) = taps {
                    taps.record("gated", &gated);
                    taps.record("out", &out);
                }
                Ok(out)
            }
        }
    }
}
