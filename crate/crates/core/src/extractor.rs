//! Frozen semantic feature extraction.
//!
//! A pretrained vision backbone (an RN50-stage family network) produces
//! pixel-wise semantic feature maps from the high-resolution reference image
//! at a selectable depth. Stage `l` (1..=4) has channel width 256/512/1024/2048
//! and stride 4*2^(l-1). A deterministic toy backbone with the same
//! stride/width schedule stands in for pretrained weights at desk scale.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Init, Params};

pub const STAGE_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

/// Spatial stride of stage `layer` relative to the input: 4 * 2^(layer-1).
pub fn stage_stride(layer: usize) -> usize {
    4 << (layer - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ClipRn50,
    Resnet50,
    Toy,
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip_rn50" => Ok(Self::ClipRn50),
            "resnet50" => Ok(Self::Resnet50),
            "toy" => Ok(Self::Toy),
            other => Err(Error::config(format!(
                "unknown extractor kind {other:?} (expected clip_rn50|resnet50|toy)"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::ClipRn50 => "clip_rn50",
            Self::Resnet50 => "resnet50",
            Self::Toy => "toy",
        };
        write!(f, "{s}")
    }
}

/// Per-channel normalization applied before the backbone, from the
/// backbone's pretraining recipe.
#[derive(Debug, Clone, Copy)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn for_kind(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::ClipRn50 => Self {
                mean: [0.48145466, 0.4578275, 0.40821073],
                std: [0.26862954, 0.26130258, 0.27577711],
            },
            BackboneKind::Resnet50 => Self {
                mean: [0.485, 0.456, 0.406],
                std: [0.229, 0.224, 0.225],
            },
            BackboneKind::Toy => Self {
                mean: [0.0; 3],
                std: [1.0; 3],
            },
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExtractorSpec {
    pub kind: BackboneKind,
    /// Which backbone stage to tap (1..=4). The third stage is the default.
    pub layer_index: usize,
    /// Seed for the toy backbone's weights.
    pub seed: u64,
    pub weights_path: Option<PathBuf>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            layer_index: 3,
            seed: 0,
            weights_path: None,
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.layer_index) {
            return Err(Error::invalid_spec(format!(
                "extractor layer {} outside 1..=4",
                self.layer_index
            )));
        }
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        Normalization::for_kind(self.kind)
    }
}

/// Batched spatial semantic feature map phi(I_h).
#[derive(Debug, Clone)]
pub struct SemanticMap {
    pub data: Tensor,
    pub layer_index: usize,
    pub source_id: String,
}

impl SemanticMap {
    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }
    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }
}

/// Supplies pretrained weights for the non-toy backbones.
pub trait WeightProvider {
    fn load(&self, spec: &ExtractorSpec) -> Result<HashMap<String, Tensor>>;
}

/// Reads a safetensors checkpoint from `extractor.weights_path`, falling
/// back to `$SED_SR_CACHE/<kind>.safetensors`.
#[derive(Debug, Default)]
pub struct FileWeightProvider;

impl WeightProvider for FileWeightProvider {
    fn load(&self, spec: &ExtractorSpec) -> Result<HashMap<String, Tensor>> {
        let path = match &spec.weights_path {
            Some(p) => p.clone(),
            None => match std::env::var_os("SED_SR_CACHE") {
                Some(dir) => PathBuf::from(dir).join(format!("{}.safetensors", spec.kind)),
                None => {
                    return Err(Error::config(format!(
                        "extractor kind {} needs extractor.weights_path or SED_SR_CACHE",
                        spec.kind
                    )))
                }
            },
        };
        if !path.is_file() {
            return Err(Error::config(format!(
                "extractor weights not found at {path:?}"
            )));
        }
        Ok(candle_core::safetensors::load(&path, &Device::Cpu)?)
    }
}

/// Leaves the backbone at its seeded random initialization (tests,
/// architecture-shape checks).
#[derive(Debug, Default)]
pub struct RandomInitProvider;

impl WeightProvider for RandomInitProvider {
    fn load(&self, _spec: &ExtractorSpec) -> Result<HashMap<String, Tensor>> {
        Ok(HashMap::new())
    }
}

/// Toy backbone: one strided conv per stage, LeakyReLU between, with the
/// reference stride/width schedule (x4 then x2 per stage).
#[derive(Debug)]
struct ToyBackbone {
    stages: Vec<Conv2d>,
}

impl ToyBackbone {
    fn new(p: &Params, depth: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for l in 1..=depth {
            let cout = STAGE_CHANNELS[l - 1];
            let (k, s) = if l == 1 { (4, 4) } else { (2, 2) };
            stages.push(Conv2d::new(
                p,
                &format!("toy.stage{l}"),
                cin,
                cout,
                k,
                s,
                0,
                1.0,
            )?);
            cin = cout;
        }
        Ok(Self { stages })
    }

    fn forward_stages(&self, x: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(upto);
        for stage in self.stages.iter().take(upto) {
            cur = leaky_relu(&stage.forward(&cur)?, 0.2)?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Frozen batch-norm (eval mode only; statistics come from the checkpoint).
#[derive(Debug)]
struct FrozenBn {
    gamma: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
}

impl FrozenBn {
    fn new(p: &Params, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.take(&format!("{name}.gamma"), &[c], Init::Ones)?,
            beta: p.take(&format!("{name}.beta"), &[c], Init::Zeros)?,
            mean: p.take(&format!("{name}.running_mean"), &[c], Init::Zeros)?,
            var: p.take(&format!("{name}.running_var"), &[c], Init::Ones)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.elem_count();
        let inv = (self.var.reshape((1, c, 1, 1))? + 1e-5)?.sqrt()?;
        Ok(x
            .broadcast_sub(&self.mean.reshape((1, c, 1, 1))?)?
            .broadcast_div(&inv)?
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Rn50Variant {
    Classification,
    Clip,
}

#[derive(Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBn,
    conv2: Conv2d,
    bn2: FrozenBn,
    conv3: Conv2d,
    bn3: FrozenBn,
    down: Option<(Conv2d, FrozenBn)>,
    stride: usize,
    variant: Rn50Variant,
}

impl Bottleneck {
    fn new(
        p: &Params,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
        variant: Rn50Variant,
    ) -> Result<Self> {
        // CLIP's variant is anti-aliased: conv2 is stride 1 and the spatial
        // reduction happens in an avgpool, both in the trunk and the shortcut.
        let conv2_stride = match variant {
            Rn50Variant::Classification => stride,
            Rn50Variant::Clip => 1,
        };
        let down = if cin != cout || stride != 1 {
            let ds_stride = match variant {
                Rn50Variant::Classification => stride,
                Rn50Variant::Clip => 1,
            };
            Some((
                Conv2d::new(p, &format!("{name}.down.conv"), cin, cout, 1, ds_stride, 0, 1.0)?,
                FrozenBn::new(p, &format!("{name}.down.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, mid, 1, 1, 0, 1.0)?,
            bn1: FrozenBn::new(p, &format!("{name}.bn1"), mid)?,
            conv2: Conv2d::new(p, &format!("{name}.conv2"), mid, mid, 3, conv2_stride, 1, 1.0)?,
            bn2: FrozenBn::new(p, &format!("{name}.bn2"), mid)?,
            conv3: Conv2d::new(p, &format!("{name}.conv3"), mid, cout, 1, 1, 0, 1.0)?,
            bn3: FrozenBn::new(p, &format!("{name}.bn3"), cout)?,
            down,
            stride,
            variant,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        h = self.bn2.forward(&self.conv2.forward(&h)?)?.relu()?;
        if self.variant == Rn50Variant::Clip && self.stride > 1 {
            h = h.avg_pool2d(self.stride)?;
        }
        h = self.bn3.forward(&self.conv3.forward(&h)?)?;
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let mut s = x.clone();
                if self.variant == Rn50Variant::Clip && self.stride > 1 {
                    s = s.avg_pool2d(self.stride)?;
                }
                bn.forward(&conv.forward(&s)?)?
            }
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

#[derive(Debug)]
struct Rn50Backbone {
    variant: Rn50Variant,
    stem: Vec<(Conv2d, FrozenBn)>,
    layers: Vec<Vec<Bottleneck>>,
}

impl Rn50Backbone {
    fn new(p: &Params, variant: Rn50Variant, depth: usize) -> Result<Self> {
        let stem = match variant {
            Rn50Variant::Classification => vec![(
                Conv2d::new(p, "stem.conv1", 3, 64, 7, 2, 3, 1.0)?,
                FrozenBn::new(p, "stem.bn1", 64)?,
            )],
            Rn50Variant::Clip => vec![
                (
                    Conv2d::new(p, "stem.conv1", 3, 32, 3, 2, 1, 1.0)?,
                    FrozenBn::new(p, "stem.bn1", 32)?,
                ),
                (
                    Conv2d::new(p, "stem.conv2", 32, 32, 3, 1, 1, 1.0)?,
                    FrozenBn::new(p, "stem.bn2", 32)?,
                ),
                (
                    Conv2d::new(p, "stem.conv3", 32, 64, 3, 1, 1, 1.0)?,
                    FrozenBn::new(p, "stem.bn3", 64)?,
                ),
            ],
        };
        let blocks = [3usize, 4, 6, 3];
        let mids = [64usize, 128, 256, 512];
        let mut layers = Vec::new();
        let mut cin = 64;
        for l in 0..depth.min(4) {
            let mut layer = Vec::new();
            let cout = STAGE_CHANNELS[l];
            let stride = if l == 0 { 1 } else { 2 };
            for b in 0..blocks[l] {
                let s = if b == 0 { stride } else { 1 };
                layer.push(Bottleneck::new(
                    p,
                    &format!("layer{}.{b}", l + 1),
                    cin,
                    mids[l],
                    cout,
                    s,
                    variant,
                )?);
                cin = cout;
            }
            layers.push(layer);
        }
        Ok(Self {
            variant,
            stem,
            layers,
        })
    }

    fn forward_stages(&self, x: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        for (conv, bn) in &self.stem {
            h = bn.forward(&conv.forward(&h)?)?.relu()?;
        }
        h = match self.variant {
            Rn50Variant::Classification => {
                // 3x3 stride-2 max pool, padded; inputs are post-ReLU so
                // zero padding is the identity element
                let padded = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                padded.max_pool2d_with_stride(3, 2)?
            }
            Rn50Variant::Clip => h.avg_pool2d(2)?,
        };
        let mut out = Vec::with_capacity(upto);
        for layer in self.layers.iter().take(upto) {
            for block in layer {
                h = block.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug)]
enum Backbone {
    Toy(ToyBackbone),
    Rn50(Rn50Backbone),
}

/// The frozen semantic extractor. Parameters never receive gradients (they
/// are plain constants, not autodiff leaves) and `extract` is a pure
/// function of (image, spec, weights).
#[derive(Debug)]
pub struct SemanticExtractor {
    pub spec: ExtractorSpec,
    params: Params,
    backbone: Backbone,
    depth: usize,
    calls: AtomicUsize,
    source_id: String,
}

impl SemanticExtractor {
    /// Build from a spec and a weight provider. `depth` stages are
    /// constructed: at least `layer_index`, more if perceptual taps need it.
    pub fn new(
        spec: ExtractorSpec,
        provider: &dyn WeightProvider,
        device: &Device,
        dtype: DType,
        depth: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let depth = depth.clamp(spec.layer_index, 4);
        let params = Params::new(device, dtype, spec.seed, false);
        let weights = provider.load(&spec)?;
        if !weights.is_empty() {
            params.preload(weights);
        }
        let backbone = match spec.kind {
            BackboneKind::Toy => Backbone::Toy(ToyBackbone::new(&params, depth)?),
            BackboneKind::Resnet50 => {
                Backbone::Rn50(Rn50Backbone::new(&params, Rn50Variant::Classification, depth)?)
            }
            BackboneKind::ClipRn50 => {
                Backbone::Rn50(Rn50Backbone::new(&params, Rn50Variant::Clip, depth)?)
            }
        };
        let source_id = match spec.kind {
            BackboneKind::Toy => format!("toy-{}", spec.seed),
            k => k.to_string(),
        };
        Ok(Self {
            spec,
            params,
            backbone,
            depth,
            calls: AtomicUsize::new(0),
            source_id,
        })
    }

    /// Deterministic toy extractor for desk-scale runs.
    pub fn toy(seed: u64, layer_index: usize, device: &Device, dtype: DType) -> Result<Self> {
        let spec = ExtractorSpec {
            kind: BackboneKind::Toy,
            layer_index,
            seed,
            weights_path: None,
        };
        Self::new(spec, &RandomInitProvider, device, dtype, layer_index)
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn output_channels(&self) -> usize {
        STAGE_CHANNELS[self.spec.layer_index - 1]
    }

    /// Per-channel (x - mean) / std with the backbone's pretraining constants.
    pub fn preprocess(&self, img: &Tensor) -> Result<Tensor> {
        let norm = self.spec.normalization();
        let dev = img.device();
        let dt = img.dtype();
        let mean = Tensor::from_vec(norm.mean.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
        let std = Tensor::from_vec(norm.std.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
        Ok(img.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    fn run_stages(&self, img: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let (_b, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("extractor expects RGB input, got {c} channels")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "extractor input {h}x{w} must be divisible by 32"
            )));
        }
        let x = self.preprocess(img)?;
        match &self.backbone {
            Backbone::Toy(t) => t.forward_stages(&x, upto),
            Backbone::Rn50(r) => r.forward_stages(&x, upto),
        }
    }

    /// Semantic map at `spec.layer_index`. Output is detached: no gradients
    /// ever flow back into the extractor or its input through this path.
    pub fn extract(&self, img: &Tensor) -> Result<SemanticMap> {
        let stages = self.run_stages(&img.detach(), self.spec.layer_index)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(SemanticMap {
            data: stages.last().expect("layer >= 1").detach(),
            layer_index: self.spec.layer_index,
            source_id: self.source_id.clone(),
        })
    }

    /// Stage activations 1..=upto, differentiable with respect to the input
    /// image (the weights themselves are constants). Used as perceptual
    /// feature taps.
    pub fn feature_taps(&self, img: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let upto = upto.clamp(1, self.depth);
        self.run_stages(img, upto)
    }

    /// How many times `extract` ran (conditioning-contract instrumentation).
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Bitwise snapshot of all weights (frozen-parameter assertions).
    pub fn weights_snapshot(&self) -> HashMap<String, Tensor> {
        self.params.state_tensors()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn image(b: usize, hw: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * hw * hw;
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, hw, hw), &dev()).unwrap()
    }

    #[test]
    fn toy_layer3_shape_on_64() {
        let ex = SemanticExtractor::toy(0, 3, &dev(), DType::F32).unwrap();
        let m = ex.extract(&image(1, 64, 1)).unwrap();
        assert_eq!(m.data.dims(), &[1, 1024, 4, 4]);
    }

    #[test]
    fn shape_law_over_layers_and_sizes() {
        for layer in 1..=4usize {
            let ex = SemanticExtractor::toy(0, layer, &dev(), DType::F32).unwrap();
            for hw in [32usize, 64, 96] {
                let m = ex.extract(&image(1, hw, 2)).unwrap();
                let s = stage_stride(layer);
                assert_eq!(
                    m.data.dims(),
                    &[1, STAGE_CHANNELS[layer - 1], hw / s, hw / s],
                    "layer {layer} size {hw}"
                );
            }
        }
    }

    #[test]
    fn out_of_range_layer_is_invalid_spec() {
        let spec = ExtractorSpec {
            layer_index: 5,
            ..Default::default()
        };
        match SemanticExtractor::new(spec, &RandomInitProvider, &dev(), DType::F32, 4) {
            Err(Error::InvalidSpec(_)) => {}
            other => panic!("expected invalid spec, got {other:?}"),
        }
    }

    #[test]
    fn non_divisible_input_is_shape_error() {
        let ex = SemanticExtractor::toy(0, 2, &dev(), DType::F32).unwrap();
        let img = Tensor::zeros((1, 3, 40, 64), DType::F32, &dev()).unwrap();
        match ex.extract(&img) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let ex = SemanticExtractor::toy(0, 3, &dev(), DType::F32).unwrap();
        let img = image(2, 64, 3);
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&img).unwrap();
        let av = a.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = b.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            av.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            bv.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ex.call_count(), 2);
    }

    #[test]
    fn same_seed_same_weights_across_instances() {
        let a = SemanticExtractor::toy(0, 2, &dev(), DType::F32).unwrap();
        let b = SemanticExtractor::toy(0, 2, &dev(), DType::F32).unwrap();
        let img = image(1, 32, 5);
        let ma = a.extract(&img).unwrap();
        let mb = b.extract(&img).unwrap();
        assert_eq!(
            ma.data.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            mb.data.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_map() {
        let ex = SemanticExtractor::toy(0, 3, &dev(), DType::F32).unwrap();
        let img = Tensor::zeros((1, 3, 32, 32), DType::F32, &dev()).unwrap();
        let m = ex.extract(&img).unwrap();
        let mx = m
            .data
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(mx, 0.0);
    }

    #[test]
    fn preprocess_centering() {
        let ex = SemanticExtractor::new(
            ExtractorSpec {
                kind: BackboneKind::Resnet50,
                layer_index: 1,
                seed: 0,
                weights_path: None,
            },
            &RandomInitProvider,
            &dev(),
            DType::F32,
            1,
        )
        .unwrap();
        // image equal to the mean constants -> all-zero output
        let norm = Normalization::for_kind(BackboneKind::Resnet50);
        let mut v = Vec::new();
        for c in 0..3 {
            v.extend(std::iter::repeat(norm.mean[c] as f32).take(4));
        }
        let img = Tensor::from_vec(v, (1, 3, 2, 2), &dev()).unwrap();
        let out = ex.preprocess(&img).unwrap();
        let mx = out.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(mx < 1e-6);

        // toy normalization is the identity
        let toy = SemanticExtractor::toy(0, 1, &dev(), DType::F32).unwrap();
        let img = image(1, 32, 8);
        let out = toy.preprocess(&img).unwrap();
        let a = img.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);

        // (1.0 - 0.5) / 0.25 = 2.0
        let spec = ExtractorSpec::default();
        let _ = spec;
        let ones = Tensor::ones((1, 3, 2, 2), DType::F32, &dev()).unwrap();
        let mean = Tensor::from_vec(vec![0.5f32; 3], (1, 3, 1, 1), &dev()).unwrap();
        let std = Tensor::from_vec(vec![0.25f32; 3], (1, 3, 1, 1), &dev()).unwrap();
        let out = ones
            .broadcast_sub(&mean)
            .unwrap()
            .broadcast_div(&std)
            .unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (x - 2.0).abs() < 1e-6));
    }

    #[test]
    fn rn50_classification_stage_shapes() {
        let spec = ExtractorSpec {
            kind: BackboneKind::Resnet50,
            layer_index: 3,
            seed: 0,
            weights_path: None,
        };
        let ex = SemanticExtractor::new(spec, &RandomInitProvider, &dev(), DType::F32, 3).unwrap();
        let m = ex.extract(&image(2, 256, 7)).unwrap();
        assert_eq!(m.data.dims(), &[2, 1024, 16, 16]);
    }

    #[test]
    fn rn50_all_stage_widths_and_strides() {
        // channel widths 256/512/1024/2048 at strides 4/8/16/32
        let spec = ExtractorSpec {
            kind: BackboneKind::Resnet50,
            layer_index: 4,
            seed: 0,
            weights_path: None,
        };
        let ex = SemanticExtractor::new(spec, &RandomInitProvider, &dev(), DType::F32, 4).unwrap();
        let stages = ex.run_stages(&image(1, 64, 9), 4).unwrap();
        for (i, s) in stages.iter().enumerate() {
            let stride = stage_stride(i + 1);
            assert_eq!(s.dims(), &[1, STAGE_CHANNELS[i], 64 / stride, 64 / stride]);
        }
    }

    #[test]
    fn clip_rn50_stage_shapes() {
        let spec = ExtractorSpec {
            kind: BackboneKind::ClipRn50,
            layer_index: 2,
            seed: 0,
            weights_path: None,
        };
        let ex = SemanticExtractor::new(spec, &RandomInitProvider, &dev(), DType::F32, 2).unwrap();
        let m = ex.extract(&image(1, 64, 11)).unwrap();
        assert_eq!(m.data.dims(), &[1, 512, 8, 8]);
    }

    #[test]
    fn missing_weights_file_is_config_error() {
        let spec = ExtractorSpec {
            kind: BackboneKind::ClipRn50,
            layer_index: 3,
            seed: 0,
            weights_path: Some(PathBuf::from("/nonexistent/clip.safetensors")),
        };
        match SemanticExtractor::new(spec, &FileWeightProvider, &dev(), DType::F32, 3) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
