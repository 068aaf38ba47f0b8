//! Paired LR/HR data pipeline for classical x4 SR: antialiased bicubic
//! degradation, aligned patch sampling with flip/rot90 augmentation, and a
//! deterministic synthetic corpus for desk-scale runs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SCALE: usize = 4;

/// A single RGB (or grayscale) image in CHW layout, values nominally [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image buffer {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// (C, H, W) tensor on the given device.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    /// From a (C, H, W) or (1, C, H, W) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.dims().len() == 4 {
            if t.dims()[0] != 1 {
                return Err(Error::shape("expected batch of 1".to_string()));
            }
            t.squeeze(0)?
        } else {
            t.clone()
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::new(c, h, w, data)
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::shape(format!(
                "crop {y},{x} {h}x{w} out of bounds for {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for yy in 0..h {
                for xx in 0..w {
                    out.set(c, yy, xx, self.get(c, y + yy, x + xx));
                }
            }
        }
        Ok(out)
    }

    /// Center-crop each side down to the nearest multiple of `m`.
    pub fn center_crop_to_multiple(&self, m: usize) -> Result<Image> {
        let h = (self.height / m) * m;
        let w = (self.width / m) * m;
        if h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image {}x{} smaller than multiple {m}",
                self.height, self.width
            )));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Image {
        let mut out = Image::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, self.height - 1 - y, x));
                }
            }
        }
        out
    }

    /// 90 degrees clockwise.
    pub fn rot90(&self) -> Image {
        let mut out = Image::zeros(self.channels, self.width, self.height);
        for c in 0..self.channels {
            for y in 0..self.width {
                for x in 0..self.height {
                    out.set(c, y, x, self.get(c, self.height - 1 - x, y));
                }
            }
        }
        out
    }

    /// Round-trip through 8-bit quantization, mirroring file storage.
    pub fn quantize_u8(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0)
            .collect();
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{path:?}: {e}")))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut out = Image::zeros(3, h as usize, w as usize);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Image(format!(
                "png save expects 3 channels, got {}",
                self.channels
            )));
        }
        let mut buf = vec![0u8; self.height * self.width * 3];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf[(y * self.width + x) * 3 + c] =
                        (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer sized above");
        img.save(path)
            .map_err(|e| Error::Image(format!("{path:?}: {e}")))
    }
}

/// Cubic convolution kernel, a = -0.5.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Tap positions and normalized weights for one output sample at downscale
/// factor `s` (antialiasing widens the kernel support by `s`). Source indices
/// are edge-replicated by clamping.
fn bicubic_taps(out_idx: usize, s: usize, src_len: usize) -> (isize, Vec<f64>) {
    let s = s as f64;
    let x = (out_idx as f64 + 0.5) * s - 0.5;
    let lo = (x - 2.0 * s).ceil() as isize;
    let hi = (x + 2.0 * s).floor() as isize;
    let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
    let mut sum = 0.0;
    for k in lo..=hi {
        let w = cubic((x - k as f64) / s) / s;
        weights.push(w);
        sum += w;
    }
    for w in &mut weights {
        *w /= sum;
    }
    let _ = src_len;
    (lo, weights)
}

/// Antialiased separable bicubic downsampling by an integer factor.
pub fn bicubic_downsample(hr: &Image, scale: usize) -> Result<Image> {
    if scale == 0 || hr.height % scale != 0 || hr.width % scale != 0 {
        return Err(Error::shape(format!(
            "bicubic downsample: {}x{} not divisible by {scale}",
            hr.height, hr.width
        )));
    }
    let oh = hr.height / scale;
    let ow = hr.width / scale;
    // horizontal pass (f64 accumulation), then vertical
    let mut mid = vec![0f64; hr.channels * hr.height * ow];
    for c in 0..hr.channels {
        for y in 0..hr.height {
            for ox in 0..ow {
                let (lo, ws) = bicubic_taps(ox, scale, hr.width);
                let mut acc = 0.0;
                for (i, w) in ws.iter().enumerate() {
                    let sx = (lo + i as isize).clamp(0, hr.width as isize - 1) as usize;
                    acc += *w * hr.get(c, y, sx) as f64;
                }
                mid[(c * hr.height + y) * ow + ox] = acc;
            }
        }
    }
    let mut out = Image::zeros(hr.channels, oh, ow);
    for c in 0..hr.channels {
        for oy in 0..oh {
            let (lo, ws) = bicubic_taps(oy, scale, hr.height);
            for ox in 0..ow {
                let mut acc = 0.0;
                for (i, w) in ws.iter().enumerate() {
                    let sy = (lo + i as isize).clamp(0, hr.height as isize - 1) as usize;
                    acc += *w * mid[(c * hr.height + sy) * ow + ox];
                }
                out.set(c, oy, ox, acc as f32);
            }
        }
    }
    Ok(out)
}

/// An aligned LR/HR patch pair.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub lr: Image,
    pub hr: Image,
    pub source_id: String,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        if self.hr.height % 32 != 0 || self.hr.width % 32 != 0 {
            return Err(Error::contract(format!(
                "hr patch {}x{} not divisible by 32",
                self.hr.height, self.hr.width
            )));
        }
        if self.lr.height * SCALE != self.hr.height || self.lr.width * SCALE != self.hr.width {
            return Err(Error::contract("lr/hr sides not in 1:4 ratio".to_string()));
        }
        let ok = |v: &f32| (0.0..=1.0).contains(v);
        if !self.lr.data.iter().all(ok) || !self.hr.data.iter().all(ok) {
            return Err(Error::contract("pair values outside [0,1]".to_string()));
        }
        Ok(())
    }
}

fn smooth(img: &mut Image, passes: usize) {
    for _ in 0..passes {
        let src = img.clone();
        for c in 0..src.channels {
            for y in 0..src.height {
                for x in 0..src.width {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let yy = y as isize + dy;
                            let xx = x as isize + dx;
                            if yy >= 0
                                && yy < src.height as isize
                                && xx >= 0
                                && xx < src.width as isize
                            {
                                acc += src.get(c, yy as usize, xx as usize);
                                n += 1.0;
                            }
                        }
                    }
                    img.set(c, y, x, acc / n);
                }
            }
        }
    }
}

/// One procedurally generated HR image. Kinds cycle through checkerboards,
/// oriented gradients, smoothed noise and composites; all values land in
/// [0,1] with per-image means kept away from the extremes.
pub fn synth_image(rng: &mut ChaCha8Rng, kind: usize, size: usize) -> Image {
    let mut img = Image::zeros(3, size, size);
    match kind % 4 {
        0 => {
            // checkerboard of random pitch and levels
            let pitch = *[4usize, 8, 16].get(rng.gen_range(0..3)).unwrap();
            let lo = rng.gen_range(0.15f32..0.35);
            let hi = rng.gen_range(0.65f32..0.85);
            let phase: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let cell = (y / pitch + x / pitch + phase[c]) % 2;
                        img.set(c, y, x, if cell == 0 { lo } else { hi });
                    }
                }
            }
        }
        1 => {
            // linear gradient along a random direction
            let theta = rng.gen_range(0.0f64..std::f64::consts::TAU);
            let (dy, dx) = theta.sin_cos();
            let offsets: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.08f32..0.08)).collect();
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let t = (y as f64 * dy + x as f64 * dx)
                            / (size as f64 * (dy.abs() + dx.abs()).max(1e-9));
                        let v = 0.5 + 0.35 * t as f32 + offsets[c];
                        img.set(c, y, x, v.clamp(0.05, 0.95));
                    }
                }
            }
        }
        2 => {
            // smoothed noise
            for v in img.data.iter_mut() {
                *v = rng.gen_range(0.0f32..1.0);
            }
            smooth(&mut img, 2);
            for v in img.data.iter_mut() {
                *v = 0.2 + 0.6 * *v;
            }
        }
        _ => {
            // composite: gradient base with a checker overlay
            let base = synth_image(rng, 1, size);
            let overlay = synth_image(rng, 0, size);
            let alpha = rng.gen_range(0.25f32..0.5);
            for i in 0..img.data.len() {
                img.data[i] =
                    ((1.0 - alpha) * base.data[i] + alpha * overlay.data[i]).clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[derive(Debug)]
enum LrSource {
    /// Synthesize the LR patch from the HR patch on the fly.
    OnTheFly,
    /// Pre-paired LR images (one per HR image, matched by filename).
    Paired(Vec<Image>),
}

/// A dataset of HR images with deterministic patch sampling.
#[derive(Debug)]
pub struct Dataset {
    hr: Vec<Image>,
    ids: Vec<String>,
    lr: LrSource,
    pub patch_size: usize,
    pub augment: bool,
    warned: Mutex<HashSet<usize>>,
}

impl Dataset {
    /// Deterministic synthetic corpus (`n_images` HR images of `hr_size`).
    pub fn synthetic(
        seed: u64,
        n_images: usize,
        hr_size: usize,
        patch_size: usize,
        augment: bool,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if hr_size % 32 != 0 {
            return Err(Error::config(format!(
                "synthetic hr_size {hr_size} must be divisible by 32"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hr = Vec::with_capacity(n_images);
        let mut ids = Vec::with_capacity(n_images);
        for i in 0..n_images {
            hr.push(synth_image(&mut rng, i, hr_size));
            ids.push(format!("synth-{seed}-{i:04}"));
        }
        Self::build(hr, ids, LrSource::OnTheFly, patch_size, augment)
    }

    /// Load `<root>/hr/*.png`, optionally paired with `<root>/lr_x4/*.png`.
    pub fn from_dir(root: &Path, patch_size: usize, augment: bool) -> Result<Self> {
        let hr_dir = root.join("hr");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&hr_dir)
            .map_err(|e| Error::config(format!("cannot read {hr_dir:?}: {e}")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::config(format!("no png images under {hr_dir:?}")));
        }
        let mut hr = Vec::new();
        let mut ids = Vec::new();
        for p in &names {
            hr.push(Image::load_png(p)?);
            ids.push(p.file_stem().unwrap().to_string_lossy().to_string());
        }
        let lr_dir = root.join("lr_x4");
        let lr = if lr_dir.is_dir() {
            let mut lrs = Vec::new();
            for p in &names {
                let lp = lr_dir.join(p.file_name().unwrap());
                if !lp.is_file() {
                    return Err(Error::config(format!(
                        "paired lr image missing for {:?}",
                        p.file_name().unwrap()
                    )));
                }
                lrs.push(Image::load_png(&lp)?);
            }
            LrSource::Paired(lrs)
        } else {
            LrSource::OnTheFly
        };
        Self::build(hr, ids, lr, patch_size, augment)
    }

    fn build(
        hr: Vec<Image>,
        ids: Vec<String>,
        lr: LrSource,
        patch_size: usize,
        augment: bool,
    ) -> Result<Self> {
        if patch_size % 32 != 0 {
            return Err(Error::config(format!(
                "patch_size {patch_size} must be divisible by 32"
            )));
        }
        if let LrSource::Paired(lrs) = &lr {
            for (i, l) in lrs.iter().enumerate() {
                if l.height * SCALE != hr[i].height || l.width * SCALE != hr[i].width {
                    return Err(Error::config(format!(
                        "paired lr {} is not 1/4 the hr size",
                        ids[i]
                    )));
                }
            }
        }
        Ok(Self {
            hr,
            ids,
            lr,
            patch_size,
            augment,
            warned: Mutex::new(HashSet::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }
    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }
    pub fn ids(&self) -> &[String] {
        &self.ids
    }
    pub fn hr_image(&self, i: usize) -> &Image {
        &self.hr[i]
    }

    /// LR image for index i: paired file, or the whole-image downsample.
    pub fn lr_image(&self, i: usize) -> Result<Image> {
        match &self.lr {
            LrSource::Paired(l) => Ok(l[i].clone()),
            LrSource::OnTheFly => bicubic_downsample(&self.hr[i], SCALE),
        }
    }

    /// Draw one aligned, optionally augmented patch pair.
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
        let ps = self.patch_size;
        let lp = ps / SCALE;
        for _attempt in 0..self.hr.len().max(1) * 4 {
            let idx = rng.gen_range(0..self.hr.len());
            let img = &self.hr[idx];
            if img.height < ps || img.width < ps {
                let mut warned = self.warned.lock().unwrap();
                if warned.insert(idx) {
                    eprintln!(
                        "warning: skipping {} ({}x{} smaller than patch {ps})",
                        self.ids[idx], img.height, img.width
                    );
                }
                continue;
            }
            // LR-aligned crop origin so both grids stay integral
            let ly = rng.gen_range(0..=(img.height / SCALE - lp));
            let lx = rng.gen_range(0..=(img.width / SCALE - lp));
            let hr_patch = img.crop(ly * SCALE, lx * SCALE, ps, ps)?;
            let lr_patch = match &self.lr {
                LrSource::Paired(l) => l[idx].crop(ly, lx, lp, lp)?,
                LrSource::OnTheFly => bicubic_downsample(&hr_patch, SCALE)?,
            };
            let (mut lr_patch, mut hr_patch) = (lr_patch, hr_patch);
            if self.augment {
                if rng.gen_bool(0.5) {
                    lr_patch = lr_patch.hflip();
                    hr_patch = hr_patch.hflip();
                }
                if rng.gen_bool(0.5) {
                    lr_patch = lr_patch.vflip();
                    hr_patch = hr_patch.vflip();
                }
                if rng.gen_bool(0.5) {
                    lr_patch = lr_patch.rot90();
                    hr_patch = hr_patch.rot90();
                }
            }
            return Ok(SamplePair {
                lr: lr_patch,
                hr: hr_patch,
                source_id: self.ids[idx].clone(),
            });
        }
        Err(Error::config(format!(
            "no image in the dataset is at least {ps}x{ps}"
        )))
    }

    /// Stack `batch_size` pairs into (lr, hr) tensors of shape (B,3,h,w).
    pub fn batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let mut lrs = Vec::with_capacity(batch_size);
        let mut hrs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let pair = self.sample_pair(rng)?;
            lrs.push(pair.lr.to_tensor(device)?);
            hrs.push(pair.hr.to_tensor(device)?);
        }
        let lr = Tensor::stack(&lrs.iter().collect::<Vec<_>>(), 0)?;
        let hr = Tensor::stack(&hrs.iter().collect::<Vec<_>>(), 0)?;
        Ok((lr, hr))
    }
}
