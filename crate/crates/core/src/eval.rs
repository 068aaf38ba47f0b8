//! Quantitative evaluation: PSNR and SSIM natively (Y channel of the BT.601
//! conversion, 4-pixel border crop by default, conventions recorded in every
//! report), LPIPS/NIQE through pluggable adapters, and discriminator feature
//! export for external embedding tools.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;

use crate::data::Image;
use crate::disc::Discriminator;
use crate::error::{Error, Result};
use crate::extractor::SemanticExtractor;
use crate::generator::Generator;
use crate::nn::{Params, Taps};

/// PSNR/SSIM conventions. Absolute numbers are only comparable across
/// implementations that share these choices, so they ride along in reports.
#[derive(Debug, Clone, Copy)]
pub struct Convention {
    pub border_crop: usize,
    pub use_y: bool,
}

impl Default for Convention {
    fn default() -> Self {
        Self {
            border_crop: 4,
            use_y: true,
        }
    }
}

impl Convention {
    pub fn record(&self) -> String {
        format!(
            "color={} border_crop={} quantization=8bit",
            if self.use_y { "bt601_y" } else { "rgb" },
            self.border_crop
        )
    }
}

/// Luma plane (or passthrough for single-channel images), cropped.
fn prepare(img: &Image, conv: &Convention) -> Result<(Vec<f64>, usize, usize)> {
    let c = conv.border_crop;
    if img.height <= 2 * c || img.width <= 2 * c {
        return Err(Error::shape(format!(
            "image {}x{} too small for border crop {c}",
            img.height, img.width
        )));
    }
    let h = img.height - 2 * c;
    let w = img.width - 2 * c;
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y + c, x + c);
            let v = if conv.use_y && img.channels == 3 {
                let r = img.get(0, sy, sx) as f64;
                let g = img.get(1, sy, sx) as f64;
                let b = img.get(2, sy, sx) as f64;
                (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
            } else {
                img.get(0, sy, sx) as f64
            };
            out[y * w + x] = v;
        }
    }
    Ok((out, h, w))
}

/// Peak signal-to-noise ratio in dB, capped at 100 for identical inputs.
pub fn psnr(a: &Image, b: &Image, conv: &Convention) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::contract(format!(
            "psnr shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    let (pa, _, _) = prepare(a, conv)?;
    let (pb, _, _) = prepare(b, conv)?;
    let mse = pa
        .iter()
        .zip(pb.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / pa.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Valid-mode separable filtering with a 1-D window.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let oh = h - k + 1;
    let ow = w - k + 1;
    // horizontal
    let mut mid = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, wv) in win.iter().enumerate() {
                acc += wv * img[y * w + x + i];
            }
            mid[y * ow + x] = acc;
        }
    }
    // vertical
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, wv) in win.iter().enumerate() {
                acc += wv * mid[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Structural similarity: 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1, valid windows averaged.
pub fn ssim(a: &Image, b: &Image, conv: &Convention) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::contract("ssim shape mismatch".to_string()));
    }
    let (pa, h, w) = prepare(a, conv)?;
    let (pb, _, _) = prepare(b, conv)?;
    const K: usize = 11;
    if h < K || w < K {
        return Err(Error::shape(format!(
            "cropped image {h}x{w} smaller than the {K}x{K} ssim window"
        )));
    }
    let win = gaussian_window(K, 1.5);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let aa: Vec<f64> = pa.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = pb.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();
    let (mu_a, oh, ow) = filter_valid(&pa, h, w, &win);
    let (mu_b, _, _) = filter_valid(&pb, h, w, &win);
    let (m_aa, _, _) = filter_valid(&aa, h, w, &win);
    let (m_bb, _, _) = filter_valid(&bb, h, w, &win);
    let (m_ab, _, _) = filter_valid(&ab, h, w, &win);
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
    }
    Ok(acc / (oh * ow) as f64)
}

/// Full-reference learned perceptual metric, supplied externally.
pub trait LpipsAdapter {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// No-reference quality metric, supplied externally.
pub trait NiqeAdapter {
    fn score(&self, img: &Image) -> Result<f64>;
}

/// Test stub: mean absolute difference.
pub struct EchoL1Lpips;

impl LpipsAdapter for EchoL1Lpips {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.data.len() != b.data.len() {
            return Err(Error::contract("echo lpips shape mismatch".to_string()));
        }
        Ok(a.data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.data.len() as f64)
    }
}

/// Runs an external executable: `cmd a.png b.png` (LPIPS) or `cmd img.png`
/// (NIQE), reading one float from stdout.
pub struct CommandMetric {
    pub cmd: String,
}

impl CommandMetric {
    fn run(&self, args: &[&Path]) -> Result<f64> {
        let out = std::process::Command::new(&self.cmd)
            .args(args)
            .output()
            .map_err(|e| Error::config(format!("metric command {:?}: {e}", self.cmd)))?;
        if !out.status.success() {
            return Err(Error::config(format!(
                "metric command {:?} exited with {}",
                self.cmd, out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|e| Error::config(format!("metric command output {text:?}: {e}")))
    }
}

impl LpipsAdapter for CommandMetric {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let dir = std::env::temp_dir();
        let pa = dir.join(format!("sed-sr-lpips-a-{}.png", std::process::id()));
        let pb = dir.join(format!("sed-sr-lpips-b-{}.png", std::process::id()));
        a.save_png(&pa)?;
        b.save_png(&pb)?;
        let r = self.run(&[&pa, &pb]);
        let _ = std::fs::remove_file(&pa);
        let _ = std::fs::remove_file(&pb);
        r
    }
}

impl NiqeAdapter for CommandMetric {
    fn score(&self, img: &Image) -> Result<f64> {
        let p = std::env::temp_dir().join(format!("sed-sr-niqe-{}.png", std::process::id()));
        img.save_png(&p)?;
        let r = self.run(&[&p]);
        let _ = std::fs::remove_file(&p);
        r
    }
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub niqe: Option<f64>,
}

/// Per-image metric records plus their arithmetic-mean aggregate and the
/// conventions they were computed under.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub convention: String,
    pub records: Vec<ImageRecord>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>> + Clone) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

impl MetricReport {
    pub fn aggregate_psnr(&self) -> f64 {
        self.records.iter().map(|r| r.psnr).sum::<f64>() / self.records.len().max(1) as f64
    }
    pub fn aggregate_ssim(&self) -> f64 {
        self.records.iter().map(|r| r.ssim).sum::<f64>() / self.records.len().max(1) as f64
    }
    pub fn aggregate_lpips(&self) -> Option<f64> {
        mean_opt(self.records.iter().map(|r| r.lpips))
    }
    pub fn aggregate_niqe(&self) -> Option<f64> {
        mean_opt(self.records.iter().map(|r| r.niqe))
    }

    pub fn render(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "unavailable".to_string(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "# metric report");
        let _ = writeln!(s, "dataset: {}", self.dataset_id);
        let _ = writeln!(s, "checkpoint: {}", self.checkpoint_id);
        let _ = writeln!(s, "convention: {}", self.convention);
        let _ = writeln!(s);
        for r in &self.records {
            let _ = writeln!(
                s,
                "image {} psnr={:.6} ssim={:.6} lpips={} niqe={}",
                r.id,
                r.psnr,
                r.ssim,
                fmt_opt(r.lpips),
                fmt_opt(r.niqe)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "aggregate n={} psnr={:.6} ssim={:.6} lpips={} niqe={}",
            self.records.len(),
            self.aggregate_psnr(),
            self.aggregate_ssim(),
            fmt_opt(self.aggregate_lpips()),
            fmt_opt(self.aggregate_niqe())
        );
        s
    }
}

pub struct Adapters<'a> {
    pub lpips: Option<&'a dyn LpipsAdapter>,
    pub niqe: Option<&'a dyn NiqeAdapter>,
}

impl Default for Adapters<'_> {
    fn default() -> Self {
        Self {
            lpips: None,
            niqe: None,
        }
    }
}

/// Run the generator over every image of the dataset and score the outputs.
/// SR outputs are quantized to 8 bits first, mirroring file storage.
pub fn evaluate_generator(
    gen: &Generator,
    dataset: &crate::data::Dataset,
    adapters: &Adapters,
    conv: &Convention,
    checkpoint_id: &str,
    device: &candle_core::Device,
) -> Result<MetricReport> {
    let mut records = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let hr = dataset.hr_image(i);
        let lr = dataset.lr_image(i)?;
        let lr_t = lr.to_tensor(device)?.unsqueeze(0)?;
        let sr_t = gen.infer(&lr_t)?;
        let sr = Image::from_tensor(&sr_t)?.quantize_u8();
        let lpips = match &adapters.lpips {
            Some(a) => Some(a.distance(&sr, hr)?),
            None => None,
        };
        let niqe = match &adapters.niqe {
            Some(a) => Some(a.score(&sr)?),
            None => None,
        };
        records.push(ImageRecord {
            id: dataset.ids()[i].clone(),
            psnr: psnr(&sr, hr, conv)?,
            ssim: ssim(&sr, hr, conv)?,
            lpips,
            niqe,
        });
    }
    Ok(MetricReport {
        dataset_id: format!("dataset-n{}", dataset.len()),
        checkpoint_id: checkpoint_id.to_string(),
        convention: conv.record(),
        records,
    })
}

/// Capture the named discriminator activation for each image, global-average
/// pool it to one row per image, and return rows plus labels.
pub fn export_discriminator_features(
    disc: &Discriminator,
    disc_params: &Params,
    images: &[(String, Image)],
    extractor: Option<&SemanticExtractor>,
    tap_name: &str,
    device: &candle_core::Device,
) -> Result<(Vec<Vec<f32>>, Vec<String>)> {
    let mut rows = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for (id, img) in images {
        let t = img.to_tensor(device)?.unsqueeze(0)?;
        let s = match (disc.cfg.family.is_sed(), extractor) {
            (true, Some(ex)) => Some(ex.extract(&t)?),
            (true, None) => {
                return Err(Error::config(
                    "sed feature export requires an extractor".to_string(),
                ))
            }
            (false, _) => None,
        };
        let mut taps = Taps::new();
        let _ = disc.forward(disc_params, &t, s.as_ref(), false, Some(&mut taps))?;
        let tap = taps.get(tap_name).ok_or_else(|| {
            Error::config(format!(
                "unknown tap {tap_name:?}; available: {:?}",
                taps.0.keys().collect::<Vec<_>>()
            ))
        })?;
        let pooled = tap.mean(3)?.mean(2)?; // (1, C)
        rows.push(pooled.flatten_all()?.to_vec1::<f32>()?);
        labels.push(id.clone());
    }
    Ok((rows, labels))
}

/// Rows of whitespace-separated floats; one line per image.
pub fn write_feature_matrix(path: &Path, rows: &[Vec<f32>]) -> Result<()> {
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    std::fs::write(path, s).map_err(|e| Error::io_path(path, e))
}

pub fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    std::fs::write(path, s).map_err(|e| Error::io_path(path, e))
}
