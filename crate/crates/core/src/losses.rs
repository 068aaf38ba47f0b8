//! The three-term GAN-SR objective: pixel L1, perceptual distance over
//! frozen feature taps, and the adversarial pair.
//!
//! The default formulation is the standard non-saturating BCE-with-logits
//! pair. The printed equations of the source method are internally
//! inconsistent as an adversarial pair (the discriminator objective
//! penalizes high D(I_h) while the generator objective rewards it), so they
//! are kept behind `literal_paper` for auditability: the discriminator side
//! is mean(log(1 - sigmoid(real))) + mean(sigmoid(fake)); the generator side
//! keeps only its realizable fake-image term mean(1 - sigmoid(fake)) — the
//! real-image term is constant with respect to the generator and is not
//! computable from fake logits alone.

use std::str::FromStr;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub lambda_p: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pixel: 1.0,
            lambda_p: 1.0,
            lambda_a: 5e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pixel < 0.0 || self.lambda_p < 0.0 || self.lambda_a < 0.0 {
            return Err(Error::config("loss weights must be >= 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanFormulation {
    StandardBce,
    LiteralPaper,
}

impl FromStr for GanFormulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_bce" => Ok(Self::StandardBce),
            "literal_paper" => Ok(Self::LiteralPaper),
            other => Err(Error::config(format!(
                "unknown gan mode {other:?} (expected standard_bce|literal_paper)"
            ))),
        }
    }
}

/// Frozen feature taps for the perceptual loss. Production wires pretrained
/// backbone stages; tests may use the toy extractor or an identity tap.
pub trait FeatureTaps {
    fn taps(&self, img: &Tensor) -> Result<Vec<Tensor>>;
}

/// Degenerate adapter: one tap, the image itself. Makes the perceptual loss
/// collapse to the pixel loss.
pub struct IdentityTaps;

impl FeatureTaps for IdentityTaps {
    fn taps(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![img.clone()])
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    let v = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(format!("non-finite values in {name}")));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn pixel_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Sum over taps of the mean L1 distance between tap activations.
pub fn perceptual_loss(sr: &Tensor, hr: &Tensor, adapter: &dyn FeatureTaps) -> Result<Tensor> {
    let taps_sr = adapter.taps(sr)?;
    let taps_hr = adapter.taps(&hr.detach())?;
    if taps_sr.is_empty() {
        return Err(Error::config("perceptual adapter exposes no taps".to_string()));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in taps_sr.iter().zip(taps_hr.iter()) {
        let term = (a - &b.detach())?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Elementwise BCE-with-logits against a constant 0/1 target, numerically
/// stable: max(x,0) - x*t + ln(1 + exp(-|x|)).
fn bce_with_logits_mean(logits: &Tensor, target_real: bool) -> Result<Tensor> {
    let relu = logits.relu()?;
    let xt = if target_real {
        logits.clone()
    } else {
        logits.zeros_like()?
    };
    let softplus = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((relu - xt)? + softplus)?.mean_all()?)
}

/// Discriminator objective on raw logits (targets: real -> 1, fake -> 0).
pub fn discriminator_loss(
    real_logits: &Tensor,
    fake_logits: &Tensor,
    formulation: GanFormulation,
) -> Result<Tensor> {
    check_finite("real logits", real_logits)?;
    check_finite("fake logits", fake_logits)?;
    match formulation {
        GanFormulation::StandardBce => {
            let lr = bce_with_logits_mean(real_logits, true)?;
            let lf = bce_with_logits_mean(fake_logits, false)?;
            Ok((lr + lf)?)
        }
        GanFormulation::LiteralPaper => {
            // mean(log(1 - sigmoid(real))) + mean(sigmoid(fake)), as printed
            let sr = candle_nn::ops::sigmoid(real_logits)?;
            let lf = candle_nn::ops::sigmoid(fake_logits)?.mean_all()?;
            let lr = ((sr.neg()? + 1.0)?.clamp(1e-12, 1.0)?).log()?.mean_all()?;
            Ok((lr + lf)?)
        }
    }
}

/// Generator-side adversarial loss on fake logits.
pub fn adversarial_loss_g(fake_logits: &Tensor, formulation: GanFormulation) -> Result<Tensor> {
    check_finite("fake logits", fake_logits)?;
    match formulation {
        // non-saturating: push fake logits toward the real target
        GanFormulation::StandardBce => bce_with_logits_mean(fake_logits, true),
        GanFormulation::LiteralPaper => {
            let sf = candle_nn::ops::sigmoid(fake_logits)?;
            Ok((sf.neg()? + 1.0)?.mean_all()?)
        }
    }
}

/// The weighted three-term generator objective. Returns the total along with
/// the three components for logging; the total is composed exactly as
/// pixel + lambda_p * perceptual + lambda_a * adversarial, in that order.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

pub fn generator_total_loss(
    pixel: &Tensor,
    perceptual: Option<&Tensor>,
    adversarial: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let mut total = pixel.affine(weights.lambda_pixel, 0.0)?;
    let mut perceptual_v = 0.0;
    if let Some(p) = perceptual {
        total = (total + p.affine(weights.lambda_p, 0.0)?)?;
        perceptual_v = p.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let mut adversarial_v = 0.0;
    if let Some(a) = adversarial {
        total = (total + a.affine(weights.lambda_a, 0.0)?)?;
        adversarial_v = a.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(GeneratorLoss {
        total,
        pixel: pixel.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        perceptual: perceptual_v,
        adversarial: adversarial_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn t(v: Vec<f64>, dims: &[usize]) -> Tensor {
        Tensor::from_vec(v, dims, &dev()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        t((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(), dims)
    }

    #[test]
    fn pixel_loss_basics() {
        let a = t(vec![0.0; 12], &[1, 3, 2, 2]);
        let ones = t(vec![1.0; 12], &[1, 3, 2, 2]);
        assert_eq!(
            pixel_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(),
            0.0
        );
        assert!(
            (pixel_loss(&a, &ones).unwrap().to_scalar::<f64>().unwrap() - 1.0).abs() < 1e-12
        );
        // shape mismatch
        match pixel_loss(&a, &t(vec![0.0; 4], &[1, 1, 2, 2])) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn pixel_loss_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[2, 3, 4, 4]);
        let b = rand_t(&mut rng, &[2, 3, 4, 4]);
        let got = pixel_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect: f64 =
            av.iter().zip(bv.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
    }

    #[test]
    fn perceptual_identity_tap_equals_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, &[1, 3, 4, 4]);
        let b = rand_t(&mut rng, &[1, 3, 4, 4]);
        let lp = perceptual_loss(&a, &b, &IdentityTaps).unwrap().to_scalar::<f64>().unwrap();
        let ls = pixel_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        assert!((lp - ls).abs() < 1e-12);
        // identical inputs -> 0
        let z = perceptual_loss(&a, &a, &IdentityTaps).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn perceptual_two_taps_matches_hand_composition() {
        struct TwoTaps;
        impl FeatureTaps for TwoTaps {
            fn taps(&self, img: &Tensor) -> Result<Vec<Tensor>> {
                Ok(vec![img.affine(2.0, 0.0)?, img.sqr()?])
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&mut rng, &[1, 2, 3, 3]);
        let b = rand_t(&mut rng, &[1, 2, 3, 3]);
        let got = perceptual_loss(&a, &b, &TwoTaps).unwrap().to_scalar::<f64>().unwrap();
        let t1 = pixel_loss(&a.affine(2.0, 0.0).unwrap(), &b.affine(2.0, 0.0).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let t2 = pixel_loss(&a.sqr().unwrap(), &b.sqr().unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - (t1 + t2)).abs() < 1e-9);
    }

    #[test]
    fn zero_logit_fixed_points() {
        let z = t(vec![0.0; 8], &[2, 1, 2, 2]);
        let ld = discriminator_loss(&z, &z, GanFormulation::StandardBce)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((ld - 2.0 * std::f64::consts::LN_2).abs() < 1e-6, "{ld}");
        let lg = adversarial_loss_g(&z, GanFormulation::StandardBce)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((lg - std::f64::consts::LN_2).abs() < 1e-6, "{lg}");
    }

    #[test]
    fn perfect_logits_drive_losses_to_zero() {
        let real = t(vec![40.0; 4], &[4]);
        let fake = t(vec![-40.0; 4], &[4]);
        let ld = discriminator_loss(&real, &fake, GanFormulation::StandardBce)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(ld < 1e-12, "{ld}");
        let lg = adversarial_loss_g(&real, GanFormulation::StandardBce)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(lg < 1e-12, "{lg}");
    }

    #[test]
    fn bce_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real = rand_t(&mut rng, &[2, 1, 3, 3]);
        let fake = rand_t(&mut rng, &[2, 1, 3, 3]);
        let got = discriminator_loss(&real, &fake, GanFormulation::StandardBce)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mean_bce = |v: &Tensor, target: f64| {
            let xs = v.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            xs.iter()
                .map(|&x| {
                    let p = sigmoid(x);
                    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / xs.len() as f64
        };
        let expect = mean_bce(&real, 1.0) + mean_bce(&fake, 0.0);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn generator_gradient_pushes_logits_up() {
        // d(loss)/d(logit) < 0 for all finite logits
        use candle_core::Var;
        for x0 in [-5.0, -1.0, 0.0, 1.0, 5.0] {
            let v = Var::from_tensor(&t(vec![x0], &[1])).unwrap();
            let loss = adversarial_loss_g(v.as_tensor(), GanFormulation::StandardBce).unwrap();
            let grads = loss.backward().unwrap();
            let g = grads.get(&v).unwrap().to_vec1::<f64>().unwrap()[0];
            assert!(g < 0.0, "logit {x0}: grad {g}");
            // and the finite-difference slope agrees
            let f = |x: f64| {
                adversarial_loss_g(&t(vec![x], &[1]), GanFormulation::StandardBce)
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let fd = (f(x0 + 1e-5) - f(x0 - 1e-5)) / 2e-5;
            assert!((g - fd).abs() < 1e-5, "{g} vs {fd}");
        }
    }

    #[test]
    fn monotonicity_toward_targets() {
        // moving logits toward their targets strictly reduces both losses
        let mut prev_d = f64::INFINITY;
        let mut prev_g = f64::INFINITY;
        for step in 0..10 {
            let x = step as f64;
            let real = t(vec![x], &[1]);
            let fake = t(vec![-x], &[1]);
            let ld = discriminator_loss(&real, &fake, GanFormulation::StandardBce)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            let lg = adversarial_loss_g(&real, GanFormulation::StandardBce)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(ld < prev_d);
            assert!(lg < prev_g);
            assert!(ld >= 0.0 && lg >= 0.0);
            prev_d = ld;
            prev_g = lg;
        }
    }

    #[test]
    fn non_finite_logits_are_numerical_errors() {
        let bad = t(vec![f64::NAN], &[1]);
        let ok = t(vec![0.0], &[1]);
        match discriminator_loss(&bad, &ok, GanFormulation::StandardBce) {
            Err(Error::Numerical(_)) => {}
            other => panic!("expected numerical error, got {other:?}"),
        }
        match adversarial_loss_g(&t(vec![f64::INFINITY], &[1]), GanFormulation::StandardBce) {
            Err(Error::Numerical(_)) => {}
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn literal_paper_mode_as_printed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = rand_t(&mut rng, &[8]);
        let fake = rand_t(&mut rng, &[8]);
        let got = discriminator_loss(&real, &fake, GanFormulation::LiteralPaper)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let rv = real.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let fv = fake.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = rv.iter().map(|&x| (1.0 - sigmoid(x)).ln()).sum::<f64>() / 8.0
            + fv.iter().map(|&x| sigmoid(x)).sum::<f64>() / 8.0;
        assert!((got - expect).abs() < 1e-9);

        let got_g = adversarial_loss_g(&fake, GanFormulation::LiteralPaper)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let expect_g = fv.iter().map(|&x| 1.0 - sigmoid(x)).sum::<f64>() / 8.0;
        assert!((got_g - expect_g).abs() < 1e-12);
    }

    #[test]
    fn total_composition_is_exact() {
        // f32 path: total must equal the same expression on extracted scalars
        let dev = Device::Cpu;
        let ls = Tensor::from_vec(vec![0.123f32], (), &dev).unwrap();
        let lp = Tensor::from_vec(vec![0.456f32], (), &dev).unwrap();
        let la = Tensor::from_vec(vec![0.789f32], (), &dev).unwrap();
        let w = LossWeights {
            lambda_pixel: 1.0,
            lambda_p: 2.0,
            lambda_a: 3.0,
        };
        let out = generator_total_loss(&ls, Some(&lp), Some(&la), &w).unwrap();
        let total = out.total.to_scalar::<f32>().unwrap();
        let expect = 0.123f32 * 1.0 + 0.456f32 * 2.0 + 0.789f32 * 3.0;
        assert_eq!(total.to_bits(), expect.to_bits());

        // lambda_p = lambda_a = 0 -> equals pixel loss
        let w0 = LossWeights {
            lambda_pixel: 1.0,
            lambda_p: 0.0,
            lambda_a: 0.0,
        };
        let out0 = generator_total_loss(&ls, None, None, &w0).unwrap();
        assert_eq!(
            out0.total.to_scalar::<f32>().unwrap().to_bits(),
            0.123f32.to_bits()
        );
    }
}
