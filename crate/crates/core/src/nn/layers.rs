use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::params::{Init, Params};

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, 0) + slope * min(x, 0)
    let pos = x.relu()?;
    let neg = x.neg()?.relu()?.affine(-slope, 0.0)?;
    Ok((pos + neg)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &Params,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        init_scale: f64,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let w = p.take(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::Kaiming {
                fan_in,
                scale: init_scale,
            },
        )?;
        let b = Some(p.take(&format!("{name}.bias"), &[cout], Init::Zeros)?);
        Ok(Self {
            w,
            b,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &self.w)
    }

    pub(crate) fn forward_with_weight(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let k = w.dims()[2].max(w.dims()[3]);
        // candle 0.9 CPU bug: the tiled conv kernel (taken for k > 1)
        // misreads any input whose strides equal [h*w*c, w*c, c, 1] — e.g.
        // every contiguous NCHW map with c == h == w — by indexing it as
        // channels-last. Appending one zero column occupies a position the
        // convolution zero-pads anyway, so values are unchanged; it only
        // breaks the stride coincidence. The extra output column is cropped.
        let y = if k > 1 && Self::hits_tiled_stride_bug(x) {
            let (_b, _c, _h, win) = x.dims4()?;
            let out_w = (win + 2 * self.padding - w.dims()[3]) / self.stride + 1;
            let padded = x.pad_with_zeros(3, 0, 1)?;
            let y = padded.conv2d(w, self.padding, self.stride, 1, 1)?;
            y.narrow(3, 0, out_w)?
        } else {
            x.conv2d(w, self.padding, self.stride, 1, 1)?
        };
        match &self.b {
            Some(b) => {
                let b = b.reshape((1, b.elem_count(), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }

    fn hits_tiled_stride_bug(x: &Tensor) -> bool {
        match x.dims4() {
            Ok((_b, c, h, w)) => x.stride() == [h * w * c, w * c, c, 1],
            Err(_) => false,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored as (in, out); forward is x @ w + b.
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = p.take(
            &format!("{name}.weight"),
            &[cin, cout],
            Init::FanInUniform { fan_in: cin },
        )?;
        let b = Some(p.take(&format!("{name}.bias"), &[cout], Init::Zeros)?);
        Ok(Self { w, b })
    }

    /// x: (..., cin) -> (..., cout)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.w)?;
        match &self.b {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// LayerNorm over the last dimension, with affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.take(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: p.take(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mu = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let inv = (var + self.eps)?.sqrt()?;
        let xhat = xc.broadcast_div(&inv)?;
        Ok(xhat
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// GroupNorm over (C/G, H, W) slices of a NCHW tensor, per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

/// Largest divisor of `channels` that does not exceed `requested`.
pub fn effective_groups(channels: usize, requested: usize) -> usize {
    (1..=requested.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(p: &Params, name: &str, channels: usize, requested_groups: usize) -> Result<Self> {
        let groups = effective_groups(channels, requested_groups);
        Ok(Self {
            gamma: p.take(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: p.take(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c % self.groups != 0 {
            return Err(Error::shape(format!(
                "group norm: {c} channels not divisible by {} groups",
                self.groups
            )));
        }
        let g = self.groups;
        let xs = x.reshape((b, g, c / g * h * w))?;
        let mu = xs.mean_keepdim(D::Minus1)?;
        let xc = xs.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let inv = (var + self.eps)?.sqrt()?;
        let xhat = xc.broadcast_div(&inv)?.reshape((b, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// BatchNorm over (B, H, W) per channel, with running statistics.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    name: String,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(p: &Params, name: &str, channels: usize) -> Result<Self> {
        let gamma = p.take(&format!("{name}.gamma"), &[channels], Init::Ones)?;
        let beta = p.take(&format!("{name}.beta"), &[channels], Init::Zeros)?;
        let _ = p.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?;
        let _ = p.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?;
        Ok(Self {
            gamma,
            beta,
            name: name.to_string(),
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, p: &Params, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            // batch statistics over (B, H, W); biased variance for the
            // normalization, unbiased for the running estimate
            let xt = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = xt.mean_keepdim(D::Minus1)?; // (c,1)
            let xc = xt.broadcast_sub(&mean)?;
            let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
            let n = (b * h * w) as f64;
            let unbiased = var.affine(n / (n - 1.0).max(1.0), 0.0)?;
            let rm_name = format!("{}.running_mean", self.name);
            let rv_name = format!("{}.running_var", self.name);
            let rm = p.get(&rm_name).expect("bn running mean");
            let rv = p.get(&rv_name).expect("bn running var");
            let new_rm = (rm.affine(1.0 - self.momentum, 0.0)?
                + mean.reshape(c)?.detach().affine(self.momentum, 0.0)?)?;
            let new_rv = (rv.affine(1.0 - self.momentum, 0.0)?
                + unbiased.reshape(c)?.detach().affine(self.momentum, 0.0)?)?;
            p.set_buffer(&rm_name, &new_rm)?;
            p.set_buffer(&rv_name, &new_rv)?;
            (mean.reshape(c)?, var.reshape(c)?)
        } else {
            (
                p.get(&format!("{}.running_mean", self.name))
                    .expect("bn running mean"),
                p.get(&format!("{}.running_var", self.name))
                    .expect("bn running var"),
            )
        };
        let mean = mean.reshape((1, c, 1, 1))?;
        let inv = (var.reshape((1, c, 1, 1))? + self.eps)?.sqrt()?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&inv)?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Conv2d whose weight is divided by its top singular value, estimated with
/// persistent power-iteration vectors. The normalization itself is part of
/// the autodiff graph (u, v are treated as constants), matching the usual
/// spectral-norm training formulation.
#[derive(Debug)]
pub struct SpectralConv2d {
    pub conv: Conv2d,
    name: String,
    pub enabled: bool,
}

impl SpectralConv2d {
    pub fn new(
        p: &Params,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        enabled: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(p, name, cin, cout, k, stride, padding, 1.0)?;
        if enabled {
            let cols = cin * k * k;
            let _ = p.buffer(&format!("{name}.sn_u"), &[1, cout], Init::Normal(1.0))?;
            let _ = p.buffer(&format!("{name}.sn_v"), &[cols, 1], Init::Normal(1.0))?;
        }
        Ok(Self {
            conv,
            name: name.to_string(),
            enabled,
        })
    }

    /// One power-iteration refinement of (u, v) against the detached weight.
    fn power_iterate(&self, p: &Params, wmat: &Tensor, iters: usize) -> Result<(Tensor, Tensor)> {
        let un = format!("{}.sn_u", self.name);
        let vn = format!("{}.sn_v", self.name);
        let mut u = p.get(&un).expect("sn_u");
        let mut v = p.get(&vn).expect("sn_v");
        let wd = wmat.detach();
        for _ in 0..iters {
            // v <- normalize(W^T u^T), u <- normalize(W v)^T
            let wv = wd.t()?.matmul(&u.t()?)?; // (cols,1)
            v = normalize_vec(&wv)?;
            let wu = wd.matmul(&v)?; // (cout,1)
            u = normalize_vec(&wu)?.t()?.contiguous()?;
        }
        p.set_buffer(&un, &u)?;
        p.set_buffer(&vn, &v)?;
        Ok((u, v))
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return self.conv.forward(x);
        }
        let dims = self.conv.w.dims().to_vec();
        let cout = dims[0];
        let cols: usize = dims[1..].iter().product();
        let wmat = self.conv.w.reshape((cout, cols))?;
        let (u, v) = self.power_iterate(p, &wmat, 1)?;
        // sigma = u W v, computed through the graph so gradients flow into W
        let sigma = u.matmul(&wmat)?.matmul(&v)?.reshape(())?;
        let w_sn = self
            .conv
            .w
            .broadcast_div(&sigma.reshape((1, 1, 1, 1))?)?;
        self.conv.forward_with_weight(x, &w_sn)
    }

    /// Run power iteration to convergence and return the sigma estimate.
    pub fn converge_sigma(&self, p: &Params, tol: f64, max_iters: usize) -> Result<f64> {
        let dims = self.conv.w.dims().to_vec();
        let cout = dims[0];
        let cols: usize = dims[1..].iter().product();
        let wmat = self.conv.w.reshape((cout, cols))?.detach();
        let mut last = f64::INFINITY;
        for _ in 0..max_iters {
            let (u, v) = self.power_iterate(p, &wmat, 1)?;
            let sigma = u
                .matmul(&wmat)?
                .matmul(&v)?
                .reshape(())?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            if (sigma - last).abs() < tol {
                return Ok(sigma);
            }
            last = sigma;
        }
        Ok(last)
    }

    /// The effective (normalized) weight as used by the most recent forward.
    pub fn effective_weight(&self, p: &Params) -> Result<Tensor> {
        if !self.enabled {
            return Ok(self.conv.w.detach());
        }
        let dims = self.conv.w.dims().to_vec();
        let cout = dims[0];
        let cols: usize = dims[1..].iter().product();
        let wmat = self.conv.w.reshape((cout, cols))?.detach();
        let u = p.get(&format!("{}.sn_u", self.name)).expect("sn_u");
        let v = p.get(&format!("{}.sn_v", self.name)).expect("sn_v");
        let sigma = u.matmul(&wmat)?.matmul(&v)?.reshape((1, 1, 1, 1))?;
        Ok(self.conv.w.detach().broadcast_div(&sigma)?)
    }
}

fn normalize_vec(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_all()?.sqrt()?.reshape((1, 1))?;
    let norm = (norm + 1e-12)?;
    Ok(t.broadcast_div(&norm)?)
}
