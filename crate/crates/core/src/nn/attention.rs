use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Scaled dot-product attention with `heads` heads and no projections.
///
/// q: (B, Nq, d), k/v: (B, Nkv, d) -> (B, Nq, d). Softmax is taken per row
/// over the key axis; heads are split from and merged back into `d`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, nq, d) = q.dims3()?;
    let (bk, nkv, dk_in) = k.dims3()?;
    let (bv, nv, dv_in) = v.dims3()?;
    if bk != b || bv != b || nv != nkv || dk_in != d || dv_in != d {
        return Err(Error::contract(format!(
            "attention shapes inconsistent: q{:?} k{:?} v{:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::contract(format!(
            "embed dim {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        // (B, N, d) -> (B, heads, N, dk)
        Ok(t.reshape((b, n, heads, dk))?
            .permute((0, 2, 1, 3))?
            .contiguous()?)
    };
    let qh = split(q, nq)?;
    let kh = split(k, nkv)?;
    let vh = split(v, nkv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let scores = qh
        .matmul(&kh.permute((0, 1, 3, 2))?.contiguous()?)?
        .affine(scale, 0.0)?; // (B, heads, Nq, Nkv)
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights.matmul(&vh)?; // (B, heads, Nq, dk)
    Ok(out
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .reshape((b, nq, d))?)
}

/// NCHW feature map -> token sequence (B, H*W, C).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b, h * w, c))?)
}

/// Token sequence (B, H*W, C) -> NCHW feature map.
pub fn to_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!(
            "token count {n} does not match {h}x{w}"
        )));
    }
    Ok(x.reshape((b, h, w, c))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Row-interpolation matrix for 1-D linear resampling (align_corners=false,
/// edge clamped), as used by bilinear_resize below.
fn interp_matrix(src: usize, dst: usize, device: &candle_core::Device) -> Result<Vec<f64>> {
    let _ = device;
    let mut m = vec![0f64; dst * src];
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let x = (o as f64 + 0.5) * scale - 0.5;
        let x0 = x.floor();
        let frac = x - x0;
        let i0 = (x0 as isize).clamp(0, src as isize - 1) as usize;
        let i1 = ((x0 as isize) + 1).clamp(0, src as isize - 1) as usize;
        m[o * src + i0] += 1.0 - frac;
        m[o * src + i1] += frac;
    }
    Ok(m)
}

/// Bilinear resize of a NCHW tensor to (th, tw), align_corners=false.
///
/// Implemented as two dense interpolation matmuls so it is differentiable
/// and bit-deterministic. Identity when the size already matches.
pub fn bilinear_resize(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if th == 0 || tw == 0 {
        return Err(Error::shape("bilinear_resize target must be >= 1".to_string()));
    }
    if th == h && tw == w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let mut y = x.reshape((b * c, h, w))?;
    if th != h {
        let l = Tensor::from_vec(interp_matrix(h, th, dev)?, (1, th, h), dev)?.to_dtype(dtype)?;
        y = l.broadcast_matmul(&y)?; // (b*c, th, w)
    }
    if tw != w {
        // (tw, w) interpolation matrix transposed for the right multiply
        let r = Tensor::from_vec(interp_matrix(w, tw, dev)?, (1, tw, w), dev)?
            .to_dtype(dtype)?
            .transpose(1, 2)?
            .contiguous()?;
        y = y.broadcast_matmul(&r)?; // (b*c, th, tw)
    }
    Ok(y.reshape((b, c, th, tw))?)
}

/// Nearest-neighbor 2x upsampling, differentiable.
pub fn upsample_nearest_x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}
