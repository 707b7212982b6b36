use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::flops;
use super::params::{Init, ParamStore};
use crate::error::{invalid, shape, Result};
use crate::rng::Rng;

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let z = x.broadcast_sub(&m)?;
    let lse = z.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(z.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `(n, k)` logits against hard targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    let ids = Tensor::from_slice(targets, (n, 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&ids, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean cross-entropy of `(n, k)` logits against `(n, k)` target distributions.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    let per = (log_softmax(logits)? * targets)?.sum(1)?;
    Ok((per.sum_all()? / n as f64)?.neg()?)
}

/// `y = x W + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_init(ps, name, fan_in, fan_out, Init::Xavier, true, rng)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = ps.init(&format!("{name}.weight"), &[fan_in, fan_out], init, rng)?;
        let bias = if bias {
            Some(ps.init(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (fan_in, fan_out) = self.weight.dims2()?;
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| shape("linear input has no dims"))?;
        if last != fan_in {
            return Err(shape(format!("linear expects last dim {fan_in}, got {last}")));
        }
        let rows = x.elem_count() / fan_in;
        flops::add(2 * (rows * fan_in * fan_out) as u64);
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = fan_out;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gamma: ps.init(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: ps.init(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xn = super::fused::standardize(x, self.eps)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, h, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        flops::add(4 * (b * h * n * n * dh) as u64);
        let att = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = softmax(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&super::fused::gelu(&self.fc1.forward(x)?)?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    /// `zero_out` zero-initializes both residual output projections so the
    /// fresh block is the identity map.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        zero_out: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!("width {dim} not divisible by {heads} heads")));
        }
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        let out_init = if zero_out { Init::Zeros } else { Init::Xavier };
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim, rng)?,
            attn: Attention {
                qkv: Linear::new(ps, &format!("{name}.attn.qkv"), dim, 3 * dim, rng)?,
                proj: Linear::with_init(ps, &format!("{name}.attn.proj"), dim, dim, out_init, true, rng)?,
                heads,
            },
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim, rng)?,
            mlp: Mlp {
                fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), dim, hidden, rng)?,
                fc2: Linear::with_init(ps, &format!("{name}.mlp.fc2"), hidden, dim, out_init, true, rng)?,
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Fixed 2-D sine-cosine position table, `(h*w) x dim`, row-major positions.
pub fn sincos_2d(h: usize, w: usize, dim: usize) -> Result<Vec<f32>> {
    if dim % 4 != 0 {
        return Err(invalid(format!("positional width {dim} must be a multiple of 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for coord in [x as f64, y as f64] {
                out.extend(omega.iter().map(|o| (coord * o).sin() as f32));
                out.extend(omega.iter().map(|o| (coord * o).cos() as f32));
            }
        }
    }
    Ok(out)
}

pub fn sincos_tensor(h: usize, w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(sincos_2d(h, w, dim)?, (h * w, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 4x4 kernel, stride 2, padding 1 (overlapping).
    Conv4x4Overlap,
    /// 2x2 kernel, stride 2 (non-overlapping).
    Conv2x2,
}

impl StemKind {
    fn geometry(self) -> (usize, usize, usize) {
        match self {
            StemKind::Conv4x4Overlap => (4, 2, 1),
            StemKind::Conv2x2 => (2, 2, 0),
        }
    }

    pub fn output_grid(self, h: usize, w: usize) -> (usize, usize) {
        let (k, s, p) = self.geometry();
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }
}

/// Convolutional adapter from a `(B, h, w, d)` embedding grid to a
/// `(B, h' * w', width)` sequence.
#[derive(Debug, Clone)]
pub struct Stem {
    pub kind: StemKind,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Stem {
    pub fn new(ps: &mut ParamStore, name: &str, kind: StemKind, d_in: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let (k, _, _) = kind.geometry();
        let fan_in = d_in * k * k;
        let bound = (6.0 / (fan_in + width) as f64).sqrt();
        Ok(Self {
            kind,
            kernel: ps.init(&format!("{name}.kernel"), &[width, d_in, k, k], Init::Uniform(bound), rng)?,
            bias: ps.init(&format!("{name}.bias"), &[width], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, d) = x.dims4()?;
        let (width, d_in, k, _) = self.kernel.dims4()?;
        if d != d_in {
            return Err(shape(format!("stem expects {d_in} channels, got {d}")));
        }
        let (_, s, p) = self.kind.geometry();
        let (oh, ow) = self.kind.output_grid(h, w);
        flops::add(2 * (b * oh * ow * width * d_in * k * k) as u64);
        let y = x.permute((0, 3, 1, 2))?.contiguous()?.conv2d(&self.kernel, p, s, 1, 1)?;
        let y = y.flatten_from(2)?.transpose(1, 2)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}
