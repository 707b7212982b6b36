//! Single-pass CPU kernels for GELU and layer normalization with analytic
//! backward passes. Composed candle ops allocate one tensor per elementary
//! step, which dominates step time for the small models used here.

use candle_core::cpu::erf::{erf_f32, erf_f64};
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg(format!("{op} needs a contiguous input"))),
    }
}

macro_rules! gelu_kernels {
    ($t:ty, $erf:ident, $fwd:ident, $bwd:ident) => {
        fn $fwd(x: &[$t]) -> Vec<$t> {
            const R: $t = std::f64::consts::FRAC_1_SQRT_2 as $t;
            x.iter().map(|&v| 0.5 * v * (1.0 + $erf(v * R))).collect()
        }

        fn $bwd(x: &[$t], g: &[$t]) -> Vec<$t> {
            const R: $t = std::f64::consts::FRAC_1_SQRT_2 as $t;
            const C: $t = 0.398_942_280_401_432_7 as $t;
            x.iter()
                .zip(g)
                .map(|(&v, &d)| d * (0.5 * (1.0 + $erf(v * R)) + v * C * (-0.5 * v * v).exp()))
                .collect()
        }
    };
}

gelu_kernels!(f32, erf_f32, gelu_f32, gelu_grad_f32);
gelu_kernels!(f64, erf_f64, gelu_f64, gelu_grad_f64);

/// Exact (erf) GELU.
pub struct Gelu;

struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gelu_f32(slice(v, l, "gelu")?)),
            CpuStorage::F64(v) => CpuStorage::F64(gelu_f64(slice(v, l, "gelu")?)),
            _ => return Err(candle_core::Error::Msg("gelu supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "fused-gelu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(gelu_grad_f32(slice(x, l1, "gelu")?, slice(g, l2, "gelu")?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(gelu_grad_f64(slice(x, l1, "gelu")?, slice(g, l2, "gelu")?))
            }
            _ => return Err(candle_core::Error::Msg("gelu grad dtype mismatch".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

macro_rules! norm_kernels {
    ($t:ty, $fwd:ident, $bwd:ident) => {
        fn $fwd(x: &[$t], n: usize, eps: f64) -> Vec<$t> {
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(n) {
                let mean = row.iter().sum::<$t>() / n as $t;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<$t>() / n as $t;
                let inv = 1.0 / (var + eps as $t).sqrt();
                out.extend(row.iter().map(|&v| (v - mean) * inv));
            }
            out
        }

        // dx = inv * (dy - mean(dy) - y * mean(dy * y))
        fn $bwd(x: &[$t], g: &[$t], n: usize, eps: f64) -> Vec<$t> {
            let mut out = Vec::with_capacity(x.len());
            let mut y = vec![0.0 as $t; n];
            for (row, dy) in x.chunks(n).zip(g.chunks(n)) {
                let mean = row.iter().sum::<$t>() / n as $t;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<$t>() / n as $t;
                let inv = 1.0 / (var + eps as $t).sqrt();
                for (yi, &v) in y.iter_mut().zip(row) {
                    *yi = (v - mean) * inv;
                }
                let mdy = dy.iter().sum::<$t>() / n as $t;
                let mdyy = dy.iter().zip(&y).map(|(a, b)| a * b).sum::<$t>() / n as $t;
                out.extend(dy.iter().zip(&y).map(|(&d, &yi)| inv * (d - mdy - yi * mdyy)));
            }
            out
        }
    };
}

norm_kernels!(f32, norm_f32, norm_grad_f32);
norm_kernels!(f64, norm_f64, norm_grad_f64);

/// Normalizes the last dimension to zero mean and unit variance.
pub struct Standardize {
    pub eps: f64,
}

struct StandardizeGrad {
    eps: f64,
}

fn last_dim(l: &Layout) -> CResult<usize> {
    l.shape()
        .dims()
        .last()
        .copied()
        .filter(|&n| n > 0)
        .ok_or_else(|| candle_core::Error::Msg("layer norm needs a non-empty last dim".into()))
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "fused-standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = last_dim(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(norm_f32(slice(v, l, "layer norm")?, n, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(norm_f64(slice(v, l, "layer norm")?, n, self.eps)),
            _ => return Err(candle_core::Error::Msg("layer norm supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &StandardizeGrad { eps: self.eps })?))
    }
}

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "fused-standardize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(norm_grad_f32(
                slice(x, l1, "layer norm")?,
                slice(g, l2, "layer norm")?,
                n,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(norm_grad_f64(
                slice(x, l1, "layer norm")?,
                slice(g, l2, "layer norm")?,
                n,
                self.eps,
            )),
            _ => return Err(candle_core::Error::Msg("layer norm grad dtype mismatch".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

pub fn standardize(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Standardize { eps })
}
