//! Fused row-wise kernels with hand-written backward passes.
//!
//! Composing softmax, layer norm and GELU from primitive tensor ops works but
//! spends most of a training step in allocation and broadcasting; these fused
//! versions run directly on `f32` or `f64` storage.

use std::ops::{Add, Div, Mul, Neg, Sub};

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

trait Real:
    WithDType + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn lit(v: f64) -> Self;
}

macro_rules! real {
    ($t:ty, $erf:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn erf(self) -> Self {
                $erf(self)
            }
            fn maxv(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            fn lit(v: f64) -> Self {
                v as $t
            }
        }
    };
}

real!(f32, candle_core::cpu::erf::erf_f32);
real!(f64, candle_core::cpu::erf::erf_f64);

fn slice<'a, T: Real>(s: &'a CpuStorage, l: &Layout, op: &'static str) -> CResult<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or(candle_core::Error::RequiresContiguous { op })?;
    Ok(&T::cpu_storage_as_slice(s)?[a..b])
}

fn values<T: Real>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn tensor_like<T: Real>(v: Vec<T>, like: &Tensor) -> CResult<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())
}

fn row_len(shape: &Shape) -> usize {
    *shape.dims().last().unwrap_or(&1)
}

macro_rules! dispatch {
    ($dtype:expr, $op:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => Err(candle_core::Error::UnsupportedDTypeForOp(other, $op)),
        }
    };
}

/// `softmax` over the last axis.
struct Softmax;

fn softmax_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let n = row_len(l.shape());
    let mut x = slice::<T>(s, l, "row-softmax")?.to_vec();
    for row in x.chunks_mut(n) {
        let max = row.iter().fold(T::lit(f64::NEG_INFINITY), |m, &v| m.maxv(v));
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((T::to_cpu_storage_owned(x), l.shape().clone()))
}

fn softmax_bwd<T: Real>(arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
    let n = row_len(arg.shape());
    let (y, mut g) = (values::<T>(res)?, values::<T>(grad)?);
    for (yr, gr) in y.chunks(n).zip(g.chunks_mut(n)) {
        let dot = yr.iter().zip(gr.iter()).fold(T::ZERO, |a, (&p, &q)| a + p * q);
        for (&yi, gi) in yr.iter().zip(gr.iter_mut()) {
            *gi = yi * (*gi - dot);
        }
    }
    Ok(Some(tensor_like(g, arg)?))
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "row-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s.dtype(), self.name(), softmax_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        dispatch!(arg.dtype(), self.name(), softmax_bwd(arg, res, grad))
    }
}

/// `log_softmax` over the last axis.
struct LogSoftmax;

fn log_softmax_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let n = row_len(l.shape());
    let mut x = slice::<T>(s, l, "row-log-softmax")?.to_vec();
    for row in x.chunks_mut(n) {
        let max = row.iter().fold(T::lit(f64::NEG_INFINITY), |m, &v| m.maxv(v));
        let sum = row.iter().fold(T::ZERO, |a, &v| a + (v - max).exp());
        let lse = sum.ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok((T::to_cpu_storage_owned(x), l.shape().clone()))
}

fn log_softmax_bwd<T: Real>(arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
    let n = row_len(arg.shape());
    let (y, mut g) = (values::<T>(res)?, values::<T>(grad)?);
    for (yr, gr) in y.chunks(n).zip(g.chunks_mut(n)) {
        let total = gr.iter().fold(T::ZERO, |a, &v| a + v);
        for (&yi, gi) in yr.iter().zip(gr.iter_mut()) {
            *gi -= yi.exp() * total;
        }
    }
    Ok(Some(tensor_like(g, arg)?))
}

impl CustomOp1 for LogSoftmax {
    fn name(&self) -> &'static str {
        "row-log-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s.dtype(), self.name(), log_softmax_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        dispatch!(arg.dtype(), self.name(), log_softmax_bwd(arg, res, grad))
    }
}

/// Exact (erf-based) GELU.
struct Gelu;

fn gelu_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (half, r2) = (T::lit(0.5), T::lit(std::f64::consts::FRAC_1_SQRT_2));
    let x: Vec<T> = slice::<T>(s, l, "gelu")?
        .iter()
        .map(|&v| half * v * (T::ONE + (v * r2).erf()))
        .collect();
    Ok((T::to_cpu_storage_owned(x), l.shape().clone()))
}

fn gelu_bwd<T: Real>(arg: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
    let (half, r2) = (T::lit(0.5), T::lit(std::f64::consts::FRAC_1_SQRT_2));
    let pdf_scale = T::lit(0.398_942_280_401_432_7);
    let (x, mut g) = (values::<T>(arg)?, values::<T>(grad)?);
    for (&v, gi) in x.iter().zip(g.iter_mut()) {
        let cdf = half * (T::ONE + (v * r2).erf());
        *gi *= cdf + v * pdf_scale * (-half * v * v).exp();
    }
    Ok(Some(tensor_like(g, arg)?))
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s.dtype(), self.name(), gelu_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        dispatch!(arg.dtype(), self.name(), gelu_bwd(arg, grad))
    }
}

/// Layer norm over the last axis with gain and bias.
struct LayerNorm {
    eps: f64,
}

/// Per-row mean and inverse standard deviation.
fn row_stats<T: Real>(x: &[T], n: usize, eps: f64) -> Vec<(T, T)> {
    let inv_n = T::lit(1.0 / n as f64);
    x.chunks(n)
        .map(|row| {
            let mean = row.iter().fold(T::ZERO, |a, &v| a + v) * inv_n;
            let var = row.iter().fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            (mean, T::ONE / (var + T::lit(eps)).sqrt())
        })
        .collect()
}

fn layer_norm_fwd<T: Real>(
    eps: f64,
    (s1, l1): (&CpuStorage, &Layout),
    (s2, l2): (&CpuStorage, &Layout),
    (s3, l3): (&CpuStorage, &Layout),
) -> CResult<(CpuStorage, Shape)> {
    let n = row_len(l1.shape());
    let mut x = slice::<T>(s1, l1, "layer-norm")?.to_vec();
    let (g, b) = (slice::<T>(s2, l2, "layer-norm")?, slice::<T>(s3, l3, "layer-norm")?);
    if g.len() != n || b.len() != n {
        return Err(candle_core::Error::Msg(format!(
            "layer norm over {n} features with gain {} and bias {}",
            g.len(),
            b.len()
        )));
    }
    let stats = row_stats(&x, n, eps);
    for (row, &(mean, inv)) in x.chunks_mut(n).zip(&stats) {
        for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mean) * inv * gi + bi;
        }
    }
    Ok((T::to_cpu_storage_owned(x), l1.shape().clone()))
}

type Grads3 = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn layer_norm_bwd<T: Real>(eps: f64, x: &Tensor, gain: &Tensor, bias: &Tensor, grad: &Tensor) -> CResult<Grads3> {
    let n = row_len(x.shape());
    let (xv, gv, dy) = (values::<T>(x)?, values::<T>(gain)?, values::<T>(grad)?);
    let stats = row_stats(&xv, n, eps);
    let inv_n = T::lit(1.0 / n as f64);
    let mut dx = vec![T::ZERO; xv.len()];
    let mut dg = vec![T::ZERO; n];
    let mut db = vec![T::ZERO; n];
    let mut xhat = vec![T::ZERO; n];
    let mut gh = vec![T::ZERO; n];
    for (r, &(mean, inv)) in stats.iter().enumerate() {
        let (xr, dyr) = (&xv[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
        let (mut sum_gh, mut sum_gh_xhat) = (T::ZERO, T::ZERO);
        for i in 0..n {
            xhat[i] = (xr[i] - mean) * inv;
            gh[i] = dyr[i] * gv[i];
            sum_gh += gh[i];
            sum_gh_xhat += gh[i] * xhat[i];
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
        }
        let (m1, m2) = (sum_gh * inv_n, sum_gh_xhat * inv_n);
        for i in 0..n {
            dx[r * n + i] = inv * (gh[i] - m1 - xhat[i] * m2);
        }
    }
    Ok((
        Some(tensor_like(dx, x)?),
        Some(tensor_like(dg, gain)?),
        Some(tensor_like(db, bias)?),
    ))
}

impl CustomOp3 for LayerNorm {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1.dtype(), self.name(), layer_norm_fwd(self.eps, (s1, l1), (s2, l2), (s3, l3)))
    }

    fn bwd(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Grads3> {
        dispatch!(x.dtype(), self.name(), layer_norm_bwd(self.eps, x, gain, bias, grad))
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(LogSoftmax)
}

pub(crate) fn gelu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

pub(crate) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&gain.contiguous()?, &bias.contiguous()?, LayerNorm { eps })
}
