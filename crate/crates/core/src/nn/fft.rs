//! Real DFT and its transpose as differentiable candle ops backed by rustfft.
//!
//! `RealDft` maps rows `x[M, n]` to `[M, 2*bins]` holding `sum_i x_i cos`
//! then `-sum_i x_i sin`. `RealDftT` is its exact transpose. Each one's
//! backward pass is the other, so both are differentiable to any order.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub(crate) struct DftPlan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for DftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DftPlan({})", self.n)
    }
}

impl DftPlan {
    pub(crate) fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            n,
            fwd: p.plan_fft_forward(n),
            inv: p.plan_fft_inverse(n),
        }
    }

    pub(crate) fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// `[M, n] -> [M, 2*bins]`.
    pub(crate) fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op1(RealDft(self.clone()))
    }

    /// `[M, 2*bins] -> [M, n]`.
    pub(crate) fn transpose(&self, s: &Tensor) -> candle_core::Result<Tensor> {
        s.contiguous()?.apply_op1(RealDftT(self.clone()))
    }
}

struct RealDft(DftPlan);
struct RealDftT(DftPlan);

fn rows_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(Vec<f64>, usize, usize)> {
    let (m, w) = layout.shape().dims2()?;
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("dft op needs contiguous input".into()))?;
    let v = match storage {
        CpuStorage::F32(s) => s[start..end].iter().map(|&x| f64::from(x)).collect(),
        CpuStorage::F64(s) => s[start..end].to_vec(),
        _ => return Err(candle_core::Error::Msg("dft op supports f32/f64 only".into())),
    };
    Ok((v, m, w))
}

fn like(storage: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match storage {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

impl CustomOp1 for RealDft {
    fn name(&self) -> &'static str {
        "real-dft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plan = &self.0;
        let (x, m, n) = rows_f64(storage, layout)?;
        if n != plan.n {
            return Err(candle_core::Error::Msg(format!("dft of size {} got rows of {n}", plan.n)));
        }
        let bins = plan.bins();
        let mut out = vec![0.0; m * 2 * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for r in 0..m {
            for (b, &v) in buf.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *b = Complex64::new(v, 0.0);
            }
            plan.fwd.process(&mut buf);
            let row = &mut out[r * 2 * bins..(r + 1) * 2 * bins];
            for k in 0..bins {
                row[k] = buf[k].re;
                row[bins + k] = buf[k].im;
            }
        }
        Ok((like(storage, out), Shape::from((m, 2 * bins))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(self.0.transpose(grad)?))
    }
}

impl CustomOp1 for RealDftT {
    fn name(&self) -> &'static str {
        "real-dft-transpose"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plan = &self.0;
        let n = plan.n;
        let bins = plan.bins();
        let (s, m, w) = rows_f64(storage, layout)?;
        if w != 2 * bins {
            return Err(candle_core::Error::Msg(format!("dft transpose expects {} columns, got {w}", 2 * bins)));
        }
        let mut out = vec![0.0; m * n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for r in 0..m {
            let row = &s[r * w..(r + 1) * w];
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            // y_i = Re(sum_k (a_k + i b_k) e^{+2 pi i ik/n}) for the forward
            // pair (a, b) = (sum x cos, -sum x sin).
            for k in 0..bins {
                buf[k] = Complex64::new(row[k], row[bins + k]);
            }
            plan.inv.process(&mut buf);
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&buf) {
                *o = b.re;
            }
        }
        Ok((like(storage, out), Shape::from((m, n))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(self.0.forward(grad)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Var};
    use rand::Rng;
    use std::f64::consts::PI;

    fn rand_rows(m: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_direct_sums() {
        for n in [8usize, 9, 12] {
            let plan = DftPlan::new(n);
            let bins = plan.bins();
            let x = rand_rows(3, n, n as u64);
            let t = Tensor::from_vec(x.clone(), (3, n), &crate::nn::device()).unwrap();
            let y = plan.forward(&t).unwrap().to_vec2::<f64>().unwrap();
            for r in 0..3 {
                for k in 0..bins {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..n {
                        let a = 2.0 * PI * (i * k) as f64 / n as f64;
                        re += x[r * n + i] * a.cos();
                        im -= x[r * n + i] * a.sin();
                    }
                    assert!((y[r][k] - re).abs() < 1e-10);
                    assert!((y[r][bins + k] - im).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <F x, s> == <x, F^T s>
        let n = 10;
        let plan = DftPlan::new(n);
        let x = Tensor::from_vec(rand_rows(2, n, 1), (2, n), &crate::nn::device()).unwrap();
        let s = Tensor::from_vec(rand_rows(2, 2 * plan.bins(), 2), (2, 2 * plan.bins()), &crate::nn::device()).unwrap();
        let lhs = crate::nn::scalar(&(plan.forward(&x).unwrap() * &s).unwrap().sum_all().unwrap()).unwrap();
        let rhs = crate::nn::scalar(&(plan.transpose(&s).unwrap() * &x).unwrap().sum_all().unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn gradient_flows_through_both() {
        let n = 8;
        let plan = DftPlan::new(n);
        let x = Var::from_tensor(&Tensor::from_vec(rand_rows(1, n, 3), (1, n), &crate::nn::device()).unwrap()).unwrap();
        let y = plan.transpose(&plan.forward(x.as_tensor()).unwrap().sqr().unwrap()).unwrap();
        let loss = y.sum_all().unwrap();
        let g = loss.backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        // Central differences on the same composite.
        let base = x.as_tensor().to_vec2::<f64>().unwrap()[0].clone();
        let f = |v: &[f64]| {
            let t = Tensor::from_vec(v.to_vec(), (1, n), &crate::nn::device()).unwrap();
            crate::nn::scalar(&plan.transpose(&plan.forward(&t).unwrap().sqr().unwrap()).unwrap().sum_all().unwrap()).unwrap()
        };
        for i in 0..n {
            let mut a = base.clone();
            let mut b = base.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g[0][i]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g[0][i]);
        }
        let _ = DType::F64;
    }
}
