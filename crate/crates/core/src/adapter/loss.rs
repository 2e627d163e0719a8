use candle_core::{Tensor, D};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{ensure_finite, scalar};
use crate::seed;

/// Per-frame squared error summed over channels plus cosine distance,
/// averaged over frames (and batch rows). Inputs `[B, T, D]` or `[T, D]`.
///
/// Any frame whose L2 norm is below 1e-8 in either argument is a numeric
/// error, since the cosine is undefined there.
pub fn semantic_loss(f: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    if f.dims() != f_hat.dims() {
        return Err(Error::config(format!(
            "semantic loss shape mismatch {:?} vs {:?}",
            f.dims(),
            f_hat.dims()
        )));
    }
    let nf = f.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nh = f_hat.sqr()?.sum(D::Minus1)?.sqrt()?;
    let min_norm = scalar(&nf.min_all()?.minimum(&nh.min_all()?)?)?;
    if !(min_norm >= 1e-8) {
        return Err(Error::numeric(format!(
            "frame norm {min_norm:e} below 1e-8; cosine distance undefined"
        )));
    }
    let sq = (f - f_hat)?.sqr()?.sum(D::Minus1)?;
    let cos = ((f * f_hat)?.sum(D::Minus1)? / (nf * nh)?)?;
    let per_frame = ((sq - cos)? + 1.0)?;
    Ok(per_frame.mean_all()?)
}

/// [`semantic_loss`] on host feature sequences.
pub fn semantic_loss_frames(f: &FeatureSequence, f_hat: &FeatureSequence) -> Result<f64> {
    let dt = candle_core::DType::F64;
    scalar(&semantic_loss(&f.to_tensor(dt)?, &f_hat.to_tensor(dt)?)?)
}

/// `-1/2 * mean_frames sum_d (1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    ensure_finite(logvar, "log-variance")?;
    let inner = ((logvar + 1.0)? - mu.sqr()?)?.sub(&logvar.exp()?)?;
    Ok((inner.sum(D::Minus1)?.mean_all()? * -0.5)?)
}

/// `mu + sigma * eps` with `eps ~ N(0, I)` drawn from `seed`. `sigma` is
/// `exp(logvar / 2)` when `logvar` is given, otherwise the fixed `fixed_sigma`.
pub fn reparameterize(mu: &Tensor, logvar: Option<&Tensor>, fixed_sigma: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = seed::rng(seed);
    let n = mu.elem_count();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps = Tensor::from_vec(eps, mu.shape(), mu.device())?.to_dtype(mu.dtype())?;
    let z = match logvar {
        Some(lv) => {
            ensure_finite(lv, "log-variance")?;
            (mu + (lv * 0.5)?.exp()?.mul(&eps)?)?
        }
        None => (mu + (&eps * fixed_sigma)?)?,
    };
    Ok((z, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn t(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &crate::nn::device()).unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let f = t(&[1.0, 2.0, -1.0, 0.5], (2, 2));
        assert!(scalar(&semantic_loss(&f, &f).unwrap()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn antipodal_unit_frame() {
        let f = t(&[1.0, 0.0], (1, 2));
        let g = t(&[-1.0, 0.0], (1, 2));
        assert!((scalar(&semantic_loss(&f, &g).unwrap()).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frame_is_numeric_error() {
        let f = t(&[0.0, 0.0, 1.0, 1.0], (2, 2));
        let g = t(&[1.0, 0.0, 1.0, 1.0], (2, 2));
        assert!(matches!(semantic_loss(&f, &g), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_closed_forms() {
        let z = t(&[0.0, 0.0], (1, 2));
        assert!(scalar(&kl_loss(&z, &z).unwrap()).unwrap().abs() < 1e-12);
        let mu = t(&[1.0], (1, 1));
        let lv = t(&[0.0], (1, 1));
        assert!((scalar(&kl_loss(&mu, &lv).unwrap()).unwrap() - 0.5).abs() < 1e-12);
        let bad = t(&[f64::NAN], (1, 1));
        assert!(matches!(kl_loss(&mu, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn fixed_sigma_draw_is_exact() {
        let mu = Tensor::zeros((3, 4), DType::F64, &crate::nn::device()).unwrap();
        let (z, eps) = reparameterize(&mu, None, 0.1, 9).unwrap();
        let z = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = eps.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in z.iter().zip(&eps) {
            assert_eq!(*a, 0.1 * b);
        }
    }
}
