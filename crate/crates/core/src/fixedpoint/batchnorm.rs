use crate::error::{Error, Result};

/// Inference-time batch-norm parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`
    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        self.gamma[channel] * (x - self.mean[channel]) / (self.var[channel] + self.eps).sqrt() + self.beta[channel]
    }
}

/// Batch norm reduced to a per-channel multiply-add.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedBn {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl FoldedBn {
    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        x * self.scale[channel] + self.shift[channel]
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Folds BN (and an optional convolution bias) into `scale` and `shift` so that
/// `conv(x) * scale + shift == BN(conv(x) + bias)`.
pub fn fold_batchnorm(bn: &BatchNorm, conv_bias: Option<&[f64]>) -> Result<FoldedBn> {
    let n = bn.gamma.len();
    if [bn.beta.len(), bn.mean.len(), bn.var.len()].iter().any(|&l| l != n) || conv_bias.is_some_and(|b| b.len() != n) {
        return Err(Error::invalid("batch-norm vectors differ in length"));
    }
    if bn.eps.is_nan() || bn.eps <= 0.0 {
        return Err(Error::invalid("batch-norm eps must be > 0"));
    }
    let mut scale = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for c in 0..n {
        if bn.var[c] < 0.0 {
            return Err(Error::NegativeVariance {
                channel: c,
                value: bn.var[c],
            });
        }
        let s = bn.gamma[c] / (bn.var[c] + bn.eps).sqrt();
        let bias = conv_bias.map_or(0.0, |b| b[c]);
        scale.push(s);
        shift.push(bn.beta[c] - s * bn.mean[c] + s * bias);
    }
    Ok(FoldedBn { scale, shift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> BatchNorm {
        BatchNorm {
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            var: vec![var],
            eps,
        }
    }

    #[test]
    fn identity_fold() {
        let eps = 1e-5;
        let f = fold_batchnorm(&single(1.0, 0.0, 0.0, 1.0 - eps, eps), None).unwrap();
        assert!((f.scale[0] - 1.0).abs() < 1e-12);
        assert!(f.shift[0].abs() < 1e-12);
    }

    #[test]
    fn worked_fold() {
        let eps = 1e-3;
        let f = fold_batchnorm(&single(2.0, 1.0, 3.0, 4.0 - eps, eps), None).unwrap();
        assert!((f.scale[0] - 1.0).abs() < 1e-12);
        assert!((f.shift[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_variance_rejected() {
        let err = fold_batchnorm(&single(1.0, 0.0, 0.0, -0.5, 1e-5), None).unwrap_err();
        assert!(matches!(err, Error::NegativeVariance { channel: 0, .. }));
    }

    #[test]
    fn folded_matches_explicit_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let bn = single(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.0..10.0),
                1e-5,
            );
            let bias = [rng.random_range(-2.0..2.0)];
            let f = fold_batchnorm(&bn, Some(&bias)).unwrap();
            let x: f64 = rng.random_range(-10.0..10.0);
            let explicit = bn.apply(0, x + bias[0]);
            let folded = f.apply(0, x);
            let tol = 1e-6 * explicit.abs().max(1.0);
            assert!((explicit - folded).abs() <= tol, "{explicit} vs {folded}");
        }
    }
}
