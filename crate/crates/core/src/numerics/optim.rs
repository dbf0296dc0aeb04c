//! RMSProp without momentum; epsilon is added outside the square root.

use thiserror::Error;

use super::array::DimError;
use super::model::{GradientSet, ModelParams, ModelShape};
use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error(transparent)]
    Dim(#[from] DimError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 0.005,
            decay: 0.99,
            epsilon: 0.01,
        }
    }
}

/// Optimizer state: running mean of squared gradients per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<S> {
    pub config: RmsPropConfig,
    pub mean_square: GradientSet<S>,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(shape: ModelShape, config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            mean_square: GradientSet::zeros(shape),
        }
    }

    /// `g2 ← α·g2 + (1−α)·g²; θ ← θ − lr·g/(√g2 + ε)`, then bumps the params
    /// version. A non-finite gradient leaves params and state untouched.
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &GradientSet<S>) -> Result<(), OptimError> {
        let shape = params.shape();
        for ((name, g), dims) in grads.tensors().into_iter().zip(shape.param_dims()) {
            g.expect_dims(name, &dims)?;
            if !g.data().iter().all(|x| x.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name));
            }
        }
        for ((name, g2), dims) in self.mean_square.tensors().into_iter().zip(shape.param_dims()) {
            g2.expect_dims(name, &dims)?;
        }

        let lr = S::lit(self.config.learning_rate);
        let alpha = S::lit(self.config.decay);
        let eps = S::lit(self.config.epsilon);
        let one = S::one();
        for (((_, p), (_, g2)), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.mean_square.tensors_mut())
            .zip(grads.tensors())
        {
            for ((p, m), &g) in p.data_mut().iter_mut().zip(g2.data_mut()).zip(g.data()) {
                *m = alpha * *m + (one - alpha) * g * g;
                *p -= lr * g / (m.sqrt() + eps);
            }
        }
        params.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(value: f64) -> ModelParams<f64> {
        let mut p = ModelParams::zeros(ModelShape::new(1, 1, 1));
        p.w1.data_mut()[0] = value;
        p
    }

    fn grad_on_w1(value: f64) -> GradientSet<f64> {
        let mut g = GradientSet::zeros(ModelShape::new(1, 1, 1));
        g.w1.data_mut()[0] = value;
        g
    }

    #[test]
    fn zero_gradient_only_bumps_version() {
        let mut p = scalar_model(0.7);
        let before = p.clone();
        let mut opt = RmsProp::new(p.shape(), RmsPropConfig::default());
        opt.step(&mut p, &grad_on_w1(0.0)).unwrap();
        assert_eq!(p.version, 1);
        p.version = 0;
        assert_eq!(p, before);
    }

    #[test]
    fn hand_evaluated_update() {
        let mut p = scalar_model(1.0);
        let cfg = RmsPropConfig {
            learning_rate: 0.1,
            decay: 0.99,
            epsilon: 0.0,
        };
        let mut opt = RmsProp::new(p.shape(), cfg);
        opt.step(&mut p, &grad_on_w1(1.0)).unwrap();
        assert!((opt.mean_square.w1.data()[0] - 0.01).abs() < 1e-15);
        assert!(p.w1.data()[0].abs() < 1e-12);
    }

    #[test]
    fn repeated_gradient_shrinks_step() {
        let mut p = scalar_model(0.0);
        let mut opt = RmsProp::new(p.shape(), RmsPropConfig::default());
        opt.step(&mut p, &grad_on_w1(1.0)).unwrap();
        let step1 = -p.w1.data()[0];
        opt.step(&mut p, &grad_on_w1(1.0)).unwrap();
        let step2 = -p.w1.data()[0] - step1;
        assert!(step2 < step1, "{step2} !< {step1}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar_model(1.0);
        let before = p.clone();
        let mut opt = RmsProp::new(p.shape(), RmsPropConfig::default());
        let err = opt.step(&mut p, &grad_on_w1(f64::NAN)).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("W1"));
        assert_eq!(p, before);
        assert_eq!(opt.mean_square, GradientSet::zeros(p.shape()));
    }

    #[test]
    fn mismatched_gradient_shape_rejected() {
        let mut p = scalar_model(1.0);
        let mut opt = RmsProp::new(p.shape(), RmsPropConfig::default());
        let g = GradientSet::zeros(ModelShape::new(2, 1, 1));
        assert!(matches!(opt.step(&mut p, &g), Err(OptimError::Dim(_))));
    }
}
