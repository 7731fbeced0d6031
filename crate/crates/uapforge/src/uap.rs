//! The universal image perturbation and its l∞ budget.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Geometry;
use crate::error::{Result, UapError};

/// A universal image perturbation constrained to `|δ| ≤ ε` elementwise.
///
/// The tensor is stored in single precision so that disk round-trips are
/// bit-exact; all loss and gradient arithmetic happens in double precision
/// on upcast copies. The budget comparison is done in f32 against the f32
/// epsilon, which makes "≤ ε" exact rather than approximate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageUAP {
    delta: Array3<f32>,
    epsilon: f32,
}

impl ImageUAP {
    /// Wraps an existing tensor, enforcing the budget invariant.
    pub fn new(delta: Array3<f32>, epsilon: f32) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(UapError::Param(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        let uap = ImageUAP { delta, epsilon };
        uap.validate_budget()?;
        Ok(uap)
    }

    /// The all-zero perturbation.
    pub fn zeros(geometry: Geometry, epsilon: f32) -> Result<Self> {
        ImageUAP::new(Array3::zeros(geometry.shape()), epsilon)
    }

    /// Uniform random initialization in `[-ε, ε]`.
    pub fn random_init(geometry: Geometry, epsilon: f32, rng: &mut ChaCha8Rng) -> Result<Self> {
        let eps = f64::from(epsilon);
        let mut delta = Array3::<f32>::zeros(geometry.shape());
        for v in delta.iter_mut() {
            *v = rng.random_range(-eps..=eps) as f32;
        }
        ImageUAP::new(delta, epsilon)
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn geometry(&self) -> Geometry {
        let d = self.delta.dim();
        Geometry::new(d.0, d.1, d.2)
    }

    pub fn delta(&self) -> &Array3<f32> {
        &self.delta
    }

    /// Double-precision copy for loss/gradient arithmetic.
    pub fn delta_f64(&self) -> Array3<f64> {
        self.delta.mapv(f64::from)
    }

    /// Largest absolute entry.
    pub fn linf(&self) -> f32 {
        self.delta.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Errors unless `max |δ| ≤ ε` holds exactly.
    pub fn validate_budget(&self) -> Result<()> {
        for &v in self.delta.iter() {
            if !v.is_finite() || v.abs() > self.epsilon {
                return Err(UapError::Budget(format!(
                    "entry {v} exceeds epsilon {}",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }
}
