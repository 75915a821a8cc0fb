//! Central finite-difference gradient checking over sampled coordinates.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.rel_error <= tol)
    }
}

/// Relative error with a floor on the denominator so that two gradients
/// that are both numerically zero compare equal.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let shape = var.shape().clone();
    let mut data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    data[index] = value;
    var.set(&Tensor::from_vec(data, shape, var.device())?)?;
    Ok(())
}

fn get_element(var: &Var, index: usize) -> Result<f64> {
    Ok(var.as_tensor().flatten_all()?.to_vec1::<f64>()?[index])
}

/// Compare backprop gradients of `loss` against central differences on
/// `samples` coordinates drawn uniformly over all elements of `params`.
pub fn check_gradients<F>(
    params: &[(String, Var)],
    loss: F,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let total: usize = params.iter().map(|(_, v)| v.elem_count()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no parameters to check".into()));
    }
    let value = loss()?;
    let grads = value.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= params[which].1.elem_count() {
            flat -= params[which].1.elem_count();
            which += 1;
        }
        let (name, var) = &params[which];
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[flat],
            None => 0.0,
        };
        let original = get_element(var, flat)?;
        set_element(var, flat, original + step)?;
        let plus = loss()?.to_scalar::<f64>()?;
        set_element(var, flat, original - step)?;
        let minus = loss()?.to_scalar::<f64>()?;
        set_element(var, flat, original)?;
        let numeric = (plus - minus) / (2.0 * step);
        checks.push(CoordinateCheck {
            param: name.clone(),
            index: flat,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, 1e-6),
        });
    }
    Ok(GradCheckReport { checks })
}
