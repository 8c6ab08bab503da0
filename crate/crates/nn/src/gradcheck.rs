//! Central finite-difference gradient checking, independent of backprop.

use rand::Rng;

use crate::{Network, NetworkSpec, NnError, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// entries above the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares `analytic[i]` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for
/// every index in `indices`. An entry passes when the absolute error is
/// within `abs_floor` or the relative error is within `rel_tol`.
pub fn check<F>(
    point: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if abs > abs_floor {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > rel_tol {
                report.failures += 1;
            }
        }
    }
    report
}

fn uniform<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Loss `sum over heads of <coeffs_h, output_h>`.
fn linear_loss(net: &Network<f64>, input: &Tensor<f64>, coeffs: &[Tensor<f64>]) -> Result<f64, NnError> {
    Ok(net
        .predict(input)?
        .iter()
        .zip(coeffs)
        .map(|(o, c)| o.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Checks every parameter and input gradient of a freshly initialized
/// network against finite differences of a random linear functional of its
/// outputs. Biases are perturbed so that no parameter sits at zero.
/// Returns the parameter report and the input report.
pub fn check_network<R: Rng>(
    spec: &NetworkSpec,
    batch: usize,
    rng: &mut R,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<(GradCheckReport, GradCheckReport), NnError> {
    let mut net: Network<f64> = Network::<f32>::new(spec.clone(), rng)?.cast();
    let jitter = uniform(rng, net.num_params());
    for (p, j) in net.params_mut().iter_mut().zip(jitter) {
        *p += 0.1 * j;
    }
    let mut in_shape = vec![batch];
    in_shape.extend(&spec.input);
    let input = Tensor::new(in_shape.clone(), uniform(rng, in_shape.iter().product()))?;
    let mut coeffs = Vec::new();
    for s in spec.output_shapes()? {
        let mut shape = vec![batch];
        shape.extend(s);
        let len = shape.iter().product();
        coeffs.push(Tensor::new(shape, uniform(rng, len))?);
    }

    net.forward(&input)?;
    let grads = net.backward(&coeffs.iter().cloned().map(Some).collect::<Vec<_>>())?;

    let params = net.params().to_vec();
    let mut probe = net.clone();
    let mut failed = None;
    let param_report = check(&params, &grads.params, 0..params.len(), step, rel_tol, abs_floor, |p| {
        probe.set_params(p).and_then(|_| linear_loss(&probe, &input, &coeffs)).unwrap_or_else(|e| {
            failed = Some(e);
            f64::NAN
        })
    });
    let x = input.data().to_vec();
    let input_report = check(&x, grads.input.data(), 0..x.len(), step, rel_tol, abs_floor, |xs| {
        Tensor::new(in_shape.clone(), xs.to_vec())
            .and_then(|t| linear_loss(&net, &t, &coeffs))
            .unwrap_or_else(|e| {
                failed = Some(e);
                f64::NAN
            })
    });
    match failed {
        Some(e) => Err(e),
        None => Ok((param_report, input_report)),
    }
}
