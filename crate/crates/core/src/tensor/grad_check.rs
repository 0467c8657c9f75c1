use super::{Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Per input: max over elements of |analytic - numeric| / max(|analytic|, |numeric|, floor).
    pub max_rel_error: Vec<f64>,
    /// Per input: flat index of the worst element.
    pub worst_index: Vec<usize>,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        Self {
            max_rel_error: Vec::new(),
            worst_index: Vec::new(),
            passed: false,
            failure: Some(msg),
        }
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients against central differences.
///
/// `f` maps the inputs to a scalar loss and the analytic gradient of that
/// loss with respect to every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    grad_check_with(
        f,
        inputs,
        &GradCheckConfig {
            tolerance,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], config: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let analytic = match f(inputs) {
        Ok((_, g)) => g,
        Err(e) => return GradCheckReport::failed(format!("forward failed: {e}")),
    };
    if analytic.len() != inputs.len() {
        return GradCheckReport::failed(format!(
            "closure returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        ));
    }
    for (i, (g, x)) in analytic.iter().zip(inputs).enumerate() {
        if g.numel() != x.numel() {
            return GradCheckReport::failed(format!("gradient {i} has wrong length"));
        }
        if !g.is_finite() {
            return GradCheckReport::failed(format!("gradient {i} is not finite"));
        }
    }
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = vec![0.0; inputs.len()];
    let mut worst = vec![0; inputs.len()];
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + config.step;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - config.step;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok((p, _)), Ok((m, _))) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return GradCheckReport::failed(format!("perturbed forward failed: {e}"))
                }
            };
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            if !rel.is_finite() || rel > max_rel[i] {
                max_rel[i] = rel;
                worst[i] = j;
            }
        }
    }
    let passed = max_rel.iter().all(|&e| e.is_finite() && e < config.tolerance);
    GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        passed,
        failure: None,
    }
}

/// `sum(probe * out)` and its gradient with respect to `out` (which is `probe`).
/// Reduces a tensor-valued op to the scalar loss `grad_check` needs.
pub fn probe_loss(out: &Tensor<f64>, probe: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let loss = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
    (loss, probe.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches_to_machine_precision() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let coef = [1.5, -2.0, 0.25, 4.0];
        let report = grad_check(
            |xs| {
                let loss = xs[0].data().iter().zip(coef).map(|(a, b)| a * b).sum();
                Ok((loss, vec![Tensor::from_vec([1, 1, 1, 4], coef.to_vec())?]))
            },
            &[x],
            1e-5,
        );
        assert!(report.passed);
        assert!(report.worst() < 1e-9, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |xs| {
                let d = xs[0].data();
                Ok((d[0] * d[0] + d[1], vec![Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0])?]))
            },
            &[x],
            1e-5,
        );
        assert!(!report.passed);
        assert_eq!(report.worst_index[0], 0);
    }

    #[test]
    fn non_finite_gradient_fails_closed() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let report = grad_check(
            |xs| Ok((xs[0].data()[0], vec![Tensor::from_vec([1, 1, 1, 1], vec![f64::NAN])?])),
            &[x],
            1e-5,
        );
        assert!(!report.passed);
        assert!(report.failure.unwrap().contains("not finite"));
    }
}
