use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Evaluates `f` on fresh graphs and returns the maximum relative error between
/// its analytic and central-difference gradients over every input coordinate.
/// The relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "grad_check",
                detail: format!("function must return a scalar, got {:?}", v.shape()),
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(DiffError::NonFiniteValue("grad_check function value"));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let an = a.data()[j];
            if !an.is_finite() {
                return Err(DiffError::NonFiniteValue("analytic gradient"));
            }
            let denom = an.abs().max(numeric.abs()).max(1e-8);
            let rel = (an - numeric).abs() / denom;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((i, j));
                report.analytic = an;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
