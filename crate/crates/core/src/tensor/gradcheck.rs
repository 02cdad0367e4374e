use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub pass: bool,
}

/// Magnitude below which the absolute error is used instead of the relative one.
pub const ABS_FALLBACK: f64 = 1e-8;

/// Compares the tape gradient of `loss` with `(f(x+h) - f(x-h)) / 2h` for every
/// coordinate of every input.
///
/// `loss` receives a fresh tape and one grad-requiring leaf per input and must
/// return a one-element variable.
pub fn grad_check<F>(loss: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(loss, inputs, step, tol, |_| {})
}

/// [`grad_check`] with a hook that may corrupt the analytic gradients before
/// comparison. Used as a negative control.
pub fn grad_check_with_fault<F, G>(loss: F, inputs: &[Tensor], step: f64, tol: f64, fault: G) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    G: Fn(&mut [Tensor]),
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid(format!("finite-difference step {step} must be positive")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = loss(&mut tape, &vars)?;
    if !tape.value(root).item()?.is_finite() {
        return Err(TensorError::NonFiniteProbe);
    }
    let grads = tape.backward(root)?;
    let mut analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).cloned().expect("param leaf")).collect();
    fault(&mut analytic);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let r = loss(&mut t, &vs)?;
        let v = t.value(r).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFiniteProbe);
        }
        Ok(v)
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut coordinates = 0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let fp = eval(&probe).map_err(|_| TensorError::NonFiniteProbe)?;
            probe[i].data_mut()[j] = x0 - step;
            let fm = eval(&probe).map_err(|_| TensorError::NonFiniteProbe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            max_rel = max_rel.max(relative_error(analytic[i].data()[j], numeric));
            coordinates += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, coordinates, pass: max_rel <= tol })
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < ABS_FALLBACK {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}
