use super::{NumericsError, Tape, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |g_auto − g_fd| / max(1, |g_fd|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `theta`.
///
/// `f` receives a fresh tape and the variable holding the parameters and
/// must return a scalar node.
pub fn grad_check<F>(f: F, theta: &Tensor, step: f64) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(theta.clone());
        let loss = f(&mut tape, x)?;
        tape.backward(loss)?;
        tape.grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; theta.numel()])
    };

    let eval = |t: Tensor| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let loss = f(&mut tape, x)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(NumericsError::contract(
                "grad_check needs a scalar function",
            ));
        }
        Ok(v.data()[0])
    };

    let mut numeric = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += step;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
