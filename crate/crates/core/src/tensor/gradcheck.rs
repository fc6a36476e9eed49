use super::{Grads, ParamSet, Tape, TensorError, Var};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively; central differences at h=1e-5 carry ~1e-10 of rounding
/// noise, far below this.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F, E>(params: &ParamSet, f: &F) -> Result<f64, E>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    Ok(tape.scalar_value(loss))
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences, entry by entry. Returns the maximum relative error.
///
/// `max_entries` limits the number of checked entries per parameter (evenly
/// strided) for large parameter sets; `None` checks every entry.
pub fn grad_check<F, E>(params: &ParamSet, h: f64, max_entries: Option<usize>, f: F) -> Result<f64, E>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic: Grads = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        tape.backward(loss)?
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name)?.len();
        let stride = max_entries.map_or(1, |m| len.div_ceil(m.max(1)).max(1));
        for idx in (0..len).step_by(stride) {
            let orig = params.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = orig + h;
            let plus = evaluate(&work, &f)?;
            work.get_mut(&name)?.data_mut()[idx] = orig - h;
            let minus = evaluate(&work, &f)?;
            work.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[idx]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
