use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, h, &coords)
}

/// Like [`finite_difference_check`] but only probes the listed coordinates,
/// for inputs too large to difference exhaustively.
pub fn finite_difference_check_at<F>(mut f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point);
        let out = f(&mut tape, leaf)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= x.numel() {
            return Err(TensorError::Argument {
                op: "finite_difference_check",
                detail: format!("coordinate {i} out of range"),
            });
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
