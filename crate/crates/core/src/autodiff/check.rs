//! Finite-difference verification of analytic gradients.

use super::{AutodiffError, NodeId, Scalar, Tape};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences and return the largest relative error.
///
/// `build` receives a fresh tape and the id of a leaf holding the current
/// input values; it must return a scalar node built deterministically from
/// that leaf. Relative error for each element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The function is evaluated twice at the base point first; if the two
/// results differ bit-for-bit the check reports non-determinism instead of a
/// meaningless error bound.
pub fn finite_difference_check<F, B>(
    build: B,
    x: &[F],
    shape: &[usize],
    eps: F,
) -> Result<F, AutodiffError>
where
    F: Scalar,
    B: Fn(&mut Tape<F>, NodeId) -> Result<NodeId, AutodiffError>,
{
    if eps <= F::zero() {
        return Err(AutodiffError::InvalidArgument {
            op: "finite_difference_check",
            detail: "eps must be positive".to_string(),
        });
    }

    let eval = |values: &[F]| -> Result<(F, Tape<F>, NodeId, NodeId), AutodiffError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(values.to_vec(), shape, true)?;
        let out = build(&mut tape, leaf)?;
        let value = tape.scalar_value(out)?;
        Ok((value, tape, leaf, out))
    };

    let (v1, mut tape, leaf, out) = eval(x)?;
    let (v2, _, _, _) = eval(x)?;
    if v1.bits() != v2.bits() {
        return Err(AutodiffError::NonDeterministic {
            detail: format!("repeated evaluation gave {v1} and {v2}"),
        });
    }

    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .expect("requires_grad leaf receives a gradient")
        .to_vec();

    let floor = F::from_f64(1e-8);
    let two = F::from_f64(2.0);
    let mut perturbed = x.to_vec();
    let mut max_err = F::zero();
    for i in 0..perturbed.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + eps;
        let (plus, _, _, _) = eval(&perturbed)?;
        perturbed[i] = orig - eps;
        let (minus, _, _, _) = eval(&perturbed)?;
        perturbed[i] = orig;
        let numeric = (plus - minus) / (two * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
