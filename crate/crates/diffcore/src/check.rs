//! Central finite-difference gradient checking.
//!
//! The checker treats the function under test as a black box from flat
//! parameter vectors to a scalar, so it stays independent of the tape
//! implementation it is used to validate.

use crate::{DiffError, ParamSet};

/// Max over coordinates of `|ad - fd| / (|fd| + 1e-8)` where `fd` is the
/// central difference `(f(x+h) - f(x-h)) / 2h`.
///
/// `f` must evaluate the scalar objective at the given parameters; `ad`
/// holds the analytic gradients in the same layout as `params`.
pub fn grad_check(
    params: &ParamSet,
    ad: &[Vec<f64>],
    h: f64,
    mut f: impl FnMut(&ParamSet) -> Result<f64, DiffError>,
) -> Result<f64, DiffError> {
    let coords: Vec<(usize, usize)> = params
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(pi, t)| (0..t.numel()).map(move |ci| (pi, ci)))
        .collect();
    grad_check_coords(params, ad, h, &coords, &mut f)
}

/// As [`grad_check`] but restricted to the listed `(param, coord)` pairs.
/// Useful when the full coordinate sweep would be too expensive.
pub fn grad_check_coords(
    params: &ParamSet,
    ad: &[Vec<f64>],
    h: f64,
    coords: &[(usize, usize)],
    f: &mut impl FnMut(&ParamSet) -> Result<f64, DiffError>,
) -> Result<f64, DiffError> {
    if ad.len() != params.tensors.len() {
        return Err(DiffError::Invalid(
            "grad_check: gradient layout does not match parameters".into(),
        ));
    }
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for &(pi, ci) in coords {
        let x0 = params.tensors[pi].data()[ci];
        work.tensors[pi].data_mut()[ci] = x0 + h;
        let fp = f(&work)?;
        work.tensors[pi].data_mut()[ci] = x0 - h;
        let fm = f(&work)?;
        work.tensors[pi].data_mut()[ci] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DiffError::NonFinite(format!(
                "objective at perturbed coordinate ({pi}, {ci})"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (ad[pi][ci] - fd).abs() / (fd.abs() + 1e-8);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    #[test]
    fn sum_of_squares_at_origin_has_zero_error() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let eval = |p: &ParamSet| -> Result<f64, DiffError> {
            let mut tape = Tape::new();
            let x = tape.leaf(p.tensors[0].clone());
            let sq = tape.square(x);
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).item())
        };
        // AD gradient is zero at the origin, as is the central difference.
        let ad = vec![vec![0.0; 3]];
        let err = grad_check(&params, &ad, 1e-5, eval).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }
}
