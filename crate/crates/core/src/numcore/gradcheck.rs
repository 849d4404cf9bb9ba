use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat element index, analytic, numeric) at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - n| / max(|a| + |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient returned by `f` against central differences on
/// `samples` randomly chosen coordinates (all of them if `samples` is
/// larger than the parameter count).
///
/// `f` maps a parameter set to `(loss, gradient per parameter)`.
pub fn grad_check<F>(
    f: F,
    params: &[Matrix],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    let (_, analytic) = f(params)?;
    let total: usize = params.iter().map(Matrix::len).sum();
    let coords: Vec<(usize, usize)> = if samples >= total {
        params
            .iter()
            .enumerate()
            .flat_map(|(p, m)| (0..m.len()).map(move |i| (p, i)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                let mut p = 0;
                while k >= params[p].len() {
                    k -= params[p].len();
                    p += 1;
                }
                (p, k)
            })
            .collect()
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let (plus, _) = f(&work)?;
        work[p].data_mut()[i] = orig - h;
        let (minus, _) = f(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].data()[i];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((p, i, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tape;

    #[test]
    fn quadratic_is_exact() {
        // f(w) = sum_i c_i w_i^2
        let c = [1.0, -3.0, 0.5, 2.0];
        let f = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
            let w = &ps[0];
            let v = w.data().iter().zip(&c).map(|(w, c)| c * w * w).sum();
            let g = Matrix::from_vec(1, 4, w.data().iter().zip(&c).map(|(w, c)| 2.0 * c * w).collect())?;
            Ok((v, vec![g]))
        };
        let params = vec![Matrix::from_rows(&[[0.3, -1.2, 2.0, 0.7]])];
        let r = grad_check(f, &params, 1e-5, 100, 0).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn bce_of_sigmoid_toy_model() {
        // z = sigmoid(W x + b), loss = BCE(z, y)
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]]);
        let y = Matrix::from_rows(&[[1.0, 0.0, 1.0]]);
        let f = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
            let mut tape = Tape::new();
            let w = tape.param(0, ps[0].clone());
            let b = tape.param(1, ps[1].clone());
            let xn = tape.constant(x.clone());
            let wx = tape.matmul(w, xn)?;
            let logits = tape.add_col(wx, b)?;
            let z = tape.sigmoid(logits);
            let loss = tape.bce(z, y.clone())?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.params(ps)))
        };
        let params = vec![
            Matrix::from_rows(&[[0.4, -0.8]]),
            Matrix::from_rows(&[[0.1]]),
        ];
        let r = grad_check(f, &params, 1e-5, 100, 0).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
