use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::TensorError;
use super::Result;

/// A deterministic scalar function of the parameter store. Returns the loss
/// value together with the analytic gradient of every parameter it touched.
pub type ScalarFn<'a> = dyn FnMut(&ParamStore) -> Result<(f64, BTreeMap<String, Vec<f64>>)> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub passed: bool,
    pub coords_checked: usize,
    /// (parameter, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

/// Compare analytic gradients against central finite differences
/// `(f(p+eps) - f(p-eps)) / (2 eps)` on a seeded sample of coordinates
/// (up to `coords_per_param` per parameter; every parameter is visited).
///
/// `f` is evaluated twice at the base point first; any bitwise mismatch in
/// the value means it is not deterministic and the check refuses to run.
pub fn grad_check(
    f: &mut ScalarFn,
    params: &ParamStore,
    eps: f64,
    tol: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    assert!(eps > 0.0, "eps must be positive");
    let (base_value, analytic) = f(params)?;
    let (second_value, _) = f(params)?;
    if base_value.to_bits() != second_value.to_bits() {
        return Err(TensorError::NonDeterministic(base_value, second_value));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        passed: true,
        coords_checked: 0,
        worst: None,
    };

    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let len = params.values(name).unwrap().len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param.min(len));
        coords.sort_unstable();

        let zero = vec![0.0; len];
        let a_grad = analytic.get(name).unwrap_or(&zero);
        for &i in &coords {
            let mut plus = params.clone();
            plus.values_mut(name).unwrap()[i] += eps;
            let (vp, _) = f(&plus)?;
            let mut minus = params.clone();
            minus.values_mut(name).unwrap()[i] -= eps;
            let (vm, _) = f(&minus)?;
            let numeric = (vp - vm) / (2.0 * eps);
            let err = rel_error(a_grad[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, a_grad[i], numeric));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
