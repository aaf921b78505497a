use rand::Rng;

use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares `analytic` gradients of `f` at `params` against central differences
/// on up to `samples` uniformly drawn coordinates (all of them if there are
/// fewer). The error of a coordinate is `|analytic - numeric| / max(1, |analytic|)`.
///
/// Parameters missing from `analytic` are taken to have zero gradient.
pub fn gradient_check<F, R>(
    mut f: F,
    params: &ParamSet,
    analytic: &ParamSet,
    h: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
    R: Rng + ?Sized,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::GradCheck(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic ({base} then {again})"
        )));
    }

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    if coords.is_empty() {
        return Err(Error::GradCheck("no parameters to check".into()));
    }
    let chosen: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        (0..samples)
            .map(|_| rng.random_range(0..coords.len()))
            .collect()
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for ci in chosen {
        let (name, i) = &coords[ci];
        let orig = work.get(name).unwrap().values()[*i];
        work.get_mut(name).unwrap().values_mut()[*i] = orig + h;
        let up = f(&work)?;
        work.get_mut(name).unwrap().values_mut()[*i] = orig - h;
        let down = f(&work)?;
        work.get_mut(name).unwrap().values_mut()[*i] = orig;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map_or(0.0, |t| t.values()[*i]);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}
