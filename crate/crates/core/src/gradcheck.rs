//! Finite-difference verification of analytic gradients.
//!
//! Used by tests to validate every parameter group of the models against
//! central differences. The loss closure must be deterministic (dropout off)
//! for the comparison to mean anything.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative disagreement between analytic and numeric gradients for one
/// parameter group, as `||ga - gn|| / max(||ga||, ||gn||, 1e-12)`.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub rel_err: f64,
}

/// Compare `analytic` gradients against central finite differences of
/// `loss_fn`, perturbing one element at a time with step `h`.
///
/// `loss_fn` receives the full parameter list (with exactly one element
/// perturbed) and must return the scalar loss. `params`, `names`, and
/// `analytic` are parallel.
pub fn check_gradients<F>(
    params: &[Tensor],
    names: &[&str],
    analytic: &[Vec<f64>],
    h: f64,
    mut loss_fn: F,
) -> Result<Vec<GroupCheck>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() || params.len() != names.len() {
        return Err(Error::Contract(format!(
            "{} params, {} names, {} analytic gradient groups",
            params.len(),
            names.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (gi, ga) in analytic.iter().enumerate() {
        if ga.len() != params[gi].numel() {
            return Err(Error::Contract(format!(
                "analytic gradient group {} has {} elements for a parameter of {}",
                names[gi],
                ga.len(),
                params[gi].numel()
            )));
        }
        let mut diff_sq = 0.0;
        let mut ga_sq = 0.0;
        let mut gn_sq = 0.0;
        for (i, &gai) in ga.iter().enumerate() {
            let orig = work[gi].data()[i];
            work[gi].data_mut()[i] = orig + h;
            let plus = loss_fn(&work)?;
            work[gi].data_mut()[i] = orig - h;
            let minus = loss_fn(&work)?;
            work[gi].data_mut()[i] = orig;
            let gn = (plus - minus) / (2.0 * h);
            diff_sq += (gai - gn) * (gai - gn);
            ga_sq += gai * gai;
            gn_sq += gn * gn;
        }
        let denom = ga_sq.sqrt().max(gn_sq.sqrt()).max(1e-12);
        out.push(GroupCheck {
            name: names[gi].to_string(),
            rel_err: diff_sq.sqrt() / denom,
        });
    }
    Ok(out)
}
