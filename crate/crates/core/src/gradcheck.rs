//! Central finite-difference gradient checking against the reverse-mode
//! engine. The numeric side only ever calls the forward pass, so it stays
//! independent of `backward`.

use crate::elem::Elem;
use crate::error::Result;
use crate::params::Parameters;

/// Elementwise relative error with an absolute floor: tiny |a| and |n| should
/// not blow up the ratio when the true gradient is (near) zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `loss_fn` w.r.t. every element of every trainable
/// parameter. `loss_fn` must rebuild its forward pass from `params` each call.
pub fn central_diff_grads<E, F>(
    params: &mut Parameters<E>,
    step: f64,
    mut loss_fn: F,
) -> Result<Vec<Vec<f64>>>
where
    E: Elem,
    F: FnMut(&Parameters<E>) -> Result<f64>,
{
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut grads = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).numel();
        let mut g = vec![0.0; n];
        if params.get(id).trainable {
            for i in 0..n {
                let original = params.get(id).data[i];
                params.get_mut(id).data[i] = original + E::from_f64(step);
                let up = loss_fn(params)?;
                params.get_mut(id).data[i] = original - E::from_f64(step);
                let down = loss_fn(params)?;
                params.get_mut(id).data[i] = original;
                g[i] = (up - down) / (2.0 * step);
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative error across all trainable parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

pub fn compare_grads<E: Elem>(
    params: &Parameters<E>,
    analytic: &[Vec<E>],
    numeric: &[Vec<f64>],
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let a = &analytic[id.index()];
        let n = &numeric[id.index()];
        for i in 0..a.len() {
            let rel = relative_error(a[i].to_f64(), n[i], floor);
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = p.name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}
