use std::fmt::Write as _;

use crate::diffcore::tape::{Tape, ValueId};
use crate::diffcore::tensor::ParamSet;
use crate::error::{Error, Result};

/// Relative error floor. Keeps the comparison meaningful for coordinates
/// whose true gradient is near zero, where the central difference itself
/// carries cancellation noise around 1e-10 on losses of order one; dividing
/// that noise by anything smaller would report an error it cannot support.
const DENOM_FLOOR: f64 = 1e-3;

/// Worst coordinate of one parameter.
#[derive(Debug, Clone)]
pub struct FdCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// One entry per parameter: its worst coordinate.
    pub per_param: Vec<FdCoord>,
}

impl FdReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.per_param {
            let _ = writeln!(
                s,
                "{:<28} coord {:<5} analytic {:>13.6e} numeric {:>13.6e} rel_err {:.3e}",
                c.param, c.index, c.analytic, c.numeric, c.rel_err
            );
        }
        let _ = writeln!(s, "max rel err: {:.3e}", self.max_rel_err);
        s
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences over every coordinate of every parameter in `set`.
///
/// `build` must record the forward pass onto the given tape using the
/// current parameter values and return the scalar loss id. It is re-run
/// twice per coordinate with that coordinate nudged by +-eps; parameter
/// values are restored bit-exactly afterwards.
///
/// Relative error per coordinate is |fd - analytic| / max(floor, |fd|,
/// |analytic|) with floor 1e-3.
pub fn finite_diff_check<F>(set: &mut ParamSet, eps: f64, mut build: F) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<ValueId>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "finite_diff_check: eps must be positive, got {}",
            eps
        )));
    }

    let eval = |set: &ParamSet, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, set)?;
        let (r, c) = tape.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "finite_diff_check: loss must be scalar, got {}x{}",
                r, c
            )));
        }
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::Contract(format!(
                "finite_diff_check: non-finite loss {}",
                v
            )));
        }
        Ok(v)
    };

    // Analytic pass.
    set.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, set)?;
        tape.backward_params(loss, set)?;
    }
    let analytic: Vec<Vec<f64>> = set
        .iter()
        .map(|(_, p)| p.tensor.grad.clone().expect("zero_grads materialized all"))
        .collect();

    let ids: Vec<_> = set.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel = 0.0;
    for (pi, id) in ids.iter().enumerate() {
        let name = set.get(*id).name.clone();
        let n = set.get(*id).tensor.len();
        let mut worst = FdCoord {
            param: name.clone(),
            index: 0,
            analytic: if n > 0 { analytic[pi][0] } else { 0.0 },
            numeric: 0.0,
            rel_err: 0.0,
        };
        let mut have = false;
        for k in 0..n {
            let orig = set.get(*id).tensor.values[k];
            set.get_mut(*id).tensor.values[k] = orig + eps;
            let lp = eval(set, &mut build)?;
            set.get_mut(*id).tensor.values[k] = orig - eps;
            let lm = eval(set, &mut build)?;
            set.get_mut(*id).tensor.values[k] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic[pi][k];
            let rel = (fd - an).abs() / DENOM_FLOOR.max(fd.abs()).max(an.abs());
            if !have || rel > worst.rel_err {
                worst = FdCoord {
                    param: name.clone(),
                    index: k,
                    analytic: an,
                    numeric: fd,
                    rel_err: rel,
                };
                have = true;
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
        per_param.push(worst);
    }

    Ok(FdReport {
        max_rel_err: max_rel,
        per_param,
    })
}
