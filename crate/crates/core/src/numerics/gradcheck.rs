//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so gradients that are zero up to
    /// roundoff are judged in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter (sampled deterministically).
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares analytic gradients of the graph built by `build` against central differences.
///
/// `build` must return the output node; non-scalar outputs are reduced with a fixed
/// random projection so every output coordinate contributes.
pub fn grad_check<F>(store: &ParamStore, params: &[ParamId], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if !(cfg.eps > 0.0 && cfg.eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps {} outside (0, 1e-2]", cfg.eps)));
    }
    for &p in params {
        if !store.get(p).is_finite() {
            return Err(Error::NonFinite {
                op: format!("parameter {}", store.name(p)),
            });
        }
    }
    let projection = {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        let n = tape.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
        if n == 1 {
            vec![1.0]
        } else {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()
        }
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, s)?;
        Ok(super::tensor::dot(tape.value(out).data(), &projection))
    };

    let analytic = {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        let loss = tape.weighted_sum(out, &projection)?;
        tape.backward(loss, store)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut reports = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for &p in params {
        let n = store.get(p).len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
            (0..n).collect()
        } else {
            (0..cfg.max_coords_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = store.get(p).data()[i];
            work.get_mut(p).data_mut()[i] = orig + cfg.eps;
            let plus = eval(&work)?;
            work.get_mut(p).data_mut()[i] = orig - cfg.eps;
            let minus = eval(&work)?;
            work.get_mut(p).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let exact = analytic.get(p).data()[i];
            let denom = exact.abs().max(numeric.abs()).max(cfg.abs_floor);
            worst = worst.max((exact - numeric).abs() / denom);
        }
        overall = overall.max(worst);
        reports.push(ParamReport {
            name: store.name(p).to_string(),
            coords_checked: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        params: reports,
        max_rel_err: overall,
        tol: cfg.tol,
    })
}
