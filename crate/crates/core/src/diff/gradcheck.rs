//! Central finite-difference gradient checks.
//!
//! The numeric side only reads forward values, so it is independent of
//! the backward rules it is used to validate.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParameterSet};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `loss` against central differences on
/// `coords` randomly chosen parameter coordinates.
pub fn check_parameters<F>(
    params: &ParameterSet,
    coords: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let l = loss(&mut g, &bound)?;
    let grads = g.backward(l)?;

    let names: Vec<(String, usize)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.len()))
        .filter(|(_, len)| *len > 0)
        .collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Empty("no parameters to check".into()));
    }
    let mut rng = seeded(seed);
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut k = rng.random_range(0..total);
        let (name, index) = names
            .iter()
            .find_map(|(n, len)| {
                if k < *len {
                    Some((n.clone(), k))
                } else {
                    k -= len;
                    None
                }
            })
            .expect("index within total");
        let analytic = grads
            .get(bound.get(&name)?)
            .map_or(0.0, |t| t.data()[index]);
        let orig = params.get(&name).expect("known name").data()[index];
        let eval = |work: &mut ParameterSet, v: f64| -> Result<f64> {
            work.get_mut(&name).expect("known name").data_mut()[index] = v;
            let mut g = Graph::new();
            let b = work.bind_frozen(&mut g)?;
            let l = loss(&mut g, &b)?;
            g.scalar_value(l)
        };
        let plus = eval(&mut work, orig + DEFAULT_STEP)?;
        let minus = eval(&mut work, orig - DEFAULT_STEP)?;
        work.get_mut(&name).expect("known name").data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
        checks.push(CoordinateCheck {
            rel_err: relative_error(analytic, numeric, DEFAULT_FLOOR),
            name,
            index,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { checks })
}
