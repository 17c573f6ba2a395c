//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Gradients, ParamSet};

/// A scalar evaluation plus a fingerprint of its piecewise branch choices
/// (relu signs, max-pool winners). Finite differences are only meaningful
/// when both probes stay in the same regime as the base point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub regime: u64,
}

impl Probe {
    /// An evaluation of an everywhere-smooth computation.
    pub fn smooth(value: f64) -> Self {
        Probe { value, regime: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per parameter tensor, chosen by a
    /// seeded sample. `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// How many times the step may be divided by 10 when a probe crosses a
    /// kink before the entry is skipped.
    pub refinements: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            max_entries: None,
            seed: 0,
            refinements: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose probes crossed a kink at every step size tried.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn total_skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn gradient_check<F>(
    params: &ParamSet<f64>,
    analytic: &Gradients<f64>,
    mut f: F,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<Probe>,
{
    let base = f(params)?;
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let len = params.get(id).len();
        let entries: Vec<usize> = match options.max_entries {
            Some(max) if max < len => {
                let mut picked = sample(&mut rng, len, max).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: params.param(id).name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for flat in entries {
            let original = params.get(id).data()[flat];
            let mut step = options.step;
            let mut numeric = None;
            for _ in 0..=options.refinements {
                work.get_mut(id).data_mut()[flat] = original + step;
                let plus = f(&work)?;
                work.get_mut(id).data_mut()[flat] = original - step;
                let minus = f(&work)?;
                work.get_mut(id).data_mut()[flat] = original;
                if plus.regime == base.regime && minus.regime == base.regime {
                    numeric = Some((plus.value - minus.value) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            match numeric {
                Some(n) => {
                    let err = relative_error(analytic.entry(id, flat), n);
                    check.max_rel_error = check.max_rel_error.max(err);
                    check.checked += 1;
                }
                None => check.skipped += 1,
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
