//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Check at most this many coordinates per parameter (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    g.value(loss).item()
}

/// Compares reverse-mode gradients of `f` against central differences,
/// coordinate by coordinate. Relative error is
/// `|g_ad - g_fd| / max(1, |g_fd|)`.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as an error since differences would be meaningless.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if store.is_empty() {
        return Ok(GradCheckReport::default());
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let base = g.value(loss).item()?;
        let again = evaluate(store, &f)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::NonDeterministic(format!(
                "two evaluations gave {base} and {again}"
            )));
        }
        g.backward(loss)?.into_params()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + cfg.step;
            let plus = evaluate(store, &f);
            store.get_mut(id).value.data_mut()[k] = orig - cfg.step;
            let minus = evaluate(store, &f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let ad = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            report.entries.push(GradCheckEntry {
                param: store.get(id).name.clone(),
                index: k,
                analytic: ad,
                numeric,
                rel_error: (ad - numeric).abs() / numeric.abs().max(1.0),
            });
        }
    }
    Ok(report)
}
