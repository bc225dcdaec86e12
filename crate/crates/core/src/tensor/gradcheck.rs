use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error; keeps coordinates whose true
/// gradient is ~0 from reporting roundoff noise as a large relative error.
const REL_FLOOR: f64 = 1e-6;

/// Coordinates beyond this count are subsampled.
pub const MAX_COORDS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective = {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar computation `f` against
/// central differences for every parameter coordinate in `store` (or a
/// seeded random sample of [`MAX_COORDS`] coordinates for large stores).
///
/// `f` must be deterministic; it is evaluated on evaluation-mode graphs.
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };

    let coords: Vec<(ParamId, usize)> =
        store.iter().flat_map(|(id, p)| (0..p.value.len()).map(move |k| (id, k))).collect();
    let chosen: Vec<(ParamId, usize)> = if coords.len() > MAX_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        let mut idx = sample(&mut rng, coords.len(), MAX_COORDS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: chosen.len() };
    for (id, k) in chosen {
        let analytic = grads.get(id).map_or(0.0, |g| g[k]);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {}[{k}]", store.get(id).name)));
        }
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + epsilon;
        let plus = eval(store, &mut f);
        store.value_mut(id).data_mut()[k] = orig - epsilon;
        let minus = eval(store, &mut f);
        store.value_mut(id).data_mut()[k] = orig;
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((store.get(id).name.clone(), k));
        }
    }
    Ok(report)
}
