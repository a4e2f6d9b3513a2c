use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{precision, Graph, KernelError, KernelResult, ParamId, ParamStore, Precision, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter (all of them if the parameter is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
    /// Gradients whose analytic and numeric magnitudes are both below this
    /// are compared in absolute terms against it.
    pub floor: f64,
    /// Multiplies analytic gradients by `1 + corrupt` (harness self-test).
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, samples_per_param: 16, seed: 0, floor: 1e-6, corrupt: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic parameter gradients of the scalar built by `f` against
/// central finite differences.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], opts: &GradCheckOptions, f: F) -> KernelResult<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> KernelResult<Var>,
{
    if precision() != Precision::F64 {
        return Err(KernelError::invalid("grad_check", "requires 64-bit mode".into()));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> KernelResult<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for &id in params {
        let n = store.value(id).len();
        let coords = sample(&mut rng, n, opts.samples_per_param.min(n)).into_vec();
        for idx in coords {
            let mut analytic = grads.param(id).map(|t| t.data()[idx]).unwrap_or(0.0);
            if let Some(c) = opts.corrupt {
                analytic *= 1.0 + c;
            }
            let orig = store.value(id).data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[idx] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            if !numeric.is_finite() {
                return Err(KernelError::NonFinite { op: "grad_check" });
            }
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.get(id).name.clone(), idx, analytic, numeric));
            }
        }
    }
    Ok(report)
}
