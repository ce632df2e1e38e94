use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Settings for a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter tensor.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub group: ParamGroup,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest |analytic| seen among checked entries.
    pub max_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl GradCheck {
    /// Compares analytic gradients from `loss_fn` against
    /// `(f(p+h) - f(p-h)) / 2h` for the listed parameters.
    pub fn run<T, F>(&self, loss_fn: F, store: &ParamStore<T>, params: &[ParamId]) -> Result<GradCheckReport>
    where
        T: Scalar,
        F: Fn(&ParamStore<T>) -> Result<(Graph<T>, Var)>,
    {
        if self.h <= 0.0 {
            return Err(Error::InvalidArgument(format!("step h must be positive, got {}", self.h)));
        }
        let eval = |s: &ParamStore<T>| -> Result<f64> {
            let (g, loss) = loss_fn(s)?;
            Ok(g.value(loss).item().as_f64())
        };

        let (graph, loss) = loss_fn(store)?;
        let first = graph.value(loss).item().as_f64();
        let second = eval(store)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::Nondeterministic { first, second });
        }
        let grads = graph.backward(loss)?;
        drop(graph);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = store.clone();
        let mut reports = Vec::with_capacity(params.len());
        for &id in params {
            let analytic = grads.param_or_zeros(store, id);
            let n = store.get(id).len();
            let picks: Vec<usize> = match self.max_entries_per_param {
                Some(m) if m < n => {
                    let mut v = sample(&mut rng, n, m).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            let mut max_rel: f64 = 0.0;
            let mut max_abs: f64 = 0.0;
            let mut max_grad: f64 = 0.0;
            for &i in &picks {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = T::lit(orig.as_f64() + self.h);
                let plus = eval(&work)?;
                work.get_mut(id).data_mut()[i] = T::lit(orig.as_f64() - self.h);
                let minus = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig;

                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic.data()[i].as_f64();
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
                max_rel = max_rel.max(rel);
                max_abs = max_abs.max(abs);
                max_grad = max_grad.max(a.abs());
            }
            reports.push(ParamCheck {
                id,
                name: store.name(id).to_string(),
                group: store.group(id),
                entries_checked: picks.len(),
                max_rel_err: max_rel,
                max_abs_err: max_abs,
                max_grad,
            });
        }
        let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        Ok(GradCheckReport {
            params: reports,
            max_rel_err,
            tol: self.tol,
            passed: max_rel_err <= self.tol,
        })
    }
}

/// Central-difference check of `loss_fn` over `params` with default sampling.
pub fn finite_difference_check<T, F>(
    loss_fn: F,
    store: &ParamStore<T>,
    params: &[ParamId],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&ParamStore<T>) -> Result<(Graph<T>, Var)>,
{
    GradCheck {
        h,
        tol,
        ..GradCheck::default()
    }
    .run(loss_fn, store, params)
}
