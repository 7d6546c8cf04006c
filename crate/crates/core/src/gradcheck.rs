//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function; it never looks at
//! how the analytic gradient was produced, so it is an independent oracle
//! for every reverse-mode rule in [`crate::tape`].

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamSet;
use crate::tape::{Graph, Mat, Var};

/// Tolerances for one check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Lower bound on the denominator of the relative error, so entries that
    /// are numerically zero are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many entries per tensor (sampled with a fixed seed).
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

impl GradCheck {
    pub fn sampled(max_entries: usize) -> Self {
        Self {
            max_entries: Some(max_entries),
            ..Self::default()
        }
    }

    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub entry: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Result of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }

    fn record(&mut self, cfg: &GradCheck, tensor: &str, entry: (usize, usize), a: f64, n: f64) {
        let err = cfg.relative_error(a, n);
        self.checked += 1;
        self.max_rel_error = self.max_rel_error.max(err);
        if err > cfg.rel_tol || !err.is_finite() {
            self.mismatches.push(Mismatch {
                tensor: tensor.to_string(),
                entry,
                analytic: a,
                numeric: n,
                rel_error: err,
            });
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.mismatches.extend(other.mismatches);
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked {} entries, max relative error {:.3e}, {} mismatches",
            self.checked,
            self.max_rel_error,
            self.mismatches.len()
        )?;
        for m in self.mismatches.iter().take(8) {
            write!(
                f,
                "\n  {}{:?}: analytic {:.9e} numeric {:.9e} (rel {:.3e})",
                m.tensor, m.entry, m.analytic, m.numeric, m.rel_error
            )?;
        }
        Ok(())
    }
}

fn entries(shape: (usize, usize), cfg: &GradCheck, seed: u64) -> Vec<(usize, usize)> {
    let total = shape.0 * shape.1;
    let chosen: Vec<usize> = match cfg.max_entries {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, total, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    chosen.into_iter().map(|i| (i / shape.1, i % shape.1)).collect()
}

fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Checks the gradient of a scalar graph built by `f` with respect to each
/// of `inputs`, which are bound as differentiable leaves.
pub fn check_leaf_gradients<F>(inputs: &[Mat], f: &F, cfg: GradCheck) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.param(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradReport::default();
    let mut work: Vec<Mat> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zero = Mat::zeros(inputs[ti].dim());
        let analytic = grads.get(*var).unwrap_or(&zero).clone();
        for (r, c) in entries(inputs[ti].dim(), &cfg, ti as u64) {
            let x0 = inputs[ti][[r, c]];
            let numeric = central_difference(
                |x| {
                    work[ti][[r, c]] = x;
                    eval(&work)
                },
                x0,
                cfg.step,
            );
            work[ti][[r, c]] = x0;
            report.record(&cfg, &format!("input{ti}"), (r, c), analytic[[r, c]], numeric);
        }
    }
    report
}

/// Checks analytic gradients of every tensor in `params` (aligned with the
/// parameter ids) against central differences of `loss`.
pub fn check_param_gradients<F>(
    params: &ParamSet,
    analytic: &[Option<Mat>],
    mut loss: F,
    cfg: GradCheck,
) -> GradReport
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut report = GradReport::default();
    let mut work = params.clone();
    for id in params.ids() {
        let shape = params.get(id).dim();
        let zero = Mat::zeros(shape);
        let a = analytic.get(id.index()).and_then(|g| g.as_ref()).unwrap_or(&zero);
        for (r, c) in entries(shape, &cfg, id.index() as u64 + 1000) {
            let x0 = params.get(id)[[r, c]];
            let numeric = central_difference(
                |x| {
                    work.get_mut(id)[[r, c]] = x;
                    loss(&work)
                },
                x0,
                cfg.step,
            );
            work.get_mut(id)[[r, c]] = x0;
            report.record(&cfg, params.name(id), (r, c), a[[r, c]], numeric);
        }
    }
    report
}
