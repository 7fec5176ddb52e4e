//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum CoordSelection {
    All,
    /// Random subset: one coordinate from every input first, the rest drawn
    /// uniformly from the remaining pool.
    Sample {
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is (numerically) zero are judged on absolute error.
    pub denom_floor: f64,
    pub coords: CoordSelection,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            denom_floor: 1e-6,
            coords: CoordSelection::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose +h / -h evaluations straddle a ReLU kink.
    pub skipped_kinks: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn pick_coords(inputs: &[Tensor], sel: &CoordSelection) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    match *sel {
        CoordSelection::All => all,
        CoordSelection::Sample { count, seed } => {
            if count >= all.len() {
                return all;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(count);
            for (i, t) in inputs.iter().enumerate() {
                if chosen.len() < count && !t.is_empty() {
                    chosen.push((i, rng.random_range(0..t.len())));
                }
            }
            let rest: Vec<(usize, usize)> =
                all.into_iter().filter(|c| !chosen.contains(c)).collect();
            let need = (count - chosen.len()).min(rest.len());
            for j in sample(&mut rng, rest.len(), need).into_iter() {
                chosen.push(rest[j]);
            }
            chosen.sort_unstable();
            chosen
        }
    }
}

/// Compare autodiff gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` at the selected coordinates of `inputs`.
///
/// `f` must build its scalar output from the supplied trainable leaves on a
/// fresh graph and be deterministic.
pub fn grad_check<F, E>(
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64), E> {
        let mut g = Graph::with_kink_tracking();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()).into());
        }
        Ok((v.item(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<&Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).expect("every input is a trainable leaf"))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: None,
        tol: opts.tol,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, index) in pick_coords(inputs, &opts.coords) {
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + opts.h;
        let (plus, sig_plus) = eval(&work)?;
        work[input].data_mut()[index] = orig - opts.h;
        let (minus, sig_minus) = eval(&work)?;
        work[input].data_mut()[index] = orig;
        if sig_plus != sig_minus {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[input].data()[index];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denom_floor);
        report.checked += 1;
        if rel_err > opts.tol {
            report.failures += 1;
        }
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(Worst {
                input,
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}
