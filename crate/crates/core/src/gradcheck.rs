//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numerical side only ever runs forward passes on constant inputs, so it
//! shares no code with the backward rules it checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator, so that two gradients
    /// that are both numerically zero compare equal.
    pub abs_floor: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            probes: 10,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.rel_err <= self.rel_tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().fold(0.0, |m, p| m.max(p.rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} probes, max rel err {:.3e} (tol {:.1e})",
            self.probes.len(),
            self.max_rel_err(),
            self.rel_tol
        )?;
        for p in self.probes.iter().filter(|p| p.rel_err > self.rel_tol) {
            writeln!(
                f,
                "  input {} [{}]: analytic {:.9e} numeric {:.9e} rel {:.3e}",
                p.input, p.index, p.analytic, p.numeric, p.rel_err
            )?;
        }
        Ok(())
    }
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` against
/// central differences at `cfg.probes` randomly chosen input elements.
pub fn check_gradients<F>(inputs: &[Tensor], f: &F, cfg: &GradCheck) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if total <= cfg.probes {
        (0..total).collect()
    } else {
        (0..cfg.probes).map(|_| rng.random_range(0..total)).collect()
    };

    let probes = picks
        .into_iter()
        .map(|flat| {
            let (input, index) = locate(inputs, flat);
            let numeric = central_difference(inputs, input, index, f, cfg.step);
            let a = analytic[input].data()[index];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            Probe {
                input,
                index,
                analytic: a,
                numeric,
                rel_err: (a - numeric).abs() / denom,
            }
        })
        .collect();
    GradCheckReport {
        probes,
        rel_tol: cfg.rel_tol,
    }
}

fn locate(inputs: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("probe index out of range")
}

fn central_difference<F>(inputs: &[Tensor], input: usize, index: usize, f: &F, step: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |delta: f64| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == input {
                    t.data_mut()[index] += delta;
                }
                tape.constant(t)
            })
            .collect();
        f(&tape, &vars).value().item()
    };
    (eval(step) - eval(-step)) / (2.0 * step)
}
