//! Central finite-difference checks of tape gradients.
//!
//! Error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps coordinates whose true gradient is ~0 from dividing noise by noise.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.max_rel_err = self.max_rel_err.max(err);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
    }
}

/// Checks every coordinate of every input. `f` builds a scalar loss from the
/// inputs, which it receives as tape variables.
pub fn check_inputs<F, E>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + cfg.eps;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - cfg.eps;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            report.record(a, (up - down) / (2.0 * cfg.eps), cfg.floor);
        }
    }
    Ok(report)
}

/// Checks `per_param` randomly chosen coordinates of each named trainable
/// parameter. `f` runs a forward pass reading weights from the store.
pub fn check_params<F, R, E>(
    store: &mut ParamStore,
    names: &[String],
    per_param: usize,
    rng: &mut R,
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, E>,
    R: Rng + ?Sized,
    E: From<TensorError>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    for name in names {
        let id = store.id(name)?;
        let n = store.by_id(id).tensor.numel();
        let analytic = store.by_id(id).tensor.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for j in sample(rng, n, per_param.min(n)) {
            let orig = store.by_id(id).tensor.data()[j];
            store.by_id_mut(id).tensor.data_mut()[j] = orig + cfg.eps;
            let up = eval(store)?;
            store.by_id_mut(id).tensor.data_mut()[j] = orig - cfg.eps;
            let down = eval(store)?;
            store.by_id_mut(id).tensor.data_mut()[j] = orig;
            report.record(analytic[j], (up - down) / (2.0 * cfg.eps), cfg.floor);
        }
    }
    store.zero_grad();
    Ok(report)
}
