//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative, with an
/// absolute floor on the denominator so exact zeros compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Every checked coordinate in the same layout as `worst`.
    pub entries: Vec<(usize, usize, f64, f64)>,
}

impl GradReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: None,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.entries.push((input, coord, analytic, numeric));
        let rel = relative_error(analytic, numeric);
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((input, coord, analytic, numeric));
        }
    }
}

/// Checks d(loss)/d(inputs) for a loss built by `f` from constant leaves.
///
/// Every coordinate of every input is perturbed by `±h`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(i, j, analytic.data()[j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(params) on `samples` randomly chosen parameter coordinates.
///
/// `f` must rebuild the loss from scratch on the graph it is given.
pub fn check_params<F>(
    store: &mut ParamStore,
    samples: usize,
    h: f64,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let mut all: Vec<Option<Tensor>> = vec![None; store.len()];
        for (id, t) in grads.params() {
            all[id.index()] = Some(t.clone());
        }
        all
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };

    let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new();
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut pid = 0;
        while flat >= sizes[pid] {
            flat -= sizes[pid];
            pid += 1;
        }
        let id = ParamId(pid);
        let a = analytic[pid].as_ref().map_or(0.0, |t| t.data()[flat]);
        let orig = store.get(id).value.data()[flat];
        store.get_mut(id).value.data_mut()[flat] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).value.data_mut()[flat] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).value.data_mut()[flat] = orig;
        report.record(pid, flat, a, (up - down) / (2.0 * h));
    }
    Ok(report)
}

/// Projects a tensor-valued output to a scalar with fixed pseudo-random weights.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    g.sum(p)
}
