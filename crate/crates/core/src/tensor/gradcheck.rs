use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor label, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, label: &str, j: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((label.to_string(), j, analytic, numeric));
        }
    }
}

fn pick_coords(sizes: &[usize], n_coords: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let flat: Vec<usize> = if n_coords >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, total, n_coords).into_vec();
        v.sort_unstable();
        v
    };
    flat.into_iter()
        .map(|mut i| {
            let mut t = 0;
            while i >= sizes[t] {
                i -= sizes[t];
                t += 1;
            }
            (t, i)
        })
        .collect()
}

/// Compares analytic gradients of `f` with respect to free `inputs` against
/// central differences `(f(p+eps) - f(p-eps)) / 2eps` on up to `n_coords`
/// randomly chosen coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, n_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let input_grads = g.backward(loss, &mut Grads::new(&store))?;

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for (t, j) in pick_coords(&sizes, n_coords, seed) {
        let analytic = input_grads.get(&vars[t]).map_or(0.0, |g| g.data()[j]);
        let orig = work[t].data()[j];
        work[t].data_mut()[j] = orig + eps;
        let fp = eval(&work)?;
        work[t].data_mut()[j] = orig - eps;
        let fm = eval(&work)?;
        work[t].data_mut()[j] = orig;
        report.record(&format!("input{t}"), j, analytic, (fp - fm) / (2.0 * eps));
    }
    Ok(report)
}

/// Same as [`grad_check`] but perturbs parameters of `store`. `f` must build
/// its loss only through `Graph::param` lookups so it can be re-evaluated on a
/// perturbed copy of the store.
pub fn grad_check_store<F>(
    store: &ParamStore,
    params: &[ParamId],
    f: F,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let mut grads = Grads::new(store);
    g.backward(loss, &mut grads)?;
    drop(g);

    let sizes: Vec<usize> = params.iter().map(|&id| store.value(id).numel()).collect();
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(work);
        let loss = f(&mut g)?;
        g.value(loss).item()
    };
    let mut report = GradCheckReport::new();
    for (t, j) in pick_coords(&sizes, n_coords, seed) {
        let id = params[t];
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
        let orig = work.value(id).data()[j];
        work.value_mut(id).data_mut()[j] = orig + eps;
        let fp = eval(&work)?;
        work.value_mut(id).data_mut()[j] = orig - eps;
        let fm = eval(&work)?;
        work.value_mut(id).data_mut()[j] = orig;
        report.record(&store.get(id).name, j, analytic, (fp - fm) / (2.0 * eps));
    }
    Ok(report)
}
