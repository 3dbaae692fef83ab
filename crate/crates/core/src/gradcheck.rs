//! Central finite-difference gradient checking.
//!
//! Only forward values are used to build the numerical gradient, so the check
//! stays independent of the backward implementation it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)` per input.
    pub rel_err: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares `d build(inputs) / d inputs` against central differences with step `h`.
pub fn check<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> Result<GradReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            num.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        numeric.push(num);
    }

    let rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_inf(a.data(), n.data()))
        .collect();
    Ok(GradReport {
        analytic,
        numeric,
        rel_err,
    })
}

fn abs_inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let diff = abs_inf(a, b);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Finite-difference check over every parameter of a store. `build` must load
/// parameters through [`Graph::param`] so the analytic side tracks them.
pub fn check_params<B>(store: &ParamStore<f64>, h: f64, build: B) -> Result<ParamGradReport>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    g.backward(out)?;
    let mut analytic = store.zeros_like();
    g.accumulate_param_grads(&mut analytic);

    // Errors are scaled by the largest analytic gradient over the whole model:
    // parameters with identically zero gradient (key biases under softmax
    // shift invariance, for one) would otherwise divide round-off by round-off.
    let global = analytic
        .iter()
        .flatten()
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).numel();
        let mut num = vec![0.0; n];
        for j in 0..n {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = {
                let mut g = Graph::new();
                let o = build(&mut g, &work)?;
                g.value(o).item()
            };
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = {
                let mut g = Graph::new();
                let o = build(&mut g, &work)?;
                g.value(o).item()
            };
            work.get_mut(id).data_mut()[j] = orig;
            num[j] = (plus - minus) / (2.0 * h);
        }
        entries.push(ParamGradEntry {
            name: store.name(id).to_string(),
            rel_err: abs_inf(&analytic[id.index()], &num) / global.max(f64::MIN_POSITIVE),
            max_abs_grad: analytic[id.index()].iter().map(|x| x.abs()).fold(0.0, f64::max),
        });
    }
    Ok(ParamGradReport { entries })
}

#[derive(Debug, Clone)]
pub struct ParamGradEntry {
    pub name: String,
    pub rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub entries: Vec<ParamGradEntry>,
}

impl ParamGradReport {
    pub fn worst(&self) -> Option<&ParamGradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}
