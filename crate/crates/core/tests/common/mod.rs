#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tprd3::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with the denominator floored at 1e-3, so entries where
/// both gradients are ~0 are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compares reverse-mode gradients of `sum(out * w)` (fixed random `w`)
/// against central finite differences. Returns the max relative error.
pub fn gradient_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let scalarize = |g: &mut Graph, out: Var| {
        let n = g.value(out).len();
        let mut wr = rng(0xfeed);
        let w: Vec<f64> = (0..n).map(|_| wr.random_range(-1.0..1.0)).collect();
        g.weighted_sum(out, &w).unwrap()
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let s = scalarize(&mut g, out);
        g.value(s).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_grad())).collect();
    let out = build(&mut g, &vars);
    let s = scalarize(&mut g, out);
    g.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Like [`gradient_check`] but also differentiates every parameter in
/// `store`. `build` gets a fresh forward context per evaluation; dropout draws
/// come from the same stream each time, so masks agree.
pub fn model_gradient_check(
    store: &tprd3::ParamStore,
    inputs: &[Tensor],
    mode: tprd3::Mode,
    build: impl Fn(&mut tprd3::nn::Forward<'_, f64>, &[Var]) -> Var,
) -> f64 {
    use tprd3::nn::Forward;
    use tprd3::rng::{stream, Domain};

    let weights = |n: usize| {
        let mut wr = rng(0xfeed);
        (0..n).map(|_| wr.random_range(-1.0..1.0)).collect::<Vec<f64>>()
    };
    let eval = |store: &tprd3::ParamStore, ins: &[Tensor]| -> f64 {
        let mut cx = Forward::new(store, mode, stream(7, Domain::Dropout, 0));
        let vars: Vec<Var> = ins.iter().map(|t| cx.graph.constant(t.clone())).collect();
        let out = build(&mut cx, &vars);
        let w = weights(cx.graph.value(out).len());
        let s = cx.graph.weighted_sum(out, &w).unwrap();
        cx.graph.value(s).item()
    };

    let mut grads = store.clone();
    grads.zero_grads();
    let input_grads: Vec<Vec<f64>> = {
        let mut cx = Forward::new(store, mode, stream(7, Domain::Dropout, 0));
        let vars: Vec<Var> = inputs.iter().map(|t| cx.graph.input(t.clone().with_grad())).collect();
        let out = build(&mut cx, &vars);
        let w = weights(cx.graph.value(out).len());
        let s = cx.graph.weighted_sum(out, &w).unwrap();
        cx.graph.backward(s).unwrap();
        cx.graph.accumulate_param_grads(&mut grads);
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| cx.graph.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
            .collect()
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(input_grads[k][i], numeric));
        }
    }
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = grads.tensor(id).grad.clone().unwrap();
        for i in 0..store.tensor(id).len() {
            let orig = store.tensor(id).data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe, inputs);
            probe.tensor_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe, inputs);
            probe.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}
