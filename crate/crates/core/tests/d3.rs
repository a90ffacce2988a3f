mod common;

use common::{model_gradient_check, random_tensor, rng};
use tprd3::d3::{D3Config, D3Layer};
use tprd3::nn::Forward;
use tprd3::rng::{stream, Domain};
use tprd3::{Error, Mode, ParamStore, Tensor};

const LAYER_TOL: f64 = 1e-4;
const D_INPUT: usize = 6;

fn small_config() -> D3Config {
    D3Config { d_code: 8, n_code: 4, top_k: 2, d_query: 4, d_component: 5, ..D3Config::default() }
}

fn build(config: D3Config, groups: Vec<usize>, seed: u64) -> (ParamStore, D3Layer) {
    let mut store = ParamStore::new();
    let mut r = stream(seed, Domain::Init, 0);
    let layer = D3Layer::new(&mut store, config, D_INPUT, groups, &mut r).unwrap();
    (store, layer)
}

fn eval_cx(store: &ParamStore) -> Forward<'_, f64> {
    Forward::new(store, Mode::Eval, stream(0, Domain::Dropout, 0))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
        .collect()
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.tensor(store.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol, "got {got:?}\nwant {want:?}");
    }
}

#[test]
fn parameter_names() {
    let (store, _) = build(D3Config::default(), vec![0, 1, 0, 1], 0);
    for name in [
        "d3.group0.keys",
        "d3.group1.values",
        "d3.comp3.query.w",
        "d3.comp0.query.b",
        "d3.comp2.query.ln_g",
        "d3.comp1.query.ln_b",
        "d3.residual.w",
        "d3.residual.b",
        "d3.final.w",
        "d3.final.b",
    ] {
        assert!(store.find(name).is_some(), "{name}");
    }
    assert_eq!(param(&store, "d3.group0.keys").shape(), &[64, 16]);
    assert_eq!(param(&store, "d3.group0.values").shape(), &[64, 32]);
    assert!(store.find("d3.group2.keys").is_none());

    let (store, _) = build(D3Config { shared_projections: false, ..D3Config::default() }, vec![0, 1, 0, 1], 0);
    assert!(store.find("d3.residual.w").is_none());
    assert!(store.find("d3.group1.final.w").is_some());
}

#[test]
fn both_paths_disabled_is_a_config_error() {
    let config = D3Config { use_codebook: false, use_residual: false, ..small_config() };
    let mut store = ParamStore::new();
    let mut r = stream(0, Domain::Init, 0);
    let err = D3Layer::new(&mut store, config, D_INPUT, vec![0], &mut r).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = D3Layer::new(&mut store, D3Config { top_k: 5, ..small_config() }, D_INPUT, vec![0], &mut r).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn zero_input_gives_zero_query() {
    let (store, layer) = build(small_config(), vec![0], 1);
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(Tensor::zeros(&[1, D_INPUT]));
    let q = layer.make_query(&mut cx, 0, x).unwrap();
    assert!(cx.graph.data(q).iter().all(|&v| v == 0.0));
}

#[test]
fn eval_mode_is_deterministic() {
    let (store, layer) = build(small_config(), vec![0, 1, 0, 1], 2);
    let input = random_tensor(&[3, D_INPUT], &mut rng(2));
    let outputs = |seed: u64| {
        let mut cx = Forward::new(&store, Mode::Eval, stream(seed, Domain::Dropout, 0));
        let x = cx.graph.constant(input.clone());
        let traces = layer.decompose(&mut cx, x).unwrap();
        traces.iter().map(|t| cx.graph.data(t.output).to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(outputs(0), outputs(99));
}

#[test]
fn make_query_gradients() {
    for seed in 0..5 {
        let (store, layer) = build(small_config(), vec![0], seed);
        let input = random_tensor(&[2, D_INPUT], &mut rng(seed));
        let err = model_gradient_check(&store, &[input], Mode::Train, |cx, v| layer.make_query(cx, 0, v[0]).unwrap());
        assert!(err < LAYER_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn aligned_key_ranks_first() {
    let (mut store, layer) = build(D3Config { n_code: 4, top_k: 1, ..small_config() }, vec![0], 3);
    let keys = store.find("d3.group0.keys").unwrap();
    // Orthogonal unit keys, scaled differently to exercise the normalization.
    let k = vec![
        0.0, 3.0, 0.0, 0.0, //
        0.5, 0.0, 0.0, 0.0, //
        0.0, 0.0, 7.0, 0.0, //
        0.0, 0.0, 0.0, 2.0,
    ];
    store.tensor_mut(keys).data_mut().copy_from_slice(&k);
    let mut cx = eval_cx(&store);
    let q = cx.graph.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    let access = layer.sparse_key_access(&mut cx, q, layer.dictionary(0), 1).unwrap();
    assert_eq!(access.indices, vec![2]);
    assert_close(cx.graph.data(access.scores), &[1.0], 1e-15);
}

/// Brute-force oracle: normalize every key, score, stable sort descending.
fn oracle_rank(query: &[f64], keys: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let n = k.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            (i, query.iter().zip(k).map(|(a, b)| a * b / n).sum())
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

#[test]
fn sparse_access_matches_brute_force() {
    for seed in 0..20 {
        let config = D3Config { n_code: 8, top_k: 3, ..small_config() };
        let (mut store, layer) = build(config, vec![0], seed);
        let keys_id = store.find("d3.group0.keys").unwrap();
        *store.tensor_mut(keys_id) = random_tensor(&[8, 4], &mut rng(100 + seed)).with_grad();
        let queries = random_tensor(&[4, 4], &mut rng(200 + seed));
        for k in 1..=8 {
            let mut cx = eval_cx(&store);
            let q = cx.graph.constant(queries.clone());
            let access = layer.sparse_key_access(&mut cx, q, layer.dictionary(0), k).unwrap();
            for r in 0..4 {
                let want = oracle_rank(queries.row(r), &rows(store.tensor(keys_id)));
                let idx: Vec<usize> = want[..k].iter().map(|p| p.0).collect();
                let scores: Vec<f64> = want[..k].iter().map(|p| p.1).collect();
                assert_eq!(&access.indices[r * k..(r + 1) * k], idx.as_slice());
                assert_close(&cx.graph.data(access.scores)[r * k..(r + 1) * k], &scores, 1e-12);
            }
        }
    }
}

#[test]
fn full_width_access_returns_all_sorted() {
    let (store, layer) = build(small_config(), vec![0], 4);
    let mut cx = eval_cx(&store);
    let q = cx.graph.constant(random_tensor(&[1, 4], &mut rng(4)));
    let access = layer.sparse_key_access(&mut cx, q, layer.dictionary(0), 4).unwrap();
    let mut sorted = access.indices.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
    let s = cx.graph.data(access.scores);
    assert!(s.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn aggregate_code_examples() {
    let (mut store, layer) = build(small_config(), vec![0], 5);
    let values = rows(param(&store, "d3.group0.values"));

    // k = 1: the single selected value, exactly.
    let mut cx = eval_cx(&store);
    let q = cx.graph.constant(random_tensor(&[1, 4], &mut rng(5)));
    let access = layer.sparse_key_access(&mut cx, q, layer.dictionary(0), 1).unwrap();
    let code = layer.aggregate_code(&mut cx, &access, layer.dictionary(0)).unwrap();
    assert_eq!(cx.graph.data(code), values[access.indices[0]].as_slice());

    // Two identical keys tie; k = 2 averages their values.
    let keys = store.find("d3.group0.keys").unwrap();
    let k = vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0];
    store.tensor_mut(keys).data_mut().copy_from_slice(&k);
    let mut cx = eval_cx(&store);
    let q = cx.graph.constant(Tensor::new(&[1, 4], vec![1.0, 1.0, 0.5, -0.5]).unwrap());
    let access = layer.sparse_key_access(&mut cx, q, layer.dictionary(0), 2).unwrap();
    assert_eq!(access.indices, vec![0, 1]);
    let code = layer.aggregate_code(&mut cx, &access, layer.dictionary(0)).unwrap();
    let mean: Vec<f64> = values[0].iter().zip(&values[1]).map(|(a, b)| (a + b) / 2.0).collect();
    assert_close(cx.graph.data(code), &mean, 1e-15);
}

/// Dense oracle: softmax over all keys with unselected scores masked to -inf.
fn masked_dense_code(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], k: usize) -> Vec<f64> {
    let ranked = oracle_rank(query, keys);
    let keep: Vec<usize> = ranked[..k].iter().map(|p| p.0).collect();
    let scores: Vec<f64> = (0..keys.len())
        .map(|i| if keep.contains(&i) { ranked.iter().find(|p| p.0 == i).unwrap().1 } else { f64::NEG_INFINITY })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in e.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    out
}

#[test]
fn aggregate_code_matches_masked_dense_oracle() {
    for seed in 0..10 {
        let (store, layer) = build(small_config(), vec![0], seed);
        let queries = random_tensor(&[3, 4], &mut rng(seed + 50));
        let keys = rows(param(&store, "d3.group0.keys"));
        let values = rows(param(&store, "d3.group0.values"));
        for k in 1..=4 {
            let mut cx = eval_cx(&store);
            let q = cx.graph.constant(queries.clone());
            let access = layer.sparse_key_access(&mut cx, q, layer.dictionary(0), k).unwrap();
            let code = layer.aggregate_code(&mut cx, &access, layer.dictionary(0)).unwrap();
            for r in 0..3 {
                let want = masked_dense_code(queries.row(r), &keys, &values, k);
                assert_close(&cx.graph.data(code)[r * 8..(r + 1) * 8], &want, 1e-12);
            }
        }
    }
}

#[test]
fn full_width_access_is_dense_attention() {
    let config = D3Config { top_k: 4, use_residual: false, ..small_config() };
    let (store, layer) = build(config, vec![0], 6);
    let input = random_tensor(&[2, D_INPUT], &mut rng(6));
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(input);
    let trace = layer.make_component(&mut cx, 0, x).unwrap();
    let keys = rows(param(&store, "d3.group0.keys"));
    let values = rows(param(&store, "d3.group0.values"));
    let q = cx.graph.value(trace.query).clone();
    for r in 0..2 {
        // Plain softmax over every key, no masking.
        let scores: Vec<f64> = oracle_rank(q.row(r), &keys)
            .into_iter()
            .fold(vec![0.0; 4], |mut s, (i, v)| {
                s[i] = v;
                s
            });
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let mut want = vec![0.0; 8];
        for (s, v) in scores.iter().zip(&values) {
            for (o, x) in want.iter_mut().zip(v) {
                *o += (s - max).exp() / z * x;
            }
        }
        let code = trace.code.unwrap();
        assert_close(&cx.graph.data(code)[r * 8..(r + 1) * 8], &want, 1e-12);
    }
}

#[test]
fn ablation_paths() {
    let input = random_tensor(&[1, D_INPUT], &mut rng(7));

    // Without codebook: final(residual(query)).
    let (store, layer) = build(D3Config { use_codebook: false, ..small_config() }, vec![0], 7);
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(input.clone());
    let t = layer.make_component(&mut cx, 0, x).unwrap();
    assert!(t.code.is_none() && t.indices.is_empty());
    let q = cx.graph.data(t.query).to_vec();
    let r = affine(&q, param(&store, "d3.residual.w"), param(&store, "d3.residual.b"));
    let want = affine(&r, param(&store, "d3.final.w"), param(&store, "d3.final.b"));
    assert_close(cx.graph.data(t.output), &want, 1e-12);

    // Without residual: final(code).
    let (store, layer) = build(D3Config { use_residual: false, ..small_config() }, vec![0], 7);
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(input.clone());
    let t = layer.make_component(&mut cx, 0, x).unwrap();
    let code = cx.graph.data(t.code.unwrap()).to_vec();
    let want = affine(&code, param(&store, "d3.final.w"), param(&store, "d3.final.b"));
    assert_close(cx.graph.data(t.output), &want, 1e-12);

    // k = 1 with a zeroed residual map: final(v_best).
    let (mut store, layer) = build(D3Config { top_k: 1, ..small_config() }, vec![0], 7);
    for name in ["d3.residual.w", "d3.residual.b"] {
        let id = store.find(name).unwrap();
        store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(input);
    let t = layer.make_component(&mut cx, 0, x).unwrap();
    let best = param(&store, "d3.group0.values").row(t.indices[0]).to_vec();
    let want = affine(&best, param(&store, "d3.final.w"), param(&store, "d3.final.b"));
    assert_close(cx.graph.data(t.output), &want, 1e-12);
}

#[test]
fn decompose_configurations() {
    let config = D3Config { d_component: 32, ..D3Config::default() };
    let (store, layer) = build(config.clone(), vec![0, 1, 0, 1], 8);
    assert_eq!((layer.n_components(), layer.n_groups()), (4, 2));
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(random_tensor(&[2, D_INPUT], &mut rng(8)));
    let traces = layer.decompose(&mut cx, x).unwrap();
    assert_eq!(traces.len(), 4);
    assert_eq!(traces.iter().map(|t| t.group).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
    for t in &traces {
        assert_eq!(cx.graph.shape(t.output), &[2, 32]);
        assert_eq!(cx.graph.shape(t.query), &[2, 16]);
    }

    let (_, layer) = build(D3Config { apply_to_filler: true, ..config }, vec![0, 1, 2, 0, 1], 8);
    assert_eq!((layer.n_components(), layer.n_groups()), (5, 3));
}

#[test]
fn groups_are_shared_within_and_disjoint_across() {
    let (mut store, layer) = build(small_config(), vec![0, 1, 0, 1], 9);
    let input = random_tensor(&[2, D_INPUT], &mut rng(9));
    let outputs = |store: &ParamStore| {
        let mut cx = eval_cx(store);
        let x = cx.graph.constant(input.clone());
        let traces = layer.decompose(&mut cx, x).unwrap();
        traces.iter().map(|t| cx.graph.data(t.output).to_vec()).collect::<Vec<_>>()
    };
    let before = outputs(&store);
    let values = store.find("d3.group0.values").unwrap();
    store.tensor_mut(values).data_mut().iter_mut().for_each(|v| *v += 0.25);
    let after = outputs(&store);
    assert_ne!(before[0], after[0], "role of group 0 must change");
    assert_ne!(before[2], after[2], "unbind of group 0 must change");
    assert_eq!(before[1], after[1], "group 1 untouched");
    assert_eq!(before[3], after[3], "group 1 untouched");
}

#[test]
fn unselected_keys_and_values_get_exactly_zero_gradient() {
    let config = D3Config { n_code: 8, top_k: 2, ..small_config() };
    let (mut store, layer) = build(config, vec![0], 10);
    let mut cx = Forward::new(&store, Mode::Train, stream(10, Domain::Dropout, 0));
    let x = cx.graph.constant(random_tensor(&[1, D_INPUT], &mut rng(10)));
    let t = layer.make_component(&mut cx, 0, x).unwrap();
    let s = cx.graph.sum(t.output);
    cx.graph.backward(s).unwrap();
    let selected = t.indices.clone();
    let graph = cx.graph;
    store.zero_grads();
    graph.accumulate_param_grads(&mut store);
    for name in ["d3.group0.keys", "d3.group0.values"] {
        let p = param(&store, name);
        let cols = p.cols();
        let grad = p.grad.as_ref().unwrap();
        for row in 0..8 {
            let g = &grad[row * cols..(row + 1) * cols];
            if selected.contains(&row) {
                assert!(g.iter().any(|&v| v != 0.0), "{name} row {row} selected but no gradient");
            } else {
                assert!(g.iter().all(|&v| v == 0.0), "{name} row {row} unselected but has gradient");
            }
        }
    }
}

#[test]
fn code_lies_in_hull_of_selected_values() {
    let config = D3Config { n_code: 8, top_k: 3, use_residual: false, ..small_config() };
    for seed in 0..10 {
        let (store, layer) = build(config.clone(), vec![0], seed);
        let mut cx = eval_cx(&store);
        let x = cx.graph.constant(random_tensor(&[4, D_INPUT], &mut rng(seed)));
        let t = layer.make_component(&mut cx, 0, x).unwrap();
        let code = cx.graph.value(t.code.unwrap()).clone();
        let values = param(&store, "d3.group0.values");
        for r in 0..4 {
            let sel = &t.indices[r * 3..(r + 1) * 3];
            for c in 0..8 {
                let col: Vec<f64> = sel.iter().map(|&i| values.row(i)[c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = code.row(r)[c];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "coordinate {c} = {v} outside [{lo}, {hi}]");
            }
        }
    }
}

#[test]
fn full_layer_gradients() {
    for seed in 0..5 {
        let (store, layer) = build(small_config(), vec![0, 1, 0, 1], seed);
        let input = random_tensor(&[2, D_INPUT], &mut rng(seed + 300));
        let err = model_gradient_check(&store, &[input], Mode::Train, |cx, v| {
            let traces = layer.decompose(cx, v[0]).unwrap();
            let outs: Vec<_> = traces.iter().map(|t| t.output).collect();
            cx.graph.concat_cols(&outs).unwrap()
        });
        assert!(err < LAYER_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn degenerate_keys_are_counted_and_guarded() {
    let (mut store, layer) = build(small_config(), vec![0], 11);
    let keys = store.find("d3.group0.keys").unwrap();
    store.tensor_mut(keys).data_mut()[..4].iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(layer.dictionary(0).degenerate_keys(&store), 1);
    let mut cx = eval_cx(&store);
    let x = cx.graph.constant(random_tensor(&[2, D_INPUT], &mut rng(11)));
    let t = layer.make_component(&mut cx, 0, x).unwrap();
    assert!(cx.graph.value(t.output).is_finite());
}
