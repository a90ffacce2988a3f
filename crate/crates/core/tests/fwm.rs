mod common;

use common::{model_gradient_check, random_tensor, rng};
use rand::Rng as _;
use tprd3::config::RunConfig;
use tprd3::d3::D3Config;
use tprd3::fwm::{Components, FwmConfig, FwmModel, HeadInput, Memory, MemoryForm, Variant};
use tprd3::model::SarModel;
use tprd3::nn::Forward;
use tprd3::rng::{stream, Domain};
use tprd3::sar::gen_train_episode;
use tprd3::{Error, Mode, ParamStore, Tensor, Var};

const D: usize = 4;

fn tiny(variant: Variant, memory: MemoryForm) -> (ParamStore, FwmModel) {
    let config = FwmConfig { d_input: 5, d_lstm: 6, d_fwm: D, n_classes: 3, memory, ..FwmConfig::default() };
    let d3 = D3Config { d_code: 4, n_code: 4, top_k: 2, d_query: 2, d_component: D, ..D3Config::default() };
    let mut store = ParamStore::new();
    let model = FwmModel::new(&mut store, config, variant, &d3, &mut stream(3, Domain::Init, 0)).unwrap();
    (store, model)
}

/// Random orthonormal basis of R^D by Gram-Schmidt.
fn orthonormal(seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < D {
        let mut v: Vec<f64> = (0..D).map(|_| r.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn row(cx: &mut Forward<'_, f64>, v: &[f64]) -> Var {
    cx.graph.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
}

fn binding(cx: &mut Forward<'_, f64>, r1: &[f64], r2: &[f64], f: &[f64], beta: f64, u: (&[f64], &[f64])) -> Components {
    Components {
        role1: row(cx, r1),
        role2: row(cx, r2),
        filler: row(cx, f),
        unbind1: row(cx, u.0),
        unbind2: row(cx, u.1),
        beta: row(cx, &[beta]),
        traces: Vec::new(),
    }
}

fn empty(cx: &mut Forward<'_, f64>, form: MemoryForm) -> Memory {
    match form {
        MemoryForm::Dense => Memory::Dense(cx.graph.constant(Tensor::zeros(&[1, D, D, D]))),
        MemoryForm::Factored => Memory::Factored(Vec::new()),
    }
}

fn filler(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..D).map(|_| r.random_range(-2.0..2.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const FORMS: [MemoryForm; 2] = [MemoryForm::Dense, MemoryForm::Factored];

#[test]
fn single_binding_round_trip() {
    for form in FORMS {
        let (store, model) = tiny(Variant::Baseline, form);
        for seed in 0..10 {
            let q = orthonormal(seed);
            let f = filler(seed);
            let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
            let mut mem = empty(&mut cx, form);
            let c = binding(&mut cx, &q[0], &q[1], &f, 1.0, (&q[0], &q[1]));
            let read = model.write_then_read(&mut cx, &mut mem, &c).unwrap();
            assert!(max_diff(cx.graph.data(read), &f) < 1e-10);
        }
    }
}

#[test]
fn rebinding_same_filler_is_a_fixed_point() {
    for form in FORMS {
        let (store, model) = tiny(Variant::Baseline, form);
        for seed in 0..10 {
            let q = orthonormal(seed);
            let f = filler(seed);
            let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
            let mut mem = empty(&mut cx, form);
            let c = binding(&mut cx, &q[0], &q[1], &f, 1.0, (&q[0], &q[1]));
            model.write_then_read(&mut cx, &mut mem, &c).unwrap();
            let before = mem.materialize(&cx, 1, D);
            for beta in [0.0, 0.37, 1.0] {
                let c = binding(&mut cx, &q[0], &q[1], &f, beta, (&q[0], &q[1]));
                model.write_then_read(&mut cx, &mut mem, &c).unwrap();
                let after = mem.materialize(&cx, 1, D);
                assert!(max_diff(before.data(), after.data()) < 1e-12, "beta {beta}");
            }
        }
    }
}

#[test]
fn orthogonal_bindings_superpose() {
    for form in FORMS {
        let (store, model) = tiny(Variant::Baseline, form);
        for seed in 0..10 {
            let q = orthonormal(seed);
            let (f1, f2) = (filler(seed), filler(seed + 100));
            // (q0,q1) vs (q2,q3), and (q0,q1) vs (q0,q2): both pairs have orthogonal products.
            for (a, b) in [((0, 1), (2, 3)), ((0, 1), (0, 2))] {
                let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
                let mut mem = empty(&mut cx, form);
                let c = binding(&mut cx, &q[a.0], &q[a.1], &f1, 1.0, (&q[a.0], &q[a.1]));
                model.write_then_read(&mut cx, &mut mem, &c).unwrap();
                let c = binding(&mut cx, &q[b.0], &q[b.1], &f2, 1.0, (&q[a.0], &q[a.1]));
                let first = model.write_then_read(&mut cx, &mut mem, &c).unwrap();
                assert!(max_diff(cx.graph.data(first), &f1) < 1e-10);
                let (u1, u2) = (row(&mut cx, &q[b.0]), row(&mut cx, &q[b.1]));
                let second = mem.contract(&mut cx, u1, u2).unwrap();
                assert!(max_diff(cx.graph.data(second), &f2) < 1e-10);
            }
        }
    }
}

#[test]
fn rebinding_new_filler_overwrites() {
    for form in FORMS {
        let (store, model) = tiny(Variant::Baseline, form);
        for seed in 0..10 {
            let q = orthonormal(seed);
            let (f1, f2) = (filler(seed), filler(seed + 100));
            let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
            let mut mem = empty(&mut cx, form);
            let c = binding(&mut cx, &q[1], &q[3], &f1, 0.6, (&q[1], &q[3]));
            model.write_then_read(&mut cx, &mut mem, &c).unwrap();
            let c = binding(&mut cx, &q[1], &q[3], &f2, 1.0, (&q[1], &q[3]));
            let read = model.write_then_read(&mut cx, &mut mem, &c).unwrap();
            assert!(max_diff(cx.graph.data(read), &f2) < 1e-10);
        }
    }
}

fn unroll(model: &FwmModel, cx: &mut Forward<'_, f64>, inputs: &[Var]) -> Var {
    let mut state = model.initial_state(cx, cx.graph.shape(inputs[0])[0]);
    let mut logits = Vec::new();
    for &x in inputs {
        let (next, out) = model.step(cx, state, x).unwrap();
        state = next;
        logits.push(out.logits);
    }
    cx.graph.concat_cols(&logits).unwrap()
}

#[test]
fn three_step_gradients() {
    for variant in Variant::ALL {
        for form in FORMS {
            let (store, model) = tiny(variant, form);
            for seed in 0..2 {
                let inputs: Vec<Tensor> = (0..3).map(|t| random_tensor(&[2, 5], &mut rng(seed * 10 + t))).collect();
                let err = model_gradient_check(&store, &inputs, Mode::Train, |cx, v| unroll(&model, cx, v));
                assert!(err < 1e-3, "{variant} {form:?} seed {seed}: {err:e}");
            }
        }
    }
}

#[test]
fn dense_and_factored_memory_agree() {
    for variant in Variant::ALL {
        let (store, dense) = tiny(variant, MemoryForm::Dense);
        let (_, factored) = tiny(variant, MemoryForm::Factored);
        let inputs: Vec<Tensor> = (0..6).map(|t| random_tensor(&[3, 5], &mut rng(t))).collect();
        let run = |model: &FwmModel| {
            let mut cx = Forward::new(&store, Mode::Train, stream(1, Domain::Dropout, 0));
            let vars: Vec<Var> = inputs.iter().map(|t| cx.graph.constant(t.clone())).collect();
            let out = unroll(model, &mut cx, &vars);
            let s = cx.graph.sum(out);
            cx.graph.backward(s).unwrap();
            let mut grads = store.clone();
            grads.zero_grads();
            cx.graph.accumulate_param_grads(&mut grads);
            let g: Vec<f64> = grads.iter().flat_map(|p| p.tensor.grad.clone().unwrap()).collect();
            (cx.graph.data(out).to_vec(), g)
        };
        let (a, ga) = run(&dense);
        let (b, gb) = run(&factored);
        assert!(max_diff(&a, &b) < 1e-12, "{variant} logits");
        assert!(max_diff(&ga, &gb) < 1e-10, "{variant} gradients");
    }
}

#[test]
fn generators_share_component_shapes() {
    for variant in Variant::ALL {
        let (store, model) = tiny(variant, MemoryForm::Factored);
        let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
        let h = cx.graph.constant(random_tensor(&[3, 6], &mut rng(1)));
        let c = model.generate(&mut cx, h).unwrap();
        for v in [c.role1, c.role2, c.filler, c.unbind1, c.unbind2] {
            assert_eq!(cx.graph.shape(v), &[3, D], "{variant}");
        }
        assert_eq!(cx.graph.shape(c.beta), &[3, 1]);
        assert!(cx.graph.data(c.beta).iter().all(|&b| b > 0.0 && b < 1.0));
        assert_eq!(c.traces.len(), match variant {
            Variant::Baseline => 0,
            Variant::D3WithoutFiller => 4,
            Variant::D3WithFiller => 5,
        });
        // Roles and unbinding operators are projected to unit length.
        for v in [c.role1, c.role2, c.unbind1, c.unbind2] {
            let t = cx.graph.value(v);
            for r in 0..3 {
                let n: f64 = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn baseline_components_are_tanh_bounded_without_normalization() {
    let config = FwmConfig { d_input: 5, d_lstm: 6, d_fwm: D, n_classes: 3, normalize_roles: false, ..FwmConfig::default() };
    let mut store = ParamStore::new();
    let model = FwmModel::new(&mut store, config, Variant::Baseline, &D3Config::default(), &mut stream(0, Domain::Init, 0)).unwrap();
    let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
    let mut big = random_tensor(&[2, 6], &mut rng(2));
    big.data_mut().iter_mut().for_each(|x| *x *= 50.0);
    let h = cx.graph.constant(big);
    let c = model.generate(&mut cx, h).unwrap();
    for v in [c.role1, c.role2, c.filler, c.unbind1, c.unbind2] {
        assert!(cx.graph.data(v).iter().all(|x| x.abs() <= 1.0));
    }
}

#[test]
fn parameter_names_and_config_checks() {
    let (store, _) = tiny(Variant::D3WithoutFiller, MemoryForm::Factored);
    let names: Vec<&str> = store.iter().map(|p| p.name.as_str()).collect();
    for prefix in ["fwm.lstm.", "fwm.out.", "fwm.beta.", "gen.baseline.", "d3."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    let (store, _) = tiny(Variant::D3WithFiller, MemoryForm::Factored);
    assert!(store.iter().all(|p| !p.name.starts_with("gen.baseline")));

    let cfg = FwmConfig::default();
    assert_eq!((cfg.n_component_enc(), cfg.n_component_dec()), (3, 2));
    let bad = D3Config { d_component: 16, ..D3Config::default() };
    let err = FwmModel::new(&mut ParamStore::new(), cfg.clone(), Variant::D3WithoutFiller, &bad, &mut stream(0, Domain::Init, 0));
    assert!(matches!(err, Err(Error::Config(_))));
    let err = FwmModel::new(
        &mut ParamStore::new(),
        FwmConfig { n_reads: 3, ..cfg },
        Variant::Baseline,
        &D3Config::default(),
        &mut stream(0, Domain::Init, 0),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn non_finite_memory_reports_divergence() {
    for form in FORMS {
        let (mut store, model) = tiny(Variant::Baseline, form);
        let b = store.find("fwm.beta.b").unwrap();
        store.tensor_mut(b).data_mut()[0] = f64::NAN;
        let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
        let state = model.initial_state(&mut cx, 1);
        let x = cx.graph.constant(random_tensor(&[1, 5], &mut rng(0)));
        let err = model.step(&mut cx, state, x).unwrap_err();
        assert!(matches!(err, Error::Divergence { timestep: 0, .. }), "{err}");
    }
    // Diverging only later reports the later timestep.
    let (store, model) = tiny(Variant::Baseline, MemoryForm::Dense);
    let mut cx = Forward::new(&store, Mode::Eval, stream(0, Domain::Dropout, 0));
    let mut state = model.initial_state(&mut cx, 1);
    for t in 0..3 {
        let mut x = random_tensor(&[1, 5], &mut rng(t));
        if t == 2 {
            x.data_mut()[0] = f64::NAN;
        }
        let x = cx.graph.constant(x);
        match model.step(&mut cx, state, x) {
            Ok((next, _)) => state = next,
            Err(e) => {
                assert!(matches!(e, Error::Divergence { timestep: 2, .. }));
                return;
            }
        }
    }
    panic!("no divergence reported");
}

fn desk_model(variant: Variant) -> (RunConfig, SarModel<f64>) {
    let mut config = RunConfig { variant, ..RunConfig::default() };
    if variant == Variant::D3WithFiller {
        config.d3.apply_to_filler = true;
    }
    let model = SarModel::new(&config).unwrap();
    (config, model)
}

#[test]
fn untrained_loss_is_near_uniform() {
    for variant in Variant::ALL {
        let (config, model) = desk_model(variant);
        let episodes: Vec<_> = (0..8).map(|i| gen_train_episode(&config.vocab(), 0, i).unwrap()).collect();
        let run = model.run(&episodes, Mode::Train, stream(0, Domain::Dropout, 0), false).unwrap();
        let loss = run.loss_value();
        let uniform = (config.vocab().n_classes() as f64).ln();
        assert!((loss - uniform).abs() <= 0.1 * uniform, "{variant}: loss {loss} vs ln C {uniform}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in Variant::ALL {
        let (config, mut model) = desk_model(variant);
        let episodes: Vec<_> = (0..4).map(|i| gen_train_episode(&config.vocab(), 0, i).unwrap()).collect();
        let graph = {
            let run = model.run(&episodes, Mode::Train, stream(0, Domain::Dropout, 0), false).unwrap();
            assert!(run.loss_value().is_finite());
            run.backward().unwrap()
        };
        model.store_mut().zero_grads();
        graph.accumulate_param_grads(model.store_mut());
        for p in model.store().iter() {
            let g = p.tensor.grad.as_ref().unwrap();
            assert!(g.iter().all(|x| x.is_finite()), "{variant} {}", p.name);
            assert!(g.iter().any(|&x| x != 0.0), "{variant}: {} has no gradient", p.name);
        }
    }
}

#[test]
fn eval_runs_are_deterministic() {
    for variant in Variant::ALL {
        let (config, model) = desk_model(variant);
        let episodes: Vec<_> = (0..4).map(|i| gen_train_episode(&config.vocab(), 5, i).unwrap()).collect();
        let a = model.run(&episodes, Mode::Eval, stream(1, Domain::Dropout, 0), false).unwrap();
        let b = model.run(&episodes, Mode::Eval, stream(2, Domain::Dropout, 0), false).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.loss_value().to_bits(), b.loss_value().to_bits());
    }
}

#[test]
fn hidden_and_read_head_is_supported() {
    let mut config = RunConfig::default();
    config.fwm.head = HeadInput::HiddenAndRead;
    let model = SarModel::<f64>::new(&config).unwrap();
    let out = model.store().tensor(model.store().find("fwm.out.w").unwrap());
    assert_eq!(out.shape(), &[256 + 32, 40]);
    let ep = gen_train_episode(&config.vocab(), 0, 0).unwrap();
    let run = model.run(&[ep], Mode::Eval, stream(0, Domain::Dropout, 0), false).unwrap();
    assert!(run.loss_value().is_finite());
}
