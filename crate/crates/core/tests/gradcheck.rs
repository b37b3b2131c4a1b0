//! Analytic gradients vs central finite differences, for every primitive and
//! for the full model loss on a tiny configuration.

use std::collections::BTreeMap;

use e2esl_core::autodiff::{finite_diff_grads, Graph, ParamStore, Tensor, Var};
use e2esl_core::grid::{AreaIndex, GridSpec, RoomDims};
use e2esl_core::model::{self, Activation, ModelConfig, NodeInput};
use e2esl_core::rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(rows: usize, cols: usize, r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng::uniform(r, -1.0, 1.0)).collect())
}

// keeps relu inputs away from the kink so finite differences stay clean
fn rand_tensor_off_zero(rows: usize, cols: usize, r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let mag = rng::uniform(r, 0.2, 1.0);
                if rng::uniform(r, 0.0, 1.0) < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect(),
    )
}

fn compare(analytic: &BTreeMap<String, Vec<f64>>, fd: &BTreeMap<String, Vec<f64>>, what: &str) {
    for (name, a) in analytic {
        let f = &fd[name];
        let diff: f64 = a.iter().zip(f).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm: f64 = f.iter().map(|y| y * y).sum::<f64>().sqrt();
        let rel = diff / norm.max(1e-10);
        assert!(
            rel <= TOL || diff <= 1e-10,
            "{what}: param {name} gradient off by {rel:.3e} (|diff| {diff:.3e}, |fd| {norm:.3e})"
        );
    }
}

/// Shared harness: `build` maps the store's params to an output tensor, which
/// is reduced to a scalar by nested means.
fn gradcheck_op(
    what: &str,
    store: &mut ParamStore<f64>,
    mut build: impl FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) {
    let loss_of = |g: &mut Graph<f64>, out: Var| -> Var {
        let m0 = g.mean_axis(0, out).unwrap();
        g.mean_axis(1, m0).unwrap()
    };

    let mut g = Graph::new();
    let out = build(&mut g, store);
    let loss = loss_of(&mut g, out);
    g.backward(loss).unwrap();
    store.zero_grads();
    store.absorb_grads(&g).unwrap();
    let analytic: BTreeMap<String, Vec<f64>> = store
        .iter()
        .map(|(name, _)| (name.to_string(), store.grad_of(name).unwrap().to_vec()))
        .collect();

    let fd = finite_diff_grads(store, EPS, |s| {
        let mut g = Graph::new();
        let out = build(&mut g, s);
        let loss = loss_of(&mut g, out);
        g.value(loss).item()
    });
    compare(&analytic, &fd, what);
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng::stream(seed, 0xbeef);

        // matmul
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(3, 4, &mut r)).unwrap();
        store.insert("b", rand_tensor(4, 2, &mut r)).unwrap();
        gradcheck_op("matmul", &mut store, |g, s| {
            let a = g.param("a", s).unwrap();
            let b = g.param("b", s).unwrap();
            g.matmul(a, b).unwrap()
        });

        // add
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(3, 5, &mut r)).unwrap();
        store.insert("b", rand_tensor(3, 5, &mut r)).unwrap();
        gradcheck_op("add", &mut store, |g, s| {
            let a = g.param("a", s).unwrap();
            let b = g.param("b", s).unwrap();
            g.add(a, b).unwrap()
        });

        // concat along both axes
        for axis in [0usize, 1] {
            let mut store = ParamStore::new();
            store.insert("a", rand_tensor(2, 3, &mut r)).unwrap();
            store.insert("b", rand_tensor(2, 3, &mut r)).unwrap();
            gradcheck_op("concat", &mut store, move |g, s| {
                let a = g.param("a", s).unwrap();
                let b = g.param("b", s).unwrap();
                g.concat(axis, &[a, b]).unwrap()
            });
        }

        // mean along both axes
        for axis in [0usize, 1] {
            let mut store = ParamStore::new();
            store.insert("a", rand_tensor(4, 3, &mut r)).unwrap();
            gradcheck_op("mean", &mut store, move |g, s| {
                let a = g.param("a", s).unwrap();
                g.mean_axis(axis, a).unwrap()
            });
        }

        // relu (inputs kept off the kink)
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor_off_zero(3, 6, &mut r)).unwrap();
        gradcheck_op("relu", &mut store, |g, s| {
            let a = g.param("a", s).unwrap();
            g.relu(a).unwrap()
        });

        // softmax along both axes; weighting by a fixed random tensor makes
        // the reduction sensitive to every output
        for axis in [0usize, 1] {
            let mut store = ParamStore::new();
            store.insert("a", rand_tensor(3, 4, &mut r)).unwrap();
            let w = rand_tensor(3, 4, &mut r);
            gradcheck_op("softmax", &mut store, move |g, s| {
                let a = g.param("a", s).unwrap();
                let sm = g.softmax_axis(axis, a).unwrap();
                let wv = g.input(w.clone());
                let prod = g.transpose(wv).unwrap();
                g.matmul(sm, prod).unwrap()
            });
        }

        // layer norm with learnable gain/shift
        let mut store = ParamStore::new();
        store.insert("x", rand_tensor(3, 6, &mut r)).unwrap();
        store.insert("gain", rand_tensor(1, 6, &mut r)).unwrap();
        store.insert("shift", rand_tensor(1, 6, &mut r)).unwrap();
        gradcheck_op("layer_norm", &mut store, |g, s| {
            let x = g.param("x", s).unwrap();
            let gain = g.param("gain", s).unwrap();
            let shift = g.param("shift", s).unwrap();
            g.layer_norm(x, gain, shift).unwrap()
        });

        // linear
        let mut store = ParamStore::new();
        store.insert("x", rand_tensor(4, 3, &mut r)).unwrap();
        store.insert("w", rand_tensor(3, 5, &mut r)).unwrap();
        store.insert("b", rand_tensor(1, 5, &mut r)).unwrap();
        gradcheck_op("linear", &mut store, |g, s| {
            let x = g.param("x", s).unwrap();
            let w = g.param("w", s).unwrap();
            let b = g.param("b", s).unwrap();
            g.linear(x, w, b).unwrap()
        });

        // scale
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(3, 3, &mut r)).unwrap();
        gradcheck_op("scale", &mut store, |g, s| {
            let a = g.param("a", s).unwrap();
            g.scale(a, -1.7).unwrap()
        });

        // transpose (composed with matmul so the output depends on position)
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(3, 4, &mut r)).unwrap();
        let w = rand_tensor(3, 2, &mut r);
        gradcheck_op("transpose", &mut store, move |g, s| {
            let a = g.param("a", s).unwrap();
            let at = g.transpose(a).unwrap();
            let wv = g.input(w.clone());
            g.matmul(at, wv).unwrap()
        });

        // slices
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(5, 4, &mut r)).unwrap();
        gradcheck_op("slice_rows", &mut store, |g, s| {
            let a = g.param("a", s).unwrap();
            g.slice_rows(a, 1, 3).unwrap()
        });
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(4, 6, &mut r)).unwrap();
        gradcheck_op("slice_cols", &mut store, |g, s| {
            let a = g.param("a", s).unwrap();
            g.slice_cols(a, 2, 3).unwrap()
        });

        // cross entropy through softmax (keeps the rows normalized under
        // finite-difference perturbation)
        let mut store = ParamStore::new();
        store.insert("logits", rand_tensor(4, 3, &mut r)).unwrap();
        let grid = GridSpec::new(RoomDims::new(1.0, 1.0, 1.0).unwrap(), 3, 1).unwrap();
        let target = grid.one_hot(AreaIndex::new(2)).unwrap();
        gradcheck_op("cross_entropy", &mut store, move |g, s| {
            let logits = g.param("logits", s).unwrap();
            let probs = g.softmax_axis(1, logits).unwrap();
            g.cross_entropy(probs, &target).unwrap()
        });
    }
}

fn tiny_model() -> (ModelConfig, GridSpec) {
    let cfg = ModelConfig {
        m_total: 4,
        feature_dim: 6,
        d_embed: 4, // D = 8
        n_heads: 2,
        n_spatial_layers: 2,
        pos_hidden: 5,
        node_hidden: vec![8, 8],
        head_widths: vec![8],
        activation: Activation::Relu,
    };
    let grid = GridSpec::new(RoomDims::new(2.0, 2.0, 2.5).unwrap(), 2, 2).unwrap();
    (cfg, grid)
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let (cfg, grid) = tiny_model();
    for seed in 0..3u64 {
        let mut r = rng::stream(seed, 0xcafe);
        let mut store: ParamStore<f64> = model::init_params(&cfg, seed).unwrap();

        let n = 3;
        let t = 4;
        let nodes: Vec<NodeInput<f64>> = (0..n)
            .map(|i| NodeInput {
                one_hot: grid.one_hot(AreaIndex::new(1 + i % 4)).unwrap(),
                features: rand_tensor(t, cfg.feature_dim, &mut r),
            })
            .collect();
        let target = grid.one_hot(AreaIndex::new(3)).unwrap();

        store.zero_grads();
        model::loss_and_backward(&mut store, &cfg, &nodes, &target).unwrap();
        let analytic: BTreeMap<String, Vec<f64>> = store
            .iter()
            .map(|(name, _)| (name.to_string(), store.grad_of(name).unwrap().to_vec()))
            .collect();

        let fd = finite_diff_grads(&mut store, EPS, |s| {
            model::loss_value(s, &cfg, &nodes, &target).unwrap()
        });
        compare(&analytic, &fd, &format!("model seed {seed}"));
    }
}
