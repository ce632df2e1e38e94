use std::cell::Cell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0; 3]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 4], &[2.5; 4]));
    let gamma = g.constant(Tensor::ones(vec![4]));
    let beta = g.constant(Tensor::zeros(vec![4]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_self_dot() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
    let xt = g.transpose(x).unwrap();
    let d = g.matmul(x, xt).unwrap();
    let grads = g.backward(d).unwrap();
    assert_eq!(grads.var(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreachable_parameter_gets_exact_zero() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", ParamGroup::Other, t(&[2], &[1.0, 2.0]));
    let unused = store.add("unused", ParamGroup::Other, t(&[2], &[3.0, 4.0]));
    let mut g = Graph::new();
    let a = g.param(&store, used);
    let b = g.param(&store, unused);
    let _dead = g.exp(b).unwrap();
    let loss = g.frobenius_sq(a).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(used).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(grads.param(unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn param_leaf_is_shared_within_graph() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", ParamGroup::Other, t(&[1], &[3.0]));
    let mut g = Graph::new();
    let a = g.param(&store, p);
    let b = g.param(&store, p);
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(p).unwrap().data(), &[6.0]);
}

fn checker() -> GradCheck {
    GradCheck {
        h: 1e-5,
        tol: 1e-6,
        floor: 1e-8,
        ..GradCheck::default()
    }
}

fn random_store(shapes: &[&[usize]], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add_uniform(format!("p{i}"), ParamGroup::Other, s, 1.0, &mut rng))
        .collect();
    (store, ids)
}

#[test]
fn quadratic_gradient_check_is_tight() {
    let (store, ids) = random_store(&[&[3, 2]], 1);
    let report = GradCheck {
        tol: 1e-8,
        ..checker()
    }
    .run(
        |s| {
            let mut g = Graph::new();
            let x = g.param(s, ids[0]);
            let l = g.frobenius_sq(x)?;
            Ok((g, l))
        },
        &store,
        &ids,
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn softmax_cross_entropy_gradient_check() {
    let (store, ids) = random_store(&[&[3, 5]], 2);
    let report = checker()
        .run(
            |s| {
                let mut g = Graph::new();
                let x = g.param(s, ids[0]);
                let l = g.cross_entropy(x, vec![0, 4, 2])?;
                Ok((g, l))
            },
            &store,
            &ids,
        )
        .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

/// Exercises every primitive in one differentiable expression.
fn all_primitives_loss(s: &ParamStore<f64>, ids: &[ParamId]) -> crate::Result<(Graph<f64>, Var)> {
    let mut g = Graph::new();
    let a = g.param(s, ids[0]); // [3,4]
    let b = g.param(s, ids[1]); // [4,4]
    let v = g.param(s, ids[2]); // [4]
    let r = g.param(s, ids[3]); // [3]

    let ab = g.matmul(a, b)?;
    let ab = g.add_row(ab, v)?;
    let ab = g.mul_row(ab, v)?;
    let ab = g.scale_rows(ab, r)?;
    let ln = g.layer_norm(ab, v, v)?;
    let ge = g.gelu(ln)?;
    let sm = g.softmax(ge)?;
    let prod = g.mul(sm, ab)?;
    let diff = g.sub(prod, a)?;
    let sc = g.scale(diff, 0.7)?;
    let tr = g.transpose(sc)?; // [4,3]
    let nar = g.narrow(tr, 1, 1, 2)?; // [4,2]
    let nar0 = g.narrow(nar, 0, 1, 3)?; // [3,2]
    let cat = g.concat(&[nar0, nar0], 1)?; // [3,4]
    let cat = g.concat(&[cat, a], 0)?; // [6,4]
    let gat = g.gather(cat, vec![0, 5, 5, 2])?; // [4,4]
    let nrm = g.l2_normalize(gat)?;
    let cov = g.covariance(nrm, gat)?; // [4,4]
    let fro = g.frobenius_sq(cov)?;
    let l2 = g.l2_norm(gat)?;
    let ex = g.exp(r)?;
    let lg = g.log(ex)?;
    let ab_s = g.abs(lg)?;
    let mean = g.mean(ab_s)?;
    let ratio = g.div(l2, mean)?;
    let flat = g.reshape(gat, vec![16])?;
    let flat = g.reshape(flat, vec![2, 8])?;
    let ce = g.cross_entropy(flat, vec![1, 7])?;
    let sum = g.sum(sm)?;
    let total = g.weighted_sum(&[(1.0, fro), (0.3, ratio), (0.5, ce), (0.1, sum)])?;
    Ok((g, total))
}

#[test]
fn every_primitive_matches_finite_differences() {
    let (store, ids) = random_store(&[&[3, 4], &[4, 4], &[4], &[3]], 3);
    let report = GradCheck {
        tol: 1e-6,
        ..checker()
    }
    .run(|s| all_primitives_loss(s, &ids), &store, &ids)
    .unwrap();
    for p in &report.params {
        assert!(p.max_rel_err < 1e-6, "{} rel err {}", p.name, p.max_rel_err);
    }
}

#[test]
fn nondeterministic_loss_rejected() {
    let (store, ids) = random_store(&[&[2]], 4);
    let calls = Cell::new(0.0);
    let err = checker()
        .run(
            |s| {
                calls.set(calls.get() + 1.0);
                let mut g = Graph::new();
                let x = g.param(s, ids[0]);
                let y = g.scale(x, calls.get())?;
                let l = g.sum(y)?;
                Ok((g, l))
            },
            &store,
            &ids,
        )
        .unwrap_err();
    assert!(matches!(err, Error::Nondeterministic { .. }));
}

#[test]
fn zero_step_rejected() {
    let (store, ids) = random_store(&[&[2]], 5);
    let bad = GradCheck {
        h: 0.0,
        ..checker()
    };
    assert!(bad
        .run(
            |s| {
                let mut g = Graph::new();
                let x = g.param(s, ids[0]);
                let l = g.sum(x)?;
                Ok((g, l))
            },
            &store,
            &ids
        )
        .is_err());
}

#[test]
fn covariance_of_antipodal_rows() {
    // rows [+v, -v], v = [1, 0], c = 2: C = 2 v v^T, ||C||_F^2 = 4.
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1.0, 0.0, -1.0, 0.0]));
    let c = g.covariance(x, x).unwrap();
    assert_eq!(g.value(c).data(), &[2.0, 0.0, 0.0, 0.0]);
    let f = g.frobenius_sq(c).unwrap();
    assert_eq!(g.value(f).item(), 4.0);
}

#[test]
fn single_token_covariance_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 3]));
    assert!(g.covariance(x, x).is_err());
}

#[test]
fn f32_graph_runs() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(), true);
    let y = g.frobenius_sq(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.var(x).unwrap().data(), &[2.0f32, 4.0]);
}

fn two_losses(s: &ParamStore<f64>, ids: &[ParamId], wa: f64, wb: f64) -> (Graph<f64>, Var) {
    let mut g = Graph::new();
    let a = g.param(s, ids[0]);
    let b = g.param(s, ids[1]);
    let ab = g.matmul(a, b).unwrap();
    let l1 = g.frobenius_sq(ab).unwrap();
    let sm = g.softmax(ab).unwrap();
    let lg = g.log(sm).unwrap();
    let l2 = g.sum(lg).unwrap();
    let total = g.weighted_sum(&[(wa, l1), (wb, l2)]).unwrap();
    (g, total)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, wa in -3.0f64..3.0, wb in -3.0f64..3.0) {
        let (store, ids) = random_store(&[&[2, 3], &[3, 2]], seed);
        let (g, l) = two_losses(&store, &ids, wa, wb);
        let combined = g.backward(l).unwrap();
        let (g1, l1) = two_losses(&store, &ids, 1.0, 0.0);
        let (g2, l2) = two_losses(&store, &ids, 0.0, 1.0);
        let d1 = g1.backward(l1).unwrap();
        let d2 = g2.backward(l2).unwrap();
        for id in &ids {
            let c = combined.param(*id).unwrap();
            let x = d1.param(*id).unwrap();
            let y = d2.param(*id).unwrap();
            for i in 0..c.len() {
                let expect = wa * x.data()[i] + wb * y.data()[i];
                prop_assert!((c.data()[i] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 4], &data));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
