use std::sync::Arc;

use rand::Rng as _;

use super::gradcheck::{check_inputs, check_params, CheckOptions};
use super::*;
use crate::rng;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero so kinks are not straddled.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    random(rows, cols, rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

fn random_sparse(n: usize, m: usize, rng: &mut Rng) -> Arc<SparseAdj> {
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|_| {
            let cols: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.4)).collect();
            cols.into_iter().map(|j| (j, rng.gen_range(0.1..1.0))).collect()
        })
        .collect();
    let norm = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
    Arc::new(SparseAdj::from_rows(m, rows, norm).unwrap())
}

/// Contracts a tensor to a scalar with fixed random weights so every entry
/// of the output gets a distinct upstream gradient.
fn contract(tape: &mut Tape, v: Var, rng: &mut Rng) -> Result<Var> {
    let [r, c] = tape.shape(v);
    let w = tape.input(random(r, c, rng));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = check_inputs(&inputs, CheckOptions::default(), f).unwrap();
    assert!(report.passes(1e-4), "{name}: {report:?}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for trial in 0..20u64 {
        let mut r = rng::rng(trial);
        let w_seed = r.gen::<u64>();
        let c = move |tape: &mut Tape, v: Var| contract(tape, v, &mut rng::rng(w_seed));
        let (a, b, k) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));

        check("matmul", vec![random(a, b, &mut r), random(b, k, &mut r)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            c(t, y)
        });
        let adj = random_sparse(a, b, &mut r);
        check("sparse_matmul", vec![random(b, k, &mut r)], |t, v| {
            let y = t.sparse_matmul(&adj, v[0])?;
            c(t, y)
        });
        check("add", vec![random(a, b, &mut r), random(a, b, &mut r)], |t, v| {
            let y = t.add(v[0], v[1])?;
            c(t, y)
        });
        check("sub", vec![random(a, b, &mut r), random(a, b, &mut r)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            c(t, y)
        });
        check("mul", vec![random(a, b, &mut r), random(a, b, &mut r)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            c(t, y)
        });
        check("add_row", vec![random(a, b, &mut r), random(1, b, &mut r)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            c(t, y)
        });
        check("mul_col", vec![random(a, b, &mut r), random(a, 1, &mut r)], |t, v| {
            let y = t.mul_col(v[0], v[1])?;
            c(t, y)
        });
        let denom = random(a, 1, &mut r).map(|x| x.abs() + 0.5);
        check("div_col", vec![random(a, b, &mut r), denom], |t, v| {
            let y = t.div_col(v[0], v[1])?;
            c(t, y)
        });
        let s = r.gen_range(-2.0..2.0);
        check("scalar_mul", vec![random(a, b, &mut r)], |t, v| {
            let y = t.scalar_mul(v[0], s);
            c(t, y)
        });
        check("add_scalar", vec![random(a, b, &mut r)], |t, v| {
            let y = t.add_scalar(v[0], s);
            c(t, y)
        });
        check("relu", vec![away_from_zero(a, b, &mut r)], |t, v| {
            let y = t.relu(v[0]);
            c(t, y)
        });
        check("sigmoid", vec![random(a, b, &mut r).map(|x| 3.0 * x)], |t, v| {
            let y = t.sigmoid(v[0]);
            c(t, y)
        });
        check("tanh", vec![random(a, b, &mut r)], |t, v| {
            let y = t.tanh(v[0]);
            c(t, y)
        });
        check("square", vec![random(a, b, &mut r)], |t, v| {
            let y = t.square(v[0]);
            c(t, y)
        });
        check("sqrt", vec![random(a, b, &mut r).map(|x| x.abs() + 0.2)], |t, v| {
            let y = t.sqrt(v[0])?;
            c(t, y)
        });
        check("row_softmax", vec![random(a, b, &mut r).map(|x| 2.0 * x)], |t, v| {
            let y = t.row_softmax(v[0]);
            c(t, y)
        });
        check("concat_cols", vec![random(a, b, &mut r), random(a, k, &mut r)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            c(t, y)
        });
        check("concat_rows", vec![random(a, b, &mut r), random(k, b, &mut r)], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            c(t, y)
        });
        let idx: Arc<Vec<usize>> = Arc::new((0..k + 2).map(|_| r.gen_range(0..a)).collect());
        check("gather_rows", vec![random(a, b, &mut r)], |t, v| {
            let y = t.gather_rows(v[0], Arc::clone(&idx))?;
            c(t, y)
        });
        check("transpose", vec![random(a, b, &mut r)], |t, v| {
            let y = t.transpose(v[0]);
            c(t, y)
        });
        check("sum", vec![random(a, b, &mut r)], |t, v| {
            let y = t.sum(v[0]);
            Ok(t.scalar_mul(y, 1.7))
        });
        check("reduce_mean", vec![random(a, b, &mut r)], |t, v| {
            let y = t.reduce_mean(v[0])?;
            Ok(t.square(y))
        });
        check("row_sum", vec![random(a, b, &mut r)], |t, v| {
            let y = t.row_sum(v[0]);
            c(t, y)
        });
        check("col_mean", vec![random(a, b, &mut r)], |t, v| {
            let y = t.col_mean(v[0])?;
            c(t, y)
        });
        let targets = Arc::new(random(a, b, &mut r).map(|x| (x + 1.0) / 2.0));
        let weights = Arc::new(random(a, b, &mut r).map(|x| x.abs() + 0.1));
        check("bce_with_logits", vec![random(a, b, &mut r).map(|x| 4.0 * x)], |t, v| {
            t.bce_with_logits(v[0], Arc::clone(&targets), Arc::clone(&weights))
        });
    }
}

#[test]
fn composite_sigmoid_matmul_chain() {
    let mut r = rng::rng(99);
    let inputs = vec![random(5, 3, &mut r), random(3, 4, &mut r), random(1, 4, &mut r)];
    let report = check_inputs(&inputs, CheckOptions::default(), |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let s = t.sigmoid(h);
        let sm = t.row_softmax(s);
        let sq = t.square(sm);
        t.reduce_mean(sq)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn closed_forms() {
    // loss = x², x = 3
    let mut t = Tape::new();
    let x = t.input(Tensor::scalar(3.0));
    let y = t.square(x);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);

    // matmul(I, X) = X, d sum(AB)/dA = ones · Bᵀ
    let mut r = rng::rng(1);
    let xm = random(3, 2, &mut r);
    let mut t = Tape::new();
    let i3 = t.input(Tensor::eye(3));
    let xv = t.input(xm.clone());
    let p = t.matmul(i3, xv).unwrap();
    assert_eq!(t.value(p), &xm);
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    let want = Tensor::full(3, 2, 1.0).matmul(&xm.transpose()).unwrap();
    assert_eq!(g.get(i3).unwrap(), &want);

    // relu subgradient at 0
    let mut t = Tape::new();
    let z = t.input(Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(z);
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::rng(5);
    let mut t = Tape::new();
    let x = t.input(random(16, 8, &mut r).map(|x| 50.0 * x));
    let y = t.row_softmax(x);
    for i in 0..16 {
        assert!((t.value(y).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sparse_forward_matches_dense_oracle() {
    let mut r = rng::rng(8);
    for _ in 0..20 {
        let adj = random_sparse(6, 5, &mut r);
        let x = random(5, 3, &mut r);
        let sparse = adj.matmul(&x).unwrap();
        let dense = adj.to_dense().matmul(&x).unwrap();
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(2, 2));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let mut t = Tape::new();
    let a = t.input(Tensor::zeros(2, 3));
    let b = t.input(Tensor::zeros(3, 2));
    let err = t.add(a, b).unwrap_err();
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 2]"));
}

fn quadratic(store: &mut ParamStore, id: ParamId) -> f64 {
    let mut t = Tape::new();
    let x = t.param(store, id);
    let y = t.square(x);
    let loss = t.sum(y);
    t.backward(loss).unwrap().accumulate(&t, store);
    t.value(loss).item()
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(3.0)).unwrap();
    quadratic(&mut store, id);
    quadratic(&mut store, id);
    assert_eq!(store.grad(id).unwrap().item(), 12.0);
    store.zero_grad();
    assert!(store.grad(id).is_none());
}

#[test]
fn constants_get_no_gradient_and_leave_others_unchanged() {
    let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![0.3], vec![-0.7]]).unwrap();
    let grads = |as_constant: bool| {
        let mut tape = Tape::new();
        let xv = if as_constant { tape.constant(x.clone()) } else { tape.input(x.clone()) };
        let wv = tape.input(w.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let both = tape.concat_cols(&[h, xv]).unwrap();
        let s = tape.square(both);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        (g.get(xv).cloned(), g.get(wv).cloned().unwrap())
    };
    let (gx_const, gw_const) = grads(true);
    let (gx_input, gw_input) = grads(false);
    assert!(gx_const.is_none());
    assert!(gx_input.is_some());
    assert_eq!(gw_const, gw_input);

    let mut tape = Tape::new();
    let c = tape.constant(x.clone());
    let l = tape.sum(c);
    assert!(tape.backward(l).unwrap().get(c).is_none());
}

#[test]
fn sgd_closed_form_and_convergence() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(1.0)).unwrap();
    quadratic(&mut store, id);
    sgd_step(&mut store, 0.1).unwrap();
    assert!((store.value(id).item() - 0.8).abs() < 1e-15);
    for _ in 0..99 {
        store.zero_grad();
        quadratic(&mut store, id);
        sgd_step(&mut store, 0.1).unwrap();
    }
    assert!(store.value(id).item().abs() < 1e-6);
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient_sign() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::from_vec(1, 2, vec![2.0, -0.5]).unwrap()).unwrap();
    quadratic(&mut store, id);
    let mut adam = Adam::new(0.01);
    adam.step(&mut store).unwrap();
    let v = store.value(id).data();
    assert!((v[0] - (2.0 - 0.01)).abs() < 1e-9);
    assert!((v[1] - (-0.5 + 0.01)).abs() < 1e-9);
}

#[test]
fn optimizers_require_gradients() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(sgd_step(&mut store, 0.1), Err(Error::Contract(_))));
    assert!(matches!(Adam::new(0.1).step(&mut store), Err(Error::Contract(_))));
}

#[test]
fn param_gradcheck_through_store() {
    let mut r = rng::rng(3);
    let mut store = ParamStore::new();
    let w = store.glorot("w", 3, 2, &mut r).unwrap();
    let b = store.zeros("b", 1, 2).unwrap();
    let x = random(4, 3, &mut r);
    let report = check_params(&mut store, CheckOptions::default(), |t, s| {
        let xv = t.input(x.clone());
        let wv = t.param(s, w);
        let bv = t.param(s, b);
        let h = t.matmul(xv, wv)?;
        let h = t.add_row(h, bv)?;
        let h = t.tanh(h);
        let h = t.square(h);
        t.reduce_mean(h)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert_eq!(report.checked, 8);
    assert!(store.grad(w).is_none(), "gradient check must not leave gradients behind");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut r = rng::rng(11);
    let mut ck = Checkpoint::default();
    let mut t = random(7, 5, &mut r);
    t.data_mut()[0] = 0.1 + 0.2;
    t.data_mut()[1] = 1e-300;
    t.data_mut()[2] = -123456.789e10;
    ck.tensors.insert("layer.0.W".into(), t);
    ck.meta.insert("seed".into(), "11".into());
    let bytes = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&bytes).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.tensors["layer.0.W"].data().iter().zip(ck.tensors["layer.0.W"].data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back.to_json().unwrap(), bytes);
}

#[test]
fn store_load_checks_names_and_shapes() {
    let mut store = ParamStore::new();
    store.zeros("a", 2, 2).unwrap();
    let mut ck = store.to_checkpoint();
    ck.tensors.get_mut("a").unwrap().data_mut()[3] = 4.0;
    store.load(&ck).unwrap();
    assert_eq!(store.value(store.id("a").unwrap()).get(1, 1), 4.0);
    ck.tensors.insert("a".into(), Tensor::zeros(1, 4));
    assert!(store.load(&ck).is_err());
    assert!(store.add("a", Tensor::zeros(1, 1)).is_err());
}
