use proptest::prelude::*;
use rand::Rng as _;

use super::*;

fn t64(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(data, shape.to_vec()).unwrap()
}

#[test]
fn relu_and_softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![-1.0, 2.0], vec![2]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let z = tape.constant(Tensor::zeros(&[1, 3]));
    let s = tape.softmax(z, 1).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn softmax_sums_to_one_on_both_axes() {
    let mut r = rng(5);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[4, 7], |_| r.gen_range(-20.0..20.0)));
    for axis in [0, 1] {
        let s = tape.softmax(x, axis).unwrap();
        let v = tape.value(s).data().to_vec();
        let sums: Vec<f32> = if axis == 0 {
            (0..7).map(|c| (0..4).map(|r| v[r * 7 + c]).sum()).collect()
        } else {
            (0..4).map(|r| v[r * 7..(r + 1) * 7].iter().sum()).collect()
        };
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn overflow_is_reported() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2], f32::MAX));
    assert_eq!(tape.affine(x, 10.0, 0.0), Err(NnError::NonFinite("affine")));
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(NnError::Shape(_))));
}

/// Loss `mse(W x, t)` on the tape, returning value and gradient for W.
fn mse_linear(params: &[Tensor<f64>], x: &Tensor<f64>, t: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(params[0].clone());
    let b = tape.constant(Tensor::zeros(&[params[0].shape()[0]]));
    let xv = tape.constant(x.clone());
    let tv = tape.constant(t.clone());
    let y = tape.linear(xv, w, b).unwrap();
    let loss = tape.mse(y, tv).unwrap();
    let mut g = tape.backward(loss).unwrap();
    (tape.value(loss).item(), vec![g.take_or_zeros(w, &params[0])])
}

#[test]
fn mse_gradient_matches_central_differences() {
    let mut r = rng(1);
    let w = t64((0..20).map(|_| r.gen_range(-1.0..1.0)).collect(), &[5, 4]);
    let x = t64((0..12).map(|_| r.gen_range(-1.0..1.0)).collect(), &[3, 4]);
    let t = t64((0..15).map(|_| r.gen_range(-1.0..1.0)).collect(), &[3, 5]);
    let report = grad_check(|p| mse_linear(p, &x, &t), &[w], 1e-3, 1, 1e-4);
    assert!(report.passed(), "worst {}", report.worst());
    assert_eq!(report.coordinates_checked, 20);
}

#[test]
fn linear_model_gradient_is_exact() {
    let mut r = rng(2);
    let w = t64((0..12).map(|_| r.gen_range(-1.0..1.0)).collect(), &[3, 4]);
    let bias = t64(vec![0.1, -0.2, 0.3], &[3]);
    let x = t64((0..8).map(|_| r.gen_range(-1.0..1.0)).collect(), &[2, 4]);
    let report = grad_check(
        |p| {
            let mut tape = Tape::<f64>::new();
            let w = tape.leaf(p[0].clone());
            let b = tape.leaf(p[1].clone());
            let xv = tape.constant(x.clone());
            let y = tape.linear(xv, w, b).unwrap();
            let loss = tape.sum(y).unwrap();
            let mut g = tape.backward(loss).unwrap();
            (tape.value(loss).item(), vec![g.take_or_zeros(w, &p[0]), g.take_or_zeros(b, &p[1])])
        },
        &[w, bias],
        1e-4,
        1,
        1e-6,
    );
    assert!(report.passed(), "worst {}", report.worst());
}

#[test]
fn mlp_forward_agrees_with_tape() {
    let mut r = rng(9);
    let mlp = Mlp::<f32>::init(&[6, 5, 4, 3], OutputActivation::Sigmoid, &mut r);
    let x = Tensor::from_fn(&[4, 6], |_| r.gen_range(-1.0..1.0));
    let direct = mlp.forward(x.data(), 4);
    let mut tape = Tape::new();
    let vars = MlpVars::register(&mut tape, &mlp);
    let xv = tape.constant(x);
    let y = vars.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), direct.as_slice());
    assert_eq!(mlp.sizes(), vec![6, 5, 4, 3]);
}

#[test]
fn glorot_init_bounds_and_determinism() {
    let a = Mlp::<f32>::init(&[10, 6], OutputActivation::Identity, &mut rng(4));
    let b = Mlp::<f32>::init(&[10, 6], OutputActivation::Identity, &mut rng(4));
    assert_eq!(a, b);
    let bound = (6.0f32 / 16.0).sqrt();
    assert!(a.weights[0].data().iter().all(|w| w.abs() < bound));
    assert!(a.biases[0].data().iter().all(|&b| b == 0.0));
}

#[test]
fn training_loop_is_deterministic() {
    let run = || {
        let mut r = rng(77);
        let mut mlp = Mlp::<f32>::init(&[3, 8, 2], OutputActivation::Identity, &mut r);
        let mut adam = Adam::new(&mlp.params(), 1e-2);
        let x = Tensor::from_fn(&[16, 3], |_| r.gen_range(-1.0..1.0));
        let t = Tensor::from_fn(&[16, 2], |_| r.gen_range(-1.0..1.0));
        let mut curve = Vec::new();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vars = MlpVars::register(&mut tape, &mlp);
            let xv = tape.constant(x.clone());
            let tv = tape.constant(t.clone());
            let y = vars.forward(&mut tape, xv).unwrap();
            let loss = tape.mse(y, tv).unwrap();
            curve.push(tape.value(loss).item());
            let mut g = tape.backward(loss).unwrap();
            let grads: Vec<_> = vars.vars().iter().zip(mlp.params()).map(|(&v, p)| g.take_or_zeros(v, p)).collect();
            adam.step(&mut mlp.params_mut(), &grads).unwrap();
        }
        (curve, mlp)
    };
    let (c1, m1) = run();
    let (c2, m2) = run();
    assert_eq!(c1, c2);
    assert_eq!(m1, m2);
    assert!(c1.last().unwrap() < &c1[0]);
}

#[test]
fn derived_seeds_differ_by_label() {
    assert_ne!(derive_seed(1, "avae"), derive_seed(1, "gmavae"));
    assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
}

/// Every op reduced to a scalar through a random weighting, checked in f64.
#[derive(Clone, Copy, Debug)]
enum OpCase {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Affine,
    AddConst,
    Abs,
    NegXLogX,
    Softmax0,
    Softmax1,
    SumAxis0,
    SumAxis1,
    Mean,
    RowSqNorm,
    Gather,
    BatchMatVec,
    OuterRows,
}

const ALL_OPS: [OpCase; 20] = [
    OpCase::Linear,
    OpCase::Relu,
    OpCase::Tanh,
    OpCase::Sigmoid,
    OpCase::Add,
    OpCase::Sub,
    OpCase::Mul,
    OpCase::Affine,
    OpCase::AddConst,
    OpCase::Abs,
    OpCase::NegXLogX,
    OpCase::Softmax0,
    OpCase::Softmax1,
    OpCase::SumAxis0,
    OpCase::SumAxis1,
    OpCase::Mean,
    OpCase::RowSqNorm,
    OpCase::Gather,
    OpCase::BatchMatVec,
    OpCase::OuterRows,
];

fn op_case_loss(case: OpCase, p: &[Tensor<f64>], rows: usize, seed: u64) -> (f64, Vec<Tensor<f64>>) {
    let mut r = rng(seed);
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone())).collect();
    let (a, b) = (leaves[0], leaves[1]);
    let y = match case {
        OpCase::Linear => tape.linear(a, leaves[2], leaves[3]).unwrap(),
        OpCase::Relu => tape.relu(a).unwrap(),
        OpCase::Tanh => tape.tanh(a).unwrap(),
        OpCase::Sigmoid => tape.sigmoid(a).unwrap(),
        OpCase::Add => tape.add(a, b).unwrap(),
        OpCase::Sub => tape.sub(a, b).unwrap(),
        OpCase::Mul => tape.mul(a, b).unwrap(),
        OpCase::Affine => tape.affine(a, -1.7, 0.3).unwrap(),
        OpCase::AddConst => {
            let c = Tensor::from_fn(p[0].shape(), |i| 0.25 - 0.1 * i as f64);
            tape.add_const(a, &c).unwrap()
        }
        OpCase::Abs => tape.abs(a).unwrap(),
        OpCase::NegXLogX => {
            let s = tape.sigmoid(a).unwrap();
            tape.neg_xlogx(s).unwrap()
        }
        OpCase::Softmax0 => tape.softmax(a, 0).unwrap(),
        OpCase::Softmax1 => tape.softmax(a, 1).unwrap(),
        OpCase::SumAxis0 => tape.sum_axis(a, 0).unwrap(),
        OpCase::SumAxis1 => tape.sum_axis(a, 1).unwrap(),
        OpCase::Mean => tape.mean(a).unwrap(),
        OpCase::RowSqNorm => tape.row_sq_norm(a).unwrap(),
        OpCase::Gather => {
            let idx: Vec<usize> = (0..rows + 2).map(|_| r.gen_range(0..rows)).collect();
            tape.gather_rows(a, &idx).unwrap()
        }
        OpCase::BatchMatVec => tape.batch_matvec(leaves[2], a).unwrap(),
        OpCase::OuterRows => tape.outer_rows(a).unwrap(),
    };
    let shape = tape.shape(y).to_vec();
    let weights = Tensor::from_fn(&shape, |_| r.gen_range(-1.0..1.0));
    let wv = tape.constant(weights);
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let mut g = tape.backward(loss).unwrap();
    let grads = leaves.iter().zip(p).map(|(&v, t)| g.take_or_zeros(v, t)).collect();
    (tape.value(loss).item(), grads)
}

fn op_case_params(case: OpCase, rows: usize, cols: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed ^ 0xabcdef);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| {
        // Keep clear of the kinks of relu and abs.
        let v: f64 = r.gen_range(0.05..1.5);
        if r.gen_bool(0.5) { v } else { -v }
    });
    let a = rand(&[rows, cols]);
    let b = rand(&[rows, cols]);
    match case {
        OpCase::Linear => vec![a, b, rand(&[cols + 1, cols]), rand(&[cols + 1])],
        OpCase::BatchMatVec => vec![a, b, rand(&[rows, cols * cols])],
        _ => vec![a, b],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_op_passes_gradient_check(op in 0usize..ALL_OPS.len(), rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let case = ALL_OPS[op];
        let params = op_case_params(case, rows, cols, seed);
        let report = grad_check(|p| op_case_loss(case, p, rows, seed), &params, 1e-6, 1, 1e-4);
        prop_assert!(report.passed(), "{:?}: worst {} ({:?})", case, report.worst(), report.max_rel_error);
    }
}

#[test]
fn every_op_passes_gradient_check_on_fixed_shapes() {
    for &case in ALL_OPS.iter() {
        for (rows, cols) in [(1, 1), (2, 3), (4, 2)] {
            let params = op_case_params(case, rows, cols, 7);
            let report = grad_check(|p| op_case_loss(case, p, rows, 7), &params, 1e-6, 1, 1e-4);
            assert!(report.passed(), "{case:?} {rows}x{cols}: worst {}", report.worst());
        }
    }
}
