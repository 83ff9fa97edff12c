//! Finite-difference checks for every differentiable tape operation.

#[path = "common/ops.rs"]
mod ops;

use ops::{random_store, worst_error, OP_CASES, OP_TOLERANCE};
use qraug::autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for case in OP_CASES {
        let (err, inst) = worst_error(case);
        assert!(err < OP_TOLERANCE, "{} instance {inst}: rel err {err:.3e}", case.name);
    }
}

#[test]
fn backward_is_linear_in_summed_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (store, ids) = random_store(&mut rng, &[vec![3, 4], vec![4, 2]]);
    let loss_a = |t: &mut Tape<'_, f64>| -> Var {
        let (a, b) = (t.param(ids[0]), t.param(ids[1]));
        let m = t.matmul(a, b).unwrap();
        let h = t.tanh(m);
        t.sum(h)
    };
    let loss_b = |t: &mut Tape<'_, f64>| -> Var {
        let a = t.param(ids[0]);
        let g = t.gelu(a);
        let sq = t.mul(g, g).unwrap();
        t.sum(sq)
    };
    let ga = {
        let mut t = Tape::new(&store);
        let l = loss_a(&mut t);
        t.backward(l).unwrap()
    };
    let gb = {
        let mut t = Tape::new(&store);
        let l = loss_b(&mut t);
        t.backward(l).unwrap()
    };
    let gsum = {
        let mut t = Tape::new(&store);
        let (la, lb) = (loss_a(&mut t), loss_b(&mut t));
        let l = t.add(la, lb).unwrap();
        t.backward(l).unwrap()
    };
    let mut expect = ga.clone();
    expect.add(&gb);
    for id in ids {
        for (x, y) in gsum.get(id).unwrap().iter().zip(expect.get(id).unwrap()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn replayed_tape_gives_bitwise_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (store, ids) = random_store(&mut rng, &[vec![5, 3], vec![3]]);
        let mut t = Tape::new(&store);
        let (x, b) = (t.param(ids[0]), t.param(ids[1]));
        let y = t.add(x, b).unwrap();
        let s = t.softmax(y);
        let l = t.softmax_cross_entropy(y, &[0, 1, 2, 1, 0], None).unwrap();
        let z = t.sum(s);
        let total = t.add(l, z).unwrap();
        let g = t.backward(total).unwrap();
        g.iter().map(|(_, v)| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store32 = ParamStore::<f32>::new();
    store32.insert("w", Tensor::randn(vec![7, 5], 0.3, &mut rng).unwrap()).unwrap();
    store32.insert("b", Tensor::randn(vec![5], 1e-7, &mut rng).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    Checkpoint::from_store(&store32, serde_json::json!({"note": "x"})).save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap().to_store().unwrap();
    assert_eq!(back, store32);
    assert!(Checkpoint::<f64>::load(&path).is_err(), "dtype mismatch must be rejected");

    let (store64, _) = random_store(&mut rng, &[vec![4, 4]]);
    Checkpoint::from_store(&store64, serde_json::Value::Null).save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap().to_store().unwrap();
    assert_eq!(back, store64);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn f32_values_survive_checkpoint_json(values in proptest::collection::vec(-1e6f32..1e6f32, 1..40)) {
            let mut store = ParamStore::<f32>::new();
            store.insert("v", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
            let json = serde_json::to_value(Checkpoint::from_store(&store, serde_json::Value::Null)).unwrap();
            let back = Checkpoint::<f32>::from_json(json).unwrap().to_store().unwrap();
            prop_assert_eq!(back.get(back.id("v").unwrap()).data(), values.as_slice());
        }
    }
}
