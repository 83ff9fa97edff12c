//! Finite-difference cases for every differentiable tape operation, shared
//! by the gradient tests and the acceptance run.

use qraug::autodiff::gradcheck::{check_gradients, GradCheckOptions};
use qraug::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const OP_TOLERANCE: f64 = 1e-4;

pub type Shapes = fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>;
pub type Build = fn(&mut Tape<'_, f64>, &[ParamId], &mut ChaCha8Rng) -> Result<Var, AutodiffError>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Shapes,
    pub build: Build,
}

pub fn random_store(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("p{i}"), Tensor::randn(s.clone(), 1.0, rng).unwrap()).unwrap())
        .collect();
    (store, ids)
}

/// Contracts `out` against a fixed random tensor so every output coordinate
/// contributes a distinct weight to the scalar loss.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(out).to_vec(), 1.0, &mut rng)?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Worst relative error of a case over `INSTANCES` random instances, with
/// the instance it occurred at.
pub fn worst_error(case: &OpCase) -> (f64, u64) {
    let mut worst = (0.0, 0);
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let shapes = (case.shapes)(&mut rng);
        let (mut store, ids) = random_store(&mut rng, &shapes);
        let build_seed = rng.random::<u64>();
        let report = check_gradients(&mut store, &GradCheckOptions::default(), |tape| {
            let mut r = ChaCha8Rng::seed_from_u64(build_seed);
            let out = (case.build)(tape, &ids, &mut r)?;
            if tape.shape(out) == [1] {
                Ok(out)
            } else {
                project(tape, out, build_seed ^ 0x5eed)
            }
        })
        .unwrap();
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, inst);
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub const OP_CASES: &[OpCase] = &[
    OpCase {
        name: "matmul",
        shapes: |r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
            vec![vec![m, k], vec![k, n]]
        },
        build: |t, p, _| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.matmul(a, b)
        },
    },
    OpCase {
        name: "matmul 3x4x2",
        shapes: |_| vec![vec![3, 4], vec![4, 2]],
        build: |t, p, _| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.matmul(a, b)
        },
    },
    OpCase {
        name: "batch_matmul",
        shapes: |r| {
            let (s, m, k, n) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
            vec![vec![s, m, k], vec![s, k, n], vec![s, n, k]]
        },
        build: |t, p, _| {
            let (a, b, bt) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            let x = t.batch_matmul(a, b, false)?;
            let y = t.batch_matmul(a, bt, true)?;
            t.add(x, y)
        },
    },
    OpCase {
        name: "add",
        shapes: |r| {
            let (m, n) = (dims(r, 1, 4), dims(r, 1, 4));
            vec![vec![m, n], vec![m, n], vec![n]]
        },
        build: |t, p, _| {
            let (a, b, c) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            let s = t.add(a, b)?;
            t.add(s, c)
        },
    },
    OpCase {
        name: "mul+scale",
        shapes: |r| {
            let n = dims(r, 1, 6);
            vec![vec![n], vec![n]]
        },
        build: |t, p, r| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            let m = t.mul(a, a)?;
            let m = t.mul(m, b)?;
            Ok(t.scale(m, r.random_range(-2.0..2.0)))
        },
    },
    OpCase {
        name: "linear",
        shapes: |r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
            vec![vec![m, k], vec![k, n], vec![n]]
        },
        build: |t, p, _| {
            let (x, w, b) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            t.linear(x, w, b)
        },
    },
    OpCase {
        name: "tanh",
        shapes: |r| vec![vec![dims(r, 1, 8)]],
        build: |t, p, _| {
            let a = t.param(p[0]);
            Ok(t.tanh(a))
        },
    },
    OpCase {
        name: "gelu",
        shapes: |r| vec![vec![dims(r, 1, 8)]],
        build: |t, p, _| {
            let a = t.param(p[0]);
            Ok(t.gelu(a))
        },
    },
    OpCase {
        name: "layer_norm",
        shapes: |r| {
            let (m, n) = (dims(r, 1, 3), dims(r, 2, 6));
            vec![vec![m, n], vec![n], vec![n]]
        },
        build: |t, p, _| {
            let (x, g, b) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            t.layer_norm(x, g, b)
        },
    },
    OpCase {
        name: "embedding",
        shapes: |r| vec![vec![dims(r, 2, 5), dims(r, 1, 4)]],
        build: |t, p, r| {
            let e = t.param(p[0]);
            let v = t.shape(e)[0];
            let ids: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..v)).collect();
            t.embedding(e, &ids)
        },
    },
    OpCase {
        name: "concat",
        shapes: |r| {
            let (m, n1, n2) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
            vec![vec![m, n1], vec![m, n2], vec![3, n1]]
        },
        build: |t, p, _| {
            let (a, b, c) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            let wide = t.concat(&[a, b], 1)?;
            let tall = t.concat(&[a, c], 0)?;
            let sw = t.sum(wide);
            let dup = t.mul(tall, tall)?;
            let st = t.sum(dup);
            t.add(sw, st)
        },
    },
    OpCase {
        name: "mask_fill+softmax",
        shapes: |r| vec![vec![dims(r, 1, 3), dims(r, 2, 6)]],
        build: |t, p, r| {
            let a = t.param(p[0]);
            let shape = t.shape(a).to_vec();
            let mut mask: Vec<bool> = (0..shape[0] * shape[1]).map(|_| r.random_bool(0.3)).collect();
            for row in mask.chunks_mut(shape[1]) {
                row[0] = false;
            }
            let m = t.mask_fill(a, &mask, -1e9)?;
            Ok(t.softmax(m))
        },
    },
    OpCase {
        name: "reshape+permute",
        shapes: |r| vec![vec![dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)]],
        build: |t, p, _| {
            let a = t.param(p[0]);
            let s = t.shape(a).to_vec();
            let pa = t.permute(a, &[0, 2, 1, 3])?;
            t.reshape(pa, vec![s[0] * s[2], s[1] * s[3]])
        },
    },
    OpCase {
        name: "gather_rows",
        shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 1, 3), 2]],
        build: |t, p, r| {
            let a = t.param(p[0]);
            let n = t.shape(a)[0];
            let rows: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..n)).collect();
            t.gather_rows(a, &rows)
        },
    },
    OpCase {
        name: "l2_normalize_rows",
        shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 2, 5)]],
        build: |t, p, _| {
            let a = t.param(p[0]);
            t.l2_normalize_rows(a)
        },
    },
    OpCase {
        name: "sum+mean",
        shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 1, 4)]],
        build: |t, p, _| {
            let a = t.param(p[0]);
            let sq = t.mul(a, a)?;
            let (s, m) = (t.sum(sq), t.mean(a));
            t.add(s, m)
        },
    },
    OpCase {
        name: "softmax_cross_entropy",
        shapes: |r| vec![vec![dims(r, 2, 6), dims(r, 2, 7)]],
        build: |t, p, r| {
            let l = t.param(p[0]);
            let (n, v) = (t.shape(l)[0], t.shape(l)[1]);
            let mut targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
            targets[0] = 1;
            t.softmax_cross_entropy(l, &targets, Some(0))
        },
    },
    OpCase {
        name: "weighted_cross_entropy",
        shapes: |r| vec![vec![dims(r, 1, 5), dims(r, 2, 5)]],
        build: |t, p, r| {
            let l = t.param(p[0]);
            let (n, v) = (t.shape(l)[0], t.shape(l)[1]);
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
            let coef: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            t.weighted_cross_entropy(l, &targets, &coef)
        },
    },
    OpCase {
        name: "attention",
        shapes: |_| vec![vec![2 * 3, 4], vec![4, 4], vec![4, 4], vec![4]],
        build: |t, p, _| {
            let (x, wq, wk, b) = (t.param(p[0]), t.param(p[1]), t.param(p[2]), t.param(p[3]));
            let q = t.linear(x, wq, b)?;
            let k = t.matmul(x, wk)?;
            let q = t.reshape(q, vec![2, 3, 4])?;
            let k = t.reshape(k, vec![2, 3, 4])?;
            let s = t.batch_matmul(q, k, true)?;
            let s = t.scale(s, 0.5);
            let causal: Vec<bool> = (0..18).map(|i| (i % 3) > ((i / 3) % 3)).collect();
            let s = t.mask_fill(s, &causal, -1e9)?;
            let a = t.softmax(s);
            let ctx = t.batch_matmul(a, q, false)?;
            let ctx = t.reshape(ctx, vec![6, 4])?;
            let h = t.gelu(ctx);
            Ok(t.tanh(h))
        },
    },
];
