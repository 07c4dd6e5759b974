use std::sync::Arc;

use porenet::autodiff::{
    finite_diff_check, init_uniform, sample_coordinates, AdamW, Gradients, ParamId, ParamStore, Result, Segment, Tape,
    Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Net {
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    wg: ParamId,
    bg: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const ROWS: usize = 7;
const SEGMENTS: usize = 3;

fn net(seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", init_uniform(3, 5, 3, &mut rng)).unwrap();
    let b1 = store.add("b1", init_uniform(1, 5, 3, &mut rng)).unwrap();
    // Two banks of a (5, 4) map.
    let wg = store.add("wg", init_uniform(10, 4, 5, &mut rng)).unwrap();
    let bg = store.add("bg", init_uniform(2, 4, 5, &mut rng)).unwrap();
    let w2 = store.add("w2", init_uniform(8, 1, 8, &mut rng)).unwrap();
    let b2 = store.add("b2", init_uniform(1, 1, 8, &mut rng)).unwrap();
    Net { store, w1, b1, wg, bg, w2, b2 }
}

fn inputs(seed: u64) -> (Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = (0..ROWS * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..SEGMENTS).map(|_| rng.random_range(-2.0..2.0)).collect();
    (Tensor::matrix(ROWS, 3, x).unwrap(), y)
}

/// Row i belongs to segment IDX[i]; segment 2 receives no rows in the mean
/// branch.
const IDX: [usize; ROWS] = [0, 1, 0, 1, 1, 0, 2];
const MEAN_IDX: [usize; ROWS] = [0, 1, 0, 1, 1, 0, 0];

/// Small network touching every operator: returns the two scalar heads
/// (Huber loss and a sigmoid sum).
fn heads(n: &Net, store: &ParamStore, x: &Tensor, y: &[f64], tape: &mut Tape) -> Result<(Var, Var)> {
    let xv = tape.constant(x.clone());
    let (w1, b1) = (tape.param(store, n.w1), tape.param(store, n.b1));
    let h = tape.linear(xv, w1, Some(b1))?;
    let h = tape.leaky_relu(h, 0.01)?;
    let (wg, bg) = (tape.param(store, n.wg), tape.param(store, n.bg));
    let segs: Arc<[Segment]> =
        Arc::from(vec![Segment { start: 0, len: 4, bank: 1 }, Segment { start: 4, len: 3, bank: 0 }]);
    let g = tape.grouped_linear(h, wg, bg, segs)?;
    let gate = tape.sigmoid(g)?;
    let gated = tape.mul(g, gate)?;
    let sum = tape.scatter_sum(gated, Arc::from(IDX.to_vec()), SEGMENTS)?;
    let mean = tape.scatter_mean(gated, Arc::from(MEAN_IDX.to_vec()), SEGMENTS)?;
    let both = tape.concat(&[sum, mean])?;
    let back = tape.gather(both, Arc::from(IDX.to_vec()))?;
    let back = tape.scale(back, 0.5)?;
    let pooled = tape.scatter_sum(back, Arc::from(IDX.to_vec()), SEGMENTS)?;
    let (w2, b2) = (tape.param(store, n.w2), tape.param(store, n.b2));
    let out = tape.linear(pooled, w2, Some(b2))?;
    let target = tape.constant(Tensor::column(y.to_vec()));
    let huber = tape.huber(out, target, 1.0)?;
    let s = tape.sigmoid(out)?;
    let ones = tape.constant(Tensor::column(vec![1.0; SEGMENTS]));
    let weighted = tape.mul_column(s, ones)?;
    let sig_sum = tape.sum(weighted)?;
    Ok((huber, sig_sum))
}

fn grads_of(n: &Net, x: &Tensor, y: &[f64], a: f64, b: f64) -> Gradients {
    let mut tape = Tape::new();
    let (l1, l2) = heads(n, &n.store, x, y, &mut tape).unwrap();
    let s1 = tape.scale(l1, a).unwrap();
    let s2 = tape.scale(l2, b).unwrap();
    let total = tape.add(s1, s2).unwrap();
    tape.backward(total, &n.store).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_are_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let n = net(seed);
        let (x, y) = inputs(seed);
        let g1 = grads_of(&n, &x, &y, 1.0, 0.0);
        let g2 = grads_of(&n, &x, &y, 0.0, 1.0);
        let g = grads_of(&n, &x, &y, a, b);
        for id in n.store.ids() {
            for ((c, u), v) in g.get(id).data().iter().zip(g1.get(id).data()).zip(g2.get(id).data()) {
                let expected = a * u + b * v;
                prop_assert!((c - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{c} vs {expected}");
            }
        }
    }

    #[test]
    fn scatter_sum_and_gather_are_adjoint(
        seed in any::<u64>(),
        rows in 1usize..20,
        segs in 1usize..6,
        cols in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..rows).map(|_| rng.random_range(0..segs)).collect();
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..segs * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        let xid = store.add("x", Tensor::matrix(rows, cols, x.clone()).unwrap()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&store, xid);
        let yv = tape.constant(Tensor::matrix(segs, cols, y.clone()).unwrap());
        let s = tape.scatter_sum(xv, Arc::from(idx.clone()), segs).unwrap();
        let gy = tape.gather(yv, Arc::from(idx.clone())).unwrap();
        // <scatter(x), y> = <x, gather(y)>
        let lhs: f64 = tape.value(s).data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(tape.value(gy).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
        // The backward of scatter_sum is the gather.
        let prod = tape.mul(s, yv).unwrap();
        let out = tape.sum(prod).unwrap();
        let g = tape.backward(out, &store).unwrap();
        prop_assert_eq!(g.get(xid).data(), tape.value(gy).data());
    }

    #[test]
    fn recording_is_deterministic_and_replays_bit_identically(seed in any::<u64>()) {
        let n = net(seed);
        let (x, y) = inputs(seed);
        let mut t1 = Tape::new();
        let (a1, b1) = heads(&n, &n.store, &x, &y, &mut t1).unwrap();
        let mut t2 = Tape::new();
        let (a2, b2) = heads(&n, &n.store, &x, &y, &mut t2).unwrap();
        prop_assert_eq!(t1.value(a1).data()[0].to_bits(), t2.value(a2).data()[0].to_bits());
        prop_assert_eq!(t1.value(b1).data()[0].to_bits(), t2.value(b2).data()[0].to_bits());
        prop_assert!(t1.replay().is_ok());
        let g1 = t1.backward(a1, &n.store).unwrap();
        let g2 = t2.backward(a2, &n.store).unwrap();
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters(seed in any::<u64>(), lr in 1e-5f64..1.0, steps in 1usize..5) {
        let mut n = net(seed);
        let before = n.store.clone();
        let zeros = Gradients(n.store.zeros_like());
        let mut opt = AdamW::new(&n.store, lr).with_weight_decay(0.0);
        for _ in 0..steps {
            opt.update(&mut n.store, &zeros);
        }
        prop_assert_eq!(before, n.store);
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..5 {
        let n = net(seed);
        let (x, y) = inputs(seed);
        let f = |store: &ParamStore| {
            let mut tape = Tape::new();
            let (h, s) = heads(&n, store, &x, &y, &mut tape)?;
            let out = tape.add(h, s)?;
            Ok((tape, out))
        };
        let all: Vec<(ParamId, usize)> =
            n.store.iter().flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i))).collect();
        let report = finite_diff_check(&n.store, f, &all, 1e-5).unwrap();
        assert!(report.checked.len() + report.skipped.len() == all.len());
        assert!(report.checked.len() > all.len() / 2, "seed {seed}: too many skipped");
        assert!(report.passes(1e-4), "seed {seed}: {:?}", report.worst);
    }
}

#[test]
fn linear_model_is_exact_under_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", init_uniform(4, 2, 4, &mut rng)).unwrap();
    let x = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
    let f = |s: &ParamStore| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(s, w);
        let y = tape.linear(xv, wv, None)?;
        let out = tape.sum(y)?;
        Ok((tape, out))
    };
    let coords = sample_coordinates(&store, 8, &mut rng);
    let report = finite_diff_check(&store, f, &coords, 1e-5).unwrap();
    assert_eq!(report.checked.len(), 8);
    assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
}

#[test]
fn coordinates_on_a_kink_are_skipped() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
    let f = |s: &ParamStore| {
        let mut tape = Tape::new();
        let wv = tape.param(s, w);
        let r = tape.leaky_relu(wv, 0.01)?;
        let out = tape.sum(r)?;
        Ok((tape, out))
    };
    let report = finite_diff_check(&store, f, &[(w, 0)], 1e-5).unwrap();
    assert_eq!(report.skipped, vec![(w, 0)]);
    assert!(report.checked.is_empty());
}

#[test]
fn adamw_follows_reference_recurrence() {
    let (lr, wd) = (0.1, 0.01);
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(0.0)).unwrap();
    let mut opt = AdamW::new(&store, lr).with_weight_decay(wd);

    // Reference, written out directly.
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut dist = Vec::new();
    for t in 1..=10 {
        let g = 2.0 * (w - 2.0);
        w *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);

        let wt = store.get(id).data()[0];
        let grad = Gradients(vec![Tensor::scalar(2.0 * (wt - 2.0))]);
        opt.update(&mut store, &grad);
        let got = store.get(id).data()[0];
        assert!((got - w).abs() < 1e-14, "step {t}: {got} vs {w}");
        dist.push((got - 2.0).abs());
    }
    assert!(dist.windows(2).skip(1).all(|p| p[1] < p[0]), "{dist:?}");
}
