use clic_core::cluster::{self, ClusterAssignment, ClusterParams, GammaMode};
use clic_core::tensor::gradcheck::{self, GradCheckOptions};
use clic_core::tensor::layers::{Linear, Mlp};
use clic_core::{FeatureGrid, Graph, ParamId, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![c, h, w], data).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn zero(store: &mut ParamStore<f64>, id: ParamId) {
    store.get_mut(id).values_mut().fill(0.0);
}

fn zero_mlp(store: &mut ParamStore<f64>, m: &Mlp) {
    for id in [m.fc1.w, m.fc1.b, m.fc2.w, m.fc2.b] {
        zero(store, id);
    }
}

fn set_identity(store: &mut ParamStore<f64>, l: &Linear) {
    let n = l.cin;
    let v = store.get_mut(l.w).values_mut();
    for (i, e) in v.iter_mut().enumerate() {
        *e = if i / n == i % n { 1.0 } else { 0.0 };
    }
    zero(store, l.b);
}

fn ctx(x: Tensor<f64>, gamma: Vec<f64>) -> Vec<f64> {
    let tape = Tape::inference();
    let n = gamma.len();
    let g = tape.constant(Tensor::new(vec![n], gamma).unwrap());
    cluster::add_global_context(&tape, &tape.constant(x), &g)
        .unwrap()
        .data()
        .to_vec()
}

#[test]
fn global_context_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 2, 4], &mut rng);
    assert_eq!(ctx(x.clone(), vec![0.0; 3]), x.data());
    assert_eq!(
        ctx(grid(2, 2, 1, vec![0.5, 0.5, -2.0, -2.0]), vec![1.0, 1.0]),
        vec![1.0, 1.0, -4.0, -4.0]
    );
    assert_eq!(
        ctx(grid(1, 1, 2, vec![0.0, 2.0]), vec![1.0]),
        vec![1.0, 3.0]
    );
    // scalar mode broadcasts one γ to all channels
    assert_eq!(
        ctx(grid(2, 1, 1, vec![1.0, 3.0]), vec![0.5]),
        vec![1.5, 4.5]
    );
    let tape = Tape::inference();
    let bad = tape.constant(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
    assert!(cluster::add_global_context(&tape, &tape.constant(x), &bad).is_err());
}

#[test]
fn centers_with_zero_offset_are_quadrant_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", 1, 1, 1, &mut rng);
    zero_mlp(&mut store, &mlp);
    let ramp: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let c = cluster::compute_centers(
        &g,
        &tape.constant(grid(1, 4, 4, ramp.clone())),
        &mlp,
        (2, 2),
    )
    .unwrap();
    let oracle: Vec<f64> = (0..4)
        .map(|q| {
            let (qy, qx) = (q / 2, q % 2);
            let mut s = 0.0;
            for y in 0..2 {
                for x in 0..2 {
                    s += ramp[(qy * 2 + y) * 4 + qx * 2 + x];
                }
            }
            s / 4.0
        })
        .collect();
    assert_eq!(c.data(), oracle.as_slice());

    // constant grid: every pooled center is identical, and with an offset
    // net they all move together
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", 3, 3, 3, &mut rng);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let k = grid(
        3,
        4,
        6,
        [0.3; 24]
            .into_iter()
            .chain([-1.0; 24])
            .chain([2.0; 24])
            .collect(),
    );
    let c = cluster::compute_centers(&g, &tape.constant(k), &mlp, (2, 2)).unwrap();
    for ch in 0..3 {
        let row = &c.data()[ch * 4..ch * 4 + 4];
        assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-12));
    }
}

#[test]
fn assign_orthogonal_centers() {
    let centers = grid(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let points = grid(2, 1, 2, vec![0.0, 1.0, 1.0, 0.0]);
    let a = cluster::assign(&points, &centers, None).unwrap();
    assert_eq!(a.label, vec![Some(1), Some(0)]);
    assert_eq!(a.similarity, vec![1.0, 1.0]);
    assert_eq!(a.member_count, vec![1, 1]);
}

fn oracle_assign(points: &Tensor<f64>, centers: &Tensor<f64>) -> Vec<(usize, f64)> {
    let s = points.shape();
    let (c, n) = (s[0], s[1] * s[2]);
    let k = centers.numel() / c;
    // full similarity matrix first, then argmax per row
    let mut sim = vec![vec![0.0; k]; n];
    for (i, row) in sim.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            let (mut d, mut pp, mut cc) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let p = points.data()[ch * n + i];
                let q = centers.data()[ch * k + j];
                d += p * q;
                pp += p * p;
                cc += q * q;
            }
            *e = if pp.sqrt() < 1e-12 || cc.sqrt() < 1e-12 {
                0.0
            } else {
                d / (pp.sqrt() * cc.sqrt())
            };
        }
    }
    sim.iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .collect()
}

#[test]
fn assign_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let points = random(&[5, 8, 8], &mut rng);
        let centers = random(&[5, 2, 2], &mut rng);
        let a = cluster::assign(&points, &centers, None).unwrap();
        let o = oracle_assign(&points, &centers);
        for i in 0..64 {
            assert_eq!(a.label[i], Some(o[i].0));
            assert!((a.similarity[i] - o[i].1).abs() < 1e-12);
        }
        assert_eq!(a.member_count.iter().sum::<usize>(), 64);
    }
}

#[test]
fn assign_respects_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points = random(&[3, 4, 4], &mut rng);
    let centers = random(&[3, 2, 2], &mut rng);
    let mask = cluster::parity_mask(4, 4, 1);
    let a = cluster::assign(&points, &centers, Some(&mask)).unwrap();
    for (l, m) in a.label.iter().zip(&mask) {
        assert_eq!(l.is_some(), *m);
    }
    assert_eq!(a.member_count.iter().sum::<usize>(), 8);
}

fn agg(
    values: Tensor<f64>,
    cv: Tensor<f64>,
    a: &ClusterAssignment,
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    let tape = Tape::inference();
    let n = a.label.len();
    let s = Tensor::new(vec![1, 1, n], a.similarity.clone()).unwrap();
    cluster::aggregate(
        &tape,
        &tape.constant(values),
        &tape.constant(cv),
        &tape.constant(s),
        a,
        &tape.constant(Tensor::new(vec![1], vec![alpha]).unwrap()),
        &tape.constant(Tensor::new(vec![1], vec![beta]).unwrap()),
    )
    .unwrap()
    .data()
    .to_vec()
}

#[test]
fn aggregate_examples() {
    // cluster 1 is empty
    let a = ClusterAssignment {
        label: vec![Some(0), Some(0)],
        similarity: vec![0.5, -0.25],
        member_count: vec![2, 0],
    };
    let f = agg(
        grid(1, 1, 2, vec![1.0, 2.0]),
        grid(1, 1, 2, vec![0.7, -3.5]),
        &a,
        1.0,
        0.0,
    );
    assert_eq!(f[1], -3.5);

    let a1 = ClusterAssignment {
        label: vec![Some(0)],
        similarity: vec![0.9],
        member_count: vec![1],
    };
    let f = agg(
        grid(2, 1, 1, vec![4.0, -2.0]),
        grid(2, 1, 1, vec![1.0, 1.0]),
        &a1,
        1.0,
        60.0,
    );
    assert!((f[0] - 2.5).abs() < 1e-12 && (f[1] + 0.5).abs() < 1e-12);

    // three random members against a direct scalar evaluation
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random(&[4, 1, 5], &mut rng);
    let cv = random(&[4, 1, 2], &mut rng);
    let sims: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = [Some(1), None, Some(1), Some(0), Some(1)];
    let a = ClusterAssignment {
        label: labels.to_vec(),
        similarity: sims.clone(),
        member_count: vec![1, 3],
    };
    let (alpha, beta) = (1.7, -0.3);
    let f = agg(v.clone(), cv.clone(), &a, alpha, beta);
    for ch in 0..4 {
        let mut acc = cv.data()[ch * 2 + 1];
        for i in [0, 2, 4] {
            let sig = 1.0 / (1.0 + f64::exp(-(alpha * sims[i] + beta)));
            acc += sig * v.data()[ch * 5 + i];
        }
        assert!((f[ch * 2 + 1] - acc / 4.0).abs() < 1e-12);
    }
}

fn run_dispatch(
    store: &ParamStore<f64>,
    lin: &Linear,
    p: Tensor<f64>,
    f: Tensor<f64>,
    a: &ClusterAssignment,
) -> Vec<f64> {
    let tape = Tape::inference();
    let g = Graph::new(&tape, store);
    let n = a.label.len();
    let s = tape.constant(Tensor::new(vec![1, 1, n], a.similarity.clone()).unwrap());
    cluster::dispatch(&g, &tape.constant(p), &tape.constant(f), &s, a, lin)
        .unwrap()
        .data()
        .to_vec()
}

#[test]
fn dispatch_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "d", 3, 3, &mut rng);
    let p = random(&[3, 1, 3], &mut rng);
    let f = random(&[3, 1, 2], &mut rng);
    let a = ClusterAssignment {
        label: vec![Some(0), Some(1), None],
        similarity: vec![0.4, 0.0, 0.0],
        member_count: vec![1, 1],
    };
    // s = 0 at position 1, bias zero: unchanged; inactive position 2 unchanged
    let out = run_dispatch(&store, &lin, p.clone(), f.clone(), &a);
    for ch in 0..3 {
        assert_eq!(out[ch * 3 + 1], p.data()[ch * 3 + 1]);
        assert_eq!(out[ch * 3 + 2], p.data()[ch * 3 + 2]);
    }
    zero(&mut store, lin.w);
    assert_eq!(
        run_dispatch(&store, &lin, p.clone(), f.clone(), &a),
        p.data()
    );

    set_identity(&mut store, &lin);
    let one = ClusterAssignment {
        label: vec![Some(0)],
        similarity: vec![0.6],
        member_count: vec![1],
    };
    let p1 = grid(3, 1, 1, vec![1.0, 2.0, 3.0]);
    let f1 = grid(3, 1, 1, vec![10.0, -5.0, 0.5]);
    let out = run_dispatch(&store, &lin, p1, f1, &one);
    let want = [1.0 + 6.0, 2.0 - 3.0, 3.0 + 0.3];
    for (o, w) in out.iter().zip(want) {
        assert!((o - w).abs() < 1e-12);
    }
}

fn mixer(c: usize, seed: u64) -> (ParamStore<f64>, ClusterParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = ClusterParams::new(
        &mut store,
        "mix",
        c,
        (2, 2),
        GammaMode::PerChannel,
        &mut rng,
    );
    (store, p)
}

#[test]
fn checkerboard_matches_masked_runs() {
    let (store, p) = mixer(4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 4, 6], &mut rng);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let xv = tape.constant(x);
    let full = p.forward(&g, &xv, true).unwrap();
    for parity in 0..2 {
        let mask = cluster::parity_mask(4, 6, parity);
        let masked = tape.mask_positions(&xv, &mask).unwrap();
        let (half, a) = p.forward_masked(&g, &masked, Some(&mask)).unwrap();
        assert_eq!(a.member_count.iter().sum::<usize>(), 12);
        for pos in (0..24).filter(|&i| mask[i]) {
            for ch in 0..4 {
                assert_eq!(full.data()[ch * 24 + pos], half.data()[ch * 24 + pos]);
            }
        }
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let (store, p) = mixer(4, 9);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    for cb in [false, true] {
        let y = p
            .forward(&g, &tape.constant(Tensor::zeros(&[4, 4, 4])), cb)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mixer_handles_grids_smaller_than_pool() {
    let (store, p) = mixer(4, 10);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for cb in [false, true] {
        let y = p
            .forward(&g, &tape.constant(random(&[4, 1, 1], &mut rng)), cb)
            .unwrap();
        assert!(y.value().is_finite());
    }
}

#[test]
fn aggregate_norm_bound() {
    let (store, p) = mixer(6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    for _ in 0..5 {
        let v = random(&[6, 5, 5], &mut rng);
        let cv = random(&[6, 2, 2], &mut rng);
        let pts = random(&[6, 5, 5], &mut rng);
        let centers = random(&[6, 2, 2], &mut rng);
        let a = cluster::assign(&pts, &centers, None).unwrap();
        let s = tape.constant(Tensor::new(vec![1, 5, 5], a.similarity.clone()).unwrap());
        let f = cluster::aggregate(
            &g,
            &tape.constant(v.clone()),
            &tape.constant(cv.clone()),
            &s,
            &a,
            &g.p(p.alpha),
            &g.p(p.beta),
        )
        .unwrap();
        for k in 0..4 {
            let col = |t: &Tensor<f64>, j: usize, stride: usize| -> f64 {
                (0..6)
                    .map(|ch| t.data()[ch * stride + j].powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut bound = col(&cv, k, 4);
            for i in 0..25 {
                if a.label[i] == Some(k) {
                    bound += col(&v, i, 25);
                }
            }
            bound /= 1.0 + a.member_count[k] as f64;
            assert!(col(f.value(), k, 4) <= bound + 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn assignment_and_dispatch_are_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n) = (3usize, 6usize);
        let (store, p) = mixer(c, seed ^ 0x55);
        let pts = random(&[c, 1, n], &mut rng);
        let vals = random(&[c, 1, n], &mut rng);
        let centers = random(&[c, 2, 2], &mut rng);
        let cv = random(&[c, 2, 2], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| {
            let mut d = vec![0.0; c * n];
            for ch in 0..c {
                for i in 0..n {
                    d[ch * n + i] = t.data()[ch * n + perm[i]];
                }
            }
            Tensor::new(vec![c, 1, n], d).unwrap()
        };
        let run = |pts: Tensor<f64>, vals: Tensor<f64>| {
            let tape = Tape::inference();
            let g = Graph::new(&tape, &store);
            let pv = tape.constant(pts);
            let cvar = tape.constant(centers.clone());
            let a = cluster::assign(pv.value(), cvar.value(), None).unwrap();
            let s = cluster::assigned_similarity(&g, &pv, &cvar, &a).unwrap();
            let f = cluster::aggregate(&g, &tape.constant(vals), &tape.constant(cv.clone()), &s, &a, &g.p(p.alpha), &g.p(p.beta)).unwrap();
            let out = cluster::dispatch(&g, &pv, &f, &s, &a, &p.dispatch_linear).unwrap();
            (a, f.data().to_vec(), out.data().to_vec())
        };
        let (a0, f0, o0) = run(pts.clone(), vals.clone());
        let (a1, f1, o1) = run(permute(&pts), permute(&vals));
        for i in 0..n {
            prop_assert_eq!(a1.label[i], a0.label[perm[i]]);
            for ch in 0..c {
                prop_assert!((o1[ch * n + i] - o0[ch * n + perm[i]]).abs() < 1e-12);
            }
        }
        prop_assert_eq!(a0.member_count, a1.member_count);
        for (x, y) in f0.iter().zip(&f1) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn mixer_gradients_match_finite_differences() {
    for (cb, seed) in [(false, 20), (true, 21)] {
        let (mut store, p) = mixer(4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = random(&[4, 4, 4], &mut rng);
        let proj = random(&[4, 4, 4], &mut rng);
        let rep = gradcheck::check(&mut store, &[x], GradCheckOptions::default(), |g, xs| {
            let y = p.forward(g, &xs[0], cb)?;
            Ok(g.sum(&g.mul(&y, &g.constant(proj.clone()))?))
        })
        .unwrap();
        for e in &rep.entries {
            assert!(e.rel_error < 1e-4, "checkerboard={cb} {e:?}");
        }
        for name in [
            "mix.alpha",
            "mix.beta",
            "mix.gamma",
            "mix.point.weight",
            "mix.value.weight",
            "mix.dispatch.weight",
        ] {
            assert!(rep.entries.iter().any(|e| e.name == name));
        }
    }
}

#[test]
fn eager_and_taped_runs_agree_in_f32() {
    let (store, p) = mixer(4, 30);
    let store32 = store.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = FeatureGrid::<f64>::random(4, 4, 4, -1.0, 1.0, &mut rng);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let y64 = p.forward(&g, &tape.constant(x.to_tensor()), true).unwrap();
    let t32 = Tape::inference();
    let g32 = Graph::new(&t32, &store32);
    let y32 = p
        .forward(&g32, &t32.constant(x.cast::<f32>().to_tensor()), true)
        .unwrap();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
