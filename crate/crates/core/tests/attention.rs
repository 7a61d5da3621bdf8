use clic_core::attention::{
    ChannelAttnParams, SpatialAttnParams, CHANNEL_REDUCTION, SPATIAL_KERNEL,
};
use clic_core::tensor::gradcheck::{self, GradCheckOptions};
use clic_core::{Graph, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn zero_all(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).values_mut().fill(0.0);
    }
}

#[test]
fn spatial_zero_weights_halve_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let sa = SpatialAttnParams::new(&mut store, "sa", SPATIAL_KERNEL, &mut rng).unwrap();
    zero_all(&mut store);
    let x = random(&[3, 5, 4], &mut rng);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let y = sa.forward(&g, &tape.constant(x.clone())).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, b / 2.0);
    }
    // saturated bias: gate is 1
    store.get_mut(sa.conv.b).values_mut()[0] = 100.0;
    let g = Graph::new(&tape, &store);
    let y = sa.forward(&g, &tape.constant(x.clone())).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(SpatialAttnParams::new(&mut store, "bad", 4, &mut rng).is_err());
}

#[test]
fn spatial_matches_scalar_oracle_with_1x1_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let sa = SpatialAttnParams::new(&mut store, "sa", 1, &mut rng).unwrap();
    store
        .get_mut(sa.conv.w)
        .values_mut()
        .copy_from_slice(&[0.8, -1.5]);
    store.get_mut(sa.conv.b).values_mut()[0] = 0.25;
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let y = sa.forward(&g, &tape.constant(x.clone())).unwrap();
    for (i, &v) in x.data().iter().enumerate() {
        // one channel: mean and max are the value itself
        let want = v * sigmoid(0.8 * v - 1.5 * v + 0.25);
        assert!((y.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn channel_zero_weights_halve_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let ca = ChannelAttnParams::new(&mut store, "ca", 8, CHANNEL_REDUCTION, &mut rng).unwrap();
    zero_all(&mut store);
    let x = random(&[8, 3, 3], &mut rng);
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let y = ca.forward(&g, &tape.constant(x.clone())).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, b / 2.0);
    }
    assert!(ChannelAttnParams::new(&mut store, "bad", 6, 4, &mut rng).is_err());
}

#[test]
fn channel_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let ca = ChannelAttnParams::new(&mut store, "ca", 1, 1, &mut rng).unwrap();
    store.get_mut(ca.reduce.w).values_mut()[0] = 1.3;
    store.get_mut(ca.reduce.b).values_mut()[0] = -0.2;
    store.get_mut(ca.expand.w).values_mut()[0] = 0.7;
    store.get_mut(ca.expand.b).values_mut()[0] = 0.1;
    let x = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, -0.5]).unwrap();
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let y = ca.forward(&g, &tape.constant(x.clone())).unwrap();
    let mean = (1.0 + 2.0 - 0.5) / 3.0;
    let h: f64 = 1.3 * mean - 0.2;
    let gelu =
        0.5 * h * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (h + 0.044715 * h.powi(3))).tanh());
    let gate = sigmoid(0.7 * gelu + 0.1);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * gate).abs() < 1e-12);
    }
}

#[test]
fn gates_are_bounded_and_position_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let sa = SpatialAttnParams::new(&mut store, "sa", SPATIAL_KERNEL, &mut rng).unwrap();
    let ca = ChannelAttnParams::new(&mut store, "ca", 4, 2, &mut rng).unwrap();
    let mut x = random(&[4, 6, 6], &mut rng);
    // positions 0 and 7 carry the same channel vector
    for ch in 0..4 {
        let v = x.data()[ch * 36];
        x.data_mut()[ch * 36 + 7] = v;
    }
    let tape = Tape::inference();
    let g = Graph::new(&tape, &store);
    let xv = tape.constant(x.clone());
    let ys = sa.forward(&g, &xv).unwrap();
    let yc = ca.forward(&g, &xv).unwrap();
    for i in 0..x.numel() {
        assert!(ys.data()[i].abs() <= x.data()[i].abs());
        assert!(yc.data()[i].abs() <= x.data()[i].abs());
    }
    for ch in 0..4 {
        assert_eq!(yc.data()[ch * 36], yc.data()[ch * 36 + 7]);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let sa = SpatialAttnParams::new(&mut store, "sa", SPATIAL_KERNEL, &mut rng).unwrap();
    let ca = ChannelAttnParams::new(&mut store, "ca", 8, CHANNEL_REDUCTION, &mut rng).unwrap();
    let x = random(&[8, 5, 5], &mut rng);
    let proj = random(&[8, 5, 5], &mut rng);
    let rep = gradcheck::check(&mut store, &[x], GradCheckOptions::default(), |g, xs| {
        let y = ca.forward(g, &sa.forward(g, &xs[0])?)?;
        Ok(g.sum(&g.mul(&y, &g.constant(proj.clone()))?))
    })
    .unwrap();
    assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.worst());
}
