use super::*;

fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Central finite differences of a scalar function of a flat vector.
fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[test]
fn relu_basics() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
    assert_eq!(x.relu().unwrap().values(), &[0.0, 2.0]);
}

#[test]
fn sigmoid_saturates_without_nan() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1000.0, 0.0, 1000.0]).unwrap();
    let y = x.sigmoid().unwrap();
    assert_eq!(y.values(), &[0.0, 0.5, 1.0]);
}

#[test]
fn concat_and_slice_shapes() {
    let a = Tensor::constant(Shape::new(1, 3, 2, 2), 1.0).unwrap();
    let b = Tensor::constant(Shape::new(1, 1, 2, 2), 2.0).unwrap();
    let cat = concat_channels(&[&a, &b]).unwrap();
    assert_eq!(cat.shape(), Shape::new(1, 4, 2, 2));
    let back = cat.slice_channels(3, 1).unwrap();
    assert_eq!(back.values(), b.values());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let a = Tensor::constant(Shape::new(1, 2, 2, 2), 0.0).unwrap();
    let b = Tensor::constant(Shape::new(1, 2, 3, 2), 0.0).unwrap();
    match a.add(&b) {
        Err(Error::Shape { details, .. }) => {
            assert!(details.contains("(1,2,2,2)") && details.contains("(1,2,3,2)"));
        }
        other => panic!("expected shape error, got {:?}", other.map(|t| t.shape())),
    }
}

#[test]
fn backward_of_mean_is_uniform() {
    let tape = Tape::new();
    let x = tape
        .leaf(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0], true)
        .unwrap();
    let loss = x.mean_all().unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
}

#[test]
fn backward_of_mean_square_is_analytic() {
    // loss = mean(x^2) on x = [1, 2] -> grad = [1, 2]
    let tape = Tape::new();
    let x = tape.leaf(Shape::new(1, 1, 1, 2), vec![1.0, 2.0], true).unwrap();
    let loss = x.mul(&x).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Shape::new(1, 1, 1, 2), vec![1.0, 2.0], true).unwrap();
    assert!(matches!(backward(&x), Err(Error::InvalidArgument(_))));
}

#[test]
fn repeated_backward_without_reset_is_an_error() {
    let tape = Tape::new();
    let x = tape.leaf(Shape::new(1, 1, 1, 2), vec![1.0, 2.0], true).unwrap();
    let loss = x.mean_all().unwrap();
    backward(&loss).unwrap();
    assert!(backward(&loss).is_err());
    tape.zero_grad();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.5, 0.5]);
}

#[test]
fn mixing_tapes_is_an_error() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.leaf(Shape::new(1, 1, 1, 1), vec![1.0], true).unwrap();
    let b = t2.leaf(Shape::new(1, 1, 1, 1), vec![2.0], true).unwrap();
    assert!(a.add(&b).is_err());
}

#[test]
fn mul_gradient_matches_product_rule() {
    let shape = Shape::new(1, 2, 3, 3);
    let xv = pseudo_random(shape.numel(), 5);
    let yv = pseudo_random(shape.numel(), 6);

    let tape = Tape::new();
    let x = tape.leaf(shape, xv.clone(), true).unwrap();
    let y = Tensor::from_vec(shape, yv.clone()).unwrap();
    let loss = x.mul(&y).unwrap().mul(&x.mul(&y).unwrap()).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();

    let numeric = finite_diff(
        |v| {
            let x = Tensor::from_vec(shape, v.to_vec()).unwrap();
            let y = Tensor::from_vec(shape, yv.clone()).unwrap();
            let p = x.mul(&y).unwrap();
            p.mul(&p).unwrap().mean_all().unwrap().item()
        },
        &xv,
        1e-5,
    );
    assert!(max_rel_err(&x.grad().unwrap(), &numeric) < 1e-6);
}

#[test]
fn broadcast_mul_gradients_match_finite_differences() {
    let full = Shape::new(2, 3, 2, 2);
    let one = Shape::new(2, 1, 2, 2);
    let av = pseudo_random(full.numel(), 8);
    let bv = pseudo_random(one.numel(), 9);

    let run = |a_vals: &[f64], b_vals: &[f64], grads: bool| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
        let tape = Tape::new();
        let a = tape.leaf(full, a_vals.to_vec(), grads).unwrap();
        let b = tape.leaf(one, b_vals.to_vec(), grads).unwrap();
        let loss = a.mul(&b).unwrap().mul(&a.mul(&b).unwrap()).unwrap().mean_all().unwrap();
        let v = loss.item();
        if grads {
            backward(&loss).unwrap();
            (v, Some((a.grad().unwrap(), b.grad().unwrap())))
        } else {
            (v, None)
        }
    };

    let (_, grads) = run(&av, &bv, true);
    let (ga, gb) = grads.unwrap();
    let na = finite_diff(|v| run(v, &bv, false).0, &av, 1e-5);
    let nb = finite_diff(|v| run(&av, v, false).0, &bv, 1e-5);
    assert!(max_rel_err(&ga, &na) < 1e-6);
    assert!(max_rel_err(&gb, &nb) < 1e-6);
}

#[test]
fn conv_identity_kernel() {
    let shape = Shape::new(1, 1, 3, 3);
    let x = Tensor::from_vec(shape, pseudo_random(9, 3)).unwrap();
    let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
    let b = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
    let y = x.conv2d(&w, &b, 1, 0).unwrap();
    assert_eq!(y.values(), x.values());
}

#[test]
fn conv_box_kernel_averages_interior() {
    // 3x3 kernel of 1/9 on a constant image: interior stays constant,
    // zero padding changes only the border ring.
    let x = Tensor::constant(Shape::new(1, 1, 5, 5), 4.0).unwrap();
    let w = Tensor::constant(Shape::new(1, 1, 3, 3), 1.0 / 9.0).unwrap();
    let b = Tensor::constant(Shape::new(1, 1, 1, 1), 0.0).unwrap();
    let y = x.conv2d(&w, &b, 1, 1).unwrap();
    for yy in 1..4 {
        for xx in 1..4 {
            assert!((y.values()[yy * 5 + xx] - 4.0).abs() < 1e-12);
        }
    }
    assert!((y.values()[0] - 4.0 * 4.0 / 9.0).abs() < 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::constant(Shape::new(1, 3, 4, 4), 0.0).unwrap();
    let w = Tensor::constant(Shape::new(2, 2, 3, 3), 0.0).unwrap();
    let b = Tensor::constant(Shape::new(1, 2, 1, 1), 0.0).unwrap();
    match x.conv2d(&w, &b, 1, 1) {
        Err(Error::Shape { details, .. }) => {
            assert!(details.contains("(1,3,4,4)") && details.contains("(2,2,3,3)"));
        }
        other => panic!("expected shape error, got {:?}", other.map(|t| t.shape())),
    }
}

fn conv_loss(iv: &[f64], wv: &[f64], bv: &[f64], ish: Shape, wsh: Shape, stride: usize, pad: usize) -> f64 {
    let x = Tensor::from_vec(ish, iv.to_vec()).unwrap();
    let w = Tensor::from_vec(wsh, wv.to_vec()).unwrap();
    let b = Tensor::from_vec(Shape::new(1, wsh.n, 1, 1), bv.to_vec()).unwrap();
    let y = x.conv2d(&w, &b, stride, pad).unwrap();
    // square so gradients are input-dependent
    y.mul(&y).unwrap().mean_all().unwrap().item()
}

#[test]
fn conv_gradients_match_finite_differences() {
    let ish = Shape::new(1, 2, 5, 5);
    let wsh = Shape::new(3, 2, 3, 3);
    let iv = pseudo_random(ish.numel(), 31);
    let wv = pseudo_random(wsh.numel(), 32);
    let bv = pseudo_random(3, 33);

    let tape = Tape::new();
    let x = tape.leaf(ish, iv.clone(), true).unwrap();
    let w = tape.leaf(wsh, wv.clone(), true).unwrap();
    let b = tape.leaf(Shape::new(1, 3, 1, 1), bv.clone(), true).unwrap();
    let y = x.conv2d(&w, &b, 1, 1).unwrap();
    let loss = y.mul(&y).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();

    let gi = finite_diff(|v| conv_loss(v, &wv, &bv, ish, wsh, 1, 1), &iv, 1e-5);
    let gw = finite_diff(|v| conv_loss(&iv, v, &bv, ish, wsh, 1, 1), &wv, 1e-5);
    let gb = finite_diff(|v| conv_loss(&iv, &wv, v, ish, wsh, 1, 1), &bv, 1e-5);
    assert!(max_rel_err(&x.grad().unwrap(), &gi) < 1e-6);
    assert!(max_rel_err(&w.grad().unwrap(), &gw) < 1e-6);
    assert!(max_rel_err(&b.grad().unwrap(), &gb) < 1e-6);
}

#[test]
fn strided_conv_gradients_match_finite_differences() {
    let ish = Shape::new(1, 1, 6, 6);
    let wsh = Shape::new(2, 1, 3, 3);
    let iv = pseudo_random(ish.numel(), 41);
    let wv = pseudo_random(wsh.numel(), 42);
    let bv = vec![0.1, -0.2];

    let tape = Tape::new();
    let x = tape.leaf(ish, iv.clone(), true).unwrap();
    let w = tape.leaf(wsh, wv.clone(), true).unwrap();
    let b = tape.leaf(Shape::new(1, 2, 1, 1), bv.clone(), true).unwrap();
    let y = x.conv2d(&w, &b, 2, 1).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 2, 3, 3));
    let loss = y.mul(&y).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();

    let gi = finite_diff(|v| conv_loss(v, &wv, &bv, ish, wsh, 2, 1), &iv, 1e-5);
    assert!(max_rel_err(&x.grad().unwrap(), &gi) < 1e-6);
}

#[test]
fn conv_is_linear_in_input_and_weight() {
    let ish = Shape::new(1, 2, 6, 6);
    let wsh = Shape::new(2, 2, 3, 3);
    let b = Tensor::constant(Shape::new(1, 2, 1, 1), 0.0).unwrap();
    let x1 = Tensor::from_vec(ish, pseudo_random(ish.numel(), 51)).unwrap();
    let x2 = Tensor::from_vec(ish, pseudo_random(ish.numel(), 52)).unwrap();
    let w = Tensor::from_vec(wsh, pseudo_random(wsh.numel(), 53)).unwrap();

    let lhs = x1.add(&x2).unwrap().conv2d(&w, &b, 1, 1).unwrap();
    let rhs = x1.conv2d(&w, &b, 1, 1).unwrap().add(&x2.conv2d(&w, &b, 1, 1).unwrap()).unwrap();
    for (a, c) in lhs.values().iter().zip(rhs.values()) {
        assert!((a - c).abs() <= 1e-10 * c.abs().max(1.0));
    }

    let w2 = Tensor::from_vec(wsh, pseudo_random(wsh.numel(), 54)).unwrap();
    let lhs = x1.conv2d(&w.add(&w2).unwrap(), &b, 1, 1).unwrap();
    let rhs = x1.conv2d(&w, &b, 1, 1).unwrap().add(&x1.conv2d(&w2, &b, 1, 1).unwrap()).unwrap();
    for (a, c) in lhs.values().iter().zip(rhs.values()) {
        assert!((a - c).abs() <= 1e-10 * c.abs().max(1.0));
    }
}

#[test]
fn resample_matches_raster_path_bitwise() {
    use crate::raster::{bicubic_resample, BandRole, Raster};
    let (w, h) = (12, 8);
    let data: Vec<f64> = pseudo_random(w * h, 61).iter().map(|v| v * 1000.0).collect();
    let r = Raster::new(w, h, vec![BandRole::Pan], data.clone(), (-4000.0, 4000.0)).unwrap();
    let up = bicubic_resample(&r, 24, 16).unwrap();
    let t = Tensor::from_vec(Shape::new(1, 1, h, w), data).unwrap();
    let tu = t.resample_bicubic(16, 24).unwrap();
    assert_eq!(tu.values(), up.data());
}

#[test]
fn resample_gradient_matches_finite_differences() {
    let shape = Shape::new(1, 2, 5, 4);
    let xv = pseudo_random(shape.numel(), 71);
    let run = |v: &[f64]| {
        let x = Tensor::from_vec(shape, v.to_vec()).unwrap();
        let y = x.resample_bicubic(9, 7).unwrap();
        y.mul(&y).unwrap().mean_all().unwrap().item()
    };
    let tape = Tape::new();
    let x = tape.leaf(shape, xv.clone(), true).unwrap();
    let y = x.resample_bicubic(9, 7).unwrap();
    let loss = y.mul(&y).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();
    let numeric = finite_diff(run, &xv, 1e-5);
    assert!(max_rel_err(&x.grad().unwrap(), &numeric) < 1e-6);
}

#[test]
fn slice_concat_gradients_route_correctly() {
    let shape = Shape::new(1, 3, 2, 2);
    let xv = pseudo_random(shape.numel(), 81);
    let tape = Tape::new();
    let x = tape.leaf(shape, xv.clone(), true).unwrap();
    // loss touches only channel 1
    let mid = x.slice_channels(1, 1).unwrap();
    let loss = mid.mul(&mid).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();
    let g = x.grad().unwrap();
    for c in [0, 2] {
        assert!(g[c * 4..(c + 1) * 4].iter().all(|&v| v == 0.0));
    }
    for i in 0..4 {
        assert!((g[4 + i] - 2.0 * xv[4 + i] / 4.0).abs() < 1e-12);
    }
}

#[test]
fn forward_replay_is_deterministic() {
    let shape = Shape::new(1, 2, 4, 4);
    let xv = pseudo_random(shape.numel(), 91);
    let wv = pseudo_random(2 * 2 * 9, 92);
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(shape, xv.clone(), true).unwrap();
        let w = tape.leaf(Shape::new(2, 2, 3, 3), wv.clone(), true).unwrap();
        let b = tape.leaf(Shape::new(1, 2, 1, 1), vec![0.0; 2], true).unwrap();
        let y = x.conv2d(&w, &b, 1, 1).unwrap().relu().unwrap().sigmoid().unwrap();
        y.mean_all().unwrap().item()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

mod adam_tests {
    use super::super::AdamState;

    #[test]
    fn first_step_moves_by_closed_form() {
        // m_hat = g, v_hat = g^2 after one step, so dx = -lr * g / (|g| + eps)
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.3, -0.7, 0.001];
        let before = params.clone();
        let mut adam = AdamState::new(0.01);
        adam.step(std::iter::once((params.as_mut_slice(), grads.as_slice()))).unwrap();
        for i in 0..3 {
            let expected = before[i] - 0.01 * grads[i] / (grads[i].abs() + 1e-8);
            assert!((params[i] - expected).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![1.0, 2.0];
        let grads = vec![0.0, 0.0];
        let mut adam = AdamState::new(0.1);
        for _ in 0..3 {
            adam.step(std::iter::once((params.as_mut_slice(), grads.as_slice()))).unwrap();
        }
        assert_eq!(params, vec![1.0, 2.0]);
    }

    #[test]
    fn quadratic_descent_is_monotone_and_matches_simulation() {
        // f(x) = x^2, grad 2x, lr 0.1, from x0 = 1
        let mut x = vec![1.0f64];
        let mut adam = AdamState::new(0.1);

        // independent scalar simulation of the same schedule
        let (mut sm, mut sv, mut sx) = (0.0, 0.0, 1.0);
        for t in 1..=10 {
            let g = 2.0 * x[0];
            let prev = x[0].abs();
            adam.step(std::iter::once((x.as_mut_slice(), [g].as_slice()))).unwrap();
            assert!(x[0].abs() < prev, "step {t}");

            let sg = 2.0 * sx;
            sm = 0.9 * sm + 0.1 * sg;
            sv = 0.999 * sv + 0.001 * sg * sg;
            let mh = sm / (1.0 - 0.9f64.powi(t));
            let vh = sv / (1.0 - 0.999f64.powi(t));
            sx -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - sx).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![1.0, 2.0];
        let grads = vec![0.0];
        let mut adam = AdamState::new(0.1);
        assert!(adam
            .step(std::iter::once((params.as_mut_slice(), grads.as_slice())))
            .is_err());
    }
}

mod init_tests {
    use super::super::{seeded_init, InitScheme, Shape};

    #[test]
    fn same_seed_same_tensor() {
        let shape = Shape::new(8, 4, 3, 3);
        let a = seeded_init(shape, 99, InitScheme::HeUniform).unwrap();
        let b = seeded_init(shape, 99, InitScheme::HeUniform).unwrap();
        assert_eq!(a.values(), b.values());
        let c = seeded_init(shape, 100, InitScheme::HeUniform).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn zero_fan_in_rejected() {
        assert!(seeded_init(Shape::new(4, 0, 3, 3), 1, InitScheme::HeUniform).is_err());
    }

    #[test]
    fn empirical_variance_matches_scheme() {
        // He-uniform over [-b, b] has variance b^2/3 = 2/fan_in
        let shape = Shape::new(1000, 10, 10, 1); // 1e5 samples, fan_in = 100
        let t = seeded_init(shape, 7, InitScheme::HeUniform).unwrap();
        let n = t.values().len() as f64;
        let mean = t.values().iter().sum::<f64>() / n;
        let var = t.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / 100.0;
        assert!((var - expected).abs() < 0.05 * expected, "{var} vs {expected}");
    }

    #[test]
    fn zeros_scheme() {
        let t = seeded_init(Shape::new(1, 4, 1, 1), 3, InitScheme::Zeros).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
    }
}
