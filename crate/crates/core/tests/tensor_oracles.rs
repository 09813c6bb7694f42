use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgnet_core::tensor::gradcheck::grad_check;
use sgnet_core::tensor::{softmax, window_out};
use sgnet_core::{Graph, Tensor};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn at4(t: &Tensor<f64>, i: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

#[test]
fn conv2d_matches_sliding_window_loops() {
    let x = rand_t(&[2, 3, 8, 8], 1);
    let w = rand_t(&[4, 3, 3, 3], 2);
    let b = rand_t(&[4], 3);
    let (stride, pad) = (2usize, 1usize);
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.input_ref(&x), g.input_ref(&w), g.input_ref(&b));
    let y = g.conv2d(xi, wi, bi, stride, pad).unwrap();
    let y = g.value(y).clone();
    assert_eq!(y.shape(), &[2, 4, 4, 4]);
    for n in 0..2 {
        for o in 0..4 {
            for r in 0..4 {
                for c in 0..4 {
                    let mut acc = b.data()[o];
                    for ci in 0..3 {
                        for kr in 0..3 {
                            for kc in 0..3 {
                                let (ir, ic) = ((r * stride + kr) as isize - pad as isize, (c * stride + kc) as isize - pad as isize);
                                if (0..8).contains(&ir) && (0..8).contains(&ic) {
                                    acc += at4(&x, [n, ci, ir as usize, ic as usize]) * at4(&w, [o, ci, kr, kc]);
                                }
                            }
                        }
                    }
                    assert!((at4(&y, [n, o, r, c]) - acc).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn maxpool_matches_window_max() {
    let x = rand_t(&[2, 3, 32, 32], 4);
    let mut g = Graph::new();
    let xi = g.input_ref(&x);
    let y = g.maxpool2d(xi, 2, 2).unwrap();
    let y = g.value(y).clone();
    assert_eq!(y.shape(), &[2, 3, 16, 16]);
    for n in 0..2 {
        for c in 0..3 {
            for r in 0..16 {
                for q in 0..16 {
                    let mut m = f64::NEG_INFINITY;
                    for dr in 0..2 {
                        for dq in 0..2 {
                            m = m.max(at4(&x, [n, c, 2 * r + dr, 2 * q + dq]));
                        }
                    }
                    assert_eq!(at4(&y, [n, c, r, q]), m);
                }
            }
        }
    }
}

#[test]
fn linear_matches_triple_loop() {
    let x = rand_t(&[4, 7], 5);
    let w = rand_t(&[6, 7], 6);
    let b = rand_t(&[6], 7);
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.input_ref(&x), g.input_ref(&w), g.input_ref(&b));
    let y = g.linear(xi, wi, bi).unwrap();
    let y = g.value(y).data().to_vec();
    for n in 0..4 {
        for o in 0..6 {
            let mut acc = b.data()[o];
            for i in 0..7 {
                acc += x.data()[n * 7 + i] * w.data()[o * 7 + i];
            }
            assert!((y[n * 6 + o] - acc).abs() < 1e-6);
        }
    }
}

#[test]
fn cross_entropy_matches_explicit_formula() {
    let x = rand_t(&[8, 20], 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..20)).collect();
    let mut g = Graph::new();
    let xi = g.input_ref(&x);
    let l = g.cross_entropy(xi, &targets).unwrap();
    let got = g.value(l).item();
    let want: f64 = x
        .data()
        .chunks(20)
        .zip(&targets)
        .map(|(row, &t)| -(row[t].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln())
        .sum::<f64>()
        / 8.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    let mut g = Graph::<f32>::new();
    let xi = g.input(Tensor::zeros(&[1, 100]));
    let l = g.cross_entropy(xi, &[0]).unwrap();
    assert!((g.value(l).item() - 100f32.ln()).abs() < 1e-5);
}

#[test]
fn conv_relu_maxpool_stack_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // inputs bounded away from the ReLU kink and from pooling ties
    let x: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01 + rng.random_range(0.0..0.005)).collect();
    let inputs = [
        Tensor::from_vec(&[2, 2, 6, 6], x).unwrap().with_requires_grad(true),
        rand_t(&[3, 2, 3, 3], 11).with_requires_grad(true),
        rand_t(&[3], 12).with_requires_grad(true),
    ];
    let p: Vec<f64> = Tensor::<f64>::randn(&[2 * 3 * 3 * 3], &mut rng).into_data();
    let r = grad_check(&inputs, 1e-5, |g, ids| {
        let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
        let y = g.relu(y)?;
        let y = g.maxpool2d(y, 2, 2)?;
        g.weighted_sum(y, &p)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.elements_checked > 0);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::randn(&[2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1)));
        let w = g.input(Tensor::randn(&[4, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(2)));
        let b = g.input(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn concat_then_slice_recovers_parts() {
    let a = rand_t(&[2, 3, 2, 2], 13);
    let b = rand_t(&[2, 5, 2, 2], 14);
    let mut g = Graph::new();
    let (ai, bi) = (g.input_ref(&a), g.input_ref(&b));
    let c = g.concat_channels(ai, bi).unwrap();
    let c = g.value(c);
    assert_eq!(c.shape(), &[2, 8, 2, 2]);
    assert_eq!(c.slice_channels(0, 3).unwrap().data(), a.data());
    assert_eq!(c.slice_channels(3, 8).unwrap().data(), b.data());
}

proptest! {
    #[test]
    fn window_shape_law(h in 1usize..12, w in 1usize..12, k in 1usize..5, s in 1usize..4, p in 0usize..3) {
        prop_assume!(k <= h + 2 * p && k <= w + 2 * p);
        let x = Tensor::<f64>::ones(&[1, 1, h, w]);
        let wt = Tensor::<f64>::ones(&[1, 1, k, k]);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.input_ref(&x), g.input_ref(&wt), g.input(Tensor::zeros(&[1])));
        let y = g.conv2d(xi, wi, bi, s, p).unwrap();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        prop_assert_eq!(g.shape(y), &[1, 1, ho, wo]);
        prop_assert_eq!(window_out(h, k, s, p), Some(ho));
        if k <= h && k <= w {
            let m = g.maxpool2d(xi, k, s).unwrap();
            prop_assert_eq!(g.shape(m), &[1, 1, (h - k) / s + 1, (w - k) / s + 1]);
        } else {
            prop_assert!(g.maxpool2d(xi, k, s).is_err());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, k in 1usize..30, seed in any::<u64>(), scale in 0.1f64..500.0) {
        let mut t = rand_t(&[rows, k], seed);
        for v in t.data_mut() {
            *v *= scale;
        }
        let s = softmax(&t);
        for row in s.data().chunks(k) {
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
