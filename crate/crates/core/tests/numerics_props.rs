use proptest::prelude::*;

use u2pp::numerics::{
    backward, layer_norm, log_softmax, log_sum_exp, masked_attention, softmax, AttentionMask, Graph, Tensor,
};

fn vec_strategy(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..max)
}

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn log_sum_exp_shift(v in vec_strategy(12), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = log_sum_exp(&shifted).unwrap();
        let b = log_sum_exp(&v).unwrap() + c;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized(v in vec_strategy(12), c in -200.0f64..200.0) {
        let p = softmax(&v);
        let q = softmax(&v.iter().map(|x| x + c).collect::<Vec<_>>());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let lsm = log_softmax(&v);
        let total = log_sum_exp(&lsm).unwrap();
        prop_assert!(total.abs() < 1e-12);
    }

    #[test]
    fn masked_keys_do_not_matter(
        data in prop::collection::vec(-3.0f64..3.0, 3 * 5 * 4),
        noise in prop::collection::vec(-5.0f64..5.0, 5 * 4),
        bits in prop::collection::vec(any::<bool>(), 3 * 5),
    ) {
        let (nq, nk, d) = (3, 5, 4);
        let q = tensor(nq, d, &data);
        let k = tensor(nk, d, &data[nq * d..]);
        let v = tensor(nk, d, &data[2 * d..]);
        let mask = AttentionMask::from_fn(nq, nk, |i, j| bits[i * nk + j]);
        let base = masked_attention(&q, &k, &v, &mask).unwrap();
        let masked_everywhere: Vec<usize> = (0..nk).filter(|&j| (0..nq).all(|i| !mask.allows(i, j))).collect();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for &j in &masked_everywhere {
            for c in 0..d {
                k2.data_mut()[j * d + c] += noise[j * d + c];
                v2.data_mut()[j * d + c] -= noise[j * d + c];
            }
        }
        let out = masked_attention(&q, &k2, &v2, &mask).unwrap();
        prop_assert_eq!(base, out);
    }

    #[test]
    fn layer_norm_standardizes(row in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let n = row.len();
        prop_assume!(row.iter().any(|x| (x - row[0]).abs() > 1e-3));
        let x = Tensor::new(vec![1, n], row).unwrap();
        let y = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 1e-12).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}

/// Central differences on a composite expression touching most ops.
#[test]
fn graph_gradients_match_finite_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let a0 = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w0 = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mask = AttentionMask::from_fn(3, 3, |i, j| j <= i);
        let f = |a: &Tensor, w: &Tensor, grads: bool| -> (f64, Option<(Tensor, Tensor)>) {
            let mut g = Graph::default();
            let a = g.param(a.clone());
            let w = g.param(w.clone());
            let h = g.matmul(a, w).unwrap();
            let h = g.act(h, u2pp::numerics::Activation::Swish);
            let s = g.matmul_nt(h, a).unwrap();
            let p = g.masked_softmax(s, &mask).unwrap();
            let o = g.matmul(p, h).unwrap();
            let o = g.log_softmax(o);
            let o = g.mul(o, o).unwrap();
            let loss = g.sum(o);
            let val = g.value(loss).item();
            if !grads {
                return (val, None);
            }
            let gr = backward(&g, loss).unwrap();
            (val, Some((gr.get(a).unwrap().clone(), gr.get(w).unwrap().clone())))
        };
        let (_, grads) = f(&a0, &w0, true);
        let (ga, gw) = grads.unwrap();
        let h = 1e-5;
        for (which, analytic) in [(0, &ga), (1, &gw)] {
            for i in 0..analytic.len() {
                let (mut a, mut w) = (a0.clone(), w0.clone());
                let t = if which == 0 { &mut a } else { &mut w };
                let orig = t.data()[i];
                t.data_mut()[i] = orig + h;
                let up = f(&a, &w, false).0;
                let t = if which == 0 { &mut a } else { &mut w };
                t.data_mut()[i] = orig - h;
                let down = f(&a, &w, false).0;
                let num = (up - down) / (2.0 * h);
                let an = analytic.data()[i];
                let err = (an - num).abs() / an.abs().max(num.abs()).max(1e-3);
                assert!(err < 1e-5, "entry {i}: {an} vs {num}");
            }
        }
    }
}
