use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavemae::kernel::{grad_check, GradCheckOptions, Graph, ParamId, ParamStore, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes.iter().map(|(n, s)| store.add(*n, rand_tensor(&mut rng, s)).unwrap()).collect();
    (store, ids)
}

fn check(store: &mut ParamStore, ids: &[ParamId], f: impl Fn(&mut Graph<'_>) -> wavemae::kernel::KernelResult<wavemae::kernel::Var>) -> f64 {
    let opts = GradCheckOptions { samples_per_param: 24, ..Default::default() };
    grad_check(store, ids, &opts, f).unwrap().max_rel_err
}

/// Random projection so every output element contributes to the scalar.
fn weighted_sum(g: &mut Graph<'_>, x: wavemae::kernel::Var, seed: u64) -> wavemae::kernel::KernelResult<wavemae::kernel::Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

fn naive_down2(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let kl = k.shape()[1];
    let mut out = Vec::new();
    for ch in 0..c {
        for n in 0..t / 2 {
            let mut s = 0.0;
            for u in 0..kl {
                let idx = 2 * n + u;
                let xv = if idx < t { x.get2(ch, idx) } else { 0.0 };
                s += xv * k.get2(ch, u);
            }
            out.push(s);
        }
    }
    out
}

#[test]
fn affine_identity_and_hand_product() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::eye(2)).unwrap();
    let b = s.add("b", Tensor::zeros(&[2])).unwrap();
    let w2 = s.add("w2", Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
    let b2 = s.add("b2", Tensor::zeros(&[1])).unwrap();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::eye(2));
    let (w, b) = (g.param(w), g.param(b));
    let y = g.affine(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &Tensor::eye(2));
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let (w2, b2) = (g.param(w2), g.param(b2));
    let y = g.affine(x, w2, Some(b2)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0]);
}

#[test]
fn affine_gradients() {
    let (mut s, ids) = store_with(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])], 1);
    let err = check(&mut s, &ids, |g| {
        let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.affine(x, w, Some(b))?;
        g.sum_all(y)
    });
    assert!(err < 1e-4, "affine rel err {err}");
}

#[test]
fn affine_shape_mismatch() {
    let (s, ids) = store_with(&[("x", &[3, 4]), ("w", &[5, 2])], 2);
    let mut g = Graph::new(&s);
    let (x, w) = (g.param(ids[0]), g.param(ids[1]));
    assert!(g.affine(x, w, None).is_err());
}

#[test]
fn down2_haar_constant() {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::full(&[2, 8], 3.0));
    let k = g.constant(Tensor::from_rows(&[vec![h, h], vec![h, h]]).unwrap());
    let y = g.conv1d_depthwise_down2(x, k).unwrap();
    for v in g.value(y).data() {
        assert!((v - 3.0 * 2f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn down2_lengths_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    for &(t, kl) in &[(1024usize, 16usize), (37, 5), (10, 10)] {
        let xt = rand_tensor(&mut rng, &[3, t]);
        let kt = rand_tensor(&mut rng, &[3, kl]);
        let want = naive_down2(&xt, &kt);
        let x = g.constant(xt);
        let k = g.constant(kt);
        let y = g.conv1d_depthwise_down2(x, k).unwrap();
        assert_eq!(g.shape(y), &[3, t / 2]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn down2_gradients() {
    let (mut s, ids) = store_with(&[("x", &[2, 19]), ("k", &[2, 6])], 4);
    let err = check(&mut s, &ids, |g| {
        let (x, k) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.conv1d_depthwise_down2(x, k)?;
        weighted_sum(g, y, 9)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn upsample_definition_and_index_oracle() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap());
    let y = g.upsample_nearest2(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 1.5, -2.0, -2.0]);
    let c = g.constant(Tensor::full(&[1, 5], 0.7));
    let y = g.upsample_nearest2(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    // down-by-two of an up-by-two signal picks back every original sample
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&mut rng, &[2, 16]);
    let x = g.constant(xt.clone());
    let up = g.upsample_nearest2(x).unwrap();
    let pick = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
    let back = g.conv1d_depthwise_down2(up, pick).unwrap();
    let upv = g.value(up);
    for ch in 0..2 {
        for n in 0..32 {
            assert_eq!(upv.get2(ch, n), xt.get2(ch, n / 2));
        }
    }
    assert_eq!(g.value(back), &xt);
}

#[test]
fn upsample_and_segment_gradients() {
    let (mut s, ids) = store_with(&[("x", &[3, 8])], 6);
    let err = check(&mut s, &ids, |g| {
        let x = g.param(ids[0]);
        let u = g.upsample_nearest(x, 4)?;
        let m = g.segment_mean(u, 8)?;
        let u2 = g.upsample_nearest2(m)?;
        weighted_sum(g, u2, 1)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softmax_examples() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let z = g.constant(Tensor::zeros(&[4]));
    let p = g.softmax(z).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let z = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let p = g.softmax(z).unwrap();
    assert!((g.value(p).data()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((g.value(p).data()[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_gradients() {
    let (mut s, ids) = store_with(&[("x", &[3, 5])], 7);
    let err = check(&mut s, &ids, |g| {
        let x = g.param(ids[0]);
        let y = g.softmax(x)?;
        weighted_sum(g, y, 2)
    });
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #[test]
    fn softmax_simplex_and_shift(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(v.clone()));
        let xs = g.constant(Tensor::vector(v.iter().map(|a| a + c).collect()));
        let p = g.softmax(x).unwrap();
        let q = g.softmax(xs).unwrap();
        let pv = g.value(p);
        prop_assert!((pv.sum() - 1.0).abs() < 1e-6);
        prop_assert!(pv.data().iter().all(|&a| a > 0.0));
        prop_assert!(pv.max_abs_diff(g.value(q)) < 1e-12);
    }

    #[test]
    fn down2_matches_naive(t in 2usize..64, kl in 2usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&mut rng, &[2, t]);
        let kt = rand_tensor(&mut rng, &[2, kl]);
        let want = naive_down2(&xt, &kt);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(xt);
        let k = g.constant(kt);
        let y = g.conv1d_depthwise_down2(x, k).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut s = ParamStore::new();
    let gm = s.add("g", Tensor::full(&[3], 1.0)).unwrap();
    let bt = s.add("b", Tensor::zeros(&[3])).unwrap();
    let mut g = Graph::new(&s);
    let (gm, bt) = (g.param(gm), g.param(bt));
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 4.0, 4.0]]).unwrap());
    let y = g.layer_norm(x, gm, bt).unwrap();
    let r0 = g.value(y).row(0);
    let mean: f64 = r0.iter().sum::<f64>() / 3.0;
    let var: f64 = r0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);
    assert!(g.value(y).row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradients() {
    let (mut s, ids) = store_with(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 8);
    let err = check(&mut s, &ids, |g| {
        let (x, gm, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.layer_norm(x, gm, b)?;
        weighted_sum(g, y, 3)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attention_single_key_and_identical_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let q = g.constant(rand_tensor(&mut rng, &[1, 8]));
    let k = g.constant(rand_tensor(&mut rng, &[1, 8]));
    let vt = rand_tensor(&mut rng, &[1, 8]);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v, 2).unwrap();
    assert!(g.value(o).max_abs_diff(&vt) < 1e-15);

    let q = g.constant(rand_tensor(&mut rng, &[5, 8]));
    let k = g.constant(rand_tensor(&mut rng, &[7, 8]));
    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
    let v = g.constant(Tensor::from_rows(&vec![row.clone(); 7]).unwrap());
    let o = g.attention(q, k, v, 4).unwrap();
    for r in 0..5 {
        for (a, b) in g.value(o).row(r).iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(g.attention(q, k, v, 3).is_err());
}

#[test]
fn rope_relative_shift_and_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let dh = 16;
    for _ in 0..20 {
        let qt = rand_tensor(&mut rng, &[1, dh]);
        let kt = rand_tensor(&mut rng, &[1, dh]);
        let (m, n) = (rng.gen_range(0..200) as f64, rng.gen_range(0..200) as f64);
        let shift = rng.gen_range(0..500) as f64;
        let q = g.constant(qt.clone());
        let k = g.constant(kt);
        let dot = |g: &mut Graph<'_>, pm: f64, pn: f64| {
            let a = g.rope(q, 1, &[pm]).unwrap();
            let b = g.rope(k, 1, &[pn]).unwrap();
            g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let d0 = dot(&mut g, m, n);
        let d1 = dot(&mut g, m + shift, n + shift);
        assert!((d0 - d1).abs() < 1e-10, "{d0} vs {d1}");
        let r = g.rope(q, 2, &[m]).unwrap();
        for h in 0..2 {
            let a: f64 = qt.data()[h * 8..(h + 1) * 8].iter().map(|v| v * v).sum();
            let b: f64 = g.value(r).data()[h * 8..(h + 1) * 8].iter().map(|v| v * v).sum();
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-10);
        }
        let z = g.rope(q, 1, &[0.0]).unwrap();
        assert_eq!(g.value(z), &qt);
    }
    let odd = g.constant(Tensor::zeros(&[1, 6]));
    assert!(g.rope(odd, 2, &[0.0]).is_err());
}

#[test]
fn attention_with_rope_gradients() {
    let (mut s, ids) = store_with(&[("q", &[5, 8]), ("k", &[6, 8]), ("v", &[6, 8])], 11);
    let err = check(&mut s, &ids, |g| {
        let (q, k, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let qr = g.rope(q, 2, &[0.0, 1.0, 2.0, 3.0, 4.0])?;
        let kr = g.rope(k, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])?;
        let o = g.attention(qr, kr, v, 2)?;
        weighted_sum(g, o, 4)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn smooth_l1_examples() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let l = g.smooth_l1(a, a).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let p = g.constant(Tensor::vector(vec![3.0]));
    let t = g.constant(Tensor::vector(vec![1.0]));
    let l = g.smooth_l1(p, t).unwrap();
    assert!((g.scalar(l) - 1.5).abs() < 1e-15);
    let p = g.constant(Tensor::vector(vec![0.5]));
    let t = g.constant(Tensor::vector(vec![0.0]));
    let l = g.smooth_l1(p, t).unwrap();
    assert!((g.scalar(l) - 0.125).abs() < 1e-15);
    let bad = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(g.smooth_l1(p, bad).is_err());
}

#[test]
fn smooth_l1_and_cross_entropy_gradients() {
    let (mut s, ids) = store_with(&[("p", &[3, 4]), ("t", &[3, 4])], 12);
    let err = check(&mut s, &ids, |g| {
        let (p, t) = (g.param(ids[0]), g.param(ids[1]));
        let p2 = g.scale(p, 3.0)?; // exercise both branches of the piecewise loss
        g.smooth_l1(p2, t)
    });
    assert!(err < 1e-4, "{err}");
    let targets = Tensor::from_rows(&[vec![0.9, 0.05, 0.05, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.25; 4]]).unwrap();
    let err = check(&mut s, &ids[..1], |g| {
        let p = g.param(ids[0]);
        g.cross_entropy(p, &targets)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn structural_and_channel_ops_gradients() {
    let (mut s, ids) = store_with(
        &[("x", &[4, 9]), ("v", &[4]), ("k", &[4, 3]), ("tok", &[9]), ("sc", &[1]), ("y", &[2, 9]), ("m", &[9, 3])],
        13,
    );
    let err = check(&mut s, &ids, |g| {
        let x = g.param(ids[0]);
        let v = g.param(ids[1]);
        let k = g.param(ids[2]);
        let tok = g.param(ids[3]);
        let sc = g.param(ids[4]);
        let y = g.param(ids[5]);
        let m = g.param(ids[6]);
        let a = g.mul_col(x, v)?;
        let a = g.add_col(a, v)?;
        let a = g.conv1d_depthwise_same(a, k)?;
        let a = g.gelu(a)?;
        let a = g.sigmoid(a)?;
        let a = g.mul_scalar(a, sc)?;
        let a = g.add_row(a, tok)?;
        let a = g.concat_rows(&[a, y])?;
        let a = g.replace_rows(a, tok, &[true, false, true, true, false, true])?;
        let a = g.gather_rows(a, &[5, 0, 0, 3])?;
        let b = g.slice_rows(a, 1, 2)?;
        let nb = g.narrow_cols(b, 2, 3)?;
        let nb = g.upsample_nearest(nb, 3)?;
        let b = g.add(b, nb)?;
        let b = g.transpose(b)?;
        let b = g.transpose(b)?;
        let c = g.matmul(b, m)?;
        let c = g.reshape(c, &[3, 2])?;
        let d = g.mean_last(c)?;
        let e = g.sum_last(a)?;
        let f = g.sub(e, e)?;
        let f = g.add(f, e)?;
        let l1 = weighted_sum(g, d, 5)?;
        let l2 = weighted_sum(g, f, 6)?;
        g.add(l1, l2)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn harness_detects_corrupted_gradient() {
    let (mut s, ids) = store_with(&[("x", &[3, 4]), ("w", &[4, 2])], 14);
    let opts = GradCheckOptions { corrupt: Some(0.10), ..Default::default() };
    let rep = grad_check(&mut s, &ids, &opts, |g| {
        let (x, w) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.affine(x, w, None)?;
        weighted_sum(g, y, 7)
    })
    .unwrap();
    assert!(rep.max_rel_err > 1e-2, "{rep:?}");
}

#[test]
fn non_finite_is_an_error() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::vector(vec![1e308]));
    assert!(g.scale(x, 10.0).is_err());
}

#[test]
fn parameter_used_twice_accumulates() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::vector(vec![2.0])).unwrap();
    let mut g = Graph::new(&s);
    let a = g.param(w);
    let b = g.param(w);
    let p = g.mul(a, b).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[4.0]);
    s.accumulate(&grads);
    s.accumulate(&grads);
    assert_eq!(s.get(w).grad.data(), &[8.0]);
    s.zero_grad();
    assert_eq!(s.get(w).grad.data(), &[0.0]);
}
