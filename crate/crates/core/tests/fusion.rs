use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavemae::fusion::*;
use wavemae::kernel::{Graph, ParamStore, Tensor};
use wavemae::train::{train_probe, AdamW, ProbeOptions};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn identical_tokens_pool_to_themselves() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let t = [0.5, -1.25, 3.0];
    let x = g.constant(Tensor::new(vec![4, 3], t.repeat(4)).unwrap());
    let p = mean_pool(&mut g, x).unwrap();
    assert_eq!(g.shape(p), &[1, 3]);
    for (a, b) in g.value(p).data().iter().zip(t) {
        assert!((a - b).abs() < 1e-15);
    }
    let empty = g.constant(Tensor::zeros(&[0, 3]));
    assert!(mean_pool(&mut g, empty).is_err());
}

#[test]
fn head_shapes_and_zero_head() {
    let mut store = ParamStore::new();
    let head = ClassHead::new(&mut store, "h.", HeadConfig::new(8, 3), &mut rng(0)).unwrap();
    assert_eq!(head.config.hidden, 16);
    let lat = Tensor::randn(&[5, 8], 1.0, &mut rng(1));
    {
        let mut g = Graph::new(&store);
        let x = g.constant(lat.clone());
        let z = head.pool_and_classify(&mut g, x).unwrap();
        assert_eq!(g.shape(z), &[1, 3]);
    }
    for lin in [&head.fc1, &head.fc2] {
        for id in [lin.w, lin.b] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }
    let mut g = Graph::new(&store);
    let x = g.constant(lat);
    let z = head.pool_and_classify(&mut g, x).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    for p in softmax(g.value(z).data()) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(ClassHead::new(&mut ParamStore::new(), "h.", HeadConfig::new(8, 1), &mut rng(0)).is_err());
}

#[test]
fn fusion_examples() {
    let z = vec![vec![1.0, -2.0, 0.5]];
    assert_eq!(fuse_logits(&z, &[0.3]).unwrap(), z[0]);

    let z1 = vec![4.0, 0.0];
    let z2 = vec![0.0, 8.0];
    let f = fuse_logits(&[z1, z2], &[3f64.ln(), 0.0]).unwrap();
    assert!((f[0] - 3.0).abs() < 1e-12 && (f[1] - 2.0).abs() < 1e-12);
    assert!(fuse_logits(&[vec![1.0], vec![1.0, 2.0]], &[0.0, 0.0]).is_err());
    assert!(fuse_logits(&[vec![1.0]], &[0.0, 0.0]).is_err());
}

#[test]
fn graph_fusion_matches_the_closed_form() {
    let mut store = ParamStore::new();
    let fs = FusionState::new(&mut store, "f.", vec!["a".into(), "b".into()]).unwrap();
    store.get_mut(fs.logits).value = Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
    let alpha = fs.alpha(&store);
    assert!((alpha[0] - 0.75).abs() < 1e-15 && (alpha[1] - 0.25).abs() < 1e-15);
    let a = Tensor::randn(&[2, 3], 1.0, &mut rng(2));
    let b = Tensor::randn(&[2, 3], 1.0, &mut rng(3));
    let mut g = Graph::new(&store);
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let f = fs.fuse(&mut g, &[va, vb]).unwrap();
    for ((x, y), z) in a.data().iter().zip(b.data()).zip(g.value(f).data()) {
        assert!((0.75 * x + 0.25 * y - z).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn fusion_is_a_superposition(
        z in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..5),
        w in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let w = &w[..z.len()];
        let alpha = softmax(w);
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let f = fuse_logits(&z, w).unwrap();
        for j in 0..4 {
            let want: f64 = alpha.iter().zip(&z).map(|(a, v)| a * v[j]).sum();
            prop_assert!((f[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ignores_shifts_and_positive_scales(
        z in prop::collection::vec(-5.0f64..5.0, 2..8),
        c in -10.0f64..10.0,
        s in 0.1f64..10.0,
    ) {
        let moved: Vec<f64> = z.iter().map(|v| s * v + c).collect();
        prop_assert_eq!(argmax(&moved), argmax(&z));
    }
}

#[test]
fn probe_learns_and_leaves_frozen_parameters_alone() {
    // Branch "good" separates the classes, branch "noise" does not.
    let mut r = rng(4);
    let (s, d) = (60, 6);
    let labels: Vec<usize> = (0..s).map(|i| i % 2).collect();
    let mut good = Tensor::randn(&[s, d], 0.3, &mut r);
    for (i, &y) in labels.iter().enumerate() {
        good.row_mut(i)[0] += if y == 0 { 2.0 } else { -2.0 };
    }
    let noise = Tensor::randn(&[s, d], 1.0, &mut r);
    let mut store = ParamStore::new();
    let frozen = store.add("encoder.frozen", Tensor::full(&[3], 0.5)).unwrap();
    store.get_mut(frozen).trainable = false;
    let branches = vec![
        Branch::Features { name: "good".into(), features: good },
        Branch::Features { name: "noise".into(), features: noise },
    ];
    let probe = Probe::new(&mut store, branches, 2, 0, &mut rng(5)).unwrap();
    let idx: Vec<usize> = (0..s).collect();
    let opts = ProbeOptions { epochs: 40, lr: 1e-2, batch: 8, seed: 0 };
    let losses = train_probe(&probe, &mut store, &idx, &labels, &opts, AdamW::new(0.9, 0.98, 1e-8, 0.0)).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    assert!(probe.accuracy(&store, &idx, &labels).unwrap() > 0.95);
    let alpha = probe.fusion.alpha(&store);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(store.value(frozen).data(), &[0.5, 0.5, 0.5]);
}

#[test]
fn external_logits_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ext.csv");
    let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let z = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.0, -0.25, 1e-3]).unwrap();
    write_external_logits(&path, &ids, &z).unwrap();
    let (back_ids, back) = read_external_logits(&path).unwrap();
    assert_eq!(back_ids, ids);
    assert_eq!(back, z);
    std::fs::write(&path, "sample_id,z_0,z_1\na,1,2\nb,3\n").unwrap();
    assert!(read_external_logits(&path).is_err());

    let mut store = ParamStore::new();
    let ext = Branch::External { name: "ext".into(), logits: z.clone() };
    assert!(Probe::new(&mut store, vec![ext], 3, 0, &mut rng(0)).is_err());
}
