use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavemae::config::RunConfig;
use wavemae::fusion::{ClassHead, HeadConfig};
use wavemae::kernel::{set_precision, ParamStore, Precision, Tensor};
use wavemae::model::Model;
use wavemae::signal::Modality;
use wavemae::synth::SynthSpec;
use wavemae::train::*;

#[test]
fn schedule_landmarks() {
    let s = Schedule::default();
    assert_eq!(s.lr_at(0.0), 5e-7);
    assert_eq!(s.lr_at(10.0), 5e-5);
    assert_eq!(s.lr_at(50.0), 1e-6);
    assert!((s.lr_at(5.0) - (5e-7 + 0.5 * (5e-5 - 5e-7))).abs() < 1e-18);
    assert!((s.lr_at(30.0) - (1e-6 + 0.5 * (5e-5 - 1e-6))).abs() < 1e-15);
}

#[test]
fn schedule_is_continuous_at_the_peak() {
    let s = Schedule::default();
    let d = 1e-9;
    assert!((s.lr_at(10.0 - d) - 5e-5).abs() < 1e-12);
    assert!((s.lr_at(10.0 + d) - 5e-5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn schedule_nonincreasing_after_peak(a in 10.0f64..50.0, b in 10.0f64..50.0) {
        let s = Schedule::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
        prop_assert!(s.lr_at(lo) <= 5e-5 && s.lr_at(hi) >= 1e-6);
    }

    #[test]
    fn clipping_never_grows_gradients(g in prop::collection::vec(-10.0f64..10.0, 1..40), max in 0.1f64..5.0) {
        let mut store = ParamStore::new();
        let n = g.len();
        let id = store.add("w", Tensor::zeros(&[n])).unwrap();
        store.get_mut(id).grad = Tensor::vector(g.clone());
        clip_global_norm(&mut store, max);
        let after = store.value(id).len();
        prop_assert_eq!(after, n);
        for (a, b) in store.get(id).grad.data().iter().zip(&g) {
            prop_assert!(a.abs() <= b.abs());
        }
        prop_assert!(store.global_grad_norm() <= max + 1e-9);
    }
}

fn one_param(value: Tensor, grad: Tensor) -> (ParamStore, wavemae::kernel::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("w", value).unwrap();
    store.get_mut(id).grad = grad;
    (store, id)
}

#[test]
fn first_adam_step_is_normalised() {
    let (mut store, id) = one_param(Tensor::vector(vec![1.0, -2.0, 0.5]), Tensor::vector(vec![0.3, -4.0, 1e-3]));
    let before = store.value(id).clone();
    let mut opt = AdamW::new(0.9, 0.98, 1e-8, 0.0);
    opt.step(&mut store, 0.1).unwrap();
    for j in 0..3 {
        let g = store.get(id).grad.data()[j];
        let want = before.data()[j] - 0.1 * g / (g.abs() + 1e-8);
        assert!((store.value(id).data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn decoupled_decay_with_zero_gradient() {
    let (mut store, id) = one_param(Tensor::full(&[2, 2], 3.0), Tensor::zeros(&[2, 2]));
    AdamW::new(0.9, 0.98, 1e-8, 0.01).step(&mut store, 0.5).unwrap();
    for &v in store.value(id).data() {
        assert!((v - 3.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }
}

#[test]
fn frozen_parameters_are_untouched() {
    let (mut store, id) = one_param(Tensor::full(&[2, 2], 3.0), Tensor::full(&[2, 2], 1.0));
    store.get_mut(id).trainable = false;
    AdamW::new(0.9, 0.98, 1e-8, 0.01).step(&mut store, 0.5).unwrap();
    assert_eq!(store.value(id).data(), &[3.0; 4]);
}

#[test]
fn non_finite_gradient_aborts_the_step() {
    let (mut store, id) = one_param(Tensor::full(&[2], 1.0), Tensor::vector(vec![0.5, f64::NAN]));
    let err = AdamW::new(0.9, 0.98, 1e-8, 0.0).step(&mut store, 0.1).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains('w'));
    assert_eq!(store.value(id).data(), &[1.0, 1.0]);
}

#[test]
fn adam_descends_a_quadratic() {
    let (mut store, id) = one_param(Tensor::vector(vec![0.0]), Tensor::zeros(&[1]));
    let mut opt = AdamW::new(0.9, 0.98, 1e-8, 0.0);
    let loss = |w: f64| (w - 3.0) * (w - 3.0);
    let mut prev = loss(0.0);
    for _ in 0..100 {
        let w = store.value(id).data()[0];
        store.get_mut(id).grad = Tensor::vector(vec![2.0 * (w - 3.0)]);
        opt.step(&mut store, 1e-2).unwrap();
        let l = loss(store.value(id).data()[0]);
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn clipping_examples() {
    let (mut store, id) = one_param(Tensor::zeros(&[2]), Tensor::vector(vec![3.6, 4.8]));
    assert_eq!(clip_global_norm(&mut store, 3.0), 0.5);
    assert!((store.global_grad_norm() - 3.0).abs() < 1e-12);
    store.get_mut(id).grad = Tensor::vector(vec![0.6, 0.8]);
    assert_eq!(clip_global_norm(&mut store, 3.0), 1.0);
    assert_eq!(store.get(id).grad.data(), &[0.6, 0.8]);
    store.get_mut(id).grad = Tensor::zeros(&[2]);
    assert_eq!(clip_global_norm(&mut store, 3.0), 1.0);
}

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_preset("tiny").unwrap();
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.dec_dim = 16;
    cfg.dec_heads = 2;
    cfg.layers = 1;
    cfg.dec_layers = 1;
    cfg.batch = 2;
    cfg.max_steps = 3;
    cfg.lr_peak = 1e-3;
    cfg
}

fn corpus(n: usize) -> Vec<Tensor> {
    let (w, _) = SynthSpec::preset(Modality::Synth, 3, n.div_ceil(3), 5).generate().unwrap();
    windows_of(&w).into_iter().take(n).collect()
}

fn run_pretrain(cfg: &RunConfig, data: &[Tensor]) -> (Vec<MetricsRow>, ParamStore) {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let mut m = Metrics::memory();
    pretrain_with(&model, &mut store, data, &PretrainOptions::from_config(cfg, false), &mut m, AdamW::from_config(cfg)).unwrap();
    (m.rows, store)
}

#[test]
fn pretraining_is_deterministic_and_finite() {
    set_precision(Precision::F64);
    let cfg = tiny_cfg();
    let data = corpus(6);
    let (a, store) = run_pretrain(&cfg, &data);
    let (b, _) = run_pretrain(&cfg, &data);
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    assert!(store.iter().all(|(_, p)| p.value.is_finite()));
    for w in a.windows(2) {
        assert!(w[1].step == w[0].step + 1 && w[1].epoch > w[0].epoch);
    }
}

#[test]
fn ablation_flag_disables_energy_guidance() {
    let cfg = tiny_cfg();
    assert_eq!(PretrainOptions::from_config(&cfg, true).blend, 0.0);
    assert_eq!(PretrainOptions::from_config(&cfg, false).blend, cfg.importance);
}

#[test]
fn threads_do_not_change_the_trajectory_much() {
    let mut cfg = tiny_cfg();
    let data = corpus(6);
    let (a, _) = run_pretrain(&cfg, &data);
    cfg.threads = 2;
    let (b, _) = run_pretrain(&cfg, &data);
    for (x, y) in a.iter().zip(&b) {
        assert!((x.loss - y.loss).abs() < 1e-9 * x.loss.abs().max(1.0));
    }
}

#[test]
fn metrics_stream_has_echo_and_header() {
    let cfg = tiny_cfg();
    let mut buf: Vec<u8> = Vec::new();
    {
        let mut m = Metrics::new(Some(&mut buf), &cfg.echo(), false).unwrap();
        m.push(MetricsRow { step: 1, epoch: 0.5, lr: 1e-4, loss: 0.25, val_acc: None }).unwrap();
    }
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.iter().take_while(|l| l.starts_with('#')).count() == RunConfig::KEYS.len());
    assert!(lines.contains(&"step,epoch,lr,loss"));
    assert!(lines.last().unwrap().starts_with("1,0.5"));
}

#[test]
fn layer_decay_scales_by_depth() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut store, cfg.model_config(), &mut rng).unwrap();
    let head = ClassHead::new(&mut store, "head.", HeadConfig::new(16, 3), &mut rng).unwrap();
    apply_layer_decay(&model, &head, &mut store, 0.9);
    // One encoder block: embeddings at depth 0, block at 1, norm and head at 2.
    let scale = |name: &str| store.get(store.id(name).unwrap()).lr_scale;
    assert!((scale("encoder.embed.proj") - 0.81).abs() < 1e-15);
    assert!((scale("encoder.block0.q.w") - 0.9).abs() < 1e-15);
    assert_eq!(scale("encoder.norm.gamma"), 1.0);
    assert_eq!(scale("head.fc2.w"), 1.0);
}

#[test]
fn finetune_trains_and_restores_best() {
    set_precision(Precision::F64);
    let mut cfg = tiny_cfg();
    cfg.max_steps = 0;
    cfg.ft_epochs = 2.0;
    cfg.lr_peak = 1e-2;
    let (w, labels) = SynthSpec::preset(Modality::Synth, 3, 4, 2).generate().unwrap();
    let set = LabeledSet::new(windows_of(&w), labels, 3).unwrap();
    let (train, val) = set.split(0.25, 0);
    assert_eq!((train.len(), val.len()), (9, 3));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut store, cfg.model_config(), &mut rng).unwrap();
    let head = ClassHead::new(&mut store, "head.", HeadConfig::new(16, 3), &mut rng).unwrap();
    let dec_before = store.value(model.head.w).clone();
    let mut m = Metrics::memory();
    let out = finetune(&model, &head, &mut store, &train, &val, &FinetuneOptions::from_config(&cfg), &mut m, AdamW::from_config(&cfg)).unwrap();
    assert_eq!(out.epochs_run, 2);
    assert_eq!(m.rows.len(), 2);
    assert!(m.rows.iter().all(|r| r.val_acc.is_some()));
    assert_eq!(store.value(model.head.w), &dec_before);
    let (loss, acc) = evaluate(&model, &head, &store, &val).unwrap();
    assert!((loss - out.best_val_loss).abs() < 1e-12);
    assert_eq!(acc, out.best_val_acc);
}

#[test]
fn labeled_set_validation() {
    assert!(LabeledSet::new(vec![Tensor::zeros(&[1, 2])], vec![0], 1).is_err());
    assert!(LabeledSet::new(vec![Tensor::zeros(&[1, 2])], vec![3], 2).is_err());
    assert!(LabeledSet::new(vec![Tensor::zeros(&[1, 2])], vec![], 2).is_err());
}
