use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavemae::checkpoint::{Checkpoint, CheckpointError};
use wavemae::config::{ConfigError, RunConfig};
use wavemae::kernel::{ParamStore, Tensor};
use wavemae::model::Model;
use wavemae::signal::Modality;

fn tiny_store() -> (RunConfig, ParamStore) {
    let mut cfg = RunConfig::default();
    cfg.apply_preset("tiny").unwrap();
    let mut store = ParamStore::new();
    Model::new(&mut store, cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (cfg, store)
}

#[test]
fn checkpoint_roundtrip_is_bit_stable() {
    let (cfg, store) = tiny_store();
    let ck = Checkpoint::capture(&store, &cfg.to_text(), 42);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(back.step, 42);
    assert_eq!(RunConfig::parse(&back.config).unwrap(), cfg);

    // Restoring into a fresh model reproduces the f32-rounded values.
    let (_, mut other) = {
        let mut s = ParamStore::new();
        Model::new(&mut s, cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (cfg.clone(), s)
    };
    assert_eq!(back.restore(&mut other, None).unwrap(), store.len());
    let again = Checkpoint::capture(&other, &cfg.to_text(), 42);
    assert_eq!(again.to_bytes(), ck.to_bytes());
}

#[test]
fn checkpoint_rejects_damage() {
    let (cfg, store) = tiny_store();
    let bytes = Checkpoint::capture(&store, &cfg.to_text(), 1).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
}

#[test]
fn restore_checks_names_and_shapes() {
    let (cfg, store) = tiny_store();
    let mut ck = Checkpoint::capture(&store, &cfg.to_text(), 0);
    let mut target = store.clone();
    let n = ck.restore(&mut target, Some("encoder.")).unwrap();
    assert_eq!(n, store.iter().filter(|(_, p)| p.name.starts_with("encoder.")).count());
    ck.params[0].1 = Tensor::zeros(&[1]);
    assert!(matches!(ck.restore(&mut target, None), Err(CheckpointError::Mismatch(_))));
}

#[test]
fn config_lists_every_offender() {
    let text = "dim = 64\nwidht = 3\nlayers = two\nbatchsize = 8\nmask_ratio = 1.5\n";
    let Err(ConfigError::Invalid(msgs)) = RunConfig::parse(text) else { panic!("expected failure") };
    let all = msgs.join("\n");
    for key in ["widht", "batchsize", "layers"] {
        assert!(all.contains(key), "{key} missing from {all}");
    }
}

#[test]
fn config_reports_semantic_problems() {
    let Err(ConfigError::Invalid(msgs)) = RunConfig::parse("mask_ratio = 1.5\nbases = db4,nope\n") else { panic!() };
    let all = msgs.join("\n");
    assert!(all.contains("mask_ratio") && all.contains("nope"), "{all}");
}

#[test]
fn config_presets_and_echo() {
    let c = RunConfig::parse("preset = emg\n").unwrap();
    assert_eq!((c.modality, c.channels, c.fs, c.window, c.step), (Modality::Emg, 16, 2000.0, 1024, 512));
    assert_eq!(c.model_config().rows(), 64);
    let c = RunConfig::parse("preset = ecg\nsize = large\n").unwrap();
    assert_eq!((c.channels, c.levels, c.dim, c.layers, c.heads), (12, 4, 512, 12, 16));
    assert_eq!(c.model_config().rows(), 60);
    let echo = c.echo();
    assert!(echo.lines().all(|l| l.starts_with("# ")));
    let stripped: String = echo.lines().map(|l| format!("{}\n", &l[2..])).collect();
    assert_eq!(RunConfig::parse(&stripped).unwrap(), c);
}

#[test]
fn finetune_schedule_is_a_tenth() {
    let c = RunConfig::default();
    let (p, f) = (c.pretrain_schedule(), c.finetune_schedule());
    assert!((f.lr_peak - p.lr_peak / 10.0).abs() < 1e-20);
    assert!((f.lr_floor - p.lr_floor / 10.0).abs() < 1e-20);
}
