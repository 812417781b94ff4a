use mam_core::align::AlignMethod;
use mam_core::data::{generate_synthetic, PairScaler, SyntheticSystem};
use mam_core::error::Error;
use mam_core::trainer::{load_checkpoint, save_checkpoint, StepOutcome, TrainConfig, TrainLog, Trainer};
use ndarray::{s, Array3};

fn normalized(n: usize, len: usize, seed: u64) -> mam_core::data::Dataset {
    let out = generate_synthetic(&SyntheticSystem::default(), n, len, seed).unwrap();
    PairScaler::fit(&out.dataset).unwrap().apply(&out.dataset)
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::desk(6, 4);
    for d in [&mut c.denoiser_x, &mut c.denoiser_y] {
        d.d_model = 16;
        d.d_latent = 16;
        d.d_ff = 32;
        d.n_layers_enc = 1;
        d.n_layers_dec = 1;
        d.max_len = 32;
    }
    c.batch_size = 4;
    c.lr_x = 1e-3;
    c.lr_y = 1e-3;
    c
}

#[test]
fn identical_seeds_give_identical_loss_logs() {
    let data = normalized(16, 32, 0);
    let run = || {
        let mut c = small_config();
        c.max_steps = Some(10);
        c.epochs = 10;
        let mut tr = Trainer::new(c).unwrap();
        tr.fit(&data, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    let bits = |v: &[mam_core::objective::LossBreakdown]| v.iter().map(|x| x.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let mut other = small_config();
    other.seed = 1;
    other.max_steps = Some(10);
    let c = Trainer::new(other).unwrap().fit(&data, None).unwrap();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let data = normalized(12, 32, 1);
    let scaler_src = generate_synthetic(&SyntheticSystem::default(), 12, 32, 1).unwrap();
    let scaler = PairScaler::fit(&scaler_src.dataset).unwrap();
    let mut c = small_config();
    c.max_steps = Some(3);
    let mut tr = Trainer::new(c).unwrap();
    tr.fit(&data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &tr, Some(&scaler), serde_json::json!({"note": 1})).unwrap();
    let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.step, 3);
    assert_eq!(manifest.scaler.as_ref(), Some(&scaler));
    assert_eq!(loaded.model_x.params, tr.model_x.params);
    assert_eq!(loaded.ema_y, tr.ema_y);
    assert_eq!(loaded.opt_x, tr.opt_x);

    let (x, y) = data.stack(&[0, 1]);
    let t = [7, 40];
    let before = tr.model_x.denoise_forward(&x, &y, &t).unwrap();
    let after = loaded.model_x.denoise_forward(&x, &y, &t).unwrap();
    assert!(before
        .0
        .iter()
        .zip(after.0.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    // resuming continues the step counter and the exact trajectory
    let (mut resumed, _) = load_checkpoint(dir.path()).unwrap();
    let batch = data.stack(&[2, 3, 4, 5]);
    let StepOutcome::Applied(r) = resumed.train_step(&batch.0, &batch.1).unwrap() else {
        panic!()
    };
    let StepOutcome::Applied(o) = tr.train_step(&batch.0, &batch.1).unwrap() else {
        panic!()
    };
    assert_eq!(r, o);
    assert_eq!(resumed.step, 4);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let tr = Trainer::new(small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &tr, None, serde_json::Value::Null).unwrap();
    let arrays = dir.path().join("arrays.bin");
    let bytes = std::fs::read(&arrays).unwrap();
    std::fs::write(&arrays, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corrupt { .. })));
    std::fs::write(&arrays, &bytes).unwrap();
    assert!(load_checkpoint(dir.path()).is_ok());

    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1),
    )
    .unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::SchemaVersion { found: 2, .. })
    ));
}

#[test]
fn training_log_has_one_row_per_applied_step() {
    let data = normalized(8, 32, 2);
    let mut c = small_config();
    c.epochs = 2;
    let mut tr = Trainer::new(c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train_log.csv");
    let mut log = TrainLog::open(&path).unwrap();
    let history = tr.fit(&data, Some(&mut log)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), history.len() + 1);
    assert_eq!(
        text.lines().next().unwrap(),
        "step,denoise_x,denoise_y,energy_x,energy_y,align,alpha_effective,total"
    );
}

#[test]
fn single_sample_overfits() {
    let data = normalized(1, 64, 3);
    let mut c = TrainConfig::desk(6, 4);
    c.alignment.method = AlignMethod::None;
    c.batch_size = 1;
    c.lr_x = 1e-3;
    c.lr_y = 1e-3;
    c.epochs = 500;
    let mut tr = Trainer::new(c).unwrap();
    let history = tr.fit(&data, None).unwrap();
    assert_eq!(history.len(), 500);
    let first = history[0].denoise_x;
    // t is resampled every step, so average the tail to smooth it
    let tail: f64 = history[490..].iter().map(|b| b.denoise_x).sum::<f64>() / 10.0;
    assert!(first / tail >= 10.0, "first {first:.5} tail {tail:.5}");
}

#[test]
fn ema_weights_drive_evaluation() {
    let data = normalized(8, 32, 4);
    let mut c = small_config();
    c.ema_decay = 0.5;
    c.max_steps = Some(2);
    let mut tr = Trainer::new(c).unwrap();
    let init = tr.model_x.params.clone();
    tr.fit(&data, None).unwrap();
    let (ex, _) = tr.ema_models().unwrap();
    assert_eq!(ex.params, tr.ema_x);
    assert_ne!(ex.params, tr.model_x.params);
    assert_ne!(ex.params, init);
    let x: Array3<f64> = data.stack(&[0]).0;
    assert!(ex
        .encode(&x, &[1])
        .unwrap()
        .slice(s![0, .., ..])
        .iter()
        .all(|v| v.is_finite()));
}
