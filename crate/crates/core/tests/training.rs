use hiermds::container::Container;
use hiermds::data::{gen_synthetic, MultiDocExample, SyntheticSpec};
use hiermds::decode::GenerationConfig;
use hiermds::train::{adam_step, load_checkpoint, save_checkpoint, OptimizerState, TrainConfig, Trainer};
use hiermds::vocab::Vocabulary;
use hiermds::{Error, ModelConfig, Seq2Seq, Tensor};

fn setup(count: usize) -> (ModelConfig, Vec<MultiDocExample>) {
    let raw: Vec<_> = gen_synthetic(SyntheticSpec {
        seed: 4,
        count,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .collect();
    let vocab = Vocabulary::build(&raw, 1).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_positions: 32,
        src_trunc: 32,
        tgt_trunc: 16,
        ..ModelConfig::default()
    };
    let data = raw.iter().map(|r| MultiDocExample::encode(r, &vocab)).collect();
    (cfg, data)
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        max_steps: steps,
        seed: 12,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, data) = setup(20);
    let mut t = Trainer::new(Seq2Seq::init(cfg.clone(), 1).unwrap(), train_cfg(3)).unwrap();
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&t.model, &t.optimizer, &t.config, &path).unwrap();
    let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
    assert_eq!(ck.model, t.model);
    assert_eq!(ck.optimizer, t.optimizer);
    assert_eq!(ck.train, t.config);
    for (a, b) in ck.model.params().tensors().iter().zip(t.model.params().tensors()) {
        assert_eq!(a.max_abs_diff(b), 0.0);
    }
}

#[test]
fn checkpoint_errors() {
    let (cfg, _) = setup(5);
    let m = Seq2Seq::init(cfg.clone(), 1).unwrap();
    let opt = OptimizerState::new(m.params());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&m, &opt, &TrainConfig::default(), &path).unwrap();
    let other = ModelConfig {
        d_model: 32,
        ..cfg.clone()
    };
    let err = load_checkpoint(&path, Some(&other)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("d_model"));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&cut, None), Err(Error::Checkpoint(_))));

    let mut c = Container::load(&path).unwrap();
    c.header.set("checkpoint_format", 99);
    c.save(&cut).unwrap();
    let err = load_checkpoint(&cut, None).unwrap_err().to_string();
    assert!(err.contains("format 99"), "{err}");

    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.bin"), None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (cfg, data) = setup(40);
    let steps = 12;
    let mut full = Trainer::new(Seq2Seq::init(cfg.clone(), 3).unwrap(), train_cfg(steps)).unwrap();
    let reference: Vec<f64> = (0..steps).map(|_| full.step(&data).unwrap().loss).collect();

    let mut first = Trainer::new(Seq2Seq::init(cfg.clone(), 3).unwrap(), train_cfg(steps)).unwrap();
    for _ in 0..5 {
        first.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    first.save(&path).unwrap();
    drop(first);
    let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
    let mut resumed = Trainer::from_checkpoint(ck, train_cfg(steps)).unwrap();
    assert_eq!(resumed.step_count(), 5);
    for (i, &expect) in reference.iter().enumerate().skip(5) {
        let got = resumed.step(&data).unwrap();
        assert_eq!(got.step, i as u64);
        assert!((got.loss - expect).abs() <= 1e-6, "step {i}: {} vs {expect}", got.loss);
    }
    assert_eq!(resumed.model, full.model);
}

#[test]
fn same_seed_same_run() {
    let (cfg, data) = setup(30);
    let run = || {
        let mut t = Trainer::new(Seq2Seq::init(cfg.clone(), 8).unwrap(), train_cfg(4)).unwrap();
        let gen = GenerationConfig {
            max_length: 16,
            ..GenerationConfig::default()
        };
        t.run(&data, &data[..4], &gen, None).unwrap();
        t.model
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_freezes_a_real_model() {
    let (cfg, data) = setup(10);
    let m = Seq2Seq::init(cfg.clone(), 2).unwrap();
    let batch = hiermds::data::make_batch(&data[..4], &cfg.batch_config()).unwrap();
    let (_, grads) = m.loss_and_grads(&batch, None).unwrap();
    let mut params = m.params().clone();
    let mut opt = OptimizerState::new(&params);
    let frozen = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    adam_step(&mut params, &grads, &mut opt, &frozen).unwrap();
    assert_eq!(&params, m.params());
    assert_eq!(opt.step, 1);
}

#[test]
fn untrained_loss_is_near_uniform() {
    let (cfg, data) = setup(32);
    let mut t = Trainer::new(Seq2Seq::init(cfg.clone(), 0).unwrap(), train_cfg(1)).unwrap();
    let rec = t.step(&data).unwrap();
    let uniform = (cfg.vocab_size as f64).ln();
    assert!((rec.loss - uniform).abs() < 0.15 * uniform, "{} vs {uniform}", rec.loss);
}

#[test]
fn metrics_log_is_jsonl() {
    let (cfg, data) = setup(12);
    let mut tc = train_cfg(4);
    tc.eval_every = 2;
    let dir = tempfile::tempdir().unwrap();
    tc.checkpoint_path = Some(dir.path().join("ck.bin"));
    let mut t = Trainer::new(Seq2Seq::init(cfg, 0).unwrap(), tc).unwrap();
    let mut log = Vec::new();
    let gen = GenerationConfig {
        max_length: 16,
        ..GenerationConfig::default()
    };
    let report = t.run(&data, &data[..3], &gen, Some(&mut log)).unwrap();
    assert_eq!(report.steps.len(), 4);
    assert_eq!(report.evals.len(), 2);
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|v| v.get("step").is_some() && v.get("loss").is_some()));
    assert!(lines.iter().any(|v| v.get("rouge1").is_some()));
    assert!(dir.path().join("ck.bin").exists());
}

#[test]
fn non_finite_gradients_abort_with_the_name() {
    let (cfg, _) = setup(3);
    let m = Seq2Seq::init(cfg, 0).unwrap();
    let mut params = m.params().clone();
    let mut grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    grads[5].data_mut()[0] = f64::INFINITY;
    let mut opt = OptimizerState::new(&params);
    let err = adam_step(&mut params, &grads, &mut opt, &TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains(&m.params().names()[5]), "{err}");
}
