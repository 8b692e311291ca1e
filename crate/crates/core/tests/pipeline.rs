//! End-to-end use of the public API: generate, store, train, checkpoint, evaluate.

use aligned_sae::data::{read_activations, write_activations, ActivationSet, SyntheticSpec};
use aligned_sae::metrics::{evaluate, ground_truth_recovery};
use aligned_sae::model::{alignment_scores, EncoderMode, SaeVariant};
use aligned_sae::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};
use aligned_sae::{gen_synthetic, Error};

fn spec(samples: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n: 16,
        m_true: 24,
        fire_prob: 0.08,
        noise_sigma: 0.0,
        samples,
        seed,
    }
}

fn small_cfg(encoder: EncoderMode) -> TrainConfig {
    let mut cfg = TrainConfig::new(SaeVariant::relu(encoder), 16, 48, 0.08, 1500);
    cfg.lr = 3e-3;
    cfg.lr_warmup_steps = 100;
    cfg.lambda_warmup_steps = 300;
    cfg.batch_size = 64;
    cfg.seed = 11;
    cfg.log_every = 250;
    cfg
}

#[test]
fn synthetic_l0_matches_binomial_mean() {
    let s = SyntheticSpec {
        n: 64,
        m_true: 128,
        fire_prob: 0.03,
        noise_sigma: 0.0,
        samples: 20_000,
        seed: 5,
    };
    let set = gen_synthetic(&s).unwrap();
    let codes = &set.ground_truth.as_ref().unwrap().codes;
    let l0 = codes.iter().map(|c| c.len()).sum::<usize>() as f64 / codes.len() as f64;
    let var = s.m_true as f64 * s.fire_prob * (1.0 - s.fire_prob);
    let sigma = (var / s.samples as f64).sqrt();
    assert!((l0 - s.expected_l0()).abs() < 3.0 * sigma, "l0 {l0} vs {} ± {}", s.expected_l0(), 3.0 * sigma);
}

#[test]
fn file_pipeline_reproduces_checkpoint_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("x.saea");
    write_activations(&gen_synthetic(&spec(4000, 1)).unwrap(), &data_path).unwrap();
    let data = read_activations(&data_path).unwrap();

    let cfg = small_cfg(EncoderMode::Aligned);
    let (ckpt, log) = train(&cfg, &data).unwrap();
    assert_eq!(log.first().unwrap().step, 0);
    assert_eq!(log.last().unwrap().step, cfg.total_steps);

    let ckpt_path = dir.path().join("run.saec");
    save_checkpoint(&ckpt, &ckpt_path).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(loaded.params, ckpt.params);
    assert_eq!(loaded.metrics, ckpt.metrics);

    let p = loaded.config.p_at(loaded.step);
    let mut again = evaluate(&loaded.params, &data.data, cfg.lambda, p, 500, loaded.step).unwrap();
    again.dead_fraction_train = loaded.metrics.dead_fraction_train;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    assert!(close(again.recon_loss, loaded.metrics.recon_loss));
    assert!(close(again.l0_mean, loaded.metrics.l0_mean));
    assert!(close(again.explained_variance.unwrap(), loaded.metrics.explained_variance.unwrap()));
    assert_eq!(again.dead_fraction_eval, loaded.metrics.dead_fraction_eval);

    for a in alignment_scores(&loaded.params).unwrap() {
        assert!((a - 1.0).abs() < 1e-6);
    }
}

#[test]
fn both_modes_learn_the_generating_dictionary() {
    let set = gen_synthetic(&spec(6000, 2)).unwrap();
    let truth = set.ground_truth.clone().unwrap().dictionary;
    let data = set.to_storage_precision();
    for encoder in [EncoderMode::Standard, EncoderMode::Aligned] {
        let mut cfg = small_cfg(encoder);
        cfg.total_steps = 4000;
        let (ckpt, _) = train(&cfg, &data).unwrap();
        let ev = ckpt.metrics.explained_variance.unwrap();
        let recovery = ground_truth_recovery(&ckpt.params.w_dec, &truth).unwrap();
        assert!(ev > 0.9, "{encoder:?}: explained variance {ev}");
        assert!(recovery > 0.9, "{encoder:?}: ground-truth recovery {recovery}");
    }
}

#[test]
fn training_is_reproducible_across_calls() {
    let data = gen_synthetic(&spec(2000, 3)).unwrap();
    let mut cfg = small_cfg(EncoderMode::Tied);
    cfg.total_steps = 400;
    let (a, log_a) = train(&cfg, &data).unwrap();
    let (b, log_b) = train(&cfg, &data).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(log_a, log_b);

    cfg.seed += 1;
    let (c, _) = train(&cfg, &data).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn checkpoint_file_faults_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = ActivationSet::new(gen_synthetic(&spec(300, 4)).unwrap().data);
    let mut cfg = small_cfg(EncoderMode::Standard);
    cfg.total_steps = 20;
    cfg.lr_warmup_steps = 5;
    cfg.lambda_warmup_steps = 5;
    let (ckpt, _) = train(&cfg, &data).unwrap();
    let path = dir.path().join("c.saec");
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));

    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

    assert!(matches!(load_checkpoint(dir.path().join("missing.saec")), Err(Error::Io(_))));
}
