mod common;

use std::fs;

use attn_align::dataset::DetectionSample;
use attn_align::detector::{match_anchors, MatchTargets};
use attn_align::harness::{
    batch_gradients, load_detector, predict_all, run_experiment, Batch, ExperimentConfig, ExperimentData,
    MultiSeedSummary, RunOptions, SourceItem, Trainer, Variant,
};
use attn_align::Error;
use common::{sign_probe, tiny_config};

fn data(config: &ExperimentConfig) -> ExperimentData {
    ExperimentData::synthesize(&config.data).unwrap()
}

fn targets(trainer: &Trainer, data: &ExperimentData) -> Vec<MatchTargets> {
    data.source_train
        .samples
        .iter()
        .map(|s| match_anchors(&s.boxes, &trainer.model.detector.config.anchors))
        .collect()
}

fn step(
    trainer: &mut Trainer,
    data: &ExperimentData,
    targets: &[MatchTargets],
) -> attn_align::Result<attn_align::harness::MetricsRecord> {
    let (si, ti) = trainer.sample_indices(data.source_train.len(), data.target_train.len());
    let source: Vec<SourceItem> = si
        .iter()
        .map(|&i| SourceItem {
            sample: &data.source_train.samples[i],
            targets: &targets[i],
        })
        .collect();
    let target: Vec<&DetectionSample> = ti.iter().map(|&i| &data.target_train.samples[i]).collect();
    trainer.train_step(&source, &target)
}

fn disc_params(trainer: &Trainer) -> Vec<(String, Vec<f32>)> {
    trainer
        .model
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("disc."))
        .map(|(_, n, t)| (n.to_string(), t.data().to_vec()))
        .collect()
}

#[test]
fn discriminators_frozen_and_gamma_zero_before_t_grl() {
    let config = tiny_config();
    let data = data(&config);
    let mut trainer = Trainer::new(&config, Variant::Ours).unwrap();
    let tg = targets(&trainer, &data);
    let initial = disc_params(&trainer);
    assert!(!initial.is_empty());
    for it in 0..config.schedule.t_grl {
        let r = step(&mut trainer, &data, &tg).unwrap();
        assert_eq!(r.gamma, 0.0, "iteration {it}");
        assert!(r.l_dis_source.is_none() && r.l_dis_target.is_none());
        assert_eq!(disc_params(&trainer), initial, "discriminator moved at iteration {it}");
    }
    let r = step(&mut trainer, &data, &tg).unwrap();
    assert!(r.l_dis_source.is_some() && r.l_dis_target.is_some());
    assert_ne!(disc_params(&trainer), initial);
}

#[test]
fn logged_gamma_follows_schedule() {
    let mut config = tiny_config();
    config.schedule.t_grl = 1;
    let out = run_experiment(&config, Variant::Ours, &data(&config), &RunOptions::default()).unwrap();
    let schedule = config.alignment_schedule(config.schedule.gamma_mode);
    assert_eq!(out.metrics.len(), config.schedule.max_iteration);
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.iteration, i);
        assert_eq!(m.gamma, schedule.gamma(i));
    }
    assert!(out.metrics.last().unwrap().gamma > 0.0);
}

#[test]
fn zero_reversal_matches_source_only_detector() {
    let mut config = tiny_config();
    config.schedule.grl_lambda = 0.0;
    config.model.dropout = 0.0;
    let d = data(&config);
    let ours = run_experiment(&config, Variant::Ours, &d, &RunOptions::default()).unwrap();
    let plain = run_experiment(&config, Variant::NoDa, &d, &RunOptions::default()).unwrap();
    let mut compared = 0;
    for (_, name, t) in plain.model.store.iter() {
        let id = ours.model.store.id(name).unwrap_or_else(|| panic!("{name} missing"));
        assert_eq!(ours.model.store.get(id).data(), t.data(), "{name} differs");
        compared += 1;
    }
    assert!(compared > 10);
    assert!(ours.model.store.len() > plain.model.store.len());
}

#[test]
fn source_only_variant_has_no_discriminators() {
    let config = tiny_config();
    let trainer = Trainer::new(&config, Variant::NoDa).unwrap();
    assert!(trainer.model.discriminators.is_none());
    assert!(disc_params(&trainer).is_empty());
    let trainer = Trainer::new(&config, Variant::NoAttnDa).unwrap();
    assert!(!trainer.model.detector.config.use_attention);
    assert!(!disc_params(&trainer).is_empty());
}

#[test]
fn small_step_decreases_detection_loss() {
    let mut config = tiny_config();
    config.model.dropout = 0.0;
    config.optim.lr_detector = 1e-3;
    config.optim.momentum = 0.0;
    let d = data(&config);
    let mut trainer = Trainer::new(&config, Variant::NoDa).unwrap();
    let tg = targets(&trainer, &d);
    let items: Vec<SourceItem> = d.source_train.samples[..2]
        .iter()
        .zip(&tg)
        .map(|(sample, targets)| SourceItem { sample, targets })
        .collect();
    let tgt: Vec<&DetectionSample> = d.target_train.samples[..2].iter().collect();
    let loss = |trainer: &Trainer| {
        let (parts, seed) = trainer.parts();
        let batch = Batch {
            source: &items,
            target: &tgt,
            gamma: 0.0,
            modulation: attn_align::adversarial::ModulationMode::Blend,
            adversarial: false,
            detection: true,
        };
        batch_gradients(&parts, &trainer.model.store, seed, &batch)
            .unwrap()
            .0
            .detection
    };
    let before = loss(&trainer);
    let r = trainer.train_step(&items, &tgt).unwrap();
    assert!((r.l_det - before).abs() < 1e-6);
    let after = loss(&trainer);
    assert!(after < before, "L_det {before} -> {after}");
}

#[test]
fn reversed_gradient_signs() {
    for seed in 0..3 {
        let p = sign_probe(seed, 1e-3).unwrap();
        assert!(p.discriminator_change < 0.0, "seed {seed}: {}", p.discriminator_change);
        assert!(p.feature_change > 0.0, "seed {seed}: {}", p.feature_change);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let config = tiny_config();
    let d = data(&config);
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = run_experiment(&config, Variant::Ours, &d, &options).unwrap();
    let loaded = load_detector(&dir.path().join("model.ckpt"), &config).unwrap();
    assert_eq!(loaded.iteration, Some(config.schedule.max_iteration));
    assert!(loaded.model.discriminators.is_none());
    let a = predict_all(&out.model, &d.target_eval, &config, 1).unwrap();
    let b = predict_all(&loaded.model, &d.target_eval, &config, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn runs_are_reproducible() {
    let config = tiny_config();
    let d = data(&config);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let options = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        run_experiment(&config, Variant::Ours, &d, &options).unwrap();
        let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
        (read("metrics.csv"), read("summary.json"), read("model.ckpt"))
    };
    assert_eq!(run(), run());
}

#[test]
fn multi_seed_statistics() {
    let config = tiny_config();
    let d = data(&config);
    let mut runs = Vec::new();
    for seed in [1, 2, 3] {
        let mut c = config.clone();
        c.schedule.seed = seed;
        c.schedule.early_stop = Some(2);
        runs.push(
            run_experiment(&c, Variant::NoDa, &d, &RunOptions::default())
                .unwrap()
                .summary,
        );
    }
    let mut fake = runs.clone();
    for (r, v) in fake.iter_mut().zip([0.2, 0.4, 0.9]) {
        r.final_map_target = v;
    }
    let s = MultiSeedSummary::new(fake).unwrap();
    assert_eq!(s.seeds, vec![1, 2, 3]);
    assert!((s.map_target.mean - 0.5).abs() < 1e-12);
    // sample std of {0.2, 0.4, 0.9}: sqrt((0.09 + 0.01 + 0.16) / 2)
    assert!((s.map_target.std - 0.13f64.sqrt()).abs() < 1e-12);
    assert!(MultiSeedSummary::new(Vec::new()).is_err());
}

#[test]
fn divergence_aborts_with_dump() {
    let mut config = tiny_config();
    config.optim.lr_detector = 1e12;
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    match run_experiment(&config, Variant::NoDa, &data(&config), &options) {
        Err(Error::NonFinite { dump, .. }) => {
            let text = fs::read_to_string(&dump).unwrap();
            assert!(text.contains("non_finite"), "{text}");
            assert!(dump.starts_with(dir.path()));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e12 did not diverge"),
    }
}

#[test]
fn empty_split_rejected() {
    let mut config = tiny_config();
    config.data.target_eval = 0;
    assert!(matches!(Trainer::new(&config, Variant::Ours), Err(Error::Config(_))));
}
