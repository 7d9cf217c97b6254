use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attn_align_tensor::{checkpoint, Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::eval::{mean_average_precision, MapReport};
use crate::adversarial::{adversarial_pass, AlignmentSchedule, DiscriminatorStack, ModulationMode};
use crate::dataset::{Dataset, DetectionSample, Domain};
use crate::detector::{decode, detection_loss, match_anchors, Detection, Detector, MatchTargets};
use crate::error::{Error, Result};

/// Parameter-name prefix of the discriminator learning-rate group.
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

// Independent random streams derived from the experiment seed.
const STREAM_DETECTOR_INIT: u64 = 0;
const STREAM_DISCRIMINATOR_INIT: u64 = 1;
const STREAM_SOURCE_SAMPLING: u64 = 2;
const STREAM_TARGET_SAMPLING: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Detector plus (optionally) per-scale discriminators over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub detector: Detector,
    pub discriminators: Option<DiscriminatorStack>,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(config: &ExperimentConfig, variant: Variant, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let det_cfg = config.detector_config(variant.uses_attention());
        let detector = Detector::new(det_cfg, &mut store, &mut stream(seed, STREAM_DETECTOR_INIT))?;
        let discriminators = if variant.uses_discriminators() {
            Some(DiscriminatorStack::new(
                &mut store,
                &detector.config.scale_sides(),
                config.model.channels,
                &config.discriminator_config(),
                config.schedule.grl_lambda,
                &mut stream(seed, STREAM_DISCRIMINATOR_INIT),
            )?)
        } else {
            None
        };
        Ok(Model {
            detector,
            discriminators,
            store,
        })
    }

    /// Inference-mode detections for one image.
    pub fn detect(&self, image: &Tensor<f32>, params: &crate::detector::DecodeParams) -> Result<Vec<Detection>> {
        let mut g = Graph::inference(&self.store);
        let x = g.tape.constant(image.clone());
        let (_, out) = self.detector.forward(&mut g, x, false)?;
        decode(
            g.tape.value(out.cls_logits),
            g.tape.value(out.box_deltas),
            &self.detector.config.anchors,
            params,
        )
    }

    /// Objectness maps (`[H_s, W_s]` per scale) in inference mode.
    pub fn objectness(&self, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::inference(&self.store);
        let x = g.tape.constant(image.clone());
        let enc = self.detector.encode(&mut g, x, false)?;
        let att = enc
            .attention
            .ok_or_else(|| Error::Usage("model has no attention module".into()))?;
        Ok(att.iter().map(|a| g.tape.value(a.objectness).clone()).collect())
    }

    pub fn save_checkpoint(&self, path: &Path, iteration: usize) -> Result<()> {
        let meta = Tensor::scalar(iteration as f32);
        let mut records: Vec<(&str, &Tensor<f32>)> = self.store.iter().map(|(_, n, t)| (n, t)).collect();
        records.push((META_ITERATION, &meta));
        let bytes = checkpoint::encode(&records);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub const META_ITERATION: &str = "meta.iteration";

/// A detector restored from a checkpoint, with the iteration it was saved at.
pub struct LoadedDetector {
    pub model: Model,
    pub iteration: Option<usize>,
}

/// Rebuilds the detector stored in `path`. Attention is enabled when the
/// checkpoint contains attention weights; discriminator tensors are ignored.
pub fn load_detector(path: &Path, config: &ExperimentConfig) -> Result<LoadedDetector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = checkpoint::decode(&bytes)?;
    let use_attention = records.iter().any(|(n, _)| n.starts_with("attn."));
    let mut store = ParamStore::new();
    let detector = Detector::new(
        config.detector_config(use_attention),
        &mut store,
        &mut stream(0, STREAM_DETECTOR_INIT),
    )?;
    let mut model = Model {
        detector,
        discriminators: None,
        store,
    };
    let iteration = records
        .iter()
        .find(|(n, _)| n == META_ITERATION)
        .map(|(_, t)| t.data()[0] as usize);
    let kept: Vec<(String, Tensor<f32>)> = records
        .into_iter()
        .filter(|(n, _)| !n.starts_with(DISCRIMINATOR_PREFIX) && n != META_ITERATION)
        .collect();
    model.store.assign_from(kept)?;
    Ok(LoadedDetector { model, iteration })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub l_det: f64,
    pub l_dis_source: Option<f64>,
    pub l_dis_target: Option<f64>,
    pub gamma: f64,
    pub disc_accuracy: Option<f64>,
    pub map: Option<f64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "iteration,l_det,l_dis_source,l_dis_target,gamma,disc_accuracy,map";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.l_det,
            opt(self.l_dis_source),
            opt(self.l_dis_target),
            self.gamma,
            opt(self.disc_accuracy),
            opt(self.map)
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{}\n", MetricsRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// A source image with its precomputed anchor targets.
pub struct SourceItem<'a> {
    pub sample: &'a DetectionSample,
    pub targets: &'a MatchTargets,
}

/// Training state: model, momentum buffers, schedule and sampling streams.
pub struct Trainer {
    pub model: Model,
    pub config: ExperimentConfig,
    pub variant: Variant,
    pub schedule: AlignmentSchedule,
    pub seed: u64,
    pub iteration: usize,
    velocity: Vec<Vec<f32>>,
    is_discriminator: Vec<bool>,
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    dump_dir: PathBuf,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let seed = config.schedule.seed;
        let model = Model::new(config, variant, seed)?;
        let velocity = model.store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let is_discriminator = model
            .store
            .iter()
            .map(|(_, n, _)| n.starts_with(DISCRIMINATOR_PREFIX))
            .collect();
        Ok(Trainer {
            model,
            schedule: config.alignment_schedule(variant.gamma_mode(config.schedule.gamma_mode)),
            config: config.clone(),
            variant,
            seed,
            iteration: 0,
            velocity,
            is_discriminator,
            source_rng: stream(seed, STREAM_SOURCE_SAMPLING),
            target_rng: stream(seed, STREAM_TARGET_SAMPLING),
            dump_dir: std::env::temp_dir(),
        })
    }

    /// Where diagnostics go when a non-finite value aborts training.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = dir.into();
    }

    pub fn learning_rate(&self, discriminator: bool) -> f64 {
        let o = &self.config.optim;
        if discriminator {
            return o.lr_discriminator;
        }
        match o.lr_decay_step {
            Some(step) if self.iteration >= step => o.lr_detector * o.lr_decay_factor,
            _ => o.lr_detector,
        }
    }

    pub fn sample_indices(&mut self, source_len: usize, target_len: usize) -> (Vec<usize>, Vec<usize>) {
        let b = self.config.optim.batch_size;
        let s = (0..b).map(|_| self.source_rng.random_range(0..source_len)).collect();
        let t = (0..b).map(|_| self.target_rng.random_range(0..target_len)).collect();
        (s, t)
    }

    fn dropout_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.iteration as u64
    }

    /// One SGD step on `L_det(source) + L_dis(source) + L_dis(target)`, where
    /// the domain terms reach the feature extractor through the GRL and are
    /// skipped before `t_grl`. Returns the metrics of this iteration.
    pub fn train_step(&mut self, source: &[SourceItem], target: &[&DetectionSample]) -> Result<MetricsRecord> {
        if source.is_empty() || source.len() != target.len() {
            return Err(Error::Usage(format!(
                "batches must be non-empty and of equal size ({} source, {} target)",
                source.len(),
                target.len()
            )));
        }
        let iteration = self.iteration;
        let gamma = self.schedule.gamma(iteration);
        let adversarial = self.model.discriminators.is_some() && self.schedule.is_active(iteration);
        let step = self.forward_backward(source, target, gamma, adversarial);
        let (record, grads) = match step {
            Ok(v) => v,
            Err(Error::Tensor(TensorError::NonFinite(op))) => return Err(self.abort(op)),
            Err(e) => return Err(e),
        };
        self.apply(&grads);
        if self.model.store.iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(self.abort("parameter update"));
        }
        self.iteration += 1;
        Ok(record)
    }

    fn forward_backward(
        &self,
        source: &[SourceItem],
        target: &[&DetectionSample],
        gamma: f64,
        adversarial: bool,
    ) -> Result<(MetricsRecord, Vec<Option<Vec<f32>>>)> {
        let batch = Batch {
            source,
            target,
            gamma,
            modulation: self.schedule.mode.modulation(),
            adversarial,
            detection: true,
        };
        let parts = ModelParts {
            detector: &self.model.detector,
            discriminators: self.model.discriminators.as_ref(),
        };
        let (losses, grads) = batch_gradients(&parts, &self.model.store, self.dropout_seed(), &batch)?;
        let record = MetricsRecord {
            iteration: self.iteration,
            l_det: losses.detection,
            l_dis_source: losses.source_domain,
            l_dis_target: losses.target_domain,
            gamma,
            disc_accuracy: losses.disc_accuracy,
            map: None,
        };
        Ok((record, grads))
    }

    /// Parts and dropout seed of the current step, for analysis outside the
    /// training loop.
    pub fn parts(&self) -> (ModelParts<'_>, u64) {
        (
            ModelParts {
                detector: &self.model.detector,
                discriminators: self.model.discriminators.as_ref(),
            },
            self.dropout_seed(),
        )
    }

    fn apply(&mut self, grads: &[Option<Vec<f32>>]) {
        let momentum = self.config.optim.momentum as f32;
        let lr_det = self.learning_rate(false) as f32;
        let lr_dis = self.learning_rate(true) as f32;
        let ids: Vec<_> = self.model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(grad) = &grads[k] else { continue };
            let lr = if self.is_discriminator[k] { lr_dis } else { lr_det };
            let vel = &mut self.velocity[k];
            let param = self.model.store.get_mut(id).data_mut();
            for ((p, v), &gr) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = momentum * *v + gr;
                *p -= lr * *v;
            }
        }
    }

    fn abort(&self, op: &str) -> Error {
        let dump = self.dump_dir.join(format!("nonfinite_iter{}.txt", self.iteration));
        let mut text = format!("iteration {}\nfirst non-finite value in: {op}\n", self.iteration);
        for (_, name, t) in self.model.store.iter() {
            let bad = t.data().iter().filter(|v| !v.is_finite()).count();
            let max = t.data().iter().fold(0f32, |m, v| m.max(v.abs()));
            let _ = writeln!(text, "{name} shape={:?} non_finite={bad} max_abs={max}", t.shape());
        }
        let _ = fs::write(&dump, text);
        Error::NonFinite {
            iteration: self.iteration,
            msg: op.to_string(),
            dump,
        }
    }
}

/// Modules of a model, independent of the parameter precision.
#[derive(Clone, Copy)]
pub struct ModelParts<'a> {
    pub detector: &'a Detector,
    pub discriminators: Option<&'a DiscriminatorStack>,
}

/// One training batch and what to compute on it.
pub struct Batch<'a> {
    pub source: &'a [SourceItem<'a>],
    pub target: &'a [&'a DetectionSample],
    pub gamma: f64,
    pub modulation: ModulationMode,
    /// Include the domain terms (requires discriminators).
    pub adversarial: bool,
    /// Include the detection loss.
    pub detection: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLosses {
    pub detection: f64,
    pub source_domain: Option<f64>,
    pub target_domain: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub total: f64,
}

/// Batch objective `mean L_det + mean L_dis(source) + mean L_dis(target)`
/// and its gradient for every parameter of `store` (`None` if unused).
/// Domain terms reach the feature extractor through the GRL.
pub fn batch_gradients<T: Scalar>(
    parts: &ModelParts,
    store: &ParamStore<T>,
    dropout_seed: u64,
    batch: &Batch,
) -> Result<(BatchLosses, Vec<Option<Vec<T>>>)> {
    let stack = match (batch.adversarial, parts.discriminators) {
        (false, _) => None,
        (true, Some(s)) => Some(s),
        (true, None) => return Err(Error::Usage("adversarial batch needs discriminators".into())),
    };
    if !batch.detection && stack.is_none() {
        return Err(Error::Usage("batch objective is empty".into()));
    }
    let mut g = Graph::new(store, dropout_seed);
    let mut det_terms = Vec::new();
    let mut dis_source = Vec::new();
    let mut dis_target = Vec::new();
    let (mut correct, mut judged) = (0usize, 0usize);
    let mut judge = |g: &Graph<T>, probs: &[Var], domain: Domain| {
        for &p in probs {
            let p = g.tape.value(p).data()[0].as_f64();
            judged += 1;
            if p != 0.5 && (p > 0.5) == (domain == Domain::Target) {
                correct += 1;
            }
        }
    };

    for item in batch.source {
        let x = g.tape.constant(item.sample.image.cast());
        let enc = parts.detector.encode(&mut g, x, true)?;
        if batch.detection {
            let out = parts.detector.heads(&mut g, &enc)?;
            det_terms.push(detection_loss(&mut g.tape, &out, item.targets)?.total);
        }
        if let Some(stack) = stack {
            let adv = adversarial_pass(
                &mut g,
                &enc.features,
                enc.attention.as_deref(),
                batch.gamma,
                batch.modulation,
                stack,
                Domain::Source,
            )?;
            judge(&g, &adv.probabilities, Domain::Source);
            dis_source.push(adv.loss);
        }
    }
    if let Some(stack) = stack {
        for sample in batch.target {
            let x = g.tape.constant(sample.image.cast());
            let enc = parts.detector.encode(&mut g, x, true)?;
            let adv = adversarial_pass(
                &mut g,
                &enc.features,
                enc.attention.as_deref(),
                batch.gamma,
                batch.modulation,
                stack,
                Domain::Target,
            )?;
            judge(&g, &adv.probabilities, Domain::Target);
            dis_target.push(adv.loss);
        }
    }

    let mut terms = Vec::new();
    let mut mean = |g: &mut Graph<T>, parts: &[Var]| -> Result<Option<(Var, f64)>> {
        if parts.is_empty() {
            return Ok(None);
        }
        let s = g.tape.stack(parts)?;
        let m = g.tape.mean(s)?;
        terms.push(m);
        Ok(Some((m, g.tape.value(m).data()[0].as_f64())))
    };
    let l_det = mean(&mut g, &det_terms)?;
    let l_src = mean(&mut g, &dis_source)?;
    let l_tgt = mean(&mut g, &dis_target)?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.tape.add(total, t)?;
    }
    let losses = BatchLosses {
        detection: l_det.map_or(0.0, |v| v.1),
        source_domain: l_src.map(|v| v.1),
        target_domain: l_tgt.map(|v| v.1),
        disc_accuracy: stack.map(|_| correct as f64 / judged as f64),
        total: g.tape.value(total).data()[0].as_f64(),
    };
    let mut grads = g.tape.backward(total)?;
    Ok((losses, g.param_grads(&mut grads)))
}

/// Detections for every image, computed on up to `threads` worker threads.
/// Results do not depend on the thread count.
pub fn predict_all(
    model: &Model,
    dataset: &Dataset,
    config: &ExperimentConfig,
    threads: usize,
) -> Result<Vec<Vec<Detection>>> {
    let params = config.eval.decode_params();
    let samples = &dataset.samples;
    let threads = threads.clamp(1, samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(|s| model.detect(&s.image, &params)).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<Detection>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.detect(&s.image, &params)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_map(model: &Model, dataset: &Dataset, config: &ExperimentConfig, threads: usize) -> Result<MapReport> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let detections = predict_all(model, dataset, config, threads)?;
    let gt: Vec<_> = dataset.samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(mean_average_precision(
        &detections,
        &gt,
        model.detector.config.num_classes,
        config.eval.iou_threshold,
    ))
}

/// P5 graymap of a map in [0, 1].
pub fn encode_pgm(map: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn map_csv(map: &Tensor<f32>) -> String {
    let w = map.shape()[1];
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes `attn_s{scale}_iter{n}.pgm` and `.csv` for every scale.
pub fn export_attention(model: &Model, image: &Tensor<f32>, iteration: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = model.objectness(image)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (s, map) in maps.iter().enumerate() {
        let stem = format!("attn_s{}_iter{iteration}", s + 1);
        let pgm = dir.join(format!("{stem}.pgm"));
        fs::write(&pgm, encode_pgm(map)).map_err(|e| Error::io(&pgm, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, map_csv(map)).map_err(|e| Error::io(&csv, e))?;
        written.push(pgm);
    }
    Ok(written)
}

/// The four data splits of an experiment.
pub struct ExperimentData {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub source_eval: Dataset,
    pub target_eval: Dataset,
}

impl ExperimentData {
    pub fn load(dir: &Path) -> Result<Self> {
        use crate::dataset::{load, Split};
        let get = |s: Split| load(&dir.join(s.dir_name()));
        Ok(ExperimentData {
            source_train: get(Split::SourceTrain)?,
            target_train: get(Split::TargetTrain)?,
            source_eval: get(Split::SourceEval)?,
            target_eval: get(Split::TargetEval)?,
        })
    }

    pub fn synthesize(config: &crate::dataset::DataConfig) -> Result<Self> {
        use crate::dataset::Split;
        Ok(ExperimentData {
            source_train: config.synthesize(Split::SourceTrain)?,
            target_train: config.synthesize(Split::TargetTrain)?,
            source_eval: config.synthesize(Split::SourceEval)?,
            target_eval: config.synthesize(Split::TargetEval)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub iterations: usize,
    pub final_map_source: f64,
    pub final_map_target: f64,
    pub per_class_ap: PerDomainAp,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerDomainAp {
    pub source: Vec<Option<f64>>,
    pub target: Vec<Option<f64>>,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRecord>,
    pub model: Model,
}

/// Options that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    /// Print a progress line every this many iterations (0: silent).
    pub log_every: usize,
}

/// Trains one variant to completion, evaluates both held-out splits and,
/// when `out_dir` is set, writes `metrics.csv`, `summary.json`,
/// `model.ckpt` and attention exports.
pub fn run_experiment(
    config: &ExperimentConfig,
    variant: Variant,
    data: &ExperimentData,
    options: &RunOptions,
) -> Result<RunOutput> {
    let seed = config.schedule.seed;
    let mut trainer = Trainer::new(config, variant)?;
    let threads = options.threads.max(1);
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trainer.set_dump_dir(dir);
    }
    let targets: Vec<MatchTargets> = data
        .source_train
        .samples
        .iter()
        .map(|s| match_anchors(&s.boxes, &trainer.model.detector.config.anchors))
        .collect();
    let probe = &data.target_eval.samples[0].image;
    let export_dir = options.out_dir.as_ref().map(|d| d.join("attention"));
    let periodic_eval = if config.eval.eval_images == 0 || config.eval.eval_images >= data.target_eval.len() {
        None
    } else {
        Some(Dataset {
            info: data.target_eval.info.clone(),
            samples: data.target_eval.samples[..config.eval.eval_images].to_vec(),
        })
    };
    let periodic = periodic_eval.as_ref().unwrap_or(&data.target_eval);

    let export = |trainer: &Trainer| -> Result<()> {
        if let Some(dir) = &export_dir {
            if variant.uses_attention() && config.eval.export_iterations.contains(&trainer.iteration) {
                export_attention(&trainer.model, probe, trainer.iteration, dir)?;
            }
        }
        Ok(())
    };

    let total = config.iterations();
    let mut metrics = Vec::with_capacity(total);
    export(&trainer)?;
    while trainer.iteration < total {
        let (si, ti) = trainer.sample_indices(data.source_train.len(), data.target_train.len());
        let source: Vec<SourceItem> = si
            .iter()
            .map(|&i| SourceItem {
                sample: &data.source_train.samples[i],
                targets: &targets[i],
            })
            .collect();
        let target: Vec<&DetectionSample> = ti.iter().map(|&i| &data.target_train.samples[i]).collect();
        let mut record = trainer.train_step(&source, &target)?;
        let done = trainer.iteration;
        if config.eval.eval_every > 0 && done % config.eval.eval_every == 0 {
            record.map = Some(evaluate_map(&trainer.model, periodic, config, threads)?.map);
        }
        if options.log_every > 0 && done % options.log_every == 0 {
            eprintln!(
                "[{variant} seed {seed}] iter {done}/{total} l_det={:.4} l_dis_s={} l_dis_t={} gamma={:.4}{}",
                record.l_det,
                record.l_dis_source.map_or("-".into(), |v| format!("{v:.4}")),
                record.l_dis_target.map_or("-".into(), |v| format!("{v:.4}")),
                record.gamma,
                record.map.map_or(String::new(), |m| format!(" map={m:.4}"))
            );
        }
        metrics.push(record);
        export(&trainer)?;
    }

    let source_report = evaluate_map(&trainer.model, &data.source_eval, config, threads)?;
    let target_report = evaluate_map(&trainer.model, &data.target_eval, config, threads)?;
    let summary = RunSummary {
        variant,
        seed,
        iterations: trainer.iteration,
        final_map_source: source_report.map,
        final_map_target: target_report.map,
        per_class_ap: PerDomainAp {
            source: source_report.per_class_ap,
            target: target_report.per_class_ap,
        },
        config: config.clone(),
    };
    if let Some(dir) = &options.out_dir {
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write("metrics.csv", metrics_csv(&metrics).as_bytes())?;
        write(
            "summary.json",
            serde_json::to_string_pretty(&summary)
                .expect("summary serializes")
                .as_bytes(),
        )?;
        trainer
            .model
            .save_checkpoint(&dir.join("model.ckpt"), trainer.iteration)?;
    }
    Ok(RunOutput {
        summary,
        metrics,
        model: trainer.model,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub std: f64,
}

impl SeedStats {
    pub fn of(values: &[f64]) -> SeedStats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        SeedStats { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub map_source: SeedStats,
    pub map_target: SeedStats,
    pub runs: Vec<RunSummary>,
}

impl MultiSeedSummary {
    pub fn new(runs: Vec<RunSummary>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Usage("no runs to summarize".into()))?;
        let variant = first.variant;
        let source: Vec<f64> = runs.iter().map(|r| r.final_map_source).collect();
        let target: Vec<f64> = runs.iter().map(|r| r.final_map_target).collect();
        Ok(MultiSeedSummary {
            variant,
            seeds: runs.iter().map(|r| r.seed).collect(),
            map_source: SeedStats::of(&source),
            map_target: SeedStats::of(&target),
            runs,
        })
    }
}
