//! Command-line front end: `generate`, `train`, `eval`, `sweep-gamma`,
//! `export-attention`.
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 I/O, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attn_align_tensor::TensorError;
use clap::{Args, Parser, Subcommand};
use ini::Ini;

use crate::adversarial::{AlignmentSchedule, GammaMode};
use crate::dataset::{decode_ppm, load, rgb_to_tensor};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate_map, export_attention, load_detector, run_experiment, ExperimentConfig, ExperimentData, MultiSeedSummary,
    RunOptions, Variant,
};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub const THREADS_ENV: &str = "ATTN_ALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "attn-align",
    version,
    about = "Attention-guided domain alignment for a toy detector"
)]
pub struct Cli {
    /// Bit-exact mode: single-threaded execution.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// INI file with [data], [model], [schedule], [optim], [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set schedule.max_iteration=200`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the source/target train and eval splits.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant (one or more seeds) and evaluate it.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "ours")]
        variant: String,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Directory holding the generated splits (overrides data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print progress to stderr every N iterations.
        #[arg(long, default_value_t = 0)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on one dataset directory.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write gamma schedules for several deltas and modes, optionally training each.
    SweepGamma {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,5,10")]
        deltas: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "linear,cubic,const1")]
        modes: Vec<String>,
        /// Iteration stride of the schedule CSVs.
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// Also train the attention variant under every setting.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-scale objectness maps (PGM and CSV) for one image.
    ExportAttention {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 PPM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Tensor(t) => match t {
            TensorError::NonFinite(_) => EXIT_NUMERIC,
            TensorError::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        },
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn threads(strict: bool) -> Result<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        ),
        Err(_) => None,
    };
    if strict {
        return Ok(1);
    }
    Ok(requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = threads(cli.strict)?;
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = config.load()?;
            cfg.data.generate_all(&out)?;
            println!("wrote 4 splits to {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            variant,
            seed,
            data,
            out,
            log_every,
        } => {
            let variant: Variant = variant.parse()?;
            let mut cfg = config.load()?;
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            let seeds = if seed.is_empty() { vec![cfg.schedule.seed] } else { seed };
            let data = ExperimentData::load(&cfg.data_dir)?;
            let target_map = train(&cfg, variant, &seeds, &data, &out, threads, log_every)?;
            println!("mAP@0.5={target_map}");
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
        } => {
            let cfg = config.load()?;
            let loaded = load_detector(&checkpoint, &cfg)?;
            let dataset = load(&data)?;
            let report = evaluate_map(&loaded.model, &dataset, &cfg, threads)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            println!("mAP@0.5={}", report.map);
            Ok(())
        }
        Command::SweepGamma {
            config,
            deltas,
            modes,
            step,
            train: with_training,
            data,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            let settings = sweep_settings(&cfg, &deltas, &modes)?;
            mkdir(&out)?;
            for (label, schedule) in &settings {
                write_file(
                    &out.join(format!("gamma_{label}.csv")),
                    schedule.to_csv(step).as_bytes(),
                )?;
            }
            if with_training {
                let data = ExperimentData::load(&cfg.data_dir)?;
                let mut table = String::from("setting,map_source,map_target\n");
                for (label, schedule) in &settings {
                    let mut run_cfg = cfg.clone();
                    run_cfg.schedule.delta = schedule.delta;
                    run_cfg.schedule.gamma_mode = schedule.mode;
                    let options = RunOptions {
                        out_dir: Some(out.join(label)),
                        threads,
                        log_every: 0,
                    };
                    let s = run_experiment(&run_cfg, Variant::Ours, &data, &options)?.summary;
                    table.push_str(&format!("{label},{},{}\n", s.final_map_source, s.final_map_target));
                }
                write_file(&out.join("sweep.csv"), table.as_bytes())?;
                print!("{table}");
            }
            Ok(())
        }
        Command::ExportAttention {
            config,
            checkpoint,
            image,
            out,
        } => {
            let cfg = config.load()?;
            let loaded = load_detector(&checkpoint, &cfg)?;
            let bytes = fs::read(&image).map_err(|e| Error::io(&image, e))?;
            let (w, h, rgb) = decode_ppm(&bytes, &image)?;
            let side = loaded.model.detector.config.image_side;
            if w != side || h != side {
                return Err(Error::config(format!(
                    "image is {w}x{h} but the checkpoint's detector expects {side}x{side}"
                )));
            }
            let tensor = rgb_to_tensor(&rgb, side)?;
            let written = export_attention(&loaded.model, &tensor, loaded.iteration.unwrap_or(0), &out)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains every seed; returns the (mean) final target mAP.
fn train(
    cfg: &ExperimentConfig,
    variant: Variant,
    seeds: &[u64],
    data: &ExperimentData,
    out: &Path,
    threads: usize,
    log_every: usize,
) -> Result<f64> {
    if let [seed] = seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.schedule.seed = *seed;
        let options = RunOptions {
            out_dir: Some(out.to_path_buf()),
            threads,
            log_every,
        };
        return Ok(run_experiment(&run_cfg, variant, data, &options)?
            .summary
            .final_map_target);
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.schedule.seed = seed;
        let options = RunOptions {
            out_dir: Some(out.join(format!("seed{seed}"))),
            threads,
            log_every,
        };
        runs.push(run_experiment(&run_cfg, variant, data, &options)?.summary);
    }
    let summary = MultiSeedSummary::new(runs)?;
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )?;
    Ok(summary.map_target.mean)
}

/// `(label, schedule)` for every delta under the sigmoid schedule and for
/// every extra mode.
pub fn sweep_settings(
    cfg: &ExperimentConfig,
    deltas: &[String],
    modes: &[String],
) -> Result<Vec<(String, AlignmentSchedule)>> {
    let deltas: Vec<&String> = deltas.iter().filter(|d| !d.trim().is_empty()).collect();
    if deltas.is_empty() {
        return Err(Error::Usage("--deltas needs at least one value".into()));
    }
    let mut out = Vec::new();
    for d in deltas {
        let delta: f64 = d
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("invalid delta '{d}'")))?;
        let s = AlignmentSchedule::new(
            delta,
            cfg.schedule.t_grl,
            cfg.schedule.max_iteration,
            GammaMode::Sigmoid,
        )?;
        out.push((format!("sigmoid_delta{delta}"), s));
    }
    for m in modes.iter().filter(|m| !m.trim().is_empty()) {
        let mode: GammaMode = m.trim().parse()?;
        let s = AlignmentSchedule::new(cfg.schedule.delta, cfg.schedule.t_grl, cfg.schedule.max_iteration, mode)?;
        out.push((mode.name().to_string(), s));
    }
    Ok(out)
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
            apply_ini(&mut cfg, &text).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
                other => other,
            })?;
        }
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{o}' is not SECTION.KEY=VALUE")))?;
            let (section, key) = key
                .split_once('.')
                .ok_or_else(|| Error::config(format!("override '{o}' is not SECTION.KEY=VALUE")))?;
            set_value(&mut cfg, section.trim(), key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies every `[section] key = value` of an INI document; unknown
/// sections and keys are errors.
pub fn apply_ini(cfg: &mut ExperimentConfig, text: &str) -> Result<()> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::config(format!("malformed INI: {e}")))?;
    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if let Some((k, _)) = props.iter().next() {
                return Err(Error::config(format!("key '{k}' outside of any section")));
            }
            continue;
        };
        for (key, value) in props.iter() {
            set_value(cfg, section, key, value)?;
        }
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for [{section}] {key}")))
}

fn parse_opt<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(section, key, v).map(Some),
    }
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(section, key, v))
        .collect()
}

pub fn set_value(cfg: &mut ExperimentConfig, section: &str, key: &str, value: &str) -> Result<()> {
    let (s, k, v) = (section, key, value);
    match (s, k) {
        ("data", "dir") => cfg.data_dir = PathBuf::from(v),
        ("data", "seed") => cfg.data.seed = parse(s, k, v)?,
        ("data", "image_side") => cfg.data.image_side = parse(s, k, v)?,
        ("data", "min_objects") => cfg.data.min_objects = parse(s, k, v)?,
        ("data", "max_objects") => cfg.data.max_objects = parse(s, k, v)?,
        ("data", "min_size") => cfg.data.min_size = parse(s, k, v)?,
        ("data", "max_size") => cfg.data.max_size = parse(s, k, v)?,
        ("data", "gain") => cfg.data.shift.gain = parse(s, k, v)?,
        ("data", "noise_sigma") => cfg.data.shift.noise_sigma = parse(s, k, v)?,
        ("data", "haze_alpha") => cfg.data.shift.haze_alpha = parse(s, k, v)?,
        ("data", "haze_level") => cfg.data.shift.haze_level = parse(s, k, v)?,
        ("data", "source_train") => cfg.data.source_train = parse(s, k, v)?,
        ("data", "target_train") => cfg.data.target_train = parse(s, k, v)?,
        ("data", "source_eval") => cfg.data.source_eval = parse(s, k, v)?,
        ("data", "target_eval") => cfg.data.target_eval = parse(s, k, v)?,
        ("model", "channels") => cfg.model.channels = parse(s, k, v)?,
        ("model", "groups") => cfg.model.groups = parse(s, k, v)?,
        ("model", "num_heads") => cfg.model.num_heads = parse(s, k, v)?,
        ("model", "ffn_hidden") => cfg.model.ffn_hidden = parse(s, k, v)?,
        ("model", "dropout") => cfg.model.dropout = parse(s, k, v)?,
        ("model", "detach_objectness") => cfg.model.detach_objectness = parse(s, k, v)?,
        ("model", "objectness_reuse") => cfg.model.objectness_reuse = parse(s, k, v)?,
        ("model", "disc_width") => cfg.model.disc_width = parse(s, k, v)?,
        ("model", "disc_groups") => cfg.model.disc_groups = parse(s, k, v)?,
        ("schedule", "max_iteration") => cfg.schedule.max_iteration = parse(s, k, v)?,
        ("schedule", "t_grl") => cfg.schedule.t_grl = parse(s, k, v)?,
        ("schedule", "delta") => cfg.schedule.delta = parse(s, k, v)?,
        ("schedule", "gamma_mode") => cfg.schedule.gamma_mode = v.parse()?,
        ("schedule", "grl_lambda") => cfg.schedule.grl_lambda = parse(s, k, v)?,
        ("schedule", "early_stop") => cfg.schedule.early_stop = parse_opt(s, k, v)?,
        ("schedule", "seed") => cfg.schedule.seed = parse(s, k, v)?,
        ("optim", "lr_detector") => cfg.optim.lr_detector = parse(s, k, v)?,
        ("optim", "lr_discriminator") => cfg.optim.lr_discriminator = parse(s, k, v)?,
        ("optim", "lr_decay_step") => cfg.optim.lr_decay_step = parse_opt(s, k, v)?,
        ("optim", "lr_decay_factor") => cfg.optim.lr_decay_factor = parse(s, k, v)?,
        ("optim", "momentum") => cfg.optim.momentum = parse(s, k, v)?,
        ("optim", "batch_size") => cfg.optim.batch_size = parse(s, k, v)?,
        ("eval", "iou_threshold") => cfg.eval.iou_threshold = parse(s, k, v)?,
        ("eval", "score_threshold") => cfg.eval.score_threshold = parse(s, k, v)?,
        ("eval", "nms_iou") => cfg.eval.nms_iou = parse(s, k, v)?,
        ("eval", "max_detections") => cfg.eval.max_detections = parse(s, k, v)?,
        ("eval", "eval_every") => cfg.eval.eval_every = parse(s, k, v)?,
        ("eval", "eval_images") => cfg.eval.eval_images = parse(s, k, v)?,
        ("eval", "export_iterations") => cfg.eval.export_iterations = parse_list(s, k, v)?,
        ("data" | "model" | "schedule" | "optim" | "eval", _) => {
            return Err(Error::config(format!("unknown key [{s}] {k}")));
        }
        _ => return Err(Error::config(format!("unknown section [{s}] (key {k})"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip_and_rejections() {
        let mut cfg = ExperimentConfig::default();
        apply_ini(
            &mut cfg,
            "[schedule]\nmax_iteration = 300\ngamma_mode = cubic\nearly_stop = none\n[eval]\nexport_iterations = 0, 100\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.max_iteration, 300);
        assert_eq!(cfg.schedule.gamma_mode, GammaMode::Cubic);
        assert_eq!(cfg.eval.export_iterations, vec![0, 100]);
        let err = apply_ini(&mut cfg, "[optim]\nlearning_rate = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(apply_ini(&mut cfg, "[training]\nx = 1\n").is_err());
        assert!(apply_ini(&mut cfg, "[optim]\nbatch_size = four\n").is_err());
    }

    #[test]
    fn sweep_requires_deltas() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(sweep_settings(&cfg, &[], &[]), Err(Error::Usage(_))));
        let s = sweep_settings(&cfg, &["5".into()], &["linear".into()]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].0, "sigmoid_delta5");
    }
}
