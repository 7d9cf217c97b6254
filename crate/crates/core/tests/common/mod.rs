#![allow(dead_code)]

pub mod ap_oracle;
pub mod grad_cases;

use attn_align::Result;
use attn_align_tensor::gradcheck::rel_err;
use attn_align_tensor::{Graph, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random linear functional of `out`.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> attn_align_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9f0f);
    let w = tape.constant(rand_tensor(&mut rng, tape.shape(out)));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[derive(Debug)]
pub struct Worst {
    pub err: f64,
    pub what: String,
}

/// Central differences over inputs and (a sample of) parameters of a
/// module-level scalar function. Returns the largest relative error.
pub fn module_gradcheck<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, max_coords: usize, f: F) -> Worst
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(store, seed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.tape.value(out).data()[0]
    };
    let mut g = Graph::new(store, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).unwrap();
    let mut grads = g.tape.backward(out).unwrap();
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    let param_grads = g.param_grads(&mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut worst = Worst {
        err: 0.0,
        what: String::new(),
    };
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        }
    };
    let mut record = |err: f64, what: String, a: f64, n: f64| {
        if err > worst.err {
            worst = Worst {
                err,
                what: format!("{what} analytic={a} numeric={n}"),
            };
        }
    };

    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in pick(inputs[k].numel(), &mut rng) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + EPS;
            let plus = eval(store, &work);
            work[k].data_mut()[i] = orig - EPS;
            let minus = eval(store, &work);
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            record(
                rel_err(input_grads[k][i], numeric),
                format!("input {k}[{i}]"),
                input_grads[k][i],
                numeric,
            );
        }
    }
    let mut pstore = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let analytic = param_grads[k].clone().unwrap_or_else(|| vec![0.0; n]);
        for i in pick(n, &mut rng) {
            let orig = pstore.get(id).data()[i];
            pstore.get_mut(id).data_mut()[i] = orig + EPS;
            let plus = eval(&pstore, inputs);
            pstore.get_mut(id).data_mut()[i] = orig - EPS;
            let minus = eval(&pstore, inputs);
            pstore.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            record(
                rel_err(analytic[i], numeric),
                format!("{}[{i}]", store.name(id)),
                analytic[i],
                numeric,
            );
        }
    }
    worst
}

/// Random biases, so that zero feature rows do not give exactly tied
/// attention scores (a non-differentiable point of the row maximum).
pub fn jitter_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
}

/// Small, fast experiment: 32-pixel images, 8 channels, few iterations.
pub fn tiny_config() -> attn_align::harness::ExperimentConfig {
    let mut c = attn_align::harness::ExperimentConfig::default();
    c.data.image_side = 32;
    c.data.min_size = 6;
    c.data.max_size = 14;
    c.data.max_objects = 3;
    c.data.source_train = 16;
    c.data.target_train = 16;
    c.data.source_eval = 8;
    c.data.target_eval = 8;
    c.model.channels = 8;
    c.model.groups = 2;
    c.model.num_heads = 2;
    c.model.ffn_hidden = 16;
    c.model.disc_width = 8;
    c.model.disc_groups = 2;
    c.schedule.max_iteration = 6;
    c.schedule.t_grl = 3;
    c.optim.batch_size = 2;
    c.optim.lr_decay_step = None;
    c
}

pub struct SignProbe {
    /// `L_dis(theta_D - eps * g_D) - L_dis(theta_D)`.
    pub discriminator_change: f64,
    /// `L_dis(theta_F - eps * g_F) - L_dis(theta_F)`, with `g_F` the
    /// reversed gradient reaching the feature extractor.
    pub feature_change: f64,
}

/// Takes a small normalized step along the reported gradient of the domain
/// loss, once for the discriminator parameters and once for everything
/// upstream of the GRL, and reports how the domain loss changes (in f64).
pub fn sign_probe(seed: u64, step: f64) -> Result<SignProbe> {
    use attn_align::dataset::{DetectionSample, Split};
    use attn_align::detector::match_anchors;
    use attn_align::harness::{batch_gradients, Batch, Model, ModelParts, SourceItem, Variant};

    let mut config = tiny_config();
    config.data.seed = seed;
    config.model.dropout = 0.0;
    let model = Model::new(&config, Variant::Ours, seed)?;
    let source = config.data.synthesize(Split::SourceTrain)?;
    let target = config.data.synthesize(Split::TargetTrain)?;
    let targets: Vec<_> = source.samples[..2]
        .iter()
        .map(|s| match_anchors(&s.boxes, &model.detector.config.anchors))
        .collect();
    let items: Vec<SourceItem> = source.samples[..2]
        .iter()
        .zip(&targets)
        .map(|(sample, targets)| SourceItem { sample, targets })
        .collect();
    let tgt: Vec<&DetectionSample> = target.samples[..2].iter().collect();
    let batch = Batch {
        source: &items,
        target: &tgt,
        gamma: 0.5,
        modulation: attn_align::adversarial::ModulationMode::Blend,
        adversarial: true,
        detection: false,
    };
    let parts = ModelParts {
        detector: &model.detector,
        discriminators: model.discriminators.as_ref(),
    };
    let store: ParamStore<f64> = model.store.cast();
    let (base, grads) = batch_gradients(&parts, &store, seed, &batch)?;

    let moved = |disc: bool| -> Result<f64> {
        let mut s = store.clone();
        let ids: Vec<_> = s.ids().collect();
        let selected = |k: usize| s.name(ids[k]).starts_with("disc.") == disc;
        let norm: f64 = (0..ids.len())
            .filter(|&k| selected(k))
            .filter_map(|k| grads[k].as_ref())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0, "zero gradient (disc={disc})");
        let chosen: Vec<usize> = (0..ids.len()).filter(|&k| selected(k)).collect();
        for k in chosen {
            if let Some(g) = &grads[k] {
                for (p, g) in s.get_mut(ids[k]).data_mut().iter_mut().zip(g) {
                    *p -= step * g / norm;
                }
            }
        }
        Ok(batch_gradients(&parts, &s, seed, &batch)?.0.total)
    };
    Ok(SignProbe {
        discriminator_change: moved(true)? - base.total,
        feature_change: moved(false)? - base.total,
    })
}

/// INI equivalent of [`tiny_config`] for command-line runs.
pub const TINY_INI: &str = "\
[data]
image_side = 32
min_size = 6
max_size = 14
max_objects = 3
source_train = 16
target_train = 16
source_eval = 8
target_eval = 8

[model]
channels = 8
groups = 2
num_heads = 2
ffn_hidden = 16
disc_width = 8
disc_groups = 2

[schedule]
max_iteration = 6
t_grl = 3

[optim]
batch_size = 2
lr_decay_step = none

[eval]
export_iterations = 0, 6
";

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_attn-align"))
}

/// Runs the binary; returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&std::ffi::OsStr]) -> (i32, String, String) {
    let out = bin()
        .args(args)
        .env_remove("ATTN_ALIGN_THREADS")
        .output()
        .expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
