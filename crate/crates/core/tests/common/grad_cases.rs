//! Finite-difference cases for every differentiable building block, shared
//! by the gradient tests and the acceptance report. Each case builds one
//! random instance from `seed` and returns its worst relative error.

use attn_align::adversarial::{
    adversarial_pass, modulate, DiscriminatorConfig, DiscriminatorStack, DomainDiscriminator, ModulationMode,
};
use attn_align::attention::{AttentionConfig, SelfAttention};
use attn_align::dataset::Domain;
use attn_align::detector::{
    detection_loss, match_anchors, AnchorGrid, BoundingBox, DetectionOutput, Detector, DetectorConfig, ScaleAnchors,
};
use attn_align::nn::{GroupNorm, LayerNorm, Linear};
use attn_align_tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{jitter_biases, module_gradcheck, project, rand_tensor, Worst};

pub type Case = fn(u64) -> Worst;

pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("softmax", softmax),
    ("conv2d", conv2d),
    ("linear", linear),
    ("layer norm", layer_norm),
    ("group norm", group_norm),
    ("attention block", attention_block),
    ("attention projections", attention_projections),
    ("discriminator", discriminator),
    ("modulation", modulation),
    ("detection loss", detection_loss_mining),
    ("detector", detector),
    ("adversarial pass", adversarial),
];

fn tensor_op<F>(seed: u64, shapes: &[&[usize]], f: F) -> Worst
where
    F: Fn(&mut Tape<f64>, &[Var]) -> attn_align_tensor::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let store = ParamStore::<f64>::new();
    module_gradcheck(&store, &inputs, seed, 200, |g, v| {
        let out = f(&mut g.tape, v)?;
        Ok(project(&mut g.tape, out, seed)?)
    })
}

pub fn matmul(seed: u64) -> Worst {
    tensor_op(seed, &[&[5, 4], &[4, 3]], |t, v| t.matmul(v[0], v[1]))
}

pub fn softmax(seed: u64) -> Worst {
    tensor_op(seed, &[&[3, 7]], |t, v| t.softmax(v[0], 1))
}

pub fn conv2d(seed: u64) -> Worst {
    tensor_op(seed, &[&[2, 5, 5], &[3, 2, 3, 3]], |t, v| {
        t.conv2d(v[0], v[1], None, 2, 1)
    })
}

/// Random input of `shape` through a layer built into a fresh store.
fn layer<L>(
    seed: u64,
    shape: &[usize],
    build: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> L,
    f: impl Fn(&L, &mut attn_align_tensor::Graph<f64>, Var) -> attn_align::Result<Var>,
) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let l = build(&mut store, &mut rng);
    jitter_biases(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, shape);
    module_gradcheck(&store, &[x], seed, 50, |g, v| {
        let out = f(&l, g, v[0])?;
        Ok(project(&mut g.tape, out, seed)?)
    })
}

pub fn linear(seed: u64) -> Worst {
    layer(
        seed,
        &[6, 5],
        |s, r| Linear::new(s, "fc", 5, 3, r).unwrap(),
        |l, g, x| l.forward(g, x),
    )
}

pub fn layer_norm(seed: u64) -> Worst {
    layer(
        seed,
        &[4, 6],
        |s, _| LayerNorm::new(s, "ln", 6).unwrap(),
        |l, g, x| l.forward(g, x),
    )
}

pub fn group_norm(seed: u64) -> Worst {
    layer(
        seed,
        &[4, 3, 3],
        |s, _| GroupNorm::new(s, "gn", 4, 2).unwrap(),
        |l, g, x| l.forward(g, x),
    )
}

fn attention_config() -> AttentionConfig {
    AttentionConfig {
        embed_dim: 8,
        num_heads: 2,
        value_dim: 8,
        ffn_hidden: 12,
        dropout_p: 0.1,
        detach_objectness: false,
    }
}

pub fn attention_block(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let attn = SelfAttention::new(attention_config(), &mut store, "attn", &mut rng).unwrap();
    jitter_biases(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[16, 8]);
    module_gradcheck(&store, &[x], seed, 12, |g, v| {
        let r = attn.forward(g, v[0], 4, 4, true)?;
        let a = project(&mut g.tape, r.output, seed)?;
        let b = project(&mut g.tape, r.objectness, seed + 1)?;
        let c = project(&mut g.tape, r.attended, seed + 2)?;
        let ab = g.tape.add(a, b)?;
        Ok(g.tape.add(ab, c)?)
    })
}

pub fn attention_projections(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let attn = SelfAttention::new(attention_config(), &mut store, "attn", &mut rng).unwrap();
    jitter_biases(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[9, 8]);
    module_gradcheck(&store, &[x], seed, 16, |g, v| {
        let (q, k, val) = attn.project_qkv(g, v[0])?;
        let scores = attn_align::attention::attention_scores(&mut g.tape, q, k, 2)?;
        let out = attn.attended_features(g, &scores, val)?;
        let a = project(&mut g.tape, out, seed)?;
        let b = project(&mut g.tape, q, seed + 3)?;
        Ok(g.tape.add(a, b)?)
    })
}

pub fn discriminator(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = DiscriminatorConfig { width: 4, groups: 2 };
    let d = DomainDiscriminator::new(&mut store, "d", 8, 3, &cfg, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[64, 3]);
    module_gradcheck(&store, &[x], seed, 12, |g, v| {
        let p = d.probability(g, v[0])?;
        Ok(g.tape.domain_bce(p, (seed % 2) as f64)?)
    })
}

pub fn modulation(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[16, 5]);
    let a = Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..1.0));
    let gamma = rng.random_range(0.0..1.0);
    let store = ParamStore::<f64>::new();
    [ModulationMode::Blend, ModulationMode::GlobalPlusLocal]
        .into_iter()
        .map(|mode| {
            module_gradcheck(&store, &[x.clone(), a.clone()], seed, 100, |g, v| {
                let m = modulate(&mut g.tape, v[0], v[1], gamma, mode)?;
                Ok(project(&mut g.tape, m, seed)?)
            })
        })
        .max_by(|a, b| a.err.total_cmp(&b.err))
        .expect("two modes")
}

fn small_grid() -> AnchorGrid {
    AnchorGrid::new(vec![
        ScaleAnchors {
            side: 4,
            sizes: vec![0.25, 0.4],
        },
        ScaleAnchors {
            side: 2,
            sizes: vec![0.6],
        },
    ])
    .unwrap()
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(0.15..0.5);
            let h = rng.random_range(0.15..0.5);
            BoundingBox::new(
                rng.random_range(w / 2.0..1.0 - w / 2.0),
                rng.random_range(h / 2.0..1.0 - h / 2.0),
                w,
                h,
                rng.random_range(0..2),
            )
        })
        .collect()
}

pub fn detection_loss_mining(seed: u64) -> Worst {
    let grid = small_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.len();
    let boxes = random_boxes(&mut rng, 1 + seed as usize % 3);
    let targets = match_anchors(&boxes, &grid);
    let logits = rand_tensor(&mut rng, &[n, 3]);
    let deltas = Tensor::from_fn(&[n, 4], |_| rng.random_range(-2.0..2.0));
    let store = ParamStore::<f64>::new();
    module_gradcheck(&store, &[logits, deltas], seed, 200, |g, v| {
        let out = DetectionOutput {
            cls_logits: v[0],
            box_deltas: v[1],
        };
        Ok(detection_loss(&mut g.tape, &out, &targets)?.total)
    })
}

pub fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig {
        image_side: 16,
        channels: 8,
        num_classes: 2,
        groups: 2,
        use_attention: true,
        attention: AttentionConfig {
            embed_dim: 8,
            num_heads: 2,
            value_dim: 8,
            ffn_hidden: 8,
            dropout_p: 0.1,
            detach_objectness: false,
        },
        objectness_reuse: false,
        anchors: AnchorGrid::new(vec![
            ScaleAnchors {
                side: 4,
                sizes: vec![0.3],
            },
            ScaleAnchors {
                side: 2,
                sizes: vec![0.5],
            },
            ScaleAnchors {
                side: 1,
                sizes: vec![0.8],
            },
        ])
        .unwrap(),
    }
}

pub fn detector(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(tiny_detector_config(), &mut store, &mut rng).unwrap();
    jitter_biases(&mut store, &mut rng);
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
    let targets = match_anchors(&random_boxes(&mut rng, 2), &det.config.anchors);
    module_gradcheck(&store, &[image], seed, 3, |g, v| {
        let (_, out) = det.forward(g, v[0], true)?;
        Ok(detection_loss(&mut g.tape, &out, &targets)?.total)
    })
}

pub fn adversarial(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(tiny_detector_config(), &mut store, &mut rng).unwrap();
    let mut stack = DiscriminatorStack::new(
        &mut store,
        &det.config.scale_sides(),
        8,
        &DiscriminatorConfig { width: 4, groups: 2 },
        1.0,
        &mut rng,
    )
    .unwrap();
    stack.reverse_gradients = false;
    jitter_biases(&mut store, &mut rng);
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
    let gamma = rng.random_range(0.0..1.0);
    module_gradcheck(&store, &[image], seed, 3, |g, v| {
        let enc = det.encode(g, v[0], true)?;
        let adv = adversarial_pass(
            g,
            &enc.features,
            enc.attention.as_deref(),
            gamma,
            ModulationMode::Blend,
            &stack,
            Domain::Target,
        )?;
        Ok(adv.loss)
    })
}
