//! Gradient reversal, attention-modulated alignment features, per-scale
//! domain discriminators, and the global-to-local `gamma` schedule.

use std::fmt;
use std::str::FromStr;

use attn_align_tensor::{Graph, ParamStore, Scalar, Tape, Var, PROB_CLAMP};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionResult;
use crate::dataset::Domain;
use crate::error::{Error, Result};
use crate::nn::{to_chw, ConvBlock, Linear};

/// How `gamma` evolves with training progress `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    /// `2 / (1 + exp(-delta r)) - 1`
    Sigmoid,
    Linear,
    Cubic,
    Constant0,
    Constant1,
    /// Sigmoid gamma, but the global term is never dropped from the
    /// alignment features (see [`ModulationMode::GlobalPlusLocal`]).
    GlobalPlusLocal,
}

impl GammaMode {
    pub const ALL: [GammaMode; 6] = [
        GammaMode::Sigmoid,
        GammaMode::Linear,
        GammaMode::Cubic,
        GammaMode::Constant0,
        GammaMode::Constant1,
        GammaMode::GlobalPlusLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GammaMode::Sigmoid => "sigmoid",
            GammaMode::Linear => "linear",
            GammaMode::Cubic => "cubic",
            GammaMode::Constant0 => "constant0",
            GammaMode::Constant1 => "constant1",
            GammaMode::GlobalPlusLocal => "global-plus-local",
        }
    }

    pub fn apply(self, r: f64, delta: f64) -> f64 {
        match self {
            GammaMode::Sigmoid | GammaMode::GlobalPlusLocal => sigmoid_gamma(r, delta),
            GammaMode::Linear => r,
            GammaMode::Cubic => r * r * r,
            GammaMode::Constant0 => 0.0,
            GammaMode::Constant1 => 1.0,
        }
    }

    pub fn modulation(self) -> ModulationMode {
        match self {
            GammaMode::GlobalPlusLocal => ModulationMode::GlobalPlusLocal,
            _ => ModulationMode::Blend,
        }
    }
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "const0" => Some(GammaMode::Constant0),
            "const1" => Some(GammaMode::Constant1),
            "global-local" | "md" => Some(GammaMode::GlobalPlusLocal),
            _ => None,
        };
        alias
            .or_else(|| GammaMode::ALL.into_iter().find(|m| m.name() == s))
            .ok_or_else(|| {
                let names: Vec<_> = GammaMode::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown gamma mode {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

pub fn sigmoid_gamma(r: f64, delta: f64) -> f64 {
    2.0 / (1.0 + (-delta * r).exp()) - 1.0
}

/// Controls when adversarial alignment starts and how `gamma` ramps up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSchedule {
    pub delta: f64,
    pub t_grl: usize,
    pub max_iteration: usize,
    pub mode: GammaMode,
}

impl AlignmentSchedule {
    pub fn new(delta: f64, t_grl: usize, max_iteration: usize, mode: GammaMode) -> Result<Self> {
        let s = AlignmentSchedule {
            delta,
            t_grl,
            max_iteration,
            mode,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.max_iteration <= self.t_grl {
            return Err(Error::config(format!(
                "max_iteration ({}) must exceed t_grl ({})",
                self.max_iteration, self.t_grl
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, iteration: usize) -> bool {
        iteration >= self.t_grl
    }

    /// Progress `r` in `[0, 1]`, measured from GRL activation.
    pub fn progress(&self, iteration: usize) -> f64 {
        if iteration < self.t_grl {
            return 0.0;
        }
        let r = (iteration - self.t_grl) as f64 / (self.max_iteration - self.t_grl) as f64;
        r.clamp(0.0, 1.0)
    }

    pub fn gamma(&self, iteration: usize) -> f64 {
        if iteration < self.t_grl {
            return 0.0;
        }
        self.mode.apply(self.progress(iteration), self.delta)
    }

    /// `iteration,r,gamma` rows for every `step`-th iteration up to `max_iteration`.
    pub fn to_csv(&self, step: usize) -> String {
        let mut out = String::from("iteration,r,gamma\n");
        let step = step.max(1);
        let mut it = 0;
        loop {
            out.push_str(&format!("{it},{},{}\n", self.progress(it), self.gamma(it)));
            if it == self.max_iteration {
                break;
            }
            it = (it + step).min(self.max_iteration);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModulationMode {
    /// `(1 - gamma) X + gamma X*A`
    Blend,
    /// `X + gamma X*A`
    GlobalPlusLocal,
}

/// Alignment features from `X = F + G: [HW, C]` and the objectness map
/// (`HW` elements, broadcast over channels).
pub fn modulate<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    objectness: Var,
    gamma: f64,
    mode: ModulationMode,
) -> Result<Var> {
    let hw = tape.shape(features)[0];
    if tape.shape(features).len() != 2 || tape.value(objectness).numel() != hw {
        return Err(attn_align_tensor::TensorError::Shape {
            op: "modulate",
            lhs: tape.shape(features).to_vec(),
            rhs: tape.shape(objectness).to_vec(),
        }
        .into());
    }
    let mask = tape.reshape(objectness, &[hw])?;
    let local = tape.mul_rows(features, mask)?;
    let local = tape.scale(local, T::of(gamma))?;
    let global = match mode {
        ModulationMode::Blend => tape.scale(features, T::of(1.0 - gamma))?,
        ModulationMode::GlobalPlusLocal => features,
    };
    Ok(tape.add(global, local)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub groups: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { width: 16, groups: 4 }
    }
}

/// Image-level domain classifier for one square `2^n x 2^n` feature map:
/// `n` blocks of (3x3 conv, GroupNorm, ReLU, 2x2 max-pool) then a linear
/// map to two logits.
#[derive(Clone, Debug)]
pub struct DomainDiscriminator {
    pub side: usize,
    pub in_channels: usize,
    blocks: Vec<ConvBlock>,
    fc: Linear,
}

impl DomainDiscriminator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        side: usize,
        in_channels: usize,
        config: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !side.is_power_of_two() {
            return Err(Error::config(format!(
                "discriminator input side {side} is not a power of two"
            )));
        }
        let n = side.trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(n);
        let mut c = in_channels;
        for b in 0..n {
            blocks.push(ConvBlock::new(
                store,
                &format!("{name}.block{b}"),
                c,
                config.width,
                1,
                config.groups,
                rng,
            )?);
            c = config.width;
        }
        let fc = Linear::new(store, &format!("{name}.fc"), c, 2, rng)?;
        Ok(DomainDiscriminator {
            side,
            in_channels,
            blocks,
            fc,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }

    /// Two logits `[1, 2]` (source, target) for features `[side*side, C]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let shape = g.tape.shape(features).to_vec();
        if shape != [self.side * self.side, self.in_channels] {
            return Err(attn_align_tensor::TensorError::Shape {
                op: "discriminate",
                lhs: shape,
                rhs: vec![self.side * self.side, self.in_channels],
            }
            .into());
        }
        let mut x = to_chw(g, features, self.side, self.side)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
            x = g.tape.maxpool2d(x, 2, 2)?;
        }
        let c = g.tape.shape(x)[0];
        let flat = g.tape.reshape(x, &[1, c])?;
        self.fc.forward(g, flat)
    }

    /// `P(target | features)`, shape `[1]`.
    pub fn probability<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let logits = self.logits(g, features)?;
        let p = g.tape.softmax(logits, 1)?;
        Ok(g.tape.index(p, 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorStack {
    pub discriminators: Vec<DomainDiscriminator>,
    pub grl_lambda: f64,
    /// When false the GRL is replaced by the identity (used to verify the
    /// reversal property).
    pub reverse_gradients: bool,
}

impl DiscriminatorStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        sides: &[usize],
        in_channels: usize,
        config: &DiscriminatorConfig,
        grl_lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(grl_lambda >= 0.0) {
            return Err(Error::config(format!("GRL coefficient must be >= 0, got {grl_lambda}")));
        }
        let discriminators = sides
            .iter()
            .enumerate()
            .map(|(s, &side)| {
                DomainDiscriminator::new(store, &format!("disc.s{}", s + 1), side, in_channels, config, rng)
            })
            .collect::<Result<_>>()?;
        Ok(DiscriminatorStack {
            discriminators,
            grl_lambda,
            reverse_gradients: true,
        })
    }

    /// `D_s(features)`: probability that the features come from the target domain.
    pub fn discriminate<T: Scalar>(&self, g: &mut Graph<T>, features: Var, scale: usize) -> Result<Var> {
        let d = self
            .discriminators
            .get(scale)
            .ok_or_else(|| Error::Usage(format!("no discriminator for scale {scale}")))?;
        d.probability(g, features)
    }
}

/// `-(1/S) sum_s [t log D_s + (1 - t) log(1 - D_s)]` with clamped probabilities.
pub fn discriminator_loss(probabilities: &[f64], domain: Domain) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Usage("discriminator_loss needs at least one scale".into()));
    }
    let t = domain.tag();
    let total: f64 = probabilities
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / probabilities.len() as f64)
}

#[derive(Clone, Debug)]
pub struct AdversarialOutput {
    pub loss: Var,
    pub probabilities: Vec<Var>,
    pub aligned: Vec<Var>,
}

/// Domain loss for one image: builds `M_s` per scale (or uses the raw
/// features when `attention` is `None`), passes it through the GRL into
/// `D_s`, and averages the binary cross-entropy over scales.
pub fn adversarial_pass<T: Scalar>(
    g: &mut Graph<T>,
    features: &[Var],
    attention: Option<&[AttentionResult]>,
    gamma: f64,
    mode: ModulationMode,
    stack: &DiscriminatorStack,
    domain: Domain,
) -> Result<AdversarialOutput> {
    if features.len() != stack.discriminators.len() {
        return Err(Error::config(format!(
            "{} feature scales but {} discriminators",
            features.len(),
            stack.discriminators.len()
        )));
    }
    if let Some(a) = attention {
        if a.len() != features.len() {
            return Err(Error::config("one attention result per scale required"));
        }
    }
    let mut aligned = Vec::with_capacity(features.len());
    let mut probabilities = Vec::with_capacity(features.len());
    for (s, &f) in features.iter().enumerate() {
        let m = match attention {
            Some(a) => modulate(&mut g.tape, a[s].residual, a[s].objectness, gamma, mode)?,
            None => f,
        };
        let reversed = if stack.reverse_gradients {
            g.tape.grl(m, stack.grl_lambda)?
        } else {
            m
        };
        aligned.push(m);
        probabilities.push(stack.discriminate(g, reversed, s)?);
    }
    let probs = g.tape.stack(&probabilities)?;
    let loss = g.tape.domain_bce(probs, domain.tag())?;
    Ok(AdversarialOutput {
        loss,
        probabilities,
        aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use attn_align_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_endpoints() {
        let s = AlignmentSchedule::new(5.0, 100, 300, GammaMode::Sigmoid).unwrap();
        assert_eq!(s.gamma(100), 0.0);
        assert_eq!(s.gamma(50), 0.0);
        assert!((s.gamma(300) - 0.986_614).abs() < 1e-6);
        assert_eq!(s.gamma(10_000), s.gamma(300));
        let c1 = AlignmentSchedule {
            mode: GammaMode::Constant1,
            ..s
        };
        assert_eq!(c1.gamma(100), 1.0);
        assert_eq!(c1.gamma(250), 1.0);
        let c0 = AlignmentSchedule {
            mode: GammaMode::Constant0,
            ..s
        };
        assert_eq!(c0.gamma(250), 0.0);
        assert!(AlignmentSchedule::new(5.0, 300, 300, GammaMode::Sigmoid).is_err());
        assert!(AlignmentSchedule::new(0.0, 0, 300, GammaMode::Sigmoid).is_err());
    }

    #[test]
    fn gamma_mode_parsing() {
        assert_eq!("cubic".parse::<GammaMode>().unwrap(), GammaMode::Cubic);
        assert_eq!("const1".parse::<GammaMode>().unwrap(), GammaMode::Constant1);
        let err = "quartic".parse::<GammaMode>().unwrap_err().to_string();
        assert!(err.contains("sigmoid"), "{err}");
    }

    #[test]
    fn schedule_csv_is_monotone() {
        let s = AlignmentSchedule::new(5.0, 10, 50, GammaMode::Sigmoid).unwrap();
        let csv = s.to_csv(7);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iteration,r,gamma"));
        let gammas: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert!(gammas.windows(2).all(|w| w[0] <= w[1]));
        assert!(csv.trim_end().ends_with(&format!("50,1,{}", sigmoid_gamma(1.0, 5.0))));
    }

    #[test]
    fn modulation_boundaries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64 - 5.5));
        let a = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap());
        let m0 = modulate(&mut tape, x, a, 0.0, ModulationMode::Blend).unwrap();
        assert_eq!(tape.value(m0), tape.value(x));
        let m1 = modulate(&mut tape, x, a, 1.0, ModulationMode::Blend).unwrap();
        let expect = tape.mul_rows(x, a).err();
        assert!(expect.is_none());
        let xa: Vec<f64> = (0..12)
            .map(|i| (i as f64 - 5.5) * [0.0, 0.25, 0.5, 1.0][i / 3])
            .collect();
        assert_eq!(tape.value(m1).data(), xa.as_slice());
        let ones = tape.constant(Tensor::full(&[2, 2], 1.0));
        let mh = modulate(&mut tape, x, ones, 0.5, ModulationMode::Blend).unwrap();
        assert_eq!(tape.value(mh), tape.value(x));
        let md = modulate(&mut tape, x, a, 0.5, ModulationMode::GlobalPlusLocal).unwrap();
        for (i, &v) in tape.value(md).data().iter().enumerate() {
            assert!((v - ((i as f64 - 5.5) + 0.5 * xa[i])).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(modulate(&mut tape, x, bad, 0.5, ModulationMode::Blend).is_err());
    }

    #[test]
    fn discriminator_block_count_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = DiscriminatorConfig { width: 4, groups: 2 };
        let d = DomainDiscriminator::new(&mut store, "d", 8, 3, &cfg, &mut rng).unwrap();
        assert_eq!(d.num_blocks(), 3);
        assert!(DomainDiscriminator::new(&mut store, "e", 6, 3, &cfg, &mut rng).is_err());

        let input = crate::nn::normal_tensor::<f64, _>(&mut rng, &[64, 3], 1.0);
        let mut g = Graph::new(&store, 0);
        let x = g.tape.constant(input.clone());
        let logits = d.logits(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(logits), &[1, 2]);
        let p = d.probability(&mut g, x).unwrap();
        let pv = g.tape.value(p).data()[0];
        assert!(pv > 0.0 && pv < 1.0);

        // zero final layer: symmetric logits
        let mut zeroed = store.clone();
        for id in [d.fc().weight, d.fc().bias] {
            let shape = zeroed.get(id).shape().to_vec();
            *zeroed.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&zeroed, 0);
        let x = g.tape.constant(input);
        let p = d.probability(&mut g, x).unwrap();
        assert_eq!(g.tape.value(p).data()[0], 0.5);
    }

    #[test]
    fn scalar_loss_examples() {
        for d in [Domain::Source, Domain::Target] {
            let l = discriminator_loss(&[0.5, 0.5, 0.5], d).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(discriminator_loss(&[1.0, 1.0], Domain::Target).unwrap() < 1e-6);
        let l = discriminator_loss(&[0.2, 0.4], Domain::Source).unwrap();
        // -(ln 0.8 + ln 0.6) / 2
        assert!((l - 0.366_984_587_540_1).abs() < 1e-12);
        assert!(discriminator_loss(&[], Domain::Source).is_err());
    }
}
