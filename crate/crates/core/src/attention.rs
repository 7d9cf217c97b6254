//! Multi-head self-attention producing per-scale objectness maps.
//!
//! The block maps a flattened feature map `F: [HW, C]` to
//! - `scores`: per-head row-stochastic `[HW, HW]` attention matrices,
//! - `objectness`: `[H, W]` map in `[0, 1]` (row maxima averaged over heads,
//!   then min-max normalized),
//! - `attended` `G = concat_h(A'_h V_h) W_o`,
//! - `residual` `F + G`, and
//! - `output`: `LN(x1 + FFN(x1))` with `x1 = LN(F + G)`, fed to the detection head.
//!
//! No positional encodings are used, so the block is equivariant to
//! permutations of the spatial positions.

use attn_align_tensor::{Graph, ParamStore, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Query/key width `D`.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Value width; equals the channel count of the input features.
    pub value_dim: usize,
    pub ffn_hidden: usize,
    pub dropout_p: f64,
    /// Treat the objectness map as a constant mask (no gradient through it).
    #[serde(default)]
    pub detach_objectness: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            embed_dim: 256,
            num_heads: 8,
            value_dim: 256,
            ffn_hidden: 2048,
            dropout_p: 0.1,
            detach_objectness: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.value_dim == 0 || self.num_heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) || !self.value_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} and value_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.value_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionResult {
    pub objectness: Var,
    pub attended: Var,
    pub residual: Var,
    pub output: Var,
    pub scores: Vec<Var>,
}

/// Row-wise `softmax(Q_h K_h^T / sqrt(d_head))` for every head.
pub fn attention_scores<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, num_heads: usize) -> Result<Vec<Var>> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || qs != ks || qs[1] % num_heads != 0 {
        return Err(attn_align_tensor::TensorError::Shape {
            op: "attention_scores",
            lhs: qs,
            rhs: ks,
        }
        .into());
    }
    let dh = qs[1] / num_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    (0..num_heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale)?;
            Ok(tape.softmax(logits, 1)?)
        })
        .collect()
}

/// Mean over heads of each row's maximum, reshaped to `[h, w]` and min-max
/// normalized. A constant map normalizes to all zeros.
pub fn objectness_map<T: Scalar>(tape: &mut Tape<T>, scores: &[Var], h: usize, w: usize) -> Result<Var> {
    let first = *scores
        .first()
        .ok_or_else(|| Error::Usage("objectness_map needs at least one head".into()))?;
    let hw = tape.shape(first)[0];
    if hw != h * w {
        return Err(Error::config(format!("{hw} score rows do not match a {h}x{w} grid")));
    }
    let mut acc = tape.row_max(first)?;
    for &s in &scores[1..] {
        let m = tape.row_max(s)?;
        acc = tape.add(acc, m)?;
    }
    if scores.len() > 1 {
        acc = tape.scale(acc, T::of(1.0 / scores.len() as f64))?;
    }
    let norm = tape.minmax_normalize(acc)?;
    Ok(tape.reshape(norm, &[h, w])?)
}

/// Concatenation over heads of `A'_h V_h` (before the output projection).
pub fn attend<T: Scalar>(tape: &mut Tape<T>, scores: &[Var], v: Var) -> Result<Var> {
    let heads = scores.len();
    let c = tape.shape(v)[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!("value width {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let parts = scores
        .iter()
        .enumerate()
        .map(|(h, &s)| {
            let vh = tape.slice_cols(v, h * dh, dh)?;
            Ok(tape.matmul(s, vh)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    Ok(tape.concat_cols(&parts)?)
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub config: AttentionConfig,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: LayerNorm,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng>(
        config: AttentionConfig,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.value_dim, config.embed_dim);
        Ok(SelfAttention {
            query: Linear::new(store, &format!("{name}.q"), c, d, rng)?,
            key: Linear::new(store, &format!("{name}.k"), c, d, rng)?,
            value: Linear::new(store, &format!("{name}.v"), c, c, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            ffn1: Linear::new(store, &format!("{name}.ffn1"), c, config.ffn_hidden, rng)?,
            ffn2: Linear::new(store, &format!("{name}.ffn2"), config.ffn_hidden, c, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            config,
        })
    }

    /// Projects flattened features `[HW, C]` to `Q, K: [HW, D]` and `V: [HW, C]`.
    pub fn project_qkv<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<(Var, Var, Var)> {
        let shape = g.tape.shape(features);
        if shape.len() != 2 || shape[1] != self.config.value_dim {
            return Err(Error::config(format!(
                "attention expects [HW, {}] features, got {:?}",
                self.config.value_dim, shape
            )));
        }
        Ok((
            self.query.forward(g, features)?,
            self.key.forward(g, features)?,
            self.value.forward(g, features)?,
        ))
    }

    /// `G = concat_h(A'_h V_h) W_o + b_o`, shape `[HW, C]`.
    pub fn attended_features<T: Scalar>(&self, g: &mut Graph<T>, scores: &[Var], v: Var) -> Result<Var> {
        let heads = attend(&mut g.tape, scores, v)?;
        self.out.forward(g, heads)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        h: usize,
        w: usize,
        training: bool,
    ) -> Result<AttentionResult> {
        let (q, k, v) = self.project_qkv(g, features)?;
        if g.tape.shape(features)[0] != h * w {
            return Err(Error::config(format!(
                "features {:?} do not match a {h}x{w} grid",
                g.tape.shape(features)
            )));
        }
        let scores = attention_scores(&mut g.tape, q, k, self.config.num_heads)?;
        let mut objectness = objectness_map(&mut g.tape, &scores, h, w)?;
        if self.config.detach_objectness {
            objectness = g.tape.detach(objectness);
        }
        let attended = self.attended_features(g, &scores, v)?;
        let residual = g.tape.add(features, attended)?;

        let x1 = self.norm1.forward(g, residual)?;
        let hidden = self.ffn1.forward(g, x1)?;
        let hidden = g.tape.relu(hidden)?;
        let hidden = g.tape.dropout(hidden, self.config.dropout_p, training)?;
        let ffn = self.ffn2.forward(g, hidden)?;
        let x2 = g.tape.add(x1, ffn)?;
        let output = self.norm2.forward(g, x2)?;

        Ok(AttentionResult {
            objectness,
            attended,
            residual,
            output,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use attn_align_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> AttentionConfig {
        AttentionConfig {
            embed_dim: 4,
            num_heads: 2,
            value_dim: 4,
            ffn_hidden: 8,
            dropout_p: 0.1,
            detach_objectness: false,
        }
    }

    #[test]
    fn defaults_follow_detr_style_block() {
        let c = AttentionConfig::default();
        assert_eq!((c.num_heads, c.ffn_hidden, c.dropout_p), (8, 2048, 0.1));
        c.validate().unwrap();
        let bad = AttentionConfig {
            embed_dim: 10,
            num_heads: 4,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_input_projects_to_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let attn = SelfAttention::new(small_config(), &mut store, "a", &mut rng).unwrap();
        for (id, name, _) in store.clone().iter() {
            if name.ends_with(".bias") {
                let n = store.get(id).numel();
                *store.get_mut(id) = Tensor::from_fn(&[n], |i| i as f64 + 0.5);
            }
        }
        let mut g = Graph::new(&store, 0);
        let f = g.tape.constant(Tensor::zeros(&[4, 4]));
        let (q, k, v) = attn.project_qkv(&mut g, f).unwrap();
        for var in [q, k, v] {
            assert_eq!(g.tape.shape(var), &[4, 4]);
            for row in g.tape.value(var).data().chunks(4) {
                assert_eq!(row, &[0.5, 1.5, 2.5, 3.5]);
            }
        }
        let wrong = g.tape.constant(Tensor::zeros(&[4, 3]));
        assert!(matches!(attn.project_qkv(&mut g, wrong), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_and_saturated_scores() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[4, 2]));
        let s = attention_scores(&mut tape, z, z, 1).unwrap();
        assert!(tape.value(s[0]).data().iter().all(|&v| v == 0.25));

        // head dim 1: logit = q * k; one pair with q*k = 50
        let q = tape.constant(Tensor::new(vec![3, 1], vec![50.0, 0.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let s = attention_scores(&mut tape, q, k, 1).unwrap();
        assert!(tape.value(s[0]).data()[1] > 1.0 - 1e-12);
    }

    #[test]
    fn objectness_min_max_algebra() {
        // rows with maxima 0.2, 0.4, 0.6, 0.8 on a 2x2 grid
        let mut tape = Tape::<f64>::new();
        let rows = [0.2, 0.4, 0.6, 0.8];
        let scores = Tensor::from_fn(&[4, 4], |i| {
            let (r, c) = (i / 4, i % 4);
            if c == r {
                rows[r]
            } else {
                0.0
            }
        });
        let s = tape.constant(scores);
        let a = objectness_map(&mut tape, &[s], 2, 2).unwrap();
        let v = tape.value(a).data();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (x, e) in v.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12, "{v:?}");
        }
        assert_eq!(tape.shape(a), &[2, 2]);
    }

    #[test]
    fn one_hot_scores_give_degenerate_zero_map() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let a = objectness_map(&mut tape, &[eye, eye], 2, 2).unwrap();
        assert_eq!(tape.value(a).data(), &[0.0; 4]);
    }

    #[test]
    fn attend_averages_and_permutes() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_fn(&[4, 2], |i| (i * i) as f64));
        let uniform = tape.constant(Tensor::full(&[4, 4], 0.25));
        let out = attend(&mut tape, &[uniform], v).unwrap();
        let mean = [(0.0 + 4.0 + 16.0 + 36.0) / 4.0, (1.0 + 9.0 + 25.0 + 49.0) / 4.0];
        for row in tape.value(out).data().chunks(2) {
            assert_eq!(row, &mean);
        }
        // permutation rows pick rows 3, 0, 2, 1 of V
        let perm = [3usize, 0, 2, 1];
        let p = tape.constant(Tensor::from_fn(
            &[4, 4],
            |i| if perm[i / 4] == i % 4 { 1.0 } else { 0.0 },
        ));
        let out = attend(&mut tape, &[p], v).unwrap();
        let vv = tape.value(v).data().to_vec();
        for (r, row) in tape.value(out).data().chunks(2).enumerate() {
            assert_eq!(row, &vv[perm[r] * 2..perm[r] * 2 + 2]);
        }
    }

    #[test]
    fn block_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let config = AttentionConfig {
            embed_dim: 8,
            num_heads: 2,
            value_dim: 8,
            ffn_hidden: 16,
            dropout_p: 0.1,
            detach_objectness: false,
        };
        let attn = SelfAttention::new(config, &mut store, "a", &mut rng).unwrap();
        let input = crate::nn::normal_tensor::<f64, _>(&mut rng, &[16, 8], 1.0);
        let run = || {
            let mut g = Graph::new(&store, 9);
            let f = g.tape.constant(input.clone());
            let r = attn.forward(&mut g, f, 4, 4, false).unwrap();
            (
                g.tape.value(r.output).clone(),
                g.tape.value(r.objectness).clone(),
                g.tape.shape(r.attended).to_vec(),
                r.scores.iter().map(|&s| g.tape.value(s).clone()).collect::<Vec<_>>(),
            )
        };
        let (out, obj, attended_shape, scores) = run();
        assert_eq!(run().0, out);
        assert_eq!(out.shape(), &[16, 8]);
        assert_eq!(attended_shape, vec![16, 8]);
        assert_eq!(obj.shape(), &[4, 4]);
        let (lo, hi) = obj
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!((lo, hi), (0.0, 1.0));
        for s in scores {
            for row in s.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
