//! The prior network: a compact pre-norm transformer over a short token
//! sequence that maps a text embedding (plus a noise or noised-sample token,
//! and optionally a time token) to a predicted vision embedding.
//!
//! Token layout: `[text, sample, query]` in time-independent mode and
//! `[text, sample, time, query]` in time-conditioned mode; the prediction is
//! read from the query slot. Attention runs within each sample's token block
//! only, so batch rows never interact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{Real, Tape, Tensor, Var};
use crate::rng::{derive, stream};
use crate::{Error, Result};

fn default_max_timesteps() -> usize {
    1000
}

/// Architecture hyperparameters. The attention inner width is
/// `num_heads * head_dim`, independent of `embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub time_conditioned: bool,
    #[serde(default = "default_max_timesteps")]
    pub max_timesteps: usize,
}

impl PriorConfig {
    /// Desk-scale default: minutes of CPU training.
    pub fn desk(time_conditioned: bool) -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            head_dim: 8,
            dropout: 0.0,
            time_conditioned,
            max_timesteps: 1000,
        }
    }

    /// Tiny configuration used by the gradient-check suite.
    pub fn tiny(time_conditioned: bool) -> Self {
        Self {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 1,
            head_dim: 4,
            dropout: 0.0,
            time_conditioned,
            max_timesteps: 16,
        }
    }

    /// Full-scale configuration (constructible for parameter-count checks).
    pub fn paper_scale(time_conditioned: bool) -> Self {
        Self {
            embed_dim: 768,
            num_layers: 10,
            num_heads: 16,
            head_dim: 32,
            dropout: 0.0,
            time_conditioned,
            max_timesteps: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("prior config: {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "prior config: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.time_conditioned {
            if self.max_timesteps == 0 {
                return Err(Error::Config("prior config: max_timesteps must be positive".into()));
            }
            if self.embed_dim % 2 != 0 {
                return Err(Error::Config(
                    "prior config: embed_dim must be even for time features".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of token slots: `[text, sample, query]` plus a time slot.
    pub fn seq_len(&self) -> usize {
        if self.time_conditioned {
            4
        } else {
            3
        }
    }

    /// Index of the query slot the prediction is read from.
    pub fn query_slot(&self) -> usize {
        self.seq_len() - 1
    }

    pub fn inner_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.embed_dim
    }

    /// Closed-form parameter count; matches the allocated totals exactly.
    ///
    /// With `d = embed_dim`, `i = num_heads * head_dim`, `f = 4d`,
    /// `S = seq_len`, `L = num_layers`:
    ///
    /// ```text
    ///   2(d^2 + d)                        input projections (text, sample)
    /// + [d^2 + d]                         time projection (time-conditioned)
    /// + S*d + d + d                       positional table, query, null cond
    /// + L * ( 4d                          two layer norms
    ///       + 3*d*i + 2i                  q/k/v (no key bias)
    ///       + i*d + d                     attention output projection
    ///       + d*f + f + f*d + d )         feed-forward
    /// + 2d + d^2 + d                      final norm, output projection
    /// ```
    pub fn param_count(&self) -> usize {
        schema(self).iter().map(|e| e.rows * e.cols).sum()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Gauss(f64),
    Zeros,
    Ones,
}

struct SchemaEntry {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

/// The single source of truth for parameter order, shapes, and init. The
/// checkpoint format stores tensors in exactly this order.
fn schema(config: &PriorConfig) -> Vec<SchemaEntry> {
    let d = config.embed_dim;
    let inner = config.inner_width();
    let f = config.ffn_width();
    let std = 0.02;
    let out_std = std / (config.num_layers as f64).sqrt();
    fn push(s: &mut Vec<SchemaEntry>, name: String, rows: usize, cols: usize, init: Init) {
        s.push(SchemaEntry { name, rows, cols, init });
    }
    let mut s = Vec::new();
    push(&mut s, "proj_text.w".into(), d, d, Init::Gauss(std));
    push(&mut s, "proj_text.b".into(), 1, d, Init::Zeros);
    push(&mut s, "proj_sample.w".into(), d, d, Init::Gauss(std));
    push(&mut s, "proj_sample.b".into(), 1, d, Init::Zeros);
    if config.time_conditioned {
        push(&mut s, "time_proj.w".into(), d, d, Init::Gauss(std));
        push(&mut s, "time_proj.b".into(), 1, d, Init::Zeros);
    }
    push(&mut s, "pos_emb".into(), config.seq_len(), d, Init::Gauss(std));
    push(&mut s, "query".into(), 1, d, Init::Gauss(std));
    push(&mut s, "null_cond".into(), 1, d, Init::Zeros);
    for l in 0..config.num_layers {
        let parts: [(&str, usize, usize, Init); PER_LAYER] = [
            ("ln1.gain", 1, d, Init::Ones),
            ("ln1.bias", 1, d, Init::Zeros),
            ("attn_q.w", d, inner, Init::Gauss(std)),
            ("attn_q.b", 1, inner, Init::Zeros),
            // No key bias: a shared key offset shifts every attention score
            // in a row equally, so softmax makes it unidentifiable.
            ("attn_k.w", d, inner, Init::Gauss(std)),
            ("attn_v.w", d, inner, Init::Gauss(std)),
            ("attn_v.b", 1, inner, Init::Zeros),
            ("attn_out.w", inner, d, Init::Gauss(std)),
            ("attn_out.b", 1, d, Init::Zeros),
            ("ln2.gain", 1, d, Init::Ones),
            ("ln2.bias", 1, d, Init::Zeros),
            ("ffn1.w", d, f, Init::Gauss(std)),
            ("ffn1.b", 1, f, Init::Zeros),
            ("ffn2.w", f, d, Init::Gauss(std)),
            ("ffn2.b", 1, d, Init::Zeros),
        ];
        for (part, rows, cols, init) in parts {
            push(&mut s, format!("layers.{l}.{part}"), rows, cols, init);
        }
    }
    push(&mut s, "final_ln.gain".into(), 1, d, Init::Ones);
    push(&mut s, "final_ln.bias".into(), 1, d, Init::Zeros);
    push(&mut s, "out_proj.w".into(), d, d, Init::Gauss(out_std));
    push(&mut s, "out_proj.b".into(), 1, d, Init::Zeros);
    s
}

// Flat parameter layout: fixed prefix, then 16 tensors per layer, then the
// output head. Offsets below index into the flat tensor vector.
const PER_LAYER: usize = 15;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const Q_W: usize = 2;
const Q_B: usize = 3;
const K_W: usize = 4;
const V_W: usize = 5;
const V_B: usize = 6;
const O_W: usize = 7;
const O_B: usize = 8;
const LN2_G: usize = 9;
const LN2_B: usize = 10;
const F1_W: usize = 11;
const F1_B: usize = 12;
const F2_W: usize = 13;
const F2_B: usize = 14;

#[derive(Clone, Copy, Debug)]
struct Layout {
    time_proj: Option<usize>,
    pos: usize,
    query: usize,
    null: usize,
    layer0: usize,
    final_ln: usize,
    out_proj: usize,
}

impl Layout {
    fn new(config: &PriorConfig) -> Self {
        let time_proj = config.time_conditioned.then_some(4);
        let pos = if config.time_conditioned { 6 } else { 4 };
        let layer0 = pos + 3;
        let final_ln = layer0 + config.num_layers * PER_LAYER;
        Self { time_proj, pos, query: pos + 1, null: pos + 2, layer0, final_ln, out_proj: final_ln + 2 }
    }

    fn layer(&self, l: usize, part: usize) -> usize {
        self.layer0 + l * PER_LAYER + part
    }
}

/// The prior model: config plus its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorNetwork<F: Real> {
    config: PriorConfig,
    tensors: Vec<Tensor<F>>,
}

/// Initialize parameters from the seeded generator: Gaussian(0.02) weights,
/// zero biases, the output projection scaled down by `1/sqrt(num_layers)`,
/// and a zero null-condition embedding.
pub fn init_params<F: Real>(config: &PriorConfig, seed: u64) -> Result<PriorNetwork<F>> {
    config.validate()?;
    let mut rng = derive(&[seed, stream::INIT]);
    let tensors = schema(config)
        .iter()
        .map(|e| match e.init {
            Init::Gauss(std) => Tensor::randn(e.rows, e.cols, std, &mut rng),
            Init::Zeros => Tensor::zeros(e.rows, e.cols),
            Init::Ones => {
                let mut t = Tensor::zeros(e.rows, e.cols);
                t.data_mut().fill(F::one());
                t
            }
        })
        .collect();
    Ok(PriorNetwork { config: config.clone(), tensors })
}

impl<F: Real> PriorNetwork<F> {
    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Total allocated parameter count.
    pub fn allocated_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Parameter names in declaration order, as stored in checkpoints.
    pub fn param_names(config: &PriorConfig) -> Vec<String> {
        schema(config).into_iter().map(|e| e.name).collect()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<F>)> {
        schema(&self.config).into_iter().map(|e| e.name).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Build a network from tensors in declaration order, checking shapes.
    pub fn from_tensors(config: &PriorConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let sch = schema(config);
        if sch.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                sch.len(),
                tensors.len()
            )));
        }
        for (e, t) in sch.iter().zip(tensors.iter()) {
            if t.shape() != (e.rows, e.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {}x{}",
                    e.name,
                    t.shape(),
                    e.rows,
                    e.cols
                )));
            }
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn null_condition(&self) -> &Tensor<F> {
        let layout = Layout::new(&self.config);
        &self.tensors[layout.null]
    }

    /// Insert every parameter into a tape, in declaration order.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> PriorBinding {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        PriorBinding { config: self.config.clone(), layout: Layout::new(&self.config), vars }
    }

    /// Time-independent forward pass on a scratch tape (for evaluation).
    pub fn forward_prior_plain(&self, eps: &Tensor<F>, z_y: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let e = tape.constant(eps.clone());
        let y = tape.constant(z_y.clone());
        let out = binding.forward_prior(&mut tape, e, y)?;
        Ok(tape.value(out).clone())
    }

    /// Time-conditioned forward pass on a scratch tape (for sampling).
    pub fn forward_diffusion_plain(
        &self,
        z_t: &Tensor<F>,
        t: &[usize],
        z_y: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let zt = tape.constant(z_t.clone());
        let y = tape.constant(z_y.clone());
        let out = binding.forward_diffusion(&mut tape, zt, t, y)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape-bound view of a network's parameters.
pub struct PriorBinding {
    config: PriorConfig,
    layout: Layout,
    vars: Vec<Var>,
}

impl PriorBinding {
    /// Bound vars in declaration order (aligned with the parameter tensors).
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn null_condition_var(&self) -> Var {
        self.vars[self.layout.null]
    }

    /// Replace masked rows of the condition batch by the learned
    /// null-condition embedding; gradients flow into the null embedding.
    pub fn apply_condition_dropout<F: Real>(
        &self,
        tape: &mut Tape<F>,
        z_y: Var,
        mask: &[bool],
    ) -> Result<Var> {
        tape.rows_where_vec(z_y, self.null_condition_var(), mask)
    }

    /// `g(eps, z_y)` for the time-independent model.
    pub fn forward_prior<F: Real>(&self, tape: &mut Tape<F>, eps: Var, z_y: Var) -> Result<Var> {
        if self.config.time_conditioned {
            return Err(Error::Config(
                "forward_prior called on a time-conditioned network".into(),
            ));
        }
        let n = self.check_batch(tape, &[eps, z_y])?;
        let tok_text = self.input_token(tape, z_y, 0)?;
        let tok_sample = self.input_token(tape, eps, 2)?;
        let tok_query = tape.broadcast_row(self.vars[self.layout.query], n)?;
        self.trunk(tape, &[tok_text, tok_sample, tok_query], None)
    }

    /// `g(z_t, t, z_y)` for the time-conditioned model; predicts the clean
    /// sample directly, not the noise.
    pub fn forward_diffusion<F: Real>(
        &self,
        tape: &mut Tape<F>,
        z_t: Var,
        t: &[usize],
        z_y: Var,
    ) -> Result<Var> {
        if !self.config.time_conditioned {
            return Err(Error::Config(
                "forward_diffusion called on a time-independent network".into(),
            ));
        }
        let n = self.check_batch(tape, &[z_t, z_y])?;
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", t.len())));
        }
        for &ti in t {
            if ti < 1 || ti > self.config.max_timesteps {
                return Err(Error::Config(format!(
                    "timestep {ti} outside [1, {}]",
                    self.config.max_timesteps
                )));
            }
        }
        let tw = self.layout.time_proj.expect("time-conditioned layout");
        let feats = tape.constant(time_features::<F>(t, self.config.embed_dim));
        let tok_time = tape.affine(feats, self.vars[tw], self.vars[tw + 1])?;
        let tok_text = self.input_token(tape, z_y, 0)?;
        let tok_sample = self.input_token(tape, z_t, 2)?;
        let tok_query = tape.broadcast_row(self.vars[self.layout.query], n)?;
        self.trunk(tape, &[tok_text, tok_sample, tok_time, tok_query], None)
    }

    /// Forward with dropout active (training only; no-op at p = 0).
    pub fn forward_prior_train<F: Real>(
        &self,
        tape: &mut Tape<F>,
        eps: Var,
        z_y: Var,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if self.config.dropout == 0.0 {
            return self.forward_prior(tape, eps, z_y);
        }
        if self.config.time_conditioned {
            return Err(Error::Config(
                "forward_prior called on a time-conditioned network".into(),
            ));
        }
        let n = self.check_batch(tape, &[eps, z_y])?;
        let tok_text = self.input_token(tape, z_y, 0)?;
        let tok_sample = self.input_token(tape, eps, 2)?;
        let tok_query = tape.broadcast_row(self.vars[self.layout.query], n)?;
        self.trunk(tape, &[tok_text, tok_sample, tok_query], Some(dropout_rng))
    }

    pub fn forward_diffusion_train<F: Real>(
        &self,
        tape: &mut Tape<F>,
        z_t: Var,
        t: &[usize],
        z_y: Var,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if self.config.dropout == 0.0 {
            return self.forward_diffusion(tape, z_t, t, z_y);
        }
        // Dropout > 0 with time conditioning shares the trunk path below.
        if !self.config.time_conditioned {
            return Err(Error::Config(
                "forward_diffusion called on a time-independent network".into(),
            ));
        }
        let n = self.check_batch(tape, &[z_t, z_y])?;
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", t.len())));
        }
        let tw = self.layout.time_proj.expect("time-conditioned layout");
        let feats = tape.constant(time_features::<F>(t, self.config.embed_dim));
        let tok_time = tape.affine(feats, self.vars[tw], self.vars[tw + 1])?;
        let tok_text = self.input_token(tape, z_y, 0)?;
        let tok_sample = self.input_token(tape, z_t, 2)?;
        let tok_query = tape.broadcast_row(self.vars[self.layout.query], n)?;
        self.trunk(tape, &[tok_text, tok_sample, tok_time, tok_query], Some(dropout_rng))
    }

    fn check_batch<F: Real>(&self, tape: &Tape<F>, inputs: &[Var]) -> Result<usize> {
        let (n, d) = tape.shape(inputs[0]);
        if d != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "input width {d} does not match embed_dim {}",
                self.config.embed_dim
            )));
        }
        for &v in &inputs[1..] {
            if tape.shape(v) != (n, d) {
                return Err(Error::Shape(format!(
                    "input shapes differ: {:?} vs {n}x{d}",
                    tape.shape(v)
                )));
            }
        }
        Ok(n)
    }

    /// Project an input batch through `proj_text` (base 0) or `proj_sample`
    /// (base 2).
    fn input_token<F: Real>(&self, tape: &mut Tape<F>, x: Var, base: usize) -> Result<Var> {
        tape.affine(x, self.vars[base], self.vars[base + 1])
    }

    fn trunk<F: Real>(
        &self,
        tape: &mut Tape<F>,
        slots: &[Var],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let seq = self.config.seq_len();
        debug_assert_eq!(slots.len(), seq);
        let l = &self.layout;
        let mut x = tape.pack_slots(slots)?;
        x = tape.add_slot_vec(x, self.vars[l.pos])?;
        for layer in 0..self.config.num_layers {
            let at = |part| self.vars[l.layer(layer, part)];
            let h = tape.layer_norm(x, at(LN1_G), at(LN1_B), LN_EPS)?;
            let q = tape.affine(h, at(Q_W), at(Q_B))?;
            let k = tape.matmul(h, at(K_W))?;
            let v = tape.affine(h, at(V_W), at(V_B))?;
            let attn = tape.attention(q, k, v, self.config.num_heads, seq)?;
            let mut attn_out = tape.affine(attn, at(O_W), at(O_B))?;
            attn_out = self.maybe_dropout(tape, attn_out, &mut dropout_rng)?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layer_norm(x, at(LN2_G), at(LN2_B), LN_EPS)?;
            let f1 = tape.affine(h2, at(F1_W), at(F1_B))?;
            let g = tape.gelu(f1);
            let mut f2 = tape.affine(g, at(F2_W), at(F2_B))?;
            f2 = self.maybe_dropout(tape, f2, &mut dropout_rng)?;
            x = tape.add(x, f2)?;
        }
        let sel = tape.slot_select(x, self.config.query_slot(), seq)?;
        let ln = tape.layer_norm(
            sel,
            self.vars[l.final_ln],
            self.vars[l.final_ln + 1],
            LN_EPS,
        )?;
        tape.affine(ln, self.vars[l.out_proj], self.vars[l.out_proj + 1])
    }

    fn maybe_dropout<F: Real>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let (n, d) = tape.shape(x);
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mut mask = Tensor::zeros(n, d);
        for v in mask.data_mut().iter_mut() {
            if rng.gen::<f64>() >= p {
                *v = keep;
            }
        }
        let m = tape.constant(mask);
        tape.mul_elem(x, m)
    }
}

const LN_EPS: f64 = 1e-5;

/// Sinusoidal time features: half sines, half cosines, frequencies
/// log-spaced from 1 down to 1/10000, one row per timestep.
pub fn time_features<F: Real>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = Tensor::zeros(t.len(), dim);
    for (r, &ti) in t.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
            let angle = ti as f64 * freq;
            row[i] = F::from_f64(angle.sin());
            row[half + i] = F::from_f64(angle.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn_batch(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = derive(&[seed, 0xabc]);
        Tensor::randn(n, d, 1.0, &mut rng)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = PriorConfig::desk(false);
        let a: PriorNetwork<f32> = init_params(&config, 5).unwrap();
        let b: PriorNetwork<f32> = init_params(&config, 5).unwrap();
        assert_eq!(a, b);
        let c: PriorNetwork<f32> = init_params(&config, 6).unwrap();
        assert_ne!(a, c);
        assert!(a.all_finite());
    }

    #[test]
    fn param_count_matches_allocation_for_three_configs() {
        for config in [
            PriorConfig::tiny(false),
            PriorConfig::desk(true),
            PriorConfig { embed_dim: 16, num_layers: 3, num_heads: 2, head_dim: 8, dropout: 0.0, time_conditioned: false, max_timesteps: 100 },
        ] {
            let net: PriorNetwork<f32> = init_params(&config, 1).unwrap();
            assert_eq!(config.param_count(), net.allocated_params(), "config {config:?}");
        }
    }

    #[test]
    fn time_free_is_strictly_smaller() {
        let with_time = PriorConfig::desk(true).param_count();
        let without = PriorConfig::desk(false).param_count();
        assert!(without < with_time, "{without} vs {with_time}");
    }

    #[test]
    fn forward_prior_shape_and_determinism() {
        let config = PriorConfig::desk(false);
        let net: PriorNetwork<f64> = init_params(&config, 2).unwrap();
        let eps = randn_batch(5, 32, 1);
        let z_y = randn_batch(5, 32, 2);
        let a = net.forward_prior_plain(&eps, &z_y).unwrap();
        let b = net.forward_prior_plain(&eps, &z_y).unwrap();
        assert_eq!(a.shape(), (5, 32));
        assert_eq!(a, b);
    }

    #[test]
    fn forward_prior_rejects_time_conditioned_net() {
        let net: PriorNetwork<f64> = init_params(&PriorConfig::desk(true), 2).unwrap();
        let x = randn_batch(2, 32, 1);
        assert!(net.forward_prior_plain(&x, &x).is_err());
    }

    #[test]
    fn forward_diffusion_rejects_out_of_range_t() {
        let net: PriorNetwork<f64> = init_params(&PriorConfig::desk(true), 2).unwrap();
        let x = randn_batch(2, 32, 1);
        assert!(net.forward_diffusion_plain(&x, &[0, 5], &x).is_err());
        assert!(net.forward_diffusion_plain(&x, &[1, 1001], &x).is_err());
        assert!(net.forward_diffusion_plain(&x, &[1, 1000], &x).is_ok());
    }

    #[test]
    fn batch_permutation_equivariance() {
        let net: PriorNetwork<f64> = init_params(&PriorConfig::desk(false), 3).unwrap();
        let eps = randn_batch(4, 32, 10);
        let z_y = randn_batch(4, 32, 11);
        let out = net.forward_prior_plain(&eps, &z_y).unwrap();
        // reverse the batch
        let perm = |t: &Tensor<f64>| {
            let mut p = t.clone();
            for r in 0..t.rows() {
                p.row_mut(r).copy_from_slice(t.row(t.rows() - 1 - r));
            }
            p
        };
        let out_perm = net.forward_prior_plain(&perm(&eps), &perm(&z_y)).unwrap();
        assert_eq!(perm(&out), out_perm);
    }

    #[test]
    fn per_row_independence_against_single_row_forwards() {
        let net: PriorNetwork<f64> = init_params(&PriorConfig::desk(false), 4).unwrap();
        let eps = randn_batch(6, 32, 20);
        let z_y = randn_batch(6, 32, 21);
        let full = net.forward_prior_plain(&eps, &z_y).unwrap();
        for r in 0..6 {
            let er = Tensor::from_vec(1, 32, eps.row(r).to_vec()).unwrap();
            let yr = Tensor::from_vec(1, 32, z_y.row(r).to_vec()).unwrap();
            let single = net.forward_prior_plain(&er, &yr).unwrap();
            assert_eq!(single.row(0), full.row(r), "row {r}");
        }
    }

    #[test]
    fn diffusion_output_changes_with_t() {
        let net: PriorNetwork<f64> = init_params(&PriorConfig::desk(true), 5).unwrap();
        let z_t = randn_batch(1, 32, 30);
        let z_y = randn_batch(1, 32, 31);
        let a = net.forward_diffusion_plain(&z_t, &[1], &z_y).unwrap();
        let b = net.forward_diffusion_plain(&z_t, &[999], &z_y).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn time_features_fixed_case_dim4_t1() {
        // half = 2, frequencies 1 and 1/100:
        // [sin(1), sin(0.01), cos(1), cos(0.01)]
        let f = time_features::<f64>(&[1], 4);
        let want = [1.0f64.sin(), 0.01f64.sin(), 1.0f64.cos(), 0.01f64.cos()];
        for (g, w) in f.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn time_features_zero_and_distinctness() {
        let f0 = time_features::<f64>(&[0], 8);
        for i in 0..4 {
            assert_eq!(f0.data()[i], 0.0);
            assert_eq!(f0.data()[4 + i], 1.0);
        }
        let fa = time_features::<f64>(&[3], 8);
        let fb = time_features::<f64>(&[7], 8);
        assert_ne!(fa.data(), fb.data());
    }

    #[test]
    fn condition_dropout_row_semantics() {
        let config = PriorConfig::desk(true);
        let net: PriorNetwork<f64> = init_params(&config, 6).unwrap();
        let z_y = randn_batch(3, 32, 40);
        let mut tape = Tape::new();
        let binding = net.bind(&mut tape, false);
        let y = tape.constant(z_y.clone());

        let all_false = binding.apply_condition_dropout(&mut tape, y, &[false; 3]).unwrap();
        assert_eq!(tape.value(all_false), &z_y);

        let all_true = binding.apply_condition_dropout(&mut tape, y, &[true; 3]).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(all_true).row(r), net.null_condition().row(0));
        }

        let mixed = binding.apply_condition_dropout(&mut tape, y, &[true, false, true]).unwrap();
        assert_eq!(tape.value(mixed).row(1), z_y.row(1));
        assert_eq!(tape.value(mixed).row(0), net.null_condition().row(0));
    }
}
