//! Sequence model contract, a small pre-LN transformer encoder-decoder,
//! decoding, and the checkpoint container.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::data::{BOS_ID, EOS_ID, MAX_INPUT_LEN, MAX_OUTPUT_LEN, PAD_ID};
use crate::error::{Error, Result};

/// Loss over per-target log-probabilities. Returns the loss and its
/// gradient with respect to each log-probability.
pub type LossFn<'a, T> = dyn Fn(&[Vec<T>]) -> Result<(T, Vec<Vec<T>>)> + 'a;

pub trait SequenceModel: Send + Sync {
    type Real: Scalar;

    fn vocab_size(&self) -> usize;
    fn parameters(&self) -> &[Self::Real];
    fn parameters_mut(&mut self) -> &mut [Self::Real];

    /// Teacher-forced `log p(target_t | target_<t, input)` for each target,
    /// sharing one encoding of `input`.
    fn target_logprobs(&self, input: &[u32], targets: &[&[u32]]) -> Result<Vec<Vec<Self::Real>>>;

    /// Evaluates `loss` on [`target_logprobs`](Self::target_logprobs) and adds
    /// `scale × ∂loss/∂θ` into `grad`. Returns the loss.
    fn loss_gradient(
        &self,
        input: &[u32],
        targets: &[&[u32]],
        loss: &LossFn<'_, Self::Real>,
        scale: Self::Real,
        grad: &mut [Self::Real],
    ) -> Result<Self::Real>;

    /// Next-token distribution after the generated `prefix` (bos excluded).
    fn step_distribution(&self, input: &[u32], prefix: &[u32]) -> Result<Vec<f64>>;

    /// Incremental decoding state. The default re-runs the full model per step.
    fn decoder<'a>(&'a self, input: &[u32]) -> Result<Box<dyn StepDecoder + 'a>> {
        check_ids(input, self.vocab_size())?;
        Ok(Box::new(Restart {
            model: self,
            input: input.to_vec(),
        }))
    }
}

pub trait StepDecoder {
    fn next_distribution(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

struct Restart<'a, M: ?Sized> {
    model: &'a M,
    input: Vec<u32>,
}

impl<M: SequenceModel + ?Sized> StepDecoder for Restart<'_, M> {
    fn next_distribution(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.step_distribution(&self.input, prefix)
    }
}

pub fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

fn check_targets(targets: &[&[u32]], vocab: usize) -> Result<()> {
    for t in targets {
        if t.is_empty() {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        check_ids(t, vocab)?;
    }
    Ok(())
}

/// Per-step log-probabilities of `target`, as `f64`.
pub fn sequence_logprob<M: SequenceModel + ?Sized>(model: &M, input: &[u32], target: &[u32]) -> Result<Vec<f64>> {
    let lp = model.target_logprobs(input, &[target])?;
    Ok(lp[0].iter().map(|v| v.f64()).collect())
}

/// Lowest id among the maxima.
pub fn argmax(dist: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as u32
}

pub fn greedy_decode<M: SequenceModel + ?Sized>(model: &M, input: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let max_len = max_len.min(MAX_OUTPUT_LEN);
    let mut dec = model.decoder(input)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let id = argmax(&dec.next_distribution(&out)?);
        out.push(id);
        if id == EOS_ID {
            break;
        }
    }
    Ok(out)
}

pub fn sample_decode<M: SequenceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    input: &[u32],
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let max_len = max_len.min(MAX_OUTPUT_LEN);
    let mut dec = model.decoder(input)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let dist = dec.next_distribution(&out)?;
        let id = sample_tempered(&dist, temperature, rng);
        out.push(id);
        if id == EOS_ID {
            break;
        }
    }
    Ok(out)
}

fn sample_tempered<R: Rng + ?Sized>(dist: &[f64], temperature: f64, rng: &mut R) -> u32 {
    let logits: Vec<f64> = dist.iter().map(|&p| p.ln() / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i as u32;
            }
            u -= w;
        }
    }
    last as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_input_len: MAX_INPUT_LEN,
            max_output_len: MAX_OUTPUT_LEN,
        }
    }

    /// The configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            ..Self::new(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab_size < 5 {
            return bad("vocab_size must be at least 5");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_ff == 0 || self.max_input_len == 0 || self.max_output_len == 0 {
            return bad("d_ff and maximum lengths must be positive");
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct AttnBlocks {
    wq: Block,
    bq: Block,
    wk: Block,
    bk: Block,
    wv: Block,
    bv: Block,
    wo: Block,
    bo: Block,
}

#[derive(Debug, Clone)]
struct NormBlocks {
    gain: Block,
    bias: Block,
}

#[derive(Debug, Clone)]
struct FfnBlocks {
    w1: Block,
    b1: Block,
    w2: Block,
    b2: Block,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: NormBlocks,
    attn: AttnBlocks,
    ln2: NormBlocks,
    ffn: FfnBlocks,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: NormBlocks,
    self_attn: AttnBlocks,
    ln2: NormBlocks,
    cross_attn: AttnBlocks,
    ln3: NormBlocks,
    ffn: FfnBlocks,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Block,
    out_bias: Block,
    enc: Vec<EncLayer>,
    enc_ln: NormBlocks,
    dec: Vec<DecLayer>,
    dec_ln: NormBlocks,
    total: usize,
    /// (block, init std or None for ones/zeros handled by `ones`)
    init: Vec<(Block, Init)>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Alloc {
    total: usize,
    init: Vec<(Block, Init)>,
}

impl Alloc {
    fn block(&mut self, rows: usize, cols: usize, init: Init) -> Block {
        let b = Block {
            off: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        self.init.push((b, init));
        b
    }

    fn norm(&mut self, d: usize) -> NormBlocks {
        NormBlocks {
            gain: self.block(1, d, Init::Ones),
            bias: self.block(1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, d: usize, out_std: f64) -> AttnBlocks {
        let std = 1.0 / (d as f64).sqrt();
        AttnBlocks {
            wq: self.block(d, d, Init::Normal(std)),
            bq: self.block(1, d, Init::Zeros),
            wk: self.block(d, d, Init::Normal(std)),
            bk: self.block(1, d, Init::Zeros),
            wv: self.block(d, d, Init::Normal(std)),
            bv: self.block(1, d, Init::Zeros),
            wo: self.block(d, d, Init::Normal(out_std)),
            bo: self.block(1, d, Init::Zeros),
        }
    }

    fn ffn(&mut self, d: usize, f: usize, out_std_scale: f64) -> FfnBlocks {
        FfnBlocks {
            w1: self.block(d, f, Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.block(1, f, Init::Zeros),
            w2: self.block(f, d, Init::Normal(out_std_scale / (f as f64).sqrt())),
            b2: self.block(1, d, Init::Zeros),
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut a = Alloc {
            total: 0,
            init: Vec::new(),
        };
        let depth = (c.n_enc_layers + c.n_dec_layers).max(1) as f64;
        let res_scale = 1.0 / depth.sqrt();
        let out_std = res_scale / (d as f64).sqrt();
        let embed = a.block(c.vocab_size, d, Init::Normal(1.0 / (d as f64).sqrt()));
        let out_bias = a.block(1, c.vocab_size, Init::Zeros);
        let enc = (0..c.n_enc_layers)
            .map(|_| EncLayer {
                ln1: a.norm(d),
                attn: a.attn(d, out_std),
                ln2: a.norm(d),
                ffn: a.ffn(d, c.d_ff, res_scale),
            })
            .collect();
        let enc_ln = a.norm(d);
        let dec = (0..c.n_dec_layers)
            .map(|_| DecLayer {
                ln1: a.norm(d),
                self_attn: a.attn(d, out_std),
                ln2: a.norm(d),
                cross_attn: a.attn(d, out_std),
                ln3: a.norm(d),
                ffn: a.ffn(d, c.d_ff, res_scale),
            })
            .collect();
        let dec_ln = a.norm(d);
        Layout {
            embed,
            out_bias,
            enc,
            enc_ln,
            dec,
            dec_ln,
            total: a.total,
            init: a.init,
        }
    }
}

/// Sinusoidal position table, `len × d`.
fn positions<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// The reference encoder-decoder: pre-LN transformer, sinusoidal positions,
/// GELU feed-forward, output projection tied to the input embedding.
#[derive(Debug, Clone)]
pub struct ReferenceModel<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Scalar> ReferenceModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (b, init) in &layout.init {
            let slot = &mut params[b.off..b.off + b.rows * b.cols];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.fill(T::one()),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for p in slot {
                        *p = T::of(normal.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Scalar>(&self) -> ReferenceModel<U> {
        ReferenceModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::of(p.f64())).collect(),
        }
    }

    fn check_input(&self, input: &[u32]) -> Result<()> {
        check_ids(input, self.config.vocab_size)
    }

    fn embed(&self, t: &mut Tape<'_, T>, embed: Var, ids: &[u32]) -> Var {
        let d = self.config.d_model;
        let x = t.gather(embed, ids);
        let x = t.scale(x, T::of((d as f64).sqrt()));
        let pos = t.constant(ids.len(), d, positions(ids.len(), d));
        t.add(x, pos)
    }

    fn norm(&self, t: &mut Tape<'_, T>, x: Var, n: &NormBlocks) -> Var {
        let g = param(t, n.gain);
        let b = param(t, n.bias);
        t.layer_norm(x, g, b)
    }

    fn linear(&self, t: &mut Tape<'_, T>, x: Var, w: Block, b: Block) -> Var {
        let wv = param(t, w);
        let bv = param(t, b);
        let y = t.matmul(x, wv);
        t.add_row(y, bv)
    }

    fn attend(&self, t: &mut Tape<'_, T>, q_in: Var, k: Var, v: Var, a: &AttnBlocks, causal: bool) -> Var {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(t, q_in, a.wq, a.bq);
        let inv = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (t.cols(q, h * dh, dh), t.cols(k, h * dh, dh), t.cols(v, h * dh, dh))
            };
            let s = t.matmul_bt(qh, kh);
            let s = t.scale(s, inv);
            let p = t.softmax(s, causal);
            outs.push(t.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.linear(t, cat, a.wo, a.bo)
    }

    fn ffn(&self, t: &mut Tape<'_, T>, x: Var, f: &FfnBlocks) -> Var {
        let h = self.linear(t, x, f.w1, f.b1);
        let h = t.gelu(h);
        self.linear(t, h, f.w2, f.b2)
    }

    /// Encoder memory for `input` (an empty input encodes a single pad).
    fn encode(&self, t: &mut Tape<'_, T>, embed: Var, input: &[u32]) -> Var {
        let pad = [PAD_ID];
        let input = if input.is_empty() { &pad[..] } else { input };
        let mut x = self.embed(t, embed, input);
        for layer in &self.layout.enc {
            let h = self.norm(t, x, &layer.ln1);
            let a = self.attend(t, h, h, h, &layer.attn, false);
            x = t.add(x, a);
            let h = self.norm(t, x, &layer.ln2);
            let f = self.ffn(t, h, &layer.ffn);
            x = t.add(x, f);
        }
        self.norm(t, x, &self.layout.enc_ln)
    }

    /// Per decoder layer, keys and values of the cross attention.
    fn cross_kv(&self, t: &mut Tape<'_, T>, memory: Var) -> Vec<(Var, Var)> {
        self.layout
            .dec
            .iter()
            .map(|l| {
                let k = self.linear(t, memory, l.cross_attn.wk, l.cross_attn.bk);
                let v = self.linear(t, memory, l.cross_attn.wv, l.cross_attn.bv);
                (k, v)
            })
            .collect()
    }

    /// Output logits for each position of `dec_in` (bos followed by the prefix).
    fn decode_logits(&self, t: &mut Tape<'_, T>, embed: Var, cross: &[(Var, Var)], dec_in: &[u32]) -> Var {
        let mut y = self.embed(t, embed, dec_in);
        for (layer, &(ck, cv)) in self.layout.dec.iter().zip(cross) {
            let h = self.norm(t, y, &layer.ln1);
            let sk = self.linear(t, h, layer.self_attn.wk, layer.self_attn.bk);
            let sv = self.linear(t, h, layer.self_attn.wv, layer.self_attn.bv);
            let a = self.attend(t, h, sk, sv, &layer.self_attn, true);
            y = t.add(y, a);
            let h = self.norm(t, y, &layer.ln2);
            let c = self.attend(t, h, ck, cv, &layer.cross_attn, false);
            y = t.add(y, c);
            let h = self.norm(t, y, &layer.ln3);
            let f = self.ffn(t, h, &layer.ffn);
            y = t.add(y, f);
        }
        let out = self.norm(t, y, &self.layout.dec_ln);
        let logits = t.matmul_bt(out, embed);
        let bias = param(t, self.layout.out_bias);
        t.add_row(logits, bias)
    }

    /// Builds the teacher-forced graph and returns the picked log-prob nodes.
    fn forward<'p>(&'p self, input: &[u32], targets: &[&[u32]]) -> Result<(Tape<'p, T>, Vec<Var>)> {
        self.check_input(input)?;
        check_targets(targets, self.config.vocab_size)?;
        let mut t = Tape::new(&self.params);
        let embed = param(&mut t, self.layout.embed);
        let memory = self.encode(&mut t, embed, input);
        let cross = self.cross_kv(&mut t, memory);
        let mut picks = Vec::with_capacity(targets.len());
        for target in targets {
            let mut dec_in = Vec::with_capacity(target.len());
            dec_in.push(BOS_ID);
            dec_in.extend_from_slice(&target[..target.len() - 1]);
            let logits = self.decode_logits(&mut t, embed, &cross, &dec_in);
            picks.push(t.pick_log_prob(logits, target));
        }
        Ok((t, picks))
    }
}

fn param<T: Scalar>(t: &mut Tape<'_, T>, b: Block) -> Var {
    t.param(b.off, b.rows, b.cols)
}

fn softmax_last_row<T: Scalar>(logits: &[T], cols: usize) -> Vec<f64> {
    let row: Vec<f64> = logits[logits.len() - cols..].iter().map(|v| v.f64()).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<T: Scalar> SequenceModel for ReferenceModel<T> {
    type Real = T;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn parameters(&self) -> &[T] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn target_logprobs(&self, input: &[u32], targets: &[&[u32]]) -> Result<Vec<Vec<T>>> {
        let (t, picks) = self.forward(input, targets)?;
        Ok(picks.iter().map(|&p| t.value(p).to_vec()).collect())
    }

    fn loss_gradient(
        &self,
        input: &[u32],
        targets: &[&[u32]],
        loss: &LossFn<'_, T>,
        scale: T,
        grad: &mut [T],
    ) -> Result<T> {
        if grad.len() != self.params.len() {
            return Err(Error::InvalidArgument("gradient buffer size mismatch".into()));
        }
        let (t, picks) = self.forward(input, targets)?;
        let lps: Vec<Vec<T>> = picks.iter().map(|&p| t.value(p).to_vec()).collect();
        let (value, dlp) = loss(&lps)?;
        let seeds: Vec<(Var, Vec<T>)> = picks.into_iter().zip(dlp).collect();
        t.backward(&seeds, scale, grad);
        Ok(value)
    }

    fn step_distribution(&self, input: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        self.decoder(input)?.next_distribution(prefix)
    }

    fn decoder<'a>(&'a self, input: &[u32]) -> Result<Box<dyn StepDecoder + 'a>> {
        self.check_input(input)?;
        let mut t = Tape::new(&self.params);
        let embed = param(&mut t, self.layout.embed);
        let memory = self.encode(&mut t, embed, input);
        let cross = self.cross_kv(&mut t, memory);
        let cached = cross
            .iter()
            .map(|&(k, v)| {
                let (rows, cols) = t.shape(k);
                (rows, cols, t.value(k).to_vec(), t.value(v).to_vec())
            })
            .collect();
        Ok(Box::new(ReferenceDecoder { model: self, cached }))
    }
}

struct ReferenceDecoder<'a, T: Scalar> {
    model: &'a ReferenceModel<T>,
    cached: Vec<(usize, usize, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> StepDecoder for ReferenceDecoder<'_, T> {
    fn next_distribution(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let m = self.model;
        check_ids(prefix, m.config.vocab_size)?;
        let mut t = Tape::new(&m.params);
        let embed = param(&mut t, m.layout.embed);
        let cross: Vec<(Var, Var)> = self
            .cached
            .iter()
            .map(|(r, c, k, v)| (t.constant(*r, *c, k.clone()), t.constant(*r, *c, v.clone())))
            .collect();
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(prefix);
        let logits = m.decode_logits(&mut t, embed, &cross, &dec_in);
        Ok(softmax_last_row(t.value(logits), m.config.vocab_size))
    }
}

pub const CHECKPOINT_MAGIC: &str = "MIXCL-CKPT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub n_params: usize,
    pub tokenizer: Vec<String>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f32]) -> Result<()> {
    if header.n_params != params.len() {
        return Err(Error::InvalidArgument("header parameter count disagrees with vector".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(params.len() * 4 + 4096);
    bytes.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(serde_json::to_string(header).expect("header serializes").as_bytes());
    bytes.push(b'\n');
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let first = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing magic line"))?;
    if &bytes[..first] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let rest = &bytes[first + 1..];
    let second = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header block"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..second]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let body = &rest[second + 1..];
    if body.len() != header.n_params * 4 {
        return Err(bad("parameter block length disagrees with header"));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, params))
}

/// Small analytic models used to check losses and decoders.
pub mod toy {
    use super::*;

    /// Uniform next-token distribution; has no parameters.
    #[derive(Debug, Clone)]
    pub struct UniformModel {
        vocab: usize,
        params: Vec<f64>,
    }

    impl UniformModel {
        pub fn new(vocab: usize) -> Self {
            Self { vocab, params: Vec::new() }
        }
    }

    impl SequenceModel for UniformModel {
        type Real = f64;

        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn parameters(&self) -> &[f64] {
            &self.params
        }
        fn parameters_mut(&mut self) -> &mut [f64] {
            &mut self.params
        }
        fn target_logprobs(&self, input: &[u32], targets: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
            check_ids(input, self.vocab)?;
            check_targets(targets, self.vocab)?;
            let lp = -(self.vocab as f64).ln();
            Ok(targets.iter().map(|t| vec![lp; t.len()]).collect())
        }
        fn loss_gradient(&self, input: &[u32], targets: &[&[u32]], loss: &LossFn<'_, f64>, _: f64, _: &mut [f64]) -> Result<f64> {
            Ok(loss(&self.target_logprobs(input, targets)?)?.0)
        }
        fn step_distribution(&self, input: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
            check_ids(input, self.vocab)?;
            check_ids(prefix, self.vocab)?;
            Ok(vec![1.0 / self.vocab as f64; self.vocab])
        }
    }

    /// Ignores the input; the distribution at step `t` is the softmax of
    /// logit row `min(t, rows − 1)`. The logits are the parameters.
    #[derive(Debug, Clone)]
    pub struct TableModel<T: Scalar> {
        vocab: usize,
        rows: usize,
        logits: Vec<T>,
    }

    impl<T: Scalar> TableModel<T> {
        pub fn from_logits(rows: Vec<Vec<f64>>) -> Self {
            let vocab = rows[0].len();
            assert!(rows.iter().all(|r| r.len() == vocab), "ragged logit table");
            Self {
                vocab,
                rows: rows.len(),
                logits: rows.iter().flatten().map(|&v| T::of(v)).collect(),
            }
        }

        /// Logits are `ln p`; zero probabilities become a large negative logit.
        pub fn from_probs(rows: Vec<Vec<f64>>) -> Self {
            Self::from_logits(
                rows.into_iter()
                    .map(|r| r.into_iter().map(|p| if p > 0.0 { p.ln() } else { -1e4 }).collect())
                    .collect(),
            )
        }

        fn row_probs(&self, step: usize) -> Vec<T> {
            let r = step.min(self.rows - 1);
            let row = &self.logits[r * self.vocab..(r + 1) * self.vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            exps.into_iter().map(|e| e / sum).collect()
        }
    }

    impl<T: Scalar> SequenceModel for TableModel<T> {
        type Real = T;

        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn parameters(&self) -> &[T] {
            &self.logits
        }
        fn parameters_mut(&mut self) -> &mut [T] {
            &mut self.logits
        }
        fn target_logprobs(&self, input: &[u32], targets: &[&[u32]]) -> Result<Vec<Vec<T>>> {
            check_ids(input, self.vocab)?;
            check_targets(targets, self.vocab)?;
            Ok(targets
                .iter()
                .map(|t| t.iter().enumerate().map(|(s, &y)| self.row_probs(s)[y as usize].ln()).collect())
                .collect())
        }
        fn loss_gradient(&self, input: &[u32], targets: &[&[u32]], loss: &LossFn<'_, T>, scale: T, grad: &mut [T]) -> Result<T> {
            let lps = self.target_logprobs(input, targets)?;
            let (value, dlp) = loss(&lps)?;
            for (t, g) in targets.iter().zip(&dlp) {
                for (s, (&y, &gs)) in t.iter().zip(g).enumerate() {
                    let r = s.min(self.rows - 1);
                    let p = self.row_probs(s);
                    for j in 0..self.vocab {
                        let delta = if j == y as usize { T::one() } else { T::zero() };
                        grad[r * self.vocab + j] += scale * gs * (delta - p[j]);
                    }
                }
            }
            Ok(value)
        }
        fn step_distribution(&self, input: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
            check_ids(input, self.vocab)?;
            check_ids(prefix, self.vocab)?;
            Ok(self.row_probs(prefix.len()).iter().map(|p| p.f64()).collect())
        }
    }
}
