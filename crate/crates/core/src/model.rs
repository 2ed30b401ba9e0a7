//! Minimal decoder-only transformer with a last-hidden-state tap.
//!
//! Architecture: learned token and absolute position embeddings,
//! pre-norm residual blocks (causal multi-head attention, GELU MLP), a final
//! layer norm whose output is the tap, and an untied LM head.
//!
//! Positions are 0-indexed throughout the API: row `t` of every output
//! corresponds to input item `t`. The 1-indexed position `m + l - 1` of a
//! prompt of length `m` is therefore row `m + l - 2`.
//!
//! Two execution paths share the numeric kernels in [`crate::tensor`]:
//! [`ModelVars::forward`] records on an autodiff [`Tape`], and [`Session`]
//! runs without gradients over a growing key/value cache.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BOP: &str = "<bop>";
pub const EOP: &str = "<eop>";
pub const PAD: &str = "<pad>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub special_tokens: BTreeMap<String, u32>,
}

impl ModelConfig {
    /// Desk-scale default over a vocabulary of `vocab_size` entries whose
    /// special tokens are given by `special_tokens`.
    pub fn desk(vocab_size: usize, special_tokens: BTreeMap<String, u32>) -> Self {
        Self { vocab_size, d_model: 64, n_layers: 4, n_heads: 4, d_ff: 256, max_seq_len: 512, special_tokens }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        for name in [BOP, EOP, PAD] {
            if !self.special_tokens.contains_key(name) {
                return Err(Error::Config(format!("missing special token {name}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, &id) in &self.special_tokens {
            if id as usize >= self.vocab_size {
                return Err(Error::Config(format!("special token {name} id {id} >= vocab_size")));
            }
            if !seen.insert(id) {
                return Err(Error::Config(format!("special token id {id} is not distinct")));
            }
        }
        Ok(())
    }

    pub fn special(&self, name: &str) -> u32 {
        self.special_tokens[name]
    }

    pub fn bop(&self) -> u32 {
        self.special(BOP)
    }

    pub fn eop(&self) -> u32 {
        self.special(EOP)
    }
}

/// A set of named parameter tensors with a fixed declaration order.
pub trait ParamSet<S: Scalar> {
    fn tensors(&self) -> Vec<&Tensor<S>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Registers every tensor on `tape` in declaration order.
    fn register_all(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.tensors().into_iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect()
    }
}

pub(crate) fn normal_tensor<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| S::from_f64(dist.sample(rng)).unwrap()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S = f32> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> BlockParams<S> {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = std_in / (2.0 * cfg.n_layers as f64).sqrt();
        Self {
            ln1_g: Tensor::filled(1, d, S::one()),
            ln1_b: Tensor::zeros(1, d),
            wq: normal_tensor(rng, d, d, std_in),
            bq: Tensor::zeros(1, d),
            wk: normal_tensor(rng, d, d, std_in),
            bk: Tensor::zeros(1, d),
            wv: normal_tensor(rng, d, d, std_in),
            bv: Tensor::zeros(1, d),
            wo: normal_tensor(rng, d, d, std_out),
            bo: Tensor::zeros(1, d),
            ln2_g: Tensor::filled(1, d, S::one()),
            ln2_b: Tensor::zeros(1, d),
            w1: normal_tensor(rng, d, f, std_in),
            b1: Tensor::zeros(1, f),
            w2: normal_tensor(rng, f, d, std_out * (d as f64 / f as f64).sqrt()),
            b2: Tensor::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Weights of one transformer agent (actor or reasoner role).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub lnf_g: Tensor<S>,
    pub lnf_b: Tensor<S>,
    pub lm_head: Tensor<S>,
}

impl<S: Scalar> ParamSet<S> for ModelParams<S> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.lm_head]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.lm_head]);
        out
    }
}

/// One input position: a token id or a raw d-vector.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a, S = f32> {
    Tokens(&'a [u32]),
    Vectors(&'a Tensor<S>),
}

impl<S: Scalar> Input<'_, S> {
    fn len(&self) -> usize {
        match self {
            Input::Tokens(t) => t.len(),
            Input::Vectors(v) => v.rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S = f32> {
    /// T×vocab
    pub logits: Tensor<S>,
    /// T×d, the input to the LM head.
    pub last_hidden: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers).map(|_| BlockParams::init(&config, rng)).collect();
        Ok(Self {
            tok_emb: normal_tensor(rng, config.vocab_size, d, 0.3),
            pos_emb: normal_tensor(rng, config.max_seq_len, d, 0.1),
            blocks,
            lnf_g: Tensor::filled(1, d, S::one()),
            lnf_b: Tensor::zeros(1, d),
            lm_head: normal_tensor(rng, d, config.vocab_size, 0.5 / (d as f64).sqrt()),
            config,
        })
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let mut out = ModelParams {
            config: self.config.clone(),
            tok_emb: Tensor::zeros(0, 0),
            pos_emb: Tensor::zeros(0, 0),
            blocks: Vec::new(),
            lnf_g: Tensor::zeros(0, 0),
            lnf_b: Tensor::zeros(0, 0),
            lm_head: Tensor::zeros(0, 0),
        };
        out.tok_emb = self.tok_emb.cast();
        out.pos_emb = self.pos_emb.cast();
        out.blocks = self
            .blocks
            .iter()
            .map(|b| {
                let t = b.tensors();
                BlockParams {
                    ln1_g: t[0].cast(),
                    ln1_b: t[1].cast(),
                    wq: t[2].cast(),
                    bq: t[3].cast(),
                    wk: t[4].cast(),
                    bk: t[5].cast(),
                    wv: t[6].cast(),
                    bv: t[7].cast(),
                    wo: t[8].cast(),
                    bo: t[9].cast(),
                    ln2_g: t[10].cast(),
                    ln2_b: t[11].cast(),
                    w1: t[12].cast(),
                    b1: t[13].cast(),
                    w2: t[14].cast(),
                    b2: t[15].cast(),
                }
            })
            .collect();
        out.lnf_g = self.lnf_g.cast();
        out.lnf_b = self.lnf_b.cast();
        out.lm_head = self.lm_head.cast();
        out
    }

    /// Token embedding lookup: row `t` is the table row for `tokens[t]`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        check_tokens(&self.config, tokens)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut out = self.tok_emb.gather_rows(&idx);
        if tokens.is_empty() {
            out = Tensor::zeros(0, self.config.d_model);
        }
        Ok(out)
    }

    /// Applies the LM head to hidden rows.
    pub fn logits(&self, hidden: &Tensor<S>) -> Tensor<S> {
        hidden.matmul(&self.lm_head)
    }

    /// Full causal forward over a mixed token/vector sequence.
    pub fn forward(&self, inputs: &[Input<'_, S>]) -> Result<ForwardOutput<S>> {
        let mut session = Session::new(self);
        let last_hidden = session.extend(inputs)?;
        Ok(ForwardOutput { logits: self.logits(&last_hidden), last_hidden })
    }

    /// Registers all weights on a tape.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> ModelVars {
        let vars = self.register_all(tape, trainable);
        ModelVars::from_flat(&self.config, vars)
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} out of range for vocab {}", cfg.vocab_size)));
    }
    Ok(())
}

fn check_vectors<S: Scalar>(cfg: &ModelConfig, v: &Tensor<S>) -> Result<()> {
    if v.rows() > 0 && v.cols() != cfg.d_model {
        return Err(Error::Input(format!("vector width {} != d_model {}", v.cols(), cfg.d_model)));
    }
    if !v.all_finite() {
        return Err(Error::Input("non-finite input vector".into()));
    }
    Ok(())
}

/// Incremental no-grad execution with a key/value cache.
#[derive(Clone)]
pub struct Session<'p, S: Scalar = f32> {
    params: &'p ModelParams<S>,
    keys: Vec<Tensor<S>>,
    values: Vec<Tensor<S>>,
    len: usize,
}

impl<'p, S: Scalar> Session<'p, S> {
    pub fn new(params: &'p ModelParams<S>) -> Self {
        let n = params.config.n_layers;
        let d = params.config.d_model;
        Self { params, keys: vec![Tensor::zeros(0, d); n], values: vec![Tensor::zeros(0, d); n], len: 0 }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn params(&self) -> &'p ModelParams<S> {
        self.params
    }

    /// Appends `inputs` and returns their last-hidden rows.
    pub fn extend(&mut self, inputs: &[Input<'_, S>]) -> Result<Tensor<S>> {
        let p = self.params;
        let cfg = &p.config;
        let n: usize = inputs.iter().map(|i| i.len()).sum();
        if self.len + n > cfg.max_seq_len {
            return Err(Error::Capacity { len: self.len + n, max: cfg.max_seq_len });
        }
        let mut x = Tensor::zeros(0, cfg.d_model);
        for inp in inputs {
            match inp {
                Input::Tokens(t) => x.append_rows(&p.embed(t)?),
                Input::Vectors(v) => {
                    check_vectors(cfg, v)?;
                    x.append_rows(v);
                }
            }
        }
        if n == 0 {
            return Ok(Tensor::zeros(0, cfg.d_model));
        }
        let pos = p.pos_emb.slice_rows(self.len, self.len + n);
        x.add_assign(&pos);
        for (l, b) in p.blocks.iter().enumerate() {
            let (h, _, _) = tensor::layer_norm(&x, b.ln1_g.data(), b.ln1_b.data());
            let mut q = h.matmul(&b.wq);
            q.add_row_assign(b.bq.data());
            let mut k = h.matmul(&b.wk);
            k.add_row_assign(b.bk.data());
            let mut v = h.matmul(&b.wv);
            v.add_row_assign(b.bv.data());
            self.keys[l].append_rows(&k);
            self.values[l].append_rows(&v);
            let (att, _) = tensor::attention(&q, &self.keys[l], &self.values[l], cfg.n_heads, self.len, true);
            let mut o = att.matmul(&b.wo);
            o.add_row_assign(b.bo.data());
            x.add_assign(&o);
            let (h2, _, _) = tensor::layer_norm(&x, b.ln2_g.data(), b.ln2_b.data());
            let mut f = h2.matmul(&b.w1);
            f.add_row_assign(b.b1.data());
            let f = f.map(tensor::gelu);
            let mut f2 = f.matmul(&b.w2);
            f2.add_row_assign(b.b2.data());
            x.add_assign(&f2);
        }
        let (out, _, _) = tensor::layer_norm(&x, p.lnf_g.data(), p.lnf_b.data());
        self.len += n;
        Ok(out)
    }

    /// Appends one token and returns its LM-head logits row.
    pub fn step_token(&mut self, token: u32) -> Result<(Tensor<S>, Tensor<S>)> {
        let h = self.extend(&[Input::Tokens(&[token])])?;
        let logits = self.params.logits(&h);
        Ok((h, logits))
    }
}

/// Tape handles for every model tensor.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub lm_head: Var,
    flat: Vec<Var>,
}

/// A segment of tape-side input.
#[derive(Clone, Copy, Debug)]
pub enum Segment<'a> {
    Tokens(&'a [u32]),
    /// An n×d node whose rows are fed as raw input vectors.
    Vectors(Var),
}

/// Per-layer key/value nodes of everything consumed so far on a tape.
#[derive(Clone, Debug, Default)]
pub struct TapeCache {
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    len: usize,
}

impl TapeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl ModelVars {
    fn from_flat(config: &ModelConfig, flat: Vec<Var>) -> Self {
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("parameter count matches layout");
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockVars {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let lnf_g = next();
        let lnf_b = next();
        let lm_head = next();
        Self { config: config.clone(), tok_emb, pos_emb, blocks, lnf_g, lnf_b, lm_head, flat }
    }

    /// All handles in [`ParamSet::tensors`] order.
    pub fn all(&self) -> &[Var] {
        &self.flat
    }

    /// Token embeddings as a tape node.
    pub fn embed<S: Scalar>(&self, tape: &mut Tape<S>, tokens: &[u32]) -> Result<Var> {
        check_tokens(&self.config, tokens)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(tape.gather_rows(self.tok_emb, &idx))
    }

    /// Causal forward of `segments`, appended after whatever `cache` holds.
    /// Returns the last-hidden rows of the new positions.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, cache: &mut TapeCache, segments: &[Segment<'_>]) -> Result<Var> {
        let cfg = &self.config;
        if cache.keys.is_empty() {
            cache.keys = vec![None; cfg.n_layers];
            cache.values = vec![None; cfg.n_layers];
        }
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            match *seg {
                Segment::Tokens(t) => {
                    if !t.is_empty() {
                        parts.push(self.embed(tape, t)?);
                    }
                }
                Segment::Vectors(v) => {
                    let val = tape.value(v);
                    if val.rows() > 0 {
                        check_vectors(cfg, val)?;
                        parts.push(v);
                    }
                }
            }
        }
        let n: usize = parts.iter().map(|&p| tape.value(p).rows()).sum();
        if cache.len + n > cfg.max_seq_len {
            return Err(Error::Capacity { len: cache.len + n, max: cfg.max_seq_len });
        }
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(0, cfg.d_model)));
        }
        let x0 = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let pos = tape.slice_rows(self.pos_emb, cache.len, cache.len + n);
        let mut x = tape.add(x0, pos);
        for (l, b) in self.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, b.ln1_g, b.ln1_b);
            let q = tape.linear(h, b.wq, b.bq);
            let k = tape.linear(h, b.wk, b.bk);
            let v = tape.linear(h, b.wv, b.bv);
            let k_all = match cache.keys[l] {
                Some(prev) => tape.concat_rows(&[prev, k]),
                None => k,
            };
            let v_all = match cache.values[l] {
                Some(prev) => tape.concat_rows(&[prev, v]),
                None => v,
            };
            cache.keys[l] = Some(k_all);
            cache.values[l] = Some(v_all);
            let att = tape.attention(q, k_all, v_all, cfg.n_heads, true);
            let o = tape.linear(att, b.wo, b.bo);
            x = tape.add(x, o);
            let h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b);
            let f = tape.linear(h2, b.w1, b.b1);
            let f = tape.gelu(f);
            let f2 = tape.linear(f, b.w2, b.b2);
            x = tape.add(x, f2);
        }
        cache.len += n;
        Ok(tape.layer_norm(x, self.lnf_g, self.lnf_b))
    }

    pub fn logits<S: Scalar>(&self, tape: &mut Tape<S>, hidden: Var) -> Var {
        tape.matmul(hidden, self.lm_head)
    }
}

/// Softmax of `logits_row / temperature`, computed in f64.
pub fn distribution(logits_row: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
    }
    let mut p: Vec<f64> = logits_row.iter().map(|&l| l as f64 / temperature).collect();
    tensor::softmax_inplace(&mut p);
    Ok(p)
}
