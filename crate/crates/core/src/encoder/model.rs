use serde::{Deserialize, Serialize};

use super::input::InputSequence;
use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub max_visits: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_seq_len: 64,
            max_visits: 65,
            vocab_size: 500,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("encoder.{k}"), m));
        if self.d_model < 2 {
            return err("d_model", "must be at least 2");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err("n_heads", "must divide d_model");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return err("n_layers", "layers and d_ff must be positive");
        }
        if self.max_seq_len < 2 {
            return err("max_seq_len", "must leave room for a query token (>= 2)");
        }
        if self.max_visits < self.max_seq_len + 1 {
            return err("max_visits", "must exceed max_seq_len");
        }
        if self.vocab_size <= super::vocab::NUM_RESERVED {
            return err("vocab_size", "must exceed the reserved ids");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err("dropout_rate", "must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Parameter layout of the encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    visit_embedding: ParamId,
    layers: Vec<LayerIds>,
}

pub const TOKEN_EMBEDDING: &str = "encoder.token_embedding";
pub const VISIT_EMBEDDING: &str = "encoder.visit_embedding";

fn layer_shapes(cfg: &EncoderConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    vec![
        ("wq", vec![d, d]),
        ("bq", vec![d]),
        ("wk", vec![d, d]),
        ("bk", vec![d]),
        ("wv", vec![d, d]),
        ("bv", vec![d]),
        ("wo", vec![d, d]),
        ("bo", vec![d]),
        ("ln1_g", vec![d]),
        ("ln1_b", vec![d]),
        ("w1", vec![d, f]),
        ("b1", vec![f]),
        ("w2", vec![f, d]),
        ("b2", vec![d]),
        ("ln2_g", vec![d]),
        ("ln2_b", vec![d]),
    ]
}

fn init_tensor(name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if name.ends_with("_g") {
        vec![1.0; n]
    } else if shape.len() == 1 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| std * rng.normal()).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl Encoder {
    /// Adds freshly initialised encoder parameters to `store`.
    pub fn register(config: &EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut add = |name: String, shape: Vec<usize>, rng: &mut Rng| {
            let t = init_tensor(&name, &shape, config.init_std, rng);
            store.add(&name, t)
        };
        let token_embedding = add(TOKEN_EMBEDDING.into(), vec![config.vocab_size, d], rng);
        let visit_embedding = add(VISIT_EMBEDDING.into(), vec![config.max_visits, d], rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ids: Vec<ParamId> = layer_shapes(config)
                .into_iter()
                .map(|(n, s)| add(format!("encoder.layers.{l}.{n}"), s, rng))
                .collect();
            layers.push(LayerIds::from_slice(&ids));
        }
        Ok(Encoder {
            config: config.clone(),
            token_embedding,
            visit_embedding,
            layers,
        })
    }

    /// Resolves an existing parameter layout, checking every shape.
    pub fn attach(config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let find = |name: String, shape: Vec<usize>| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let token_embedding = find(TOKEN_EMBEDDING.into(), vec![config.vocab_size, d])?;
        let visit_embedding = find(VISIT_EMBEDDING.into(), vec![config.max_visits, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ids = layer_shapes(config)
                .into_iter()
                .map(|(n, s)| find(format!("encoder.layers.{l}.{n}"), s))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerIds::from_slice(&ids));
        }
        Ok(Encoder {
            config: config.clone(),
            token_embedding,
            visit_embedding,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.token_embedding
    }

    pub fn token_embedding<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.token_embedding)
    }

    /// Records every encoder parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundEncoder {
        BoundEncoder {
            config: self.config.clone(),
            token_embedding: tape.param(store, self.token_embedding),
            visit_embedding: tape.param(store, self.visit_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(tape, store))
                .collect(),
        }
    }
}

impl LayerIds {
    fn from_slice(ids: &[ParamId]) -> Self {
        LayerIds {
            wq: ids[0],
            bq: ids[1],
            wk: ids[2],
            bk: ids[3],
            wv: ids[4],
            bv: ids[5],
            wo: ids[6],
            bo: ids[7],
            ln1_g: ids[8],
            ln1_b: ids[9],
            w1: ids[10],
            b1: ids[11],
            w2: ids[12],
            b2: ids[13],
            ln2_g: ids[14],
            ln2_b: ids[15],
        }
    }

    fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLayer {
        let mut p = |id| tape.param(store, id);
        BoundLayer {
            wq: p(self.wq),
            bq: p(self.bq),
            wk: p(self.wk),
            bk: p(self.bk),
            wv: p(self.wv),
            bv: p(self.bv),
            wo: p(self.wo),
            bo: p(self.bo),
            ln1_g: p(self.ln1_g),
            ln1_b: p(self.ln1_b),
            w1: p(self.w1),
            b1: p(self.b1),
            w2: p(self.w2),
            b2: p(self.b2),
            ln2_g: p(self.ln2_g),
            ln2_b: p(self.ln2_b),
        }
    }
}

struct BoundLayer {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

/// Encoder parameters recorded on one tape.
pub struct BoundEncoder {
    config: EncoderConfig,
    pub token_embedding: Var,
    pub visit_embedding: Var,
    layers: Vec<BoundLayer>,
}

/// Training mode enables dropout with its own random stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

impl BoundEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `token_embedding[token] + visit_embedding[visit]` per position, pad rows zeroed.
    pub fn embed_input(&self, tape: &mut Tape, seq: &InputSequence) -> Result<Var> {
        seq.validate()?;
        let tok = tape.gather(self.token_embedding, &seq.token_ids)?;
        let vis = tape.gather(self.visit_embedding, &seq.visit_ids)?;
        let sum = tape.add(tok, vis)?;
        if seq.pad.iter().all(|p| !p) {
            return Ok(sum);
        }
        let d = self.config.d_model;
        let mask = seq
            .pad
            .iter()
            .flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, d))
            .collect();
        let m = tape.constant(Tensor::matrix(seq.len(), d, mask)?);
        tape.mul(sum, m)
    }

    /// Contextual embeddings `[L, d_model]` from a post-norm transformer stack.
    pub fn encode(&self, tape: &mut Tape, seq: &InputSequence, mode: &mut Mode) -> Result<Var> {
        let cfg = &self.config;
        let rate = cfg.dropout_rate;
        let emb = self.embed_input(tape, seq)?;
        let mut x = dropout(tape, emb, rate, mode)?;
        let keys = seq.keep_mask();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        for layer in &self.layers {
            let q = tape.matmul(x, layer.wq)?;
            let q = tape.add_row(q, layer.bq)?;
            let k = tape.matmul(x, layer.wk)?;
            let k = tape.add_row(k, layer.bk)?;
            let v = tape.matmul(x, layer.wv)?;
            let v = tape.add_row(v, layer.bv)?;

            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (qh, kh, vh) = if cfg.n_heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, h * dh, dh)?,
                        tape.slice_cols(k, h * dh, dh)?,
                        tape.slice_cols(v, h * dh, dh)?,
                    )
                };
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores, Some(&keys))?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let out = tape.matmul(ctx, layer.wo)?;
            let out = tape.add_row(out, layer.bo)?;
            let out = dropout(tape, out, rate, mode)?;
            let res = tape.add(x, out)?;
            x = tape.layer_norm(res, layer.ln1_g, layer.ln1_b, cfg.layer_norm_eps)?;

            let hdn = tape.matmul(x, layer.w1)?;
            let hdn = tape.add_row(hdn, layer.b1)?;
            let hdn = tape.gelu(hdn);
            let ff = tape.matmul(hdn, layer.w2)?;
            let ff = tape.add_row(ff, layer.b2)?;
            let ff = dropout(tape, ff, rate, mode)?;
            let res = tape.add(x, ff)?;
            x = tape.layer_norm(res, layer.ln2_g, layer.ln2_b, cfg.layer_norm_eps)?;
        }
        Ok(x)
    }
}

/// Evaluation-mode contextual embeddings without keeping the tape.
pub fn encode_eval(encoder: &Encoder, store: &ParamStore, seq: &InputSequence) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, store);
    let out = bound.encode(&mut tape, seq, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Evaluation-mode embedding lookup without keeping the tape.
pub fn embed_input(encoder: &Encoder, store: &ParamStore, seq: &InputSequence) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, store);
    let out = bound.embed_input(&mut tape, seq)?;
    Ok(tape.value(out).clone())
}
