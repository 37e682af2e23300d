//! Pointer-augmented transformer encoder-decoder over the extended alphabet.
//!
//! Every decoding step scores vocabulary units, source positions and error
//! types with one softmax: `[V h ; H̄ h ; C h]`, where `H̄ = αE + (1-α)MLP(H)`
//! blends the source token embeddings `E` with the encoder states `H`.
//!
//! Training runs on a [`Tape`]; inference uses plain matrices with a
//! key/value cache. Both paths compute the same function.

pub mod checkpoint;
pub mod tagging;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{
    encode_source, encoder_input, index_to_token, serialize_target, ExtendedSpace, ExtendedSymbol,
    Setting, SettingSpec, SubwordTokenizer, BOS,
};
use crate::corpus::ExplainedSample;
use crate::error::{Error, Result};
use crate::tensor::{
    gelu, layer_norm, matmul, matmul_t, positional_encoding, softmax_inplace, softmax_rows_inplace, Grads,
    Mat, ParamId, ParamStore, Tape, Var, PROB_EPS,
};

pub use train::{mean_loss, train, AdamState, EpochLog, TrainConfig, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Weight of the raw source embeddings in the pointer keys.
    pub alpha: f64,
    pub vocab_size: usize,
    pub type_count: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Adds the BIO tagging head over encoder states.
    pub tagging: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_dim: 512,
            alpha: 0.5,
            vocab_size: 0,
            type_count: 0,
            dropout: 0.1,
            seed: 0,
            tagging: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 || self.ff_dim == 0 {
            return bad("vocab_size and ff_dim must be positive".into());
        }
        Ok(())
    }

    pub fn tag_count(&self) -> usize {
        tagging::tag_count(self.type_count)
    }
}

/// Loss weights: `lambda` on non-vocabulary target positions, `gamma` on the
/// tagging loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 && self.gamma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be non-negative (lambda {}, gamma {})",
                self.lambda, self.gamma
            )))
        }
    }

    fn weight(&self, s: ExtendedSymbol) -> f64 {
        match s {
            ExtendedSymbol::Vocab(_) => 1.0,
            _ => self.lambda,
        }
    }
}

#[derive(Debug, Clone)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: ParamId,
    type_emb: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
    blend: FfIds,
    tag: Option<ParamId>,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Mat::from_vec(rows, cols, data))
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.normal(name, rows, cols, (1.0 / rows as f64).sqrt())
    }

    fn filled(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Mat::filled(1, cols, v))
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.filled(format!("{prefix}.g"), d, 1.0),
            b: self.filled(format!("{prefix}.b"), d, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
            wo: self.weight(format!("{prefix}.wo"), d, d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, hidden: usize) -> FfIds {
        FfIds {
            w1: self.weight(format!("{prefix}.w1"), d, hidden),
            b1: self.filled(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.weight(format!("{prefix}.w2"), hidden, d),
            b2: self.filled(format!("{prefix}.b2"), d, 0.0),
        }
    }
}

/// Encoder output for one source.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub units: Vec<usize>,
    /// Encoder states `H`.
    pub hidden: Mat,
    /// Source token embeddings `E`.
    pub embeddings: Mat,
    /// Pointer keys `αE + (1-α)MLP(H)`.
    pub blended: Mat,
    cross: Vec<(Mat, Mat)>,
}

impl EncoderState {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }
}

/// Self-attention keys and values of the tokens decoded so far.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    keys: Vec<Mat>,
    values: Vec<Mat>,
    len: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Probabilities over `|V| + n_units + |C|` outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedDistribution {
    pub space: ExtendedSpace,
    pub probs: Vec<f64>,
}

impl ExtendedDistribution {
    pub fn prob(&self, s: ExtendedSymbol) -> f64 {
        self.probs[self.space.index(s)]
    }
}

/// A teacher-forcing training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub enc_units: Vec<usize>,
    /// `BOS` followed by the fed-back unit of every gold symbol but the last.
    pub dec_inputs: Vec<usize>,
    pub gold: Vec<ExtendedSymbol>,
    pub space: ExtendedSpace,
    /// One BIO tag per encoder unit.
    pub tags: Vec<usize>,
    /// Additive output mask of the setting.
    pub class_mask: Vec<f64>,
}

impl Example {
    pub fn targets(&self) -> Vec<usize> {
        self.gold.iter().map(|&s| self.space.index(s)).collect()
    }
}

/// Builds the encoder input, decoder input and gold symbols of `sample`.
pub fn prepare_example<T: SubwordTokenizer + ?Sized>(
    sample: &ExplainedSample,
    spec: &SettingSpec,
    tok: &T,
) -> Result<Example> {
    let enc_units = encoder_input(sample, spec, tok)?;
    if enc_units.is_empty() {
        return Err(Error::Validation(format!("sample {}: empty source", sample.id)));
    }
    let full = serialize_target(sample, spec, tok)?;
    let mut dec_inputs = Vec::with_capacity(full.len() - 1);
    for &s in &full[..full.len() - 1] {
        dec_inputs.push(index_to_token(s, &enc_units, tok)?);
    }
    let space = ExtendedSpace {
        vocab: tok.vocab_size(),
        n_units: enc_units.len(),
        types: tok.type_count(),
    };
    let tags = if spec.setting == Setting::Infusion || sample.error_type.is_none() {
        vec![0; enc_units.len()]
    } else {
        let enc = encode_source(sample, tok);
        let mut t = tagging::bio_tags(&enc, &sample.evidence, sample.error_type.unwrap_or(0));
        t.resize(enc_units.len(), 0);
        t
    };
    Ok(Example {
        class_mask: spec.class_mask(space),
        enc_units,
        dec_inputs,
        gold: full[1..].to_vec(),
        space,
        tags,
    })
}

fn causal_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, f64::NEG_INFINITY);
        }
    }
    m
}

/// Multi-head attention of `q` over `k`/`v` (all already projected), no mask.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q.cols;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Mat::zeros(q.rows, d);
    let mut scores = vec![0.0; k.rows];
    for r in 0..q.rows {
        let qr = q.row(r);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for (j, s) in scores.iter_mut().enumerate() {
                let kr = &k.row(j)[cols.clone()];
                *s = qr[cols.clone()].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_inplace(&mut scores);
            let o = &mut out.row_mut(r)[cols.clone()];
            for (j, &p) in scores.iter().enumerate() {
                for (x, y) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *x += p * y;
                }
            }
        }
    }
    out
}

fn append_rows(m: &mut Mat, extra: &Mat) {
    debug_assert_eq!(m.cols, extra.cols);
    m.data.extend_from_slice(&extra.data);
    m.rows += extra.rows;
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

impl Model {
    /// Fresh model with seeded random weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: ParamStore::new(),
        };
        let emb_std = (1.0 / d as f64).sqrt();
        let tok_emb = init.normal("tok_emb".into(), config.vocab_size, d, emb_std);
        let type_emb = init.normal("type_emb".into(), config.type_count, d, emb_std);
        let enc = (0..config.encoder_layers)
            .map(|l| {
                let p = format!("enc{l}");
                EncLayer {
                    ln1: init.ln(&format!("{p}.ln1"), d),
                    attn: init.attn(&format!("{p}.attn"), d),
                    ln2: init.ln(&format!("{p}.ln2"), d),
                    ff: init.ff(&format!("{p}.ff"), d, config.ff_dim),
                }
            })
            .collect();
        let enc_ln = init.ln("enc_ln", d);
        let dec = (0..config.decoder_layers)
            .map(|l| {
                let p = format!("dec{l}");
                DecLayer {
                    ln1: init.ln(&format!("{p}.ln1"), d),
                    self_attn: init.attn(&format!("{p}.self"), d),
                    ln2: init.ln(&format!("{p}.ln2"), d),
                    cross: init.attn(&format!("{p}.cross"), d),
                    ln3: init.ln(&format!("{p}.ln3"), d),
                    ff: init.ff(&format!("{p}.ff"), d, config.ff_dim),
                }
            })
            .collect();
        let dec_ln = init.ln("dec_ln", d);
        let blend = init.ff("blend", d, d);
        let tag = config
            .tagging
            .then(|| init.weight("tag".into(), d, config.tag_count()));
        Ok(Model {
            ids: Ids {
                tok_emb,
                type_emb,
                enc,
                enc_ln,
                dec,
                dec_ln,
                blend,
                tag,
            },
            params: init.store,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn p(&self, id: ParamId) -> &Mat {
        self.params.get(id)
    }

    fn check_units(&self, units: &[usize]) -> Result<()> {
        if units.is_empty() {
            return Err(Error::Validation("empty encoder input".into()));
        }
        match units.iter().find(|&&u| u >= self.config.vocab_size) {
            Some(&u) => Err(Error::Index {
                index: u,
                len: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, units: &[usize], offset: usize) -> Mat {
        let d = self.config.d_model;
        let table = self.p(self.ids.tok_emb);
        let pe = positional_encoding(offset + units.len(), d);
        let s = (d as f64).sqrt();
        let mut x = Mat::zeros(units.len(), d);
        for (r, &u) in units.iter().enumerate() {
            for ((o, e), p) in x.row_mut(r).iter_mut().zip(table.row(u)).zip(pe.row(offset + r)) {
                *o = e * s + p;
            }
        }
        x
    }

    fn ln(&self, x: &Mat, ids: &LnIds) -> Mat {
        layer_norm(x, &self.p(ids.g).data, &self.p(ids.b).data).0
    }

    fn ff(&self, x: &Mat, ids: &FfIds) -> Mat {
        let mut h = matmul(x, self.p(ids.w1));
        crate::tensor::add_row_inplace(&mut h, &self.p(ids.b1).data);
        h.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut o = matmul(&h, self.p(ids.w2));
        crate::tensor::add_row_inplace(&mut o, &self.p(ids.b2).data);
        o
    }

    /// Runs the encoder over `units`.
    pub fn encode(&self, units: &[usize]) -> Result<EncoderState> {
        self.check_units(units)?;
        let heads = self.config.heads;
        let mut x = self.embed(units, 0);
        for layer in &self.ids.enc {
            let h = self.ln(&x, &layer.ln1);
            let q = matmul(&h, self.p(layer.attn.wq));
            let k = matmul(&h, self.p(layer.attn.wk));
            let v = matmul(&h, self.p(layer.attn.wv));
            x.add_assign(&matmul(&attend(&q, &k, &v, heads), self.p(layer.attn.wo)));
            let h = self.ln(&x, &layer.ln2);
            x.add_assign(&self.ff(&h, &layer.ff));
        }
        let hidden = self.ln(&x, &self.ids.enc_ln);
        let table = self.p(self.ids.tok_emb);
        let mut embeddings = Mat::zeros(units.len(), self.config.d_model);
        for (r, &u) in units.iter().enumerate() {
            embeddings.row_mut(r).copy_from_slice(table.row(u));
        }
        let a = self.config.alpha;
        let mut blended = self.ff(&hidden, &self.ids.blend);
        for (b, e) in blended.data.iter_mut().zip(&embeddings.data) {
            *b = a * e + (1.0 - a) * *b;
        }
        let cross = self
            .ids
            .dec
            .iter()
            .map(|l| (matmul(&hidden, self.p(l.cross.wk)), matmul(&hidden, self.p(l.cross.wv))))
            .collect();
        Ok(EncoderState {
            units: units.to_vec(),
            hidden,
            embeddings,
            blended,
            cross,
        })
    }

    pub fn new_cache(&self) -> DecoderCache {
        let d = self.config.d_model;
        let n = self.ids.dec.len();
        DecoderCache {
            keys: vec![Mat::zeros(0, d); n],
            values: vec![Mat::zeros(0, d); n],
            len: 0,
        }
    }

    /// Feeds one decoder input unit and returns the raw logits over the
    /// extended alphabet for the next symbol.
    pub fn step_logits(&self, state: &EncoderState, cache: &mut DecoderCache, unit: usize) -> Result<Vec<f64>> {
        if unit >= self.config.vocab_size {
            return Err(Error::Index {
                index: unit,
                len: self.config.vocab_size,
            });
        }
        let heads = self.config.heads;
        let mut x = self.embed(&[unit], cache.len);
        for (l, layer) in self.ids.dec.iter().enumerate() {
            let h = self.ln(&x, &layer.ln1);
            append_rows(&mut cache.keys[l], &matmul(&h, self.p(layer.self_attn.wk)));
            append_rows(&mut cache.values[l], &matmul(&h, self.p(layer.self_attn.wv)));
            let q = matmul(&h, self.p(layer.self_attn.wq));
            let a = attend(&q, &cache.keys[l], &cache.values[l], heads);
            x.add_assign(&matmul(&a, self.p(layer.self_attn.wo)));
            let h = self.ln(&x, &layer.ln2);
            let q = matmul(&h, self.p(layer.cross.wq));
            let (ck, cv) = &state.cross[l];
            x.add_assign(&matmul(&attend(&q, ck, cv, heads), self.p(layer.cross.wo)));
            let h = self.ln(&x, &layer.ln3);
            x.add_assign(&self.ff(&h, &layer.ff));
        }
        cache.len += 1;
        let h = self.ln(&x, &self.ids.dec_ln);
        let mut logits = matmul_t(&h, self.p(self.ids.tok_emb)).data;
        logits.extend(matmul_t(&h, &state.blended).data);
        logits.extend(matmul_t(&h, self.p(self.ids.type_emb)).data);
        Ok(logits)
    }

    pub fn space(&self, state: &EncoderState) -> ExtendedSpace {
        ExtendedSpace {
            vocab: self.config.vocab_size,
            n_units: state.n_units(),
            types: self.config.type_count,
        }
    }

    /// Next-symbol distribution after `BOS` and the already emitted `prefix`.
    pub fn decode_step(&self, state: &EncoderState, prefix: &[ExtendedSymbol]) -> Result<ExtendedDistribution> {
        let space = self.space(state);
        let mut cache = self.new_cache();
        let mut logits = self.step_logits(state, &mut cache, BOS)?;
        for &s in prefix {
            if !space.contains(s) {
                return Err(match s {
                    ExtendedSymbol::Pointer(p) => Error::Index {
                        index: p,
                        len: space.n_units,
                    },
                    _ => Error::Validation(format!("symbol {s:?} outside the extended space")),
                });
            }
            let unit = match s {
                ExtendedSymbol::Vocab(v) => v,
                ExtendedSymbol::Pointer(p) => state.units[p],
                ExtendedSymbol::ErrType(t) => crate::codec::type_unit(t),
            };
            logits = self.step_logits(state, &mut cache, unit)?;
        }
        softmax_inplace(&mut logits);
        Ok(ExtendedDistribution { space, probs: logits })
    }

    /// Per-unit distributions over the BIO tag set.
    pub fn tag_logits(&self, state: &EncoderState) -> Result<Mat> {
        let id = self
            .ids
            .tag
            .ok_or_else(|| Error::Config("model was built without a tagging head".into()))?;
        let mut m = matmul(&state.hidden, self.p(id));
        softmax_rows_inplace(&mut m);
        Ok(m)
    }

    pub fn has_tagging_head(&self) -> bool {
        self.ids.tag.is_some()
    }

    fn dropout(&self, t: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let n = t.value(x).data.len();
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                t.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn ln_t(&self, t: &mut Tape, x: Var, ids: &LnIds) -> Var {
        let g = t.param(ids.g);
        let b = t.param(ids.b);
        t.layer_norm(x, g, b)
    }

    fn ff_t(&self, t: &mut Tape, x: Var, ids: &FfIds) -> Var {
        let w1 = t.param(ids.w1);
        let b1 = t.param(ids.b1);
        let w2 = t.param(ids.w2);
        let b2 = t.param(ids.b2);
        let h = t.matmul(x, w1);
        let h = t.add_row(h, b1);
        let h = t.gelu(h);
        let o = t.matmul(h, w2);
        t.add_row(o, b2)
    }

    fn attn_t(&self, t: &mut Tape, xq: Var, xkv: Var, ids: &AttnIds, causal: bool) -> Var {
        let heads = self.config.heads;
        let dk = self.config.d_model / heads;
        let wq = t.param(ids.wq);
        let wk = t.param(ids.wk);
        let wv = t.param(ids.wv);
        let wo = t.param(ids.wo);
        let q = t.matmul(xq, wq);
        let k = t.matmul(xkv, wk);
        let v = t.matmul(xkv, wv);
        let mask = causal.then(|| {
            let n = t.value(q).rows;
            t.constant(causal_mask(n))
        });
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * dk, dk),
                    t.slice_cols(k, h * dk, dk),
                    t.slice_cols(v, h * dk, dk),
                )
            };
            let s = t.matmul_t(qh, kh);
            let mut s = t.scale(s, 1.0 / (dk as f64).sqrt());
            if let Some(m) = mask {
                s = t.add(s, m);
            }
            let p = t.softmax_rows(s);
            outs.push(t.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
        t.matmul(cat, wo)
    }

    fn embed_t(&self, t: &mut Tape, units: &[usize]) -> Var {
        let d = self.config.d_model;
        let e = t.gather(self.ids.tok_emb, units);
        let e = t.scale(e, (d as f64).sqrt());
        let pe = t.constant(positional_encoding(units.len(), d));
        t.add(e, pe)
    }

    /// Teacher-forced forward pass. Returns the masked output logits (one row
    /// per decoder input) and the encoder states.
    fn forward_t(&self, t: &mut Tape, ex: &Example, mut rng: Option<&mut ChaCha8Rng>) -> (Var, Var) {
        let x = self.embed_t(t, &ex.enc_units);
        let mut x = self.dropout(t, x, &mut rng);
        for layer in &self.ids.enc {
            let h = self.ln_t(t, x, &layer.ln1);
            let a = self.attn_t(t, h, h, &layer.attn, false);
            let a = self.dropout(t, a, &mut rng);
            x = t.add(x, a);
            let h = self.ln_t(t, x, &layer.ln2);
            let f = self.ff_t(t, h, &layer.ff);
            let f = self.dropout(t, f, &mut rng);
            x = t.add(x, f);
        }
        let enc_h = self.ln_t(t, x, &self.ids.enc_ln);
        let emb = t.gather(self.ids.tok_emb, &ex.enc_units);
        let a = self.config.alpha;
        let mlp = self.ff_t(t, enc_h, &self.ids.blend);
        let e_part = t.scale(emb, a);
        let m_part = t.scale(mlp, 1.0 - a);
        let blended = t.add(e_part, m_part);

        let y = self.embed_t(t, &ex.dec_inputs);
        let mut y = self.dropout(t, y, &mut rng);
        for layer in &self.ids.dec {
            let h = self.ln_t(t, y, &layer.ln1);
            let a = self.attn_t(t, h, h, &layer.self_attn, true);
            let a = self.dropout(t, a, &mut rng);
            y = t.add(y, a);
            let h = self.ln_t(t, y, &layer.ln2);
            let c = self.attn_t(t, h, enc_h, &layer.cross, false);
            let c = self.dropout(t, c, &mut rng);
            y = t.add(y, c);
            let h = self.ln_t(t, y, &layer.ln3);
            let f = self.ff_t(t, h, &layer.ff);
            let f = self.dropout(t, f, &mut rng);
            y = t.add(y, f);
        }
        let hd = self.ln_t(t, y, &self.ids.dec_ln);
        let vocab = t.param(self.ids.tok_emb);
        let types = t.param(self.ids.type_emb);
        let lv = t.matmul_t(hd, vocab);
        let lp = t.matmul_t(hd, blended);
        let lc = t.matmul_t(hd, types);
        let logits = t.concat_cols(&[lv, lp, lc]);
        let mask = t.constant(Mat::from_vec(1, ex.class_mask.len(), ex.class_mask.clone()));
        (t.add_row(logits, mask), enc_h)
    }

    fn loss_t(&self, t: &mut Tape, ex: &Example, cfg: &LossConfig, rng: Option<&mut ChaCha8Rng>) -> Var {
        let (logits, enc_h) = self.forward_t(t, ex, rng);
        let weights: Vec<f64> = ex.gold.iter().map(|&s| cfg.weight(s)).collect();
        let cor = t.weighted_nll(logits, &ex.targets(), &weights);
        match self.ids.tag {
            Some(id) if cfg.gamma > 0.0 => {
                let w = t.param(id);
                let tl = t.matmul(enc_h, w);
                let tag = t.weighted_nll(tl, &ex.tags, &vec![1.0; ex.tags.len()]);
                let tag = t.scale(tag, cfg.gamma);
                t.add(cor, tag)
            }
            _ => cor,
        }
    }

    /// Training loss of one example (no dropout).
    pub fn loss(&self, ex: &Example, cfg: &LossConfig) -> f64 {
        let mut t = Tape::new(&self.params);
        let l = self.loss_t(&mut t, ex, cfg, None);
        t.value(l).data[0]
    }

    /// Loss, its parameter gradients, and the number of clamped gold
    /// probabilities. Dropout is drawn from `dropout_seed` when given.
    pub fn loss_and_grads(&self, ex: &Example, cfg: &LossConfig, dropout_seed: Option<u64>) -> (f64, Grads, usize) {
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut t = Tape::new(&self.params);
        let l = self.loss_t(&mut t, ex, cfg, rng.as_mut());
        let mut grads = self.params.zero_grads();
        t.backward(l, &mut grads);
        (t.value(l).data[0], grads, t.clamp_count())
    }

    /// Softmax distributions of the teacher-forced pass, one per gold symbol.
    pub fn teacher_forced(&self, ex: &Example) -> Vec<ExtendedDistribution> {
        let mut t = Tape::new(&self.params);
        let (logits, _) = self.forward_t(&mut t, ex, None);
        let mut m = t.value(logits).clone();
        softmax_rows_inplace(&mut m);
        (0..m.rows)
            .map(|r| ExtendedDistribution {
                space: ex.space,
                probs: m.row(r).to_vec(),
            })
            .collect()
    }
}

/// Weighted negative log-likelihood of `gold` under `dists`: vocabulary
/// positions weigh 1, pointer and type positions weigh `lambda`. Returns the
/// loss and how many gold probabilities were clamped to [`PROB_EPS`].
pub fn sequence_loss(dists: &[ExtendedDistribution], gold: &[ExtendedSymbol], cfg: &LossConfig) -> Result<(f64, usize)> {
    if dists.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{} distributions for {} gold symbols",
            dists.len(),
            gold.len()
        )));
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    for (d, &g) in dists.iter().zip(gold) {
        let mut p = d.prob(g);
        if p < PROB_EPS {
            clamped += 1;
            p = PROB_EPS;
        }
        loss -= cfg.weight(g) * p.ln();
    }
    if clamped > 0 {
        log::warn!("{clamped} gold probabilities clamped to {PROB_EPS}");
    }
    Ok((loss, clamped))
}

/// `correction_loss + gamma * tagging cross-entropy`.
pub fn joint_tagging_loss(correction_loss: f64, tag_dists: &Mat, gold_tags: &[usize], cfg: &LossConfig) -> Result<f64> {
    if tag_dists.rows != gold_tags.len() {
        return Err(Error::Validation(format!(
            "{} tag distributions for {} gold tags",
            tag_dists.rows,
            gold_tags.len()
        )));
    }
    let tag: f64 = gold_tags
        .iter()
        .enumerate()
        .map(|(r, &y)| -tag_dists.get(r, y).max(PROB_EPS).ln())
        .sum();
    Ok(correction_loss + cfg.gamma * tag)
}
