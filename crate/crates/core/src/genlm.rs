//! Tiny conditional decoder: one sentence per region, conditioned on the
//! region feature through a single prefix embedding.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, input_err, Error, Result};
use crate::nlgmetrics::tokenize;
use crate::nn::{affine, affine_backward, argmax, dot, log_softmax, softmax};
use crate::optimkit::{adamw_step, AdamWConfig, AdamWState, PlateauMode, PlateauScheduler};
use crate::params::{fan_in_bound, ParamStore, TensorId};
use crate::rng::{seeded, Rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Generation cap used by the optimized configuration.
pub const TOKEN_NUM: usize = 300;
pub const REGION_FEATURE_DIM: usize = 1024;

/// Word-level vocabulary; ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return input_err(format!("vocabulary must start with {RESERVED:?}"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return input_err(format!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens followed by the sorted distinct words of the corpus.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = corpus.into_iter().flat_map(|t| tokenize(t).0).collect();
        words.sort();
        words.dedup();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::try_from(tokens).expect("reserved tokens are not words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).0.iter().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with single spaces; PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Mean token count, rounded half away from zero (at least 1).
pub fn avg_tokens_per_report<S: AsRef<str>>(corpus: &[S], vocab: &Vocab) -> Result<usize> {
    if corpus.is_empty() {
        return input_err("cannot average over an empty corpus");
    }
    let total: usize = corpus.iter().map(|r| vocab.encode(r.as_ref()).len()).sum();
    let n = corpus.len();
    Ok(((2 * total + n) / (2 * n)).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenLimits {
    pub max_tokens: usize,
}

impl GenLimits {
    pub fn new(max_tokens: usize) -> Result<Self> {
        if max_tokens == 0 {
            return input_err("max_tokens must be at least 1");
        }
        Ok(Self { max_tokens })
    }
}

impl Default for GenLimits {
    fn default() -> Self {
        Self {
            max_tokens: TOKEN_NUM,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Longest input sequence, prefix included.
    pub max_len: usize,
    pub prefix_dim: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 256,
            max_len: TOKEN_NUM + 2,
            prefix_dim: REGION_FEATURE_DIM,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size <= UNK {
            return input_err("vocabulary must hold the reserved tokens");
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return input_err("embed_dim must be a positive multiple of num_heads");
        }
        if self.max_len < 2 {
            return input_err("max_len must leave room for prefix and BOS");
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerNormIds {
    gain: TensorId,
    bias: TensorId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: TensorId,
    b: TensorId,
    n_in: usize,
    n_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    ln1: LayerNormIds,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormIds,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyDecoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
    embed: TensorId,
    pos: TensorId,
    prefix: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNormIds,
    out_bias: TensorId,
}

fn layer_norm_ids(store: &mut ParamStore, name: &str, d: usize) -> LayerNormIds {
    let gain = store.add(format!("{name}.gain"), &[d]);
    store.get_mut(gain).fill(1.0);
    LayerNormIds {
        gain,
        bias: store.add(format!("{name}.bias"), &[d]),
    }
}

fn linear(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut Rng) -> Linear {
    let bound = fan_in_bound(n_in);
    Linear {
        w: store.add_uniform(format!("{name}.weight"), &[n_out, n_in], bound, rng),
        b: store.add_uniform(format!("{name}.bias"), &[n_out], bound, rng),
        n_in,
        n_out,
    }
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, row-major `t × t` attention weights (upper triangle zero).
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
}

/// Per-layer keys and values for incremental decoding.
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl TinyDecoder {
    pub fn new(config: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamStore::new();
        let embed = params.add_uniform("gen.embed", &[config.vocab_size, d], 0.05, rng);
        let pos = params.add_uniform("gen.pos", &[config.max_len, d], 0.05, rng);
        let prefix = linear(&mut params, "gen.prefix", config.prefix_dim, d, rng);
        let blocks = (0..config.num_layers)
            .map(|l| {
                let p = format!("gen.block{l}");
                Block {
                    ln1: layer_norm_ids(&mut params, &format!("{p}.ln1"), d),
                    q: linear(&mut params, &format!("{p}.attn.query"), d, d, rng),
                    k: linear(&mut params, &format!("{p}.attn.key"), d, d, rng),
                    v: linear(&mut params, &format!("{p}.attn.value"), d, d, rng),
                    o: linear(&mut params, &format!("{p}.attn.out"), d, d, rng),
                    ln2: layer_norm_ids(&mut params, &format!("{p}.ln2"), d),
                    ff1: linear(&mut params, &format!("{p}.ff1"), d, config.ff_dim, rng),
                    ff2: linear(&mut params, &format!("{p}.ff2"), config.ff_dim, d, rng),
                }
            })
            .collect();
        let ln_f = layer_norm_ids(&mut params, "gen.ln_f", d);
        let out_bias = params.add("gen.out.bias", &[config.vocab_size]);
        Ok(Self {
            config,
            params,
            embed,
            pos,
            prefix,
            blocks,
            ln_f,
            out_bias,
        })
    }

    /// Token embedding table, also used as the output projection.
    pub fn embedding(&self) -> &[f64] {
        self.params.get(self.embed)
    }

    pub fn embedding_id(&self) -> TensorId {
        self.embed
    }

    fn d(&self) -> usize {
        self.config.embed_dim
    }

    fn rows(&self, lin: &Linear, x: &[f64]) -> Vec<f64> {
        let (w, b) = (self.params.get(lin.w), self.params.get(lin.b));
        x.chunks(lin.n_in)
            .flat_map(|row| affine(w, b, row))
            .collect()
    }

    fn rows_backward(&self, lin: &Linear, x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = self.params.get(lin.w);
        let mut dx = vec![0.0; x.len()];
        let (dw, db) = self.params.slot_pair(grad, lin.w, lin.b);
        for ((xr, dyr), dxr) in x
            .chunks(lin.n_in)
            .zip(dy.chunks(lin.n_out))
            .zip(dx.chunks_mut(lin.n_in))
        {
            affine_backward(w, xr, dyr, dw, db, Some(dxr));
        }
        dx
    }

    fn ln_forward(&self, ids: &LayerNormIds, x: &[f64]) -> (Vec<f64>, LnCache) {
        let d = self.d();
        let (g, b) = (self.params.get(ids.gain), self.params.get(ids.bias));
        let mut y = Vec::with_capacity(x.len());
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / d);
        for row in x.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(g[j] * h + b[j]);
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn ln_backward(
        &self,
        ids: &LayerNormIds,
        cache: &LnCache,
        dy: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let d = self.d();
        let g = self.params.get(ids.gain);
        let mut dx = vec![0.0; dy.len()];
        let (dg, db) = self.params.slot_pair(grad, ids.gain, ids.bias);
        for (t, (dyr, xh)) in dy.chunks(d).zip(cache.xhat.chunks(d)).enumerate() {
            let mut dxhat = vec![0.0; d];
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
                dxhat[j] = dyr[j] * g[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dot(&dxhat, xh) / d as f64;
            for j in 0..d {
                dx[t * d + j] = cache.inv_std[t] * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        dx
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        check_len("region feature", self.config.prefix_dim, feature.len())?;
        if feature.iter().any(|v| !v.is_finite()) {
            return input_err("region feature must be finite");
        }
        Ok(())
    }

    fn check_token(&self, id: usize) -> Result<()> {
        if id >= self.config.vocab_size {
            return input_err(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    fn input_embedding(&self, prefix_emb: &[f64], tokens: &[usize], t: usize) -> Vec<f64> {
        let d = self.d();
        let pos = &self.params.get(self.pos)[t * d..(t + 1) * d];
        let base = if t == 0 {
            prefix_emb
        } else {
            let id = tokens[t - 1];
            &self.embedding()[id * d..(id + 1) * d]
        };
        base.iter().zip(pos).map(|(a, b)| a + b).collect()
    }

    /// Full causal forward over `[prefix] + tokens`; returns the final hidden rows.
    fn forward(&self, feature: &[f64], tokens: &[usize]) -> (Vec<f64>, ForwardCache) {
        let d = self.d();
        let t_len = tokens.len() + 1;
        let prefix_emb = affine(
            self.params.get(self.prefix.w),
            self.params.get(self.prefix.b),
            feature,
        );
        let mut h: Vec<f64> = (0..t_len)
            .flat_map(|t| self.input_embedding(&prefix_emb, tokens, t))
            .collect();
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a, ln1) = self.ln_forward(&blk.ln1, &h);
            let q = self.rows(&blk.q, &a);
            let k = self.rows(&blk.k, &a);
            let v = self.rows(&blk.v, &a);
            let mut ctx = vec![0.0; t_len * d];
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let off = hd * dh;
                let mut p = vec![0.0; t_len * t_len];
                for i in 0..t_len {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| dot(qi, &k[j * d + off..j * d + off + dh]) * scale)
                        .collect();
                    let w = softmax(&scores);
                    for (j, wj) in w.iter().enumerate() {
                        p[i * t_len + j] = *wj;
                        for c in 0..dh {
                            ctx[i * d + off + c] += wj * v[j * d + off + c];
                        }
                    }
                }
                probs.push(p);
            }
            let attn = self.rows(&blk.o, &ctx);
            h.iter_mut().zip(&attn).for_each(|(x, y)| *x += y);
            let (b, ln2) = self.ln_forward(&blk.ln2, &h);
            let ff_pre = self.rows(&blk.ff1, &b);
            let ff_act: Vec<f64> = ff_pre.iter().map(|&x| x.max(0.0)).collect();
            let ff = self.rows(&blk.ff2, &ff_act);
            h.iter_mut().zip(&ff).for_each(|(x, y)| *x += y);
            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                b,
                ff_pre,
                ff_act,
            });
        }
        let (hf, ln_f) = self.ln_forward(&self.ln_f, &h);
        (
            hf,
            ForwardCache {
                blocks: caches,
                ln_f,
            },
        )
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.d();
        let e = self.embedding();
        let ob = self.params.get(self.out_bias);
        (0..self.config.vocab_size)
            .map(|v| dot(&e[v * d..(v + 1) * d], hidden) + ob[v])
            .collect()
    }

    /// Back-propagates `d_hf` (gradient at the final hidden rows) into `grad`.
    fn backward(
        &self,
        feature: &[f64],
        tokens: &[usize],
        cache: &ForwardCache,
        d_hf: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.d();
        let t_len = tokens.len() + 1;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dh_res = self.ln_backward(&self.ln_f, &cache.ln_f, d_hf, grad);
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            // feed-forward branch
            let mut d_act = self.rows_backward(&blk.ff2, &bc.ff_act, &dh_res, grad);
            d_act.iter_mut().zip(&bc.ff_pre).for_each(|(g, &p)| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let d_b = self.rows_backward(&blk.ff1, &bc.b, &d_act, grad);
            let d_ln2 = self.ln_backward(&blk.ln2, &bc.ln2, &d_b, grad);
            dh_res.iter_mut().zip(&d_ln2).for_each(|(x, y)| *x += y);
            // attention branch
            let d_ctx = self.rows_backward(&blk.o, &bc.ctx, &dh_res, grad);
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            for hd in 0..heads {
                let off = hd * dh;
                let p = &bc.probs[hd];
                for i in 0..t_len {
                    let dci = &d_ctx[i * d + off..i * d + off + dh];
                    let dp: Vec<f64> = (0..=i)
                        .map(|j| dot(dci, &bc.v[j * d + off..j * d + off + dh]))
                        .collect();
                    let row = &p[i * t_len..i * t_len + i + 1];
                    let mix = dot(row, &dp);
                    for j in 0..=i {
                        for c in 0..dh {
                            dv[j * d + off + c] += row[j] * dci[c];
                        }
                        let ds = row[j] * (dp[j] - mix) * scale;
                        if ds != 0.0 {
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * bc.k[j * d + off + c];
                                dk[j * d + off + c] += ds * bc.q[i * d + off + c];
                            }
                        }
                    }
                }
            }
            let mut d_a = self.rows_backward(&blk.q, &bc.a, &dq, grad);
            for (lin, dy) in [(&blk.k, &dk), (&blk.v, &dv)] {
                let extra = self.rows_backward(lin, &bc.a, dy, grad);
                d_a.iter_mut().zip(&extra).for_each(|(x, y)| *x += y);
            }
            let d_ln1 = self.ln_backward(&blk.ln1, &bc.ln1, &d_a, grad);
            dh_res.iter_mut().zip(&d_ln1).for_each(|(x, y)| *x += y);
        }
        // input embeddings
        {
            let dpos = self.params.slot(grad, self.pos);
            for (a, b) in dpos[..t_len * d].iter_mut().zip(&dh_res) {
                *a += b;
            }
        }
        {
            let demb = self.params.slot(grad, self.embed);
            for t in 1..t_len {
                let id = tokens[t - 1];
                for c in 0..d {
                    demb[id * d + c] += dh_res[t * d + c];
                }
            }
        }
        let (dw, db) = self.params.slot_pair(grad, self.prefix.w, self.prefix.b);
        affine_backward(
            self.params.get(self.prefix.w),
            feature,
            &dh_res[..d],
            dw,
            db,
            None,
        );
    }

    fn validate_target(&self, feature: &[f64], target: &[usize]) -> Result<()> {
        self.check_feature(feature)?;
        if target.len() + 1 > self.config.max_len {
            return input_err(format!(
                "target of {} tokens exceeds max_len {} minus the prefix",
                target.len(),
                self.config.max_len
            ));
        }
        if target.iter().all(|&t| t == PAD) {
            return input_err("target has no non-pad tokens");
        }
        target.iter().try_for_each(|&t| self.check_token(t))
    }

    /// Teacher-forced cross-entropy; accumulates `scale ×` its gradient into `grad`.
    pub fn loss_and_grad(
        &self,
        feature: &[f64],
        target: &[usize],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.validate_target(feature, target)?;
        check_len("gradient buffer", self.params.len(), grad.len())?;
        let d = self.d();
        let inputs = teacher_inputs(target);
        let (hf, cache) = self.forward(feature, &inputs);
        let counted = target.iter().filter(|&&t| t != PAD).count() as f64;
        let mut loss = 0.0;
        let mut d_hf = vec![0.0; hf.len()];
        let e = self.embedding().to_vec();
        for (n, &tgt) in target.iter().enumerate() {
            if tgt == PAD {
                continue;
            }
            let t = n + 1;
            let row = &hf[t * d..(t + 1) * d];
            let lp = log_softmax(&self.logits(row));
            loss -= lp[tgt];
            let dl: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(v, l)| (l.exp() - f64::from(u8::from(v == tgt))) * scale / counted)
                .collect();
            {
                let ob = self.params.slot(grad, self.out_bias);
                ob.iter_mut().zip(&dl).for_each(|(g, x)| *g += x);
            }
            let demb = self.params.slot(grad, self.embed);
            let dr = &mut d_hf[t * d..(t + 1) * d];
            for (v, g) in dl.iter().enumerate() {
                for c in 0..d {
                    demb[v * d + c] += g * row[c];
                    dr[c] += g * e[v * d + c];
                }
            }
        }
        self.backward(feature, &inputs, &cache, &d_hf, grad);
        Ok(loss / counted)
    }

    pub fn loss(&self, feature: &[f64], target: &[usize]) -> Result<f64> {
        self.validate_target(feature, target)?;
        let d = self.d();
        let inputs = teacher_inputs(target);
        let (hf, _) = self.forward(feature, &inputs);
        let mut loss = 0.0;
        let mut counted = 0usize;
        for (n, &tgt) in target.iter().enumerate() {
            if tgt != PAD {
                let t = n + 1;
                loss -= log_softmax(&self.logits(&hf[t * d..(t + 1) * d]))[tgt];
                counted += 1;
            }
        }
        Ok(loss / counted as f64)
    }

    /// Smallest |pre-activation| of any feed-forward ReLU in the teacher-forced pass;
    /// finite differences are only meaningful when this exceeds the step size.
    pub fn relu_margin(&self, feature: &[f64], target: &[usize]) -> Result<f64> {
        self.validate_target(feature, target)?;
        let (_, cache) = self.forward(feature, &teacher_inputs(target));
        Ok(cache
            .blocks
            .iter()
            .flat_map(|b| b.ff_pre.iter())
            .fold(f64::INFINITY, |m, x| m.min(x.abs())))
    }

    /// Next-token logits after `[prefix] + tokens`, via the full forward pass.
    pub fn next_logits(&self, feature: &[f64], tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        if tokens.len() + 1 > self.config.max_len {
            return input_err("sequence exceeds max_len");
        }
        tokens.iter().try_for_each(|&t| self.check_token(t))?;
        let d = self.d();
        let (hf, _) = self.forward(feature, tokens);
        Ok(self.logits(&hf[tokens.len() * d..]))
    }

    /// One incremental step at position `t`; returns next-token logits.
    fn step(&self, x: Vec<f64>, kv: &mut [KvCache]) -> Vec<f64> {
        let d = self.d();
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x;
        for (blk, cache) in self.blocks.iter().zip(kv.iter_mut()) {
            let (a, _) = self.ln_forward(&blk.ln1, &h);
            let q = self.rows(&blk.q, &a);
            cache.k.push(self.rows(&blk.k, &a));
            cache.v.push(self.rows(&blk.v, &a));
            let mut ctx = vec![0.0; d];
            for hd in 0..heads {
                let off = hd * dh;
                let scores: Vec<f64> = cache
                    .k
                    .iter()
                    .map(|k| dot(&q[off..off + dh], &k[off..off + dh]) * scale)
                    .collect();
                for (w, v) in softmax(&scores).iter().zip(&cache.v) {
                    for c in 0..dh {
                        ctx[off + c] += w * v[off + c];
                    }
                }
            }
            let attn = self.rows(&blk.o, &ctx);
            h.iter_mut().zip(&attn).for_each(|(x, y)| *x += y);
            let (b, _) = self.ln_forward(&blk.ln2, &h);
            let act: Vec<f64> = self
                .rows(&blk.ff1, &b)
                .into_iter()
                .map(|x| x.max(0.0))
                .collect();
            let ff = self.rows(&blk.ff2, &act);
            h.iter_mut().zip(&ff).for_each(|(x, y)| *x += y);
        }
        let (hf, _) = self.ln_forward(&self.ln_f, &h);
        self.logits(&hf)
    }
}

/// `BOS + target[:-1]`.
fn teacher_inputs(target: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(target[..target.len() - 1].iter().copied())
        .collect()
}

/// Mean next-token cross-entropy and its parameter gradient.
pub fn lm_loss(
    model: &TinyDecoder,
    region_feature: &[f64],
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = model.params.zeros_like();
    let loss = model.loss_and_grad(region_feature, target, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Argmax decoding from `prefix + BOS` until EOS or the token cap; EOS is not emitted.
pub fn decode_greedy(
    model: &TinyDecoder,
    region_feature: &[f64],
    limits: &GenLimits,
) -> Result<Vec<usize>> {
    model.check_feature(region_feature)?;
    let cap = limits.max_tokens.min(model.config.max_len - 1);
    let prefix_emb = affine(
        model.params.get(model.prefix.w),
        model.params.get(model.prefix.b),
        region_feature,
    );
    let mut kv: Vec<KvCache> = model
        .blocks
        .iter()
        .map(|_| KvCache {
            k: Vec::new(),
            v: Vec::new(),
        })
        .collect();
    let mut tokens = vec![BOS];
    model.step(model.input_embedding(&prefix_emb, &tokens, 0), &mut kv);
    let mut out = Vec::new();
    while out.len() < cap {
        let t = tokens.len();
        let logits = model.step(model.input_embedding(&prefix_emb, &tokens, t), &mut kv);
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub weight_decay: f64,
    pub scheduler_factor: f64,
    pub scheduler_cooldown: u32,
    pub scheduler_patience: u32,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 1,
            learn_rate: 5e-5,
            weight_decay: 0.0,
            scheduler_factor: 0.5,
            scheduler_cooldown: 5,
            scheduler_patience: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Sentence tokens followed by EOS, truncated to fit the model.
pub fn training_target(vocab: &Vocab, sentence: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(sentence);
    ids.truncate(max_len.saturating_sub(2));
    ids.push(EOS);
    ids
}

fn mean_loss(model: &TinyDecoder, data: &[(Vec<f64>, Vec<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    for (f, t) in data {
        total += model.loss(f, t)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains a fresh decoder; returns the best-validation parameters and the epoch log.
/// With an empty `val` the training corpus is monitored.
pub fn train_generator(
    train: &[(Vec<f64>, String)],
    val: &[(Vec<f64>, String)],
    vocab: &Vocab,
    cfg: &GeneratorTrainConfig,
) -> Result<(TinyDecoder, Vec<GeneratorEpochLog>)> {
    train_generator_with(train, val, vocab, cfg, DecoderConfig::new(vocab.len()))
}

pub fn train_generator_with(
    train: &[(Vec<f64>, String)],
    val: &[(Vec<f64>, String)],
    vocab: &Vocab,
    cfg: &GeneratorTrainConfig,
    arch: DecoderConfig,
) -> Result<(TinyDecoder, Vec<GeneratorEpochLog>)> {
    if train.is_empty() {
        return input_err("generator training corpus is empty");
    }
    if cfg.batch_size == 0 {
        return input_err("batch size must be positive");
    }
    check_len("decoder vocabulary", vocab.len(), arch.vocab_size)?;
    let mut rng = seeded(cfg.seed);
    let mut model = TinyDecoder::new(arch, &mut rng)?;
    let encode = |set: &[(Vec<f64>, String)]| -> Vec<(Vec<f64>, Vec<usize>)> {
        set.iter()
            .map(|(f, s)| (f.clone(), training_target(vocab, s, arch.max_len)))
            .collect()
    };
    let train_set = encode(train);
    let val_set = if val.is_empty() {
        train_set.clone()
    } else {
        encode(val)
    };
    let mut opt = AdamWConfig::new(cfg.learn_rate, cfg.weight_decay)?;
    let mut state = AdamWState::new(model.params.len());
    let mut sched = PlateauScheduler::new(
        cfg.learn_rate,
        cfg.scheduler_factor,
        cfg.scheduler_patience,
        cfg.scheduler_cooldown,
        PlateauMode::Min,
    )?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (f, t) = &train_set[i];
                train_loss += model.loss_and_grad(f, t, scale, &mut grad)?;
            }
            adamw_step(model.params.data_mut(), &grad, &mut state, &opt)?;
        }
        train_loss /= train_set.len() as f64;
        let val_loss = mean_loss(&model, &val_set)?;
        log.push(GeneratorEpochLog {
            epoch,
            lr: opt.learn_rate,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
        }
        opt.learn_rate = sched.step(val_loss)?;
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok((model, log))
}

/// One decoded sentence per region in class order, joined by single spaces.
pub fn assemble_report(
    regions: &[(usize, Vec<f64>)],
    model: &TinyDecoder,
    vocab: &Vocab,
    limits: &GenLimits,
) -> Result<String> {
    let mut sorted: Vec<&(usize, Vec<f64>)> = regions.iter().collect();
    sorted.sort_by_key(|(class, _)| *class);
    let mut parts = Vec::new();
    for (_, feature) in sorted {
        let sentence = vocab.decode(&decode_greedy(model, feature, limits)?);
        if !sentence.is_empty() {
            parts.push(sentence);
        }
    }
    Ok(parts.join(" "))
}
