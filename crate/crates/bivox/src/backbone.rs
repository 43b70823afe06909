//! Incremental causal forward pass of the shared backbone.
//!
//! This is the decoding path: one combined step embedding in, one hidden
//! state out, with per-layer key/value memories. The training path rebuilds
//! the same computation as a full-sequence graph on the tape; the two add
//! identical numbers in identical order, which the cache-equivalence and
//! decode/train-agreement tests pin down.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{fl, Scalar};
use crate::tape::{sigmoid, softmax_row};
use crate::tensor::{dot, matvec};
use crate::vocab::TextId;

/// Shared layer-norm epsilon of every normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Per-layer key/value memories plus a position counter.
pub struct KvCache<S> {
    layers: Vec<LayerKv<S>>,
    pos: usize,
}

struct LayerKv<S> {
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            pos: 0,
        }
    }

    /// Steps consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.k.clear();
            l.v.clear();
        }
        self.pos = 0;
    }
}

/// Backbone cache alias; the refiner keeps its own state in
/// [`crate::dualres::SrhState`].
pub type BackboneCache<S> = KvCache<S>;

pub(crate) fn layer_norm_vec<S: Scalar>(x: &[S], gain: &[S], bias: &[S]) -> Vec<S> {
    let n = fl::<S>(x.len() as f64);
    let mut mean = S::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv = S::one() / (var + fl::<S>(LN_EPS)).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v - mean) * inv * gain[i] + bias[i])
        .collect()
}

/// One pre-norm transformer step through the layer stack under `prefix`,
/// appending this position's keys/values to the cache.
pub(crate) fn transformer_step<S: Scalar>(
    model: &Model<S>,
    prefix: &str,
    n_layers: usize,
    n_heads: usize,
    mut x: Vec<S>,
    cache: &mut KvCache<S>,
) -> Vec<S> {
    let d = x.len();
    let dk = d / n_heads;
    let scale = fl::<S>(1.0 / (dk as f64).sqrt());
    for l in 0..n_layers {
        let p = format!("{prefix}.l{l}");
        let xn = layer_norm_vec(
            &x,
            model.param(&format!("{p}.ln1.gain")).row(0),
            model.param(&format!("{p}.ln1.bias")).row(0),
        );
        let mut q = matvec(model.param(&format!("{p}.attn.wq.weight")), &xn);
        add_bias(&mut q, model.param(&format!("{p}.attn.wq.bias")).row(0));
        let mut key = matvec(model.param(&format!("{p}.attn.wk.weight")), &xn);
        add_bias(&mut key, model.param(&format!("{p}.attn.wk.bias")).row(0));
        let mut val = matvec(model.param(&format!("{p}.attn.wv.weight")), &xn);
        add_bias(&mut val, model.param(&format!("{p}.attn.wv.bias")).row(0));

        let layer = &mut cache.layers[l];
        layer.k.push(key);
        layer.v.push(val);
        let ctx_len = layer.k.len();

        let mut ctx = vec![S::zero(); d];
        for h in 0..n_heads {
            let hs = h * dk;
            let qh = &q[hs..hs + dk];
            let mut scores = Vec::with_capacity(ctx_len);
            for j in 0..ctx_len {
                scores.push(dot(qh, &layer.k[j][hs..hs + dk]) * scale);
            }
            let probs = softmax_row(&scores);
            for d_i in 0..dk {
                let mut acc = S::zero();
                for j in 0..ctx_len {
                    acc = acc + probs[j] * layer.v[j][hs + d_i];
                }
                ctx[hs + d_i] = acc;
            }
        }
        let mut attn = matvec(model.param(&format!("{p}.attn.wo.weight")), &ctx);
        add_bias(&mut attn, model.param(&format!("{p}.attn.wo.bias")).row(0));
        for i in 0..d {
            x[i] = x[i] + attn[i];
        }

        let xn2 = layer_norm_vec(
            &x,
            model.param(&format!("{p}.ln2.gain")).row(0),
            model.param(&format!("{p}.ln2.bias")).row(0),
        );
        let mut h1 = matvec(model.param(&format!("{p}.ffn.w1.weight")), &xn2);
        add_bias(&mut h1, model.param(&format!("{p}.ffn.w1.bias")).row(0));
        for v in &mut h1 {
            *v = *v * sigmoid(*v);
        }
        let mut ff = matvec(model.param(&format!("{p}.ffn.w2.weight")), &h1);
        add_bias(&mut ff, model.param(&format!("{p}.ffn.w2.bias")).row(0));
        for i in 0..d {
            x[i] = x[i] + ff[i];
        }
    }
    cache.pos += 1;
    layer_norm_vec(
        &x,
        model.param(&format!("{prefix}.ln_f.gain")).row(0),
        model.param(&format!("{prefix}.ln_f.bias")).row(0),
    )
}

pub(crate) fn add_bias<S: Scalar>(x: &mut [S], b: &[S]) {
    for (v, &bb) in x.iter_mut().zip(b) {
        *v = *v + bb;
    }
}

/// Combined step embedding: grouped speech representation plus the text
/// token embedding, elementwise.
pub fn combine_step_embedding<S: Scalar>(
    g: &[S],
    t: TextId,
    model: &Model<S>,
) -> Result<Vec<S>> {
    let vocab = model.config.vocab()?;
    vocab.check_text_id(t)?;
    let row = model.param("embed.text").row(t as usize);
    assert_eq!(g.len(), row.len(), "grouped width must equal d_h");
    Ok(g.iter().zip(row).map(|(&a, &b)| a + b).collect())
}

/// Feeds combined step embeddings through the backbone incrementally,
/// adding the learned position embedding for each consumed slot. Returns
/// the final-layer hidden state per input step.
pub fn backbone_forward<S: Scalar>(
    model: &Model<S>,
    inputs: &[Vec<S>],
    cache: &mut BackboneCache<S>,
) -> Result<Vec<Vec<S>>> {
    let c = &model.config;
    if cache.position() + inputs.len() > c.max_steps {
        return Err(Error::MaxStepsExceeded {
            requested: cache.position() + inputs.len(),
            max: c.max_steps,
        });
    }
    let pos_table = model.param("embed.pos");
    let mut out = Vec::with_capacity(inputs.len());
    for input in inputs {
        let pos = cache.position();
        let mut x = input.clone();
        add_bias(&mut x, pos_table.row(pos));
        out.push(transformer_step(
            model, "backbone", c.n_layers, c.n_heads, x, cache,
        ));
    }
    Ok(out)
}

/// Unnormalized text-vocabulary scores for one hidden state.
pub fn text_logits<S: Scalar>(model: &Model<S>, h: &[S]) -> Vec<S> {
    let mut logits = matvec(model.text_head_weight(), h);
    add_bias(&mut logits, model.param("head.text.bias").row(0));
    logits
}
