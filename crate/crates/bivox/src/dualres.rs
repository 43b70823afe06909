//! The dual-resolution mechanism.
//!
//! Input side: `k` consecutive speech-token embeddings are concatenated and
//! projected to one backbone-width vector, compressing a length-`T` stream
//! to `T/k` backbone steps. Output side: each backbone hidden state is
//! projected to width `d_g` and split into `k` chunks, one per raw speech
//! position; the speech refiner (a small causal transformer) consumes one
//! chunk plus the previous speech token per position and emits raw-rate
//! speech logits, its context spanning the whole utterance across group
//! boundaries unless the per-group reset ablation is switched on.

use crate::backbone::{add_bias, transformer_step, KvCache};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::matvec;
use crate::vocab::SpeechId;

/// Previous-token input of one refiner position. `Bos` marks the start of
/// an utterance (or of a group, under the per-group reset ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrhPrev {
    Bos,
    Token(SpeechId),
}

/// Refiner decode state: per-layer memories over the raw speech positions
/// of the current assistant utterance.
pub struct SrhState<S> {
    cache: KvCache<S>,
}

impl<S: Scalar> SrhState<S> {
    pub fn new(model: &Model<S>) -> Self {
        SrhState {
            cache: KvCache::new(model.config.srh_layers),
        }
    }

    /// Raw speech positions consumed so far in this utterance.
    pub fn position(&self) -> usize {
        self.cache.position()
    }

    /// Clears the context; used at utterance starts and by the per-group
    /// reset ablation.
    pub fn reset(&mut self) {
        self.cache.reset();
    }
}

/// Embeds and groups a speech stream: each group of `k` ids becomes one
/// backbone-width vector via concatenation and a linear map.
pub fn group_embed<S: Scalar>(model: &Model<S>, ids: &[SpeechId]) -> Result<Vec<Vec<S>>> {
    let c = &model.config;
    if ids.len() % c.k != 0 {
        return Err(Error::NotGrouped {
            len: ids.len(),
            k: c.k,
        });
    }
    let vocab = c.vocab()?;
    for &s in ids {
        vocab.check_speech_id(s)?;
    }
    let table = model.param("embed.speech");
    let weight = model.param("group.weight");
    let bias = model.param("group.bias");
    let mut out = Vec::with_capacity(ids.len() / c.k);
    for group in ids.chunks(c.k) {
        let mut concat = Vec::with_capacity(c.k * c.d_s);
        for &s in group {
            concat.extend_from_slice(table.row(s as usize));
        }
        let mut g = matvec(weight, &concat);
        add_bias(&mut g, bias.row(0));
        out.push(g);
    }
    Ok(out)
}

/// Projects a backbone hidden state to width `d_g` and splits it into `k`
/// contiguous chunks in temporal order.
pub fn ungroup_split<S: Scalar>(model: &Model<S>, h: &[S]) -> Vec<Vec<S>> {
    let c = &model.config;
    let mut hug = matvec(model.param("ungroup.weight"), h);
    add_bias(&mut hug, model.param("ungroup.bias").row(0));
    hug.chunks(c.chunk_width()).map(|c| c.to_vec()).collect()
}

/// Runs the refiner over the given positions: position `i` consumes its
/// chunk, the previous speech token (or the begin-of-speech embedding) and
/// its utterance-relative position embedding, and yields speech logits.
/// Strictly causal; the state carries context across calls.
pub fn srh_forward<S: Scalar>(
    model: &Model<S>,
    chunks: &[Vec<S>],
    prev: &[SrhPrev],
    state: &mut SrhState<S>,
) -> Result<Vec<Vec<S>>> {
    let c = &model.config;
    if chunks.len() != prev.len() {
        return Err(Error::ChunkPositionMismatch {
            chunks: chunks.len(),
            positions: prev.len(),
        });
    }
    if state.position() + chunks.len() > c.max_speech_positions() {
        return Err(Error::MaxStepsExceeded {
            requested: state.position() + chunks.len(),
            max: c.max_speech_positions(),
        });
    }
    let vocab = c.vocab()?;
    let embed = model.param("srh.embed.speech");
    let bos = model.param("srh.embed.bos");
    let pos_table = model.param("srh.embed.pos");
    let head_w = model.param("head.speech.weight");
    let head_b = model.param("head.speech.bias");

    let mut out = Vec::with_capacity(chunks.len());
    for (chunk, p) in chunks.iter().zip(prev) {
        assert_eq!(chunk.len(), c.chunk_width(), "chunk width mismatch");
        let prev_emb: &[S] = match p {
            SrhPrev::Bos => bos.row(0),
            SrhPrev::Token(id) => {
                vocab.check_speech_id(*id)?;
                embed.row(*id as usize)
            }
        };
        let mut proj = matvec(model.param("srh.chunk.weight"), chunk);
        add_bias(&mut proj, model.param("srh.chunk.bias").row(0));
        let mut x: Vec<S> = prev_emb.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
        add_bias(&mut x, pos_table.row(state.position()));
        let h = transformer_step(model, "srh", c.srh_layers, c.srh_heads, x, &mut state.cache);
        let mut logits = matvec(head_w, &h);
        add_bias(&mut logits, head_b.row(0));
        out.push(logits);
    }
    Ok(out)
}

/// Parallel speech prediction without the refiner: one projection of the
/// backbone hidden state, chopped into `k` per-slot logit vectors.
pub fn split_head_logits<S: Scalar>(model: &Model<S>, h: &[S]) -> Vec<Vec<S>> {
    let c = &model.config;
    let mut flat = matvec(model.param("head.split.weight"), h);
    add_bias(&mut flat, model.param("head.split.bias").row(0));
    flat.chunks(c.v_s as usize).map(|s| s.to_vec()).collect()
}
