//! Teacher-forced training graph.
//!
//! Builds the full-sequence forward pass on the autodiff tape: combined
//! step embeddings into the backbone, text logits over every step, and the
//! speech refiner over each parallel utterance conditioned on ungrouped
//! chunks of the teacher-forced hidden states. The computation mirrors the
//! incremental decode path number for number; the decode/train agreement
//! suite holds the two together.

use crate::align::AlignedSequence;
use crate::backbone::LN_EPS;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// A tape with one leaf per model parameter.
pub struct TapedModel<'m, S: Scalar> {
    pub tape: Tape<S>,
    vars: IndexMap<String, Var>,
    pub model: &'m Model<S>,
}

impl<'m, S: Scalar> TapedModel<'m, S> {
    pub fn new(model: &'m Model<S>) -> Self {
        let mut tape = Tape::new();
        let mut vars = IndexMap::new();
        for (name, t) in model.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone()));
        }
        TapedModel { tape, vars, model }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter var `{name}`"))
    }

    /// Gradient tensors by parameter name; parameters the loss never
    /// reached get zeros.
    pub fn grad_map(&self, grads: &mut crate::tape::Gradients<S>) -> IndexMap<String, Tensor<S>> {
        let mut out = IndexMap::new();
        for (name, var) in &self.vars {
            let t = self.model.param(name);
            let g = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            out.insert(name.clone(), g);
        }
        out
    }

    fn linear(&mut self, x: Var, path: &str) -> Var {
        let w = self.var(&format!("{path}.weight"));
        let b = self.var(&format!("{path}.bias"));
        let y = self.tape.matmul_t(x, w);
        self.tape.add_row(y, b)
    }

    fn layer_norm(&mut self, x: Var, path: &str) -> Var {
        let gain = self.var(&format!("{path}.gain"));
        let bias = self.var(&format!("{path}.bias"));
        let n = self.tape.row_normalize(x, LN_EPS);
        let scaled = self.tape.mul_row(n, gain);
        self.tape.add_row(scaled, bias)
    }

    /// Pre-norm causal transformer stack with final normalization.
    fn transformer(&mut self, mut x: Var, prefix: &str, n_layers: usize, n_heads: usize) -> Var {
        let d = self.tape.value(x).cols();
        let dk = d / n_heads;
        let scale = fl::<S>(1.0 / (dk as f64).sqrt());
        for l in 0..n_layers {
            let p = format!("{prefix}.l{l}");
            let xn = self.layer_norm(x, &format!("{p}.ln1"));
            let q = self.linear(xn, &format!("{p}.attn.wq"));
            let k = self.linear(xn, &format!("{p}.attn.wk"));
            let v = self.linear(xn, &format!("{p}.attn.wv"));
            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let qh = self.tape.slice_cols(q, h * dk, dk);
                let kh = self.tape.slice_cols(k, h * dk, dk);
                let vh = self.tape.slice_cols(v, h * dk, dk);
                let scores = self.tape.matmul_t(qh, kh);
                let scaled = self.tape.scale(scores, scale);
                let probs = self.tape.causal_softmax_rows(scaled);
                heads.push(self.tape.matmul(probs, vh));
            }
            let ctx = self.tape.concat_cols(heads);
            let attn = self.linear(ctx, &format!("{p}.attn.wo"));
            x = self.tape.add(x, attn);

            let xn2 = self.layer_norm(x, &format!("{p}.ln2"));
            let h1 = self.linear(xn2, &format!("{p}.ffn.w1"));
            let act = self.tape.silu(h1);
            let ff = self.linear(act, &format!("{p}.ffn.w2"));
            x = self.tape.add(x, ff);
        }
        self.layer_norm(x, &format!("{prefix}.ln_f"))
    }
}

/// Speech logits of one parallel utterance.
pub struct SpeechSegment {
    /// First target step of the utterance within the sequence.
    pub start_step: usize,
    /// `(T_u, V_s)` logits, one row per raw speech position.
    pub logits: Var,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Tape handles of one teacher-forced sequence.
pub struct SequenceForward {
    /// Inputs consumed: steps `0..n-1`; row `j` predicts step `j+1`.
    pub n_inputs: usize,
    /// `(n-1, d_h)` final hidden states.
    pub hidden: Var,
    /// `(n-1, V_t)` text logits.
    pub text_logits: Var,
    pub text_targets: Vec<u32>,
    pub text_mask: Vec<bool>,
    pub text_ce_sum: Var,
    pub text_count: usize,
    pub speech_segments: Vec<SpeechSegment>,
    pub srh_ce_sum: Var,
    pub srh_count: usize,
}

/// Builds the forward graph of one sequence.
pub fn sequence_forward<S: Scalar>(
    tm: &mut TapedModel<S>,
    seq: &AlignedSequence,
) -> Result<SequenceForward> {
    let c = &tm.model.config;
    let n = seq.len();
    if n < 2 {
        return Err(Error::Config(
            "teacher forcing needs at least two aligned steps".into(),
        ));
    }
    if n > c.max_steps {
        return Err(Error::MaxStepsExceeded {
            requested: n,
            max: c.max_steps,
        });
    }
    if seq.k() != c.k {
        return Err(Error::Config(format!(
            "sequence grouping {} does not match model k {}",
            seq.k(),
            c.k
        )));
    }
    let n_in = n - 1;

    // Combined step embeddings for inputs 0..n-1.
    let text_ids: Vec<usize> = seq.text()[..n_in].iter().map(|&t| t as usize).collect();
    let speech_ids: Vec<usize> = seq.speech_flat()[..n_in * c.k]
        .iter()
        .map(|&s| s as usize)
        .collect();
    let e_text = tm.var("embed.text");
    let e_speech = tm.var("embed.speech");
    let text_emb = tm.tape.gather_rows(e_text, text_ids);
    let sp_emb = tm.tape.gather_rows(e_speech, speech_ids);
    let grouped_in = tm.tape.reshape(sp_emb, n_in, c.k * c.d_s);
    let grouped = tm.linear(grouped_in, "group");
    let combined = tm.tape.add(grouped, text_emb);
    let e_pos = tm.var("embed.pos");
    let pos = tm.tape.gather_rows(e_pos, (0..n_in).collect());
    let x = tm.tape.add(combined, pos);

    let hidden = tm.transformer(x, "backbone", c.n_layers, c.n_heads);

    // Text head over every input row.
    let tw = if c.tie_text_head {
        tm.var("embed.text")
    } else {
        tm.var("head.text.weight")
    };
    let tb = tm.var("head.text.bias");
    let tl = tm.tape.matmul_t(hidden, tw);
    let text_logits = tm.tape.add_row(tl, tb);
    let text_targets: Vec<u32> = seq.text()[1..n].to_vec();
    let text_mask: Vec<bool> = seq.text_mask()[1..n].to_vec();
    let tgt_usize: Vec<usize> = text_targets.iter().map(|&t| t as usize).collect();
    let (text_ce_sum, text_count) = tm.tape.masked_ce_sum(text_logits, &tgt_usize, &text_mask);

    // Speech refiner per parallel utterance.
    let mut speech_segments = Vec::new();
    let mut srh_sums = Vec::new();
    let mut srh_count = 0usize;
    let position_mask = seq.speech_position_mask();
    for (us, ue) in seq.parallel_utterances() {
        assert!(us >= 1, "an utterance cannot start the sequence");
        let steps_u = ue - us;
        if steps_u == 0 {
            continue;
        }
        let rows: Vec<usize> = (us - 1..ue - 1).collect();
        let h_u = tm.tape.gather_rows(hidden, rows);
        let targets: Vec<u32> = seq.speech_flat()[us * c.k..ue * c.k].to_vec();
        let mask: Vec<bool> = position_mask[us * c.k..ue * c.k].to_vec();

        let logits = if c.srh_enabled {
            srh_segment_logits(tm, h_u, steps_u, &targets)?
        } else {
            let flat = tm.linear(h_u, "head.split");
            tm.tape.reshape(flat, steps_u * c.k, c.v_s as usize)
        };
        let tgt_usize: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let (ce, count) = tm.tape.masked_ce_sum(logits, &tgt_usize, &mask);
        srh_sums.push(ce);
        srh_count += count;
        speech_segments.push(SpeechSegment {
            start_step: us,
            logits,
            targets,
            mask,
        });
    }
    let srh_ce_sum = if srh_sums.is_empty() {
        tm.tape.zero_scalar()
    } else {
        tm.tape.sum_scalars(srh_sums)
    };

    Ok(SequenceForward {
        n_inputs: n_in,
        hidden,
        text_logits,
        text_targets,
        text_mask,
        text_ce_sum,
        text_count,
        speech_segments,
        srh_ce_sum,
        srh_count,
    })
}

/// Refiner logits over one utterance, conditioned on ungrouped chunks and
/// teacher-forced previous tokens. Context spans the whole utterance, or a
/// single group under the per-group reset ablation.
fn srh_segment_logits<S: Scalar>(
    tm: &mut TapedModel<S>,
    h_u: Var,
    steps_u: usize,
    targets: &[u32],
) -> Result<Var> {
    let c = &tm.model.config;
    let t_u = steps_u * c.k;
    if t_u > c.max_speech_positions() {
        return Err(Error::MaxStepsExceeded {
            requested: t_u,
            max: c.max_speech_positions(),
        });
    }
    let hug = tm.linear(h_u, "ungroup");
    let chunks = tm.tape.reshape(hug, t_u, c.chunk_width());

    if !c.srh_group_reset {
        let logits = srh_run(tm, chunks, targets, t_u)?;
        return Ok(logits);
    }
    // Per-group reset: each group is its own context window.
    let mut parts = Vec::with_capacity(steps_u);
    for g in 0..steps_u {
        let idx: Vec<usize> = (g * c.k..(g + 1) * c.k).collect();
        let group_chunks = tm.tape.gather_rows(chunks, idx);
        let group_targets = &targets[g * c.k..(g + 1) * c.k];
        parts.push(srh_run(tm, group_chunks, group_targets, c.k)?);
    }
    Ok(tm.tape.concat_rows(parts))
}

fn srh_run<S: Scalar>(
    tm: &mut TapedModel<S>,
    chunks: Var,
    targets: &[u32],
    t_u: usize,
) -> Result<Var> {
    let c = &tm.model.config;
    debug_assert_eq!(targets.len(), t_u);
    let bos = tm.var("srh.embed.bos");
    let prev_emb = if t_u == 1 {
        bos
    } else {
        let prev_ids: Vec<usize> = targets[..t_u - 1].iter().map(|&t| t as usize).collect();
        let e = tm.var("srh.embed.speech");
        let prev = tm.tape.gather_rows(e, prev_ids);
        tm.tape.concat_rows(vec![bos, prev])
    };
    let chunk_proj = tm.linear(chunks, "srh.chunk");
    let summed = tm.tape.add(prev_emb, chunk_proj);
    let e_pos = tm.var("srh.embed.pos");
    let pos = tm.tape.gather_rows(e_pos, (0..t_u).collect());
    let x = tm.tape.add(summed, pos);
    let h = tm.transformer(x, "srh", c.srh_layers, c.srh_heads);
    Ok(tm.linear(h, "head.speech"))
}

/// Batch losses: pooled mask-true means per stream and the weighted total.
pub struct BatchForward {
    pub per_seq: Vec<SequenceForward>,
    /// Mean text NLL over all mask-true steps in the batch.
    pub l_th: Var,
    /// Mean refiner NLL over all mask-true raw positions in the batch.
    pub l_srh: Var,
    /// `λ·l_th + μ·l_srh`.
    pub total: Var,
    pub text_count: usize,
    pub srh_count: usize,
}

pub fn batch_forward<S: Scalar>(
    tm: &mut TapedModel<S>,
    batch: &[AlignedSequence],
) -> Result<BatchForward> {
    let c = &tm.model.config;
    let mut per_seq = Vec::with_capacity(batch.len());
    for seq in batch {
        per_seq.push(sequence_forward(tm, seq)?);
    }
    let text_count: usize = per_seq.iter().map(|s| s.text_count).sum();
    let srh_count: usize = per_seq.iter().map(|s| s.srh_count).sum();

    let text_sums: Vec<Var> = per_seq.iter().map(|s| s.text_ce_sum).collect();
    let srh_sums: Vec<Var> = per_seq.iter().map(|s| s.srh_ce_sum).collect();
    let text_total = tm.tape.sum_scalars(text_sums);
    let srh_total = tm.tape.sum_scalars(srh_sums);
    let l_th = if text_count == 0 {
        tm.tape.zero_scalar()
    } else {
        tm.tape.scale(text_total, fl::<S>(1.0 / text_count as f64))
    };
    let l_srh = if srh_count == 0 {
        tm.tape.zero_scalar()
    } else {
        tm.tape.scale(srh_total, fl::<S>(1.0 / srh_count as f64))
    };
    let total = tm
        .tape
        .add_scaled(l_th, l_srh, fl::<S>(c.lambda), fl::<S>(c.mu));
    Ok(BatchForward {
        per_seq,
        l_th,
        l_srh,
        total,
        text_count,
        srh_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::build_pattern_sample;
    use crate::config::ModelConfig;
    use crate::corpus::{synth_corpus, OracleParams};
    use crate::pattern::{InteractionPattern, ALL_PATTERNS};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_h: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            k: 3,
            d_s: 8,
            d_g: 12,
            srh_d: 16,
            srh_layers: 2,
            srh_heads: 2,
            v_t: 32,
            v_s: 32,
            max_steps: 256,
            ..ModelConfig::default()
        }
    }

    fn sample_batch(cfg: &ModelConfig, patterns: &[InteractionPattern]) -> Vec<AlignedSequence> {
        let vocab = cfg.vocab().unwrap();
        let corpus = synth_corpus(5, patterns.len(), &vocab, OracleParams::default(), 2..=4)
            .unwrap();
        corpus
            .iter()
            .zip(patterns)
            .map(|(r, p)| build_pattern_sample(&r.turns, *p, &vocab, cfg.k).unwrap())
            .collect()
    }

    #[test]
    fn batch_forward_produces_finite_losses() {
        let cfg = tiny_config();
        let model = Model::<f64>::init(cfg.clone(), 11).unwrap();
        let batch = sample_batch(&cfg, &ALL_PATTERNS);
        let mut tm = TapedModel::new(&model);
        let fwd = batch_forward(&mut tm, &batch).unwrap();
        let total = tm.tape.scalar_value(fwd.total).as_f64();
        let l_th = tm.tape.scalar_value(fwd.l_th).as_f64();
        let l_srh = tm.tape.scalar_value(fwd.l_srh).as_f64();
        assert!(total.is_finite() && l_th > 0.0 && l_srh > 0.0);
        assert!((total - (l_th + l_srh)).abs() < 1e-12, "lambda=mu=1");
        assert!(fwd.text_count > 0 && fwd.srh_count > 0);
        // Untrained logits hover near the uniform value.
        assert!((l_th - (32.0f64).ln()).abs() < 1.0);
    }

    #[test]
    fn text_only_batch_has_zero_refiner_loss() {
        let cfg = tiny_config();
        let model = Model::<f64>::init(cfg.clone(), 11).unwrap();
        let batch = sample_batch(&cfg, &[InteractionPattern::T2T, InteractionPattern::S2T]);
        let mut tm = TapedModel::new(&model);
        let fwd = batch_forward(&mut tm, &batch).unwrap();
        assert_eq!(fwd.srh_count, 0);
        assert_eq!(tm.tape.scalar_value(fwd.l_srh).as_f64(), 0.0);
        // Dead path: the speech output head gets no gradient.
        let mut grads = tm.tape.backward(fwd.total);
        let map = tm.grad_map(&mut grads);
        let g = &map["head.speech.weight"];
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sequence_must_fit_max_steps() {
        let mut cfg = tiny_config();
        cfg.max_steps = 8;
        let model = Model::<f64>::init(cfg.clone(), 1).unwrap();
        let batch = sample_batch(&cfg, &[InteractionPattern::T2T]);
        let mut tm = TapedModel::new(&model);
        assert!(matches!(
            sequence_forward(&mut tm, &batch[0]),
            Err(Error::MaxStepsExceeded { .. })
        ));
    }

    #[test]
    fn split_head_variant_builds_and_trains() {
        let mut cfg = tiny_config();
        cfg.srh_enabled = false;
        let model = Model::<f64>::init(cfg.clone(), 11).unwrap();
        let batch = sample_batch(&cfg, &[InteractionPattern::S2M]);
        let mut tm = TapedModel::new(&model);
        let fwd = batch_forward(&mut tm, &batch).unwrap();
        assert!(fwd.srh_count > 0);
        let mut grads = tm.tape.backward(fwd.total);
        let map = tm.grad_map(&mut grads);
        assert!(map["head.split.weight"].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn group_reset_variant_matches_full_span_on_first_group() {
        // For the very first group of an utterance the two context policies
        // coincide position by position.
        let mut cfg = tiny_config();
        let model_full = Model::<f64>::init(cfg.clone(), 11).unwrap();
        cfg.srh_group_reset = true;
        let model_reset = Model::<f64>::init(cfg, 11).unwrap();
        let batch = sample_batch(&model_full.config, &[InteractionPattern::S2M]);

        let mut tm_full = TapedModel::new(&model_full);
        let f_full = sequence_forward(&mut tm_full, &batch[0]).unwrap();
        let mut tm_reset = TapedModel::new(&model_reset);
        let f_reset = sequence_forward(&mut tm_reset, &batch[0]).unwrap();

        let l_full = tm_full.tape.value(f_full.speech_segments[0].logits);
        let l_reset = tm_reset.tape.value(f_reset.speech_segments[0].logits);
        let k = model_full.config.k;
        for p in 0..k {
            for v in 0..32 {
                assert_eq!(l_full.at(p, v), l_reset.at(p, v), "position {p}");
            }
        }
    }
}
