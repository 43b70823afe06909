//! Parallel speech-text decoding.
//!
//! One decode step: the backbone consumes the previous step's combined
//! embedding, the text head emits one token, and — in speech-emitting
//! stages — the refiner runs `k` sequential passes over the ungrouped
//! chunks of the new hidden state, one raw speech token per pass. The `k`
//! tokens are regrouped and summed with the new text embedding to form the
//! next backbone input, closing the feedback loop.

use crate::align::{AlignedSequence, StepTag};
use crate::backbone::{backbone_forward, combine_step_embedding, text_logits, BackboneCache};
use crate::dualres::{group_embed, split_head_logits, srh_forward, ungroup_split, SrhPrev, SrhState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pattern::{InteractionPattern, StageKind};
use crate::scalar::Scalar;
use crate::tape::softmax_row;
use crate::vocab::{SpeechId, TextId, SPEECH_EOS, SPEECH_PAD, STAGE_SEP, TEXT_EOS, TEXT_SIL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SamplingStrategy {
    Greedy,
    /// Softmax sampling after dividing logits by the temperature.
    Temperature(f64),
    /// Renormalized sampling over the `n` largest logits.
    TopN(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub strategy: SamplingStrategy,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn greedy() -> Self {
        SamplingSpec {
            strategy: SamplingStrategy::Greedy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            SamplingStrategy::Temperature(t) if t <= 0.0 => Err(Error::Config(format!(
                "temperature must be positive, got {t}"
            ))),
            SamplingStrategy::TopN(0) => Err(Error::Config("top_n must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Draws one token id. Greedy takes the lowest index among exact ties.
pub fn sample_token<S: Scalar, R: Rng>(
    logits: &[S],
    strategy: SamplingStrategy,
    rng: &mut R,
) -> usize {
    match strategy {
        SamplingStrategy::Greedy => argmax(logits),
        SamplingStrategy::Temperature(tau) => {
            let scaled: Vec<f64> = logits.iter().map(|&l| l.as_f64() / tau).collect();
            let probs = softmax_row(&scaled);
            draw(&probs.iter().enumerate().collect::<Vec<_>>(), rng)
        }
        SamplingStrategy::TopN(n) => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            // Stable by construction: ties keep ascending index order.
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
            let keep = &order[..n.min(logits.len())];
            let vals: Vec<f64> = keep.iter().map(|&i| logits[i].as_f64()).collect();
            let probs = softmax_row(&vals);
            let pairs: Vec<(usize, &f64)> = keep.iter().copied().zip(probs.iter()).collect();
            draw(&pairs, rng)
        }
    }
}

fn argmax<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng>(pairs: &[(usize, &f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in pairs {
        acc += *p;
        if u < acc {
            return i;
        }
    }
    pairs.last().map(|&(i, _)| i).unwrap_or(0)
}

/// Logits captured during decoding, for the decode/train agreement checks.
#[derive(Debug, Clone)]
pub struct RecordedLogits<S> {
    /// `(assistant step index, text logits)` for every sampled text token.
    pub text: Vec<(usize, Vec<S>)>,
    /// `(utterance position, speech logits)` for every refiner invocation.
    pub speech: Vec<(usize, Vec<S>)>,
}

impl<S> Default for RecordedLogits<S> {
    fn default() -> Self {
        RecordedLogits {
            text: Vec::new(),
            speech: Vec::new(),
        }
    }
}

/// One emitted step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedStep {
    pub text: TextId,
    pub speech: Vec<SpeechId>,
    /// Whether the refiner produced this step's speech slots.
    pub spoke: bool,
}

/// Incremental parallel decode state over shared immutable weights.
pub struct DecodeSession<'m, S: Scalar> {
    model: &'m Model<S>,
    pattern: InteractionPattern,
    stage_idx: usize,
    cache: BackboneCache<S>,
    srh: SrhState<S>,
    rng: ChaCha8Rng,
    strategy: SamplingStrategy,
    prefix_len: usize,
    pending: Option<Vec<S>>,
    h_last: Vec<S>,
    steps: Vec<EmittedStep>,
    text_ended: bool,
    speech_ended: bool,
    srh_positions: usize,
    last_speech_token: Option<SpeechId>,
    steps_since_text_end: usize,
    record: Option<RecordedLogits<S>>,
}

impl<'m, S: Scalar> DecodeSession<'m, S> {
    /// Pre-fills the backbone with a prompt prefix (system prompt, user
    /// turns, turn-start marker).
    pub fn new(
        model: &'m Model<S>,
        prefix: &AlignedSequence,
        pattern: InteractionPattern,
        sampling: SamplingSpec,
    ) -> Result<Self> {
        sampling.validate()?;
        if prefix.is_empty() {
            return Err(Error::Config("decode prefix must be nonempty".into()));
        }
        if prefix.k() != model.config.k {
            return Err(Error::Config(format!(
                "prefix grouping {} does not match model k {}",
                prefix.k(),
                model.config.k
            )));
        }
        let mut cache = BackboneCache::new(model.config.n_layers);
        let mut inputs = Vec::with_capacity(prefix.len());
        for i in 0..prefix.len() {
            let g = group_embed(model, prefix.speech_group(i))?;
            inputs.push(combine_step_embedding(&g[0], prefix.text()[i], model)?);
        }
        let hs = backbone_forward(model, &inputs, &mut cache)?;
        let h_last = hs.into_iter().last().expect("nonempty prefix");
        Ok(DecodeSession {
            model,
            pattern,
            stage_idx: 0,
            cache,
            srh: SrhState::new(model),
            rng: ChaCha8Rng::seed_from_u64(sampling.seed),
            strategy: sampling.strategy,
            prefix_len: prefix.len(),
            pending: None,
            h_last,
            steps: Vec::new(),
            text_ended: false,
            speech_ended: false,
            srh_positions: 0,
            last_speech_token: None,
            steps_since_text_end: 0,
            record: None,
        })
    }

    /// Enables logit capture for agreement testing.
    pub fn record_logits(&mut self) {
        self.record = Some(RecordedLogits::default());
    }

    pub fn recorded(&self) -> Option<&RecordedLogits<S>> {
        self.record.as_ref()
    }

    pub fn steps(&self) -> &[EmittedStep] {
        self.steps.as_slice()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    fn current_stage(&self) -> StageKind {
        let stages = self.pattern.stages();
        stages[self.stage_idx.min(stages.len() - 1)]
    }

    /// The session is done when the text stream has ended and either the
    /// speech stream has ended or this mode never emits speech.
    pub fn terminated(&self) -> bool {
        self.text_ended && (self.speech_ended || !self.pattern.emits_speech())
    }

    /// Emits one text token and `k` speech slots, then feeds their combined
    /// embedding back as the next backbone input.
    pub fn decode_step(&mut self) -> Result<(TextId, Vec<SpeechId>)> {
        if self.terminated() {
            return Err(Error::Config("decode session already terminated".into()));
        }
        // Consume the previous step's combined embedding.
        if let Some(c) = self.pending.take() {
            let hs = backbone_forward(self.model, &[c], &mut self.cache)?;
            self.h_last = hs.into_iter().next().expect("one step in, one out");
        }
        let h = self.h_last.clone();
        let k = self.model.config.k;
        let emits_speech_now = self.current_stage().emits_speech();

        // Text slot.
        let text_tok: TextId = if self.text_ended {
            TEXT_SIL
        } else {
            let logits = text_logits(self.model, &h);
            let tok = sample_token(&logits, self.strategy, &mut self.rng) as TextId;
            if let Some(rec) = &mut self.record {
                rec.text.push((self.steps.len(), logits));
            }
            tok
        };
        if text_tok == TEXT_EOS {
            self.text_ended = true;
        }
        if text_tok == STAGE_SEP && self.stage_idx + 1 < self.pattern.stages().len() {
            self.stage_idx += 1;
        }

        // Speech slots.
        let mut slots = Vec::with_capacity(k);
        let mut spoke = false;
        if emits_speech_now && !self.speech_ended {
            let chunks = if self.model.config.srh_enabled {
                ungroup_split(self.model, &h)
            } else {
                Vec::new()
            };
            let split_logits = if self.model.config.srh_enabled {
                Vec::new()
            } else {
                split_head_logits(self.model, &h)
            };
            for j in 0..k {
                if self.speech_ended {
                    slots.push(SPEECH_PAD);
                    continue;
                }
                spoke = true;
                let logits = if self.model.config.srh_enabled {
                    if self.model.config.srh_group_reset && j == 0 {
                        self.srh.reset();
                        self.last_speech_token = None;
                    }
                    let prev = match self.last_speech_token {
                        None => SrhPrev::Bos,
                        Some(t) => SrhPrev::Token(t),
                    };
                    let out = srh_forward(self.model, &[chunks[j].clone()], &[prev], &mut self.srh)?;
                    out.into_iter().next().expect("one position")
                } else {
                    split_logits[j].clone()
                };
                let tok = sample_token(&logits, self.strategy, &mut self.rng) as SpeechId;
                if let Some(rec) = &mut self.record {
                    rec.speech.push((self.srh_positions, logits));
                }
                self.srh_positions += 1;
                self.last_speech_token = Some(tok);
                if tok == SPEECH_EOS {
                    self.speech_ended = true;
                }
                slots.push(tok);
            }
        } else {
            slots.extend(std::iter::repeat(SPEECH_PAD).take(k));
        }

        // Once text has ended outside a speech-emitting stage, no stage
        // separator can ever arrive, so speech can never start.
        if self.text_ended && !self.current_stage().emits_speech() {
            self.speech_ended = true;
        }
        if self.text_ended {
            self.steps_since_text_end += 1;
        }

        // Feedback: regroup the emitted slots and add the text embedding.
        let g = group_embed(self.model, &slots)?;
        let c = combine_step_embedding(&g[0], text_tok, self.model)?;
        self.pending = Some(c);

        self.steps.push(EmittedStep {
            text: text_tok,
            speech: slots.clone(),
            spoke,
        });
        Ok((text_tok, slots))
    }
}

/// Decoded streams with pads and end markers stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub text: Vec<TextId>,
    pub speech: Vec<SpeechId>,
    /// Set when the step budget (or the position bound) ran out first.
    pub truncated: bool,
    pub steps: Vec<EmittedStep>,
}

/// Pre-fills the prompt, loops decode steps until both streams have ended
/// or `max_steps` new steps were emitted, then strips padding.
pub fn decode_parallel<S: Scalar>(
    model: &Model<S>,
    prefix: &AlignedSequence,
    pattern: InteractionPattern,
    sampling: SamplingSpec,
    max_steps: usize,
) -> Result<DecodeOutput> {
    let mut session = DecodeSession::new(model, prefix, pattern, sampling)?;
    run_session(&mut session, max_steps)
}

pub(crate) fn run_session<S: Scalar>(
    session: &mut DecodeSession<'_, S>,
    max_steps: usize,
) -> Result<DecodeOutput> {
    let mut truncated = false;
    while !session.terminated() {
        if session.steps.len() >= max_steps {
            truncated = true;
            break;
        }
        // A full text stop is forced once the safety bound past the text
        // end is exhausted.
        if session.text_ended && session.steps_since_text_end >= max_steps {
            truncated = true;
            break;
        }
        match session.decode_step() {
            Ok(_) => {}
            Err(Error::MaxStepsExceeded { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let text = session
        .steps
        .iter()
        .map(|s| s.text)
        .filter(|&t| t != TEXT_SIL && t != TEXT_EOS)
        .collect();
    let speech = session
        .steps
        .iter()
        .flat_map(|s| s.speech.iter().copied())
        .filter(|&s| s != SPEECH_PAD && s != SPEECH_EOS)
        .collect();
    Ok(DecodeOutput {
        text,
        speech,
        truncated,
        steps: session.steps.clone(),
    })
}

/// Rebuilds the aligned sequence a decode produced (prefix plus emitted
/// steps) for teacher-forced replay; loss masks are not meaningful here.
pub fn session_sequence(prefix: &AlignedSequence, steps: &[EmittedStep]) -> AlignedSequence {
    let mut seq = prefix.clone();
    for s in steps {
        let tag = if s.spoke {
            StepTag::AssistantParallel
        } else {
            StepTag::AssistantText
        };
        seq.push_step(s.text, &s.speech, false, s.spoke, tag);
    }
    seq
}
