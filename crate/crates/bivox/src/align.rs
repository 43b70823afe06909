//! Parallel-stream alignment at grouped resolution.
//!
//! One aligned step carries exactly one text token and `k` speech tokens;
//! the backbone consumes one step per timestep. The shorter stream is padded
//! (text with the silence token, speech with pad groups) and loss masks are
//! false wherever a position holds padding or non-assistant content.

use crate::error::{Error, Result};
use crate::pattern::{system_prompt_text, InteractionPattern, StageKind};
use crate::vocab::{
    SpeechId, TextId, Vocabulary, SPEECH_EOS, SPEECH_PAD, STAGE_SEP, TEXT_BOS, TEXT_EOS, TEXT_SIL,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One turn of a dialogue, carrying whichever streams exist for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: Role,
    #[serde(default)]
    pub text: Vec<TextId>,
    #[serde(default)]
    pub speech: Vec<SpeechId>,
}

impl DialogueTurn {
    pub fn user(text: Vec<TextId>, speech: Vec<SpeechId>) -> Self {
        DialogueTurn {
            role: Role::User,
            text,
            speech,
        }
    }

    pub fn assistant(text: Vec<TextId>, speech: Vec<SpeechId>) -> Self {
        DialogueTurn {
            role: Role::Assistant,
            text,
            speech,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.text.is_empty() && self.speech.is_empty() {
            return Err(Error::Config(
                "dialogue turn must carry at least one stream".into(),
            ));
        }
        for &t in &self.text {
            vocab.check_text_id(t)?;
        }
        for &s in &self.speech {
            vocab.check_speech_id(s)?;
        }
        Ok(())
    }
}

/// What a step belongs to; drives masking, the decode stage machine and the
/// speech-refiner utterance boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepTag {
    SystemPrompt,
    User,
    /// Single marker step between the user turn and the assistant response.
    TurnStart,
    /// Text-only assistant stage content.
    AssistantText,
    /// Stage separator inside a chain response.
    StageSep,
    /// Parallel speech-text assistant stage content.
    AssistantParallel,
    /// Batch padding appended past the end of the sequence.
    Padding,
    /// Raw aligned data outside any pattern structure.
    Content,
}

/// Parallel streams at grouped resolution plus per-step loss masks.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    k: usize,
    text: Vec<TextId>,
    speech: Vec<SpeechId>,
    text_mask: Vec<bool>,
    speech_mask: Vec<bool>,
    tags: Vec<StepTag>,
}

impl AlignedSequence {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "grouping factor must be at least 1");
        AlignedSequence {
            k,
            text: Vec::new(),
            speech: Vec::new(),
            text_mask: Vec::new(),
            speech_mask: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of aligned steps (backbone timesteps).
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn text(&self) -> &[TextId] {
        &self.text
    }

    /// Raw speech stream, `k` ids per step.
    pub fn speech_flat(&self) -> &[SpeechId] {
        &self.speech
    }

    pub fn speech_group(&self, step: usize) -> &[SpeechId] {
        &self.speech[step * self.k..(step + 1) * self.k]
    }

    pub fn text_mask(&self) -> &[bool] {
        &self.text_mask
    }

    /// Per-step speech mask; see [`AlignedSequence::speech_position_mask`]
    /// for the per-position refinement used by the refiner loss.
    pub fn speech_step_mask(&self) -> &[bool] {
        &self.speech_mask
    }

    pub fn tags(&self) -> &[StepTag] {
        &self.tags
    }

    pub fn push_step(
        &mut self,
        text: TextId,
        speech: &[SpeechId],
        text_mask: bool,
        speech_mask: bool,
        tag: StepTag,
    ) {
        assert_eq!(speech.len(), self.k, "each step carries exactly k slots");
        self.text.push(text);
        self.speech.extend_from_slice(speech);
        self.text_mask.push(text_mask);
        self.speech_mask.push(speech_mask);
        self.tags.push(tag);
    }

    fn push_pad_step(&mut self, tag: StepTag) {
        let pads = vec![SPEECH_PAD; self.k];
        self.push_step(TEXT_SIL, &pads, false, false, tag);
    }

    fn push_text_step(&mut self, text: TextId, mask: bool, tag: StepTag) {
        let pads = vec![SPEECH_PAD; self.k];
        self.push_step(text, &pads, mask, false, tag);
    }

    /// Per raw speech position: the step mask refined so pad slots never
    /// contribute to the loss.
    pub fn speech_position_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.speech.len());
        for step in 0..self.len() {
            for slot in 0..self.k {
                let id = self.speech[step * self.k + slot];
                out.push(self.speech_mask[step] && id != SPEECH_PAD);
            }
        }
        out
    }

    /// Appends mask-false padding steps until the sequence has `steps` steps.
    pub fn pad_to_steps(&mut self, steps: usize) {
        while self.len() < steps {
            self.push_pad_step(StepTag::Padding);
        }
    }

    /// Contiguous step ranges tagged as parallel assistant content, i.e. the
    /// utterances the speech refiner spans.
    pub fn parallel_utterances(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, tag) in self.tags.iter().enumerate() {
            match (tag, start) {
                (StepTag::AssistantParallel, None) => start = Some(i),
                (StepTag::AssistantParallel, Some(_)) => {}
                (_, Some(s)) => {
                    spans.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push((s, self.len()));
        }
        spans
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for &t in &self.text {
            vocab.check_text_id(t)?;
        }
        for &s in &self.speech {
            vocab.check_speech_id(s)?;
        }
        Ok(())
    }
}

/// Pads a raw speech stream up to the next multiple of `k` with pad tokens.
pub fn pad_speech_to_group(speech: &[SpeechId], k: usize) -> Vec<SpeechId> {
    assert!(k >= 1, "grouping factor must be at least 1");
    let mut out = speech.to_vec();
    let rem = out.len() % k;
    if rem != 0 {
        out.resize(out.len() + (k - rem), SPEECH_PAD);
    }
    out
}

/// Aligns a text stream against a grouped speech stream; the shorter side is
/// padded and padded positions are mask-false.
pub fn align_streams(
    text: &[TextId],
    speech: &[SpeechId],
    k: usize,
    vocab: &Vocabulary,
) -> Result<AlignedSequence> {
    if speech.len() % k != 0 {
        return Err(Error::NotGrouped {
            len: speech.len(),
            k,
        });
    }
    for &t in text {
        vocab.check_text_id(t)?;
    }
    for &s in speech {
        vocab.check_speech_id(s)?;
    }
    let groups = speech.len() / k;
    let steps = text.len().max(groups);
    let mut seq = AlignedSequence::new(k);
    for i in 0..steps {
        let (t, tmask) = if i < text.len() {
            (text[i], true)
        } else {
            (TEXT_SIL, false)
        };
        let (group, smask): (Vec<SpeechId>, bool) = if i < groups {
            (speech[i * k..(i + 1) * k].to_vec(), true)
        } else {
            (vec![SPEECH_PAD; k], false)
        };
        seq.push_step(t, &group, tmask, smask, StepTag::Content);
    }
    Ok(seq)
}

/// Builds the training sequence for one dialogue under one pattern: system
/// prompt, user turns, a turn-start marker, then the staged assistant
/// response with loss masks on assistant output only.
pub fn build_pattern_sample(
    dialogue: &[DialogueTurn],
    pattern: InteractionPattern,
    vocab: &Vocabulary,
    k: usize,
) -> Result<AlignedSequence> {
    let mut seq = begin_sequence(pattern, vocab, k)?;
    let mut last_user: Option<&DialogueTurn> = None;
    for turn in dialogue {
        turn.validate(vocab)?;
        match turn.role {
            Role::User => {
                push_user_turn(&mut seq, turn, pattern)?;
                last_user = Some(turn);
            }
            Role::Assistant => {
                seq.push_text_step(TEXT_BOS, false, StepTag::TurnStart);
                push_assistant_turn(&mut seq, turn, last_user, pattern, vocab)?;
            }
        }
    }
    Ok(seq)
}

/// Decode-time prefix: system prompt, the given user turns, and the
/// turn-start marker. The assistant response is left for the decoder.
pub fn build_prompt_prefix(
    user_turns: &[DialogueTurn],
    pattern: InteractionPattern,
    vocab: &Vocabulary,
    k: usize,
) -> Result<AlignedSequence> {
    let mut seq = begin_sequence(pattern, vocab, k)?;
    for turn in user_turns {
        if turn.role != Role::User {
            return Err(Error::Config("prompt prefix accepts user turns only".into()));
        }
        turn.validate(vocab)?;
        push_user_turn(&mut seq, turn, pattern)?;
    }
    seq.push_text_step(TEXT_BOS, false, StepTag::TurnStart);
    Ok(seq)
}

fn begin_sequence(
    pattern: InteractionPattern,
    vocab: &Vocabulary,
    k: usize,
) -> Result<AlignedSequence> {
    let mut seq = AlignedSequence::new(k);
    for id in vocab.encode_text(system_prompt_text(pattern))? {
        seq.push_text_step(id, false, StepTag::SystemPrompt);
    }
    Ok(seq)
}

fn push_user_turn(
    seq: &mut AlignedSequence,
    turn: &DialogueTurn,
    pattern: InteractionPattern,
) -> Result<()> {
    let k = seq.k();
    if pattern.user_is_speech() {
        if turn.speech.is_empty() {
            return Err(Error::ModalityMismatch {
                pattern: pattern.name().into(),
                detail: "pattern requires user speech but the turn has none".into(),
            });
        }
        let speech = pad_speech_to_group(&turn.speech, k);
        for group in speech.chunks(k) {
            seq.push_step(TEXT_SIL, group, false, false, StepTag::User);
        }
    } else {
        if turn.text.is_empty() {
            return Err(Error::ModalityMismatch {
                pattern: pattern.name().into(),
                detail: "pattern requires user text but the turn has none".into(),
            });
        }
        for &t in &turn.text {
            seq.push_text_step(t, false, StepTag::User);
        }
    }
    Ok(())
}

fn push_assistant_turn(
    seq: &mut AlignedSequence,
    turn: &DialogueTurn,
    last_user: Option<&DialogueTurn>,
    pattern: InteractionPattern,
    vocab: &Vocabulary,
) -> Result<()> {
    let stages = pattern.stages();
    for (i, stage) in stages.iter().enumerate() {
        let is_final = i + 1 == stages.len();
        match stage {
            StageKind::TranscribeUser => {
                let user = last_user.ok_or_else(|| Error::ModalityMismatch {
                    pattern: pattern.name().into(),
                    detail: "chain transcription stage needs a preceding user turn".into(),
                })?;
                if user.text.is_empty() {
                    return Err(Error::ModalityMismatch {
                        pattern: pattern.name().into(),
                        detail: "chain transcription stage needs user text".into(),
                    });
                }
                for &t in &user.text {
                    seq.push_text_step(t, true, StepTag::AssistantText);
                }
            }
            StageKind::TextResponse => {
                for &t in &turn.text {
                    seq.push_text_step(t, true, StepTag::AssistantText);
                }
                if is_final {
                    seq.push_text_step(TEXT_EOS, true, StepTag::AssistantText);
                }
            }
            StageKind::Parallel => {
                push_parallel_stage(seq, turn, vocab)?;
            }
        }
        if !is_final {
            seq.push_text_step(STAGE_SEP, true, StepTag::StageSep);
        }
    }
    Ok(())
}

fn push_parallel_stage(
    seq: &mut AlignedSequence,
    turn: &DialogueTurn,
    _vocab: &Vocabulary,
) -> Result<()> {
    let k = seq.k();
    let mut text: Vec<TextId> = turn.text.clone();
    text.push(TEXT_EOS);
    let mut speech: Vec<SpeechId> = turn.speech.clone();
    if speech.last() != Some(&SPEECH_EOS) {
        speech.push(SPEECH_EOS);
    }
    let speech = pad_speech_to_group(&speech, k);
    let groups = speech.len() / k;
    let steps = text.len().max(groups);
    for i in 0..steps {
        let (t, tmask) = if i < text.len() {
            (text[i], true)
        } else {
            (TEXT_SIL, false)
        };
        let (group, smask): (Vec<SpeechId>, bool) = if i < groups {
            let g = speech[i * k..(i + 1) * k].to_vec();
            let any_real = g.iter().any(|&s| s != SPEECH_PAD);
            (g, any_real)
        } else {
            (vec![SPEECH_PAD; k], false)
        };
        seq.push_step(t, &group, tmask, smask, StepTag::AssistantParallel);
    }
    Ok(())
}

/// The text stream a correct decode should emit for this dialogue under this
/// pattern, stage separators included, end-of-stream and pads excluded.
pub fn expected_assistant_text(
    dialogue: &[DialogueTurn],
    pattern: InteractionPattern,
) -> Vec<TextId> {
    let mut out = Vec::new();
    let mut last_user: Option<&DialogueTurn> = None;
    for turn in dialogue {
        match turn.role {
            Role::User => last_user = Some(turn),
            Role::Assistant => {
                let stages = pattern.stages();
                for (i, stage) in stages.iter().enumerate() {
                    match stage {
                        StageKind::TranscribeUser => {
                            if let Some(u) = last_user {
                                out.extend_from_slice(&u.text);
                            }
                        }
                        StageKind::TextResponse | StageKind::Parallel => {
                            out.extend_from_slice(&turn.text);
                        }
                    }
                    if i + 1 != stages.len() {
                        out.push(STAGE_SEP);
                    }
                }
            }
        }
    }
    out
}

/// The speech stream a correct decode should emit: the assistant speech of
/// the parallel stage, end-of-stream excluded. Empty for text-only patterns.
pub fn expected_assistant_speech(
    dialogue: &[DialogueTurn],
    pattern: InteractionPattern,
) -> Vec<SpeechId> {
    if !pattern.emits_speech() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for turn in dialogue {
        if turn.role == Role::Assistant {
            let mut speech = turn.speech.clone();
            if speech.last() == Some(&SPEECH_EOS) {
                speech.pop();
            }
            out.extend_from_slice(&speech);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{ALL_PATTERNS, S2M, S2T, Stc, Suc, T2M, T2T};

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    fn demo_dialogue(v: &Vocabulary) -> Vec<DialogueTurn> {
        let base = v.first_text_byte_id();
        let fs = v.first_usable_speech_id();
        vec![
            DialogueTurn::user(vec![base, base + 1, base + 2], vec![fs, fs + 1, fs + 2, SPEECH_EOS]),
            DialogueTurn::assistant(
                vec![base + 3, base + 4],
                vec![fs + 3, fs + 4, fs + 5, fs + 6, SPEECH_EOS],
            ),
        ]
    }

    #[test]
    fn pad_speech_examples() {
        let ids: Vec<SpeechId> = (2..25).collect();
        let padded = pad_speech_to_group(&ids, 5);
        assert_eq!(padded.len(), 25);
        assert_eq!(&padded[..23], &ids[..]);
        assert_eq!(&padded[23..], &[SPEECH_PAD, SPEECH_PAD]);

        let exact: Vec<SpeechId> = (2..27).collect();
        assert_eq!(pad_speech_to_group(&exact, 5), exact);

        assert!(pad_speech_to_group(&[], 3).is_empty());
    }

    #[test]
    fn pad_speech_is_idempotent() {
        let ids: Vec<SpeechId> = (2..19).collect();
        for k in [1, 2, 3, 5, 7] {
            let once = pad_speech_to_group(&ids, k);
            assert_eq!(pad_speech_to_group(&once, k), once);
        }
    }

    #[test]
    fn align_pads_shorter_text() {
        let v = vocab();
        let text = vec![5, 6, 7];
        let speech: Vec<SpeechId> = (2..27).collect(); // 5 groups of 5
        let seq = align_streams(&text, &speech, 5, &v).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.text()[3], TEXT_SIL);
        assert_eq!(seq.text()[4], TEXT_SIL);
        assert!(!seq.text_mask()[3] && !seq.text_mask()[4]);
        assert!(seq.speech_step_mask().iter().all(|&m| m));
    }

    #[test]
    fn align_pads_shorter_speech() {
        let v = vocab();
        let text = vec![5, 6, 7, 8, 9];
        let speech: Vec<SpeechId> = (2..17).collect(); // 3 groups of 5
        let seq = align_streams(&text, &speech, 5, &v).unwrap();
        assert_eq!(seq.len(), 5);
        let trailing: Vec<SpeechId> = seq.speech_flat()[15..].to_vec();
        assert_eq!(trailing, vec![SPEECH_PAD; 10]);
        assert!(!seq.speech_step_mask()[3] && !seq.speech_step_mask()[4]);
    }

    #[test]
    fn align_equal_lengths_needs_no_padding() {
        let v = vocab();
        let text = vec![4, 5, 6, 7];
        let speech: Vec<SpeechId> = (2..22).collect(); // 4 groups of 5
        let seq = align_streams(&text, &speech, 5, &v).unwrap();
        assert_eq!(seq.len(), 4);
        assert!(seq.text_mask().iter().all(|&m| m));
        assert!(seq.speech_step_mask().iter().all(|&m| m));
    }

    #[test]
    fn align_rejects_ungrouped_and_out_of_range() {
        let v = vocab();
        assert!(matches!(
            align_streams(&[4], &[2, 3, 4], 2, &v),
            Err(Error::NotGrouped { .. })
        ));
        assert!(matches!(
            align_streams(&[9999], &[], 2, &v),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            align_streams(&[4], &[9999, 2], 2, &v),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn sample_begins_with_prompt_tokenization() {
        let v = vocab();
        let dialogue = demo_dialogue(&v);
        for pattern in ALL_PATTERNS {
            let seq = build_pattern_sample(&dialogue, pattern, &v, 5).unwrap();
            let prompt = v.encode_text(system_prompt_text(pattern)).unwrap();
            assert!(seq.len() > prompt.len());
            assert_eq!(&seq.text()[..prompt.len()], &prompt[..]);
            for i in 0..prompt.len() {
                assert_eq!(seq.tags()[i], StepTag::SystemPrompt);
                assert!(!seq.text_mask()[i]);
                assert!(!seq.speech_step_mask()[i]);
                assert_eq!(seq.speech_group(i), vec![SPEECH_PAD; 5]);
            }
        }
    }

    #[test]
    fn s2t_sample_has_no_speech_loss_and_only_pad_speech() {
        let v = vocab();
        let seq = build_pattern_sample(&demo_dialogue(&v), S2T, &v, 5).unwrap();
        for (i, tag) in seq.tags().iter().enumerate() {
            if matches!(tag, StepTag::AssistantText) {
                assert!(!seq.speech_step_mask()[i]);
                assert!(seq.speech_group(i).iter().all(|&s| s == SPEECH_PAD));
            }
        }
        assert!(seq.speech_step_mask().iter().all(|&m| !m));
    }

    #[test]
    fn t2t_sample_has_no_nonpad_speech_anywhere() {
        let v = vocab();
        let seq = build_pattern_sample(&demo_dialogue(&v), T2T, &v, 5).unwrap();
        assert!(seq.speech_flat().iter().all(|&s| s == SPEECH_PAD));
    }

    #[test]
    fn stc_stages_appear_in_order() {
        let v = vocab();
        let dialogue = demo_dialogue(&v);
        let seq = build_pattern_sample(&dialogue, Stc, &v, 5).unwrap();
        let seps: Vec<usize> = seq
            .tags()
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == StepTag::StageSep)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(seps.len(), 2, "three stages, two separators");

        let turn_start = seq
            .tags()
            .iter()
            .position(|t| *t == StepTag::TurnStart)
            .unwrap();
        // Stage 1: transcription of the user text.
        let stage1: Vec<TextId> = seq.text()[turn_start + 1..seps[0]].to_vec();
        assert_eq!(stage1, dialogue[0].text);
        // Stage 2: the text response.
        let stage2: Vec<TextId> = seq.text()[seps[0] + 1..seps[1]].to_vec();
        assert_eq!(stage2, dialogue[1].text);
        // Stage 3: parallel, carries real speech.
        let spans = seq.parallel_utterances();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].0, seps[1] + 1);
        assert!(seq.speech_step_mask()[spans[0].0]);
    }

    #[test]
    fn masks_cover_assistant_output_only() {
        let v = vocab();
        let seq = build_pattern_sample(&demo_dialogue(&v), S2M, &v, 5).unwrap();
        for (i, tag) in seq.tags().iter().enumerate() {
            match tag {
                StepTag::SystemPrompt | StepTag::User | StepTag::TurnStart => {
                    assert!(!seq.text_mask()[i]);
                    assert!(!seq.speech_step_mask()[i]);
                }
                _ => {}
            }
            if seq.text()[i] == TEXT_SIL {
                assert!(!seq.text_mask()[i], "silence is never a text target");
            }
        }
        let pos_mask = seq.speech_position_mask();
        for (p, &m) in pos_mask.iter().enumerate() {
            if seq.speech_flat()[p] == SPEECH_PAD {
                assert!(!m, "pad positions are mask-false");
            }
        }
    }

    #[test]
    fn parallel_stage_ends_with_eos_markers() {
        let v = vocab();
        let seq = build_pattern_sample(&demo_dialogue(&v), T2M, &v, 5).unwrap();
        assert!(seq.text().contains(&TEXT_EOS));
        assert!(seq.speech_flat().contains(&SPEECH_EOS));
        let eos_step = seq.text().iter().position(|&t| t == TEXT_EOS).unwrap();
        assert!(seq.text_mask()[eos_step], "end-of-text is a training target");
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        let v = vocab();
        let speech_only_user = vec![
            DialogueTurn::user(vec![], vec![2, 3]),
            DialogueTurn::assistant(vec![5], vec![2, SPEECH_EOS]),
        ];
        assert!(matches!(
            build_pattern_sample(&speech_only_user, T2M, &v, 5),
            Err(Error::ModalityMismatch { .. })
        ));
        let text_only_user = vec![
            DialogueTurn::user(vec![5, 6], vec![]),
            DialogueTurn::assistant(vec![5], vec![2, SPEECH_EOS]),
        ];
        assert!(matches!(
            build_pattern_sample(&text_only_user, S2M, &v, 5),
            Err(Error::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn seven_patterns_give_seven_distinct_sequences() {
        let v = vocab();
        let dialogue = demo_dialogue(&v);
        let seqs: Vec<AlignedSequence> = ALL_PATTERNS
            .iter()
            .map(|p| build_pattern_sample(&dialogue, *p, &v, 5).unwrap())
            .collect();
        for i in 0..seqs.len() {
            for j in i + 1..seqs.len() {
                assert_ne!(seqs[i], seqs[j], "patterns {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn prompt_prefix_matches_sample_prefix() {
        let v = vocab();
        let dialogue = demo_dialogue(&v);
        for pattern in ALL_PATTERNS {
            let sample = build_pattern_sample(&dialogue, pattern, &v, 5).unwrap();
            let prefix = build_prompt_prefix(&dialogue[..1], pattern, &v, 5).unwrap();
            assert_eq!(prefix.text(), &sample.text()[..prefix.len()]);
            assert_eq!(
                prefix.speech_flat(),
                &sample.speech_flat()[..prefix.len() * 5]
            );
            assert_eq!(prefix.tags().last(), Some(&StepTag::TurnStart));
        }
    }

    #[test]
    fn expected_streams_match_sample_content() {
        let v = vocab();
        let dialogue = demo_dialogue(&v);
        let text = expected_assistant_text(&dialogue, Suc);
        // SUC: transcription, separator, response text.
        let mut want = dialogue[0].text.clone();
        want.push(STAGE_SEP);
        want.extend_from_slice(&dialogue[1].text);
        assert_eq!(text, want);

        let speech = expected_assistant_speech(&dialogue, S2M);
        assert_eq!(speech, &dialogue[1].speech[..dialogue[1].speech.len() - 1]);
        assert!(expected_assistant_speech(&dialogue, S2T).is_empty());
    }

    #[test]
    fn batch_padding_is_mask_false() {
        let v = vocab();
        let mut seq = build_pattern_sample(&demo_dialogue(&v), S2M, &v, 5).unwrap();
        let n = seq.len();
        seq.pad_to_steps(n + 4);
        assert_eq!(seq.len(), n + 4);
        for i in n..n + 4 {
            assert!(!seq.text_mask()[i]);
            assert!(!seq.speech_step_mask()[i]);
            assert_eq!(seq.tags()[i], StepTag::Padding);
        }
    }
}
