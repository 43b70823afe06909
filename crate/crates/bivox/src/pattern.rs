//! The seven multimodal interaction patterns and their system prompts.
//!
//! A pattern fixes the user-side input modality and the shape of the
//! assistant response: a direct text-only answer, a direct parallel
//! speech-text answer, or a chain of text stages that ends in a parallel
//! stage. The system prompt selects the pattern at decode time.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InteractionPattern {
    /// Speech in, joint speech-text response.
    S2M,
    /// Speech in, text-only response.
    S2T,
    /// Text in, joint speech-text response.
    T2M,
    /// Text in, text-only response.
    T2T,
    /// Speech in; transcription stage, text-response stage, parallel stage.
    Stc,
    /// Speech in; text-response stage, parallel stage.
    Sac,
    /// Speech in; transcription stage, parallel stage.
    Suc,
}

pub use InteractionPattern::*;

pub const ALL_PATTERNS: [InteractionPattern; 7] = [S2M, S2T, T2M, T2T, Stc, Sac, Suc];

/// What a single assistant stage produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Text-only stage carrying the user's words (chain transcription).
    TranscribeUser,
    /// Text-only stage carrying the assistant's response text.
    TextResponse,
    /// Parallel speech-text stage carrying the assistant's response.
    Parallel,
}

impl StageKind {
    pub fn emits_speech(self) -> bool {
        matches!(self, StageKind::Parallel)
    }
}

impl InteractionPattern {
    pub fn name(self) -> &'static str {
        match self {
            S2M => "S2M",
            S2T => "S2T",
            T2M => "T2M",
            T2T => "T2T",
            Stc => "STC",
            Sac => "SAC",
            Suc => "SUC",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_PATTERNS
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
    }

    /// True when the user side of the dialogue arrives as speech tokens.
    pub fn user_is_speech(self) -> bool {
        !matches!(self, T2M | T2T)
    }

    /// True when any stage of the assistant response emits speech tokens.
    pub fn emits_speech(self) -> bool {
        !matches!(self, S2T | T2T)
    }

    /// Assistant stages in order.
    pub fn stages(self) -> &'static [StageKind] {
        match self {
            S2M | T2M => &[StageKind::Parallel],
            S2T | T2T => &[StageKind::TextResponse],
            Stc => &[
                StageKind::TranscribeUser,
                StageKind::TextResponse,
                StageKind::Parallel,
            ],
            Sac => &[StageKind::TextResponse, StageKind::Parallel],
            Suc => &[StageKind::TranscribeUser, StageKind::Parallel],
        }
    }

    pub fn is_chain(self) -> bool {
        self.stages().len() > 1
    }
}

impl fmt::Display for InteractionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// System prompt that selects this interaction pattern. Multimodal and
/// text-only direct patterns share prompts across the two input modalities.
pub fn system_prompt_text(pattern: InteractionPattern) -> &'static str {
    match pattern {
        S2M | T2M => {
            "You are a helpful assistant and asked to generate both text and speech tokens at the same time."
        }
        S2T | T2T => "You are a helpful assistant and asked to generate text tokens.",
        Stc => {
            "You are a helpful assistant. Let's think step by step. Convert speech to text if the query is speech, think of an appropriate text response, and then convert the response back to both text and speech tokens at the same time."
        }
        Sac => {
            "You are a helpful assistant. Let's think step by step. Think of an appropriate text response, and then convert the response back to both text and speech tokens at the same time."
        }
        Suc => {
            "You are a helpful assistant. Let's think step by step. Convert speech to text if the query is speech, and then think of both appropriate text and speech responses at the same time."
        }
    }
}
