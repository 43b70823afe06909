//! Token id spaces for the two parallel streams.
//!
//! Text ids: a handful of control tokens followed by byte-level ids over the
//! printable ASCII alphabet, so prompt strings tokenize without an external
//! tokenizer. Speech ids: a pad and an end-of-stream token followed by the
//! usable range that the synthetic oracle draws from.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type TextId = u32;
pub type SpeechId = u32;

/// Text-stream padding token that fills the shorter stream at a step.
pub const TEXT_SIL: TextId = 0;
/// Marks the start of the assistant's turn during alignment and decoding.
pub const TEXT_BOS: TextId = 1;
/// Ends the text stream.
pub const TEXT_EOS: TextId = 2;
/// Separates the stages of a chain-structured assistant response.
pub const STAGE_SEP: TextId = 3;
/// Number of reserved text ids before the byte alphabet starts.
pub const TEXT_SPECIALS: u32 = 4;

/// Speech-stream padding token (distinct from the text-side silence token).
pub const SPEECH_PAD: SpeechId = 0;
/// Ends the speech stream.
pub const SPEECH_EOS: SpeechId = 1;
/// Number of reserved speech ids before the usable range starts.
pub const SPEECH_SPECIALS: u32 = 2;

/// First and last printable ASCII byte covered by the text alphabet.
const FIRST_PRINTABLE: u8 = 0x20;
const LAST_PRINTABLE: u8 = 0x7e;
const ALPHABET_LEN: u32 = (LAST_PRINTABLE - FIRST_PRINTABLE) as u32 + 1; // 95

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text_vocab_size: u32,
    pub speech_vocab_size: u32,
}

impl Vocabulary {
    pub fn new(text_vocab_size: u32, speech_vocab_size: u32) -> Result<Self> {
        let v = Vocabulary {
            text_vocab_size,
            speech_vocab_size,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_vocab_size < 8 {
            return Err(Error::Config(format!(
                "text vocab must hold at least 8 ids, got {}",
                self.text_vocab_size
            )));
        }
        if self.usable_speech_count() < 2 {
            return Err(Error::Config(format!(
                "speech vocab must leave at least 2 usable ids, got {}",
                self.speech_vocab_size
            )));
        }
        Ok(())
    }

    /// Ids the oracle may emit: everything above the speech specials.
    pub fn usable_speech_count(&self) -> u32 {
        self.speech_vocab_size.saturating_sub(SPEECH_SPECIALS)
    }

    pub fn first_usable_speech_id(&self) -> SpeechId {
        SPEECH_SPECIALS
    }

    /// Non-special text ids available to the byte alphabet.
    pub fn usable_text_count(&self) -> u32 {
        self.text_vocab_size - TEXT_SPECIALS
    }

    pub fn first_text_byte_id(&self) -> TextId {
        TEXT_SPECIALS
    }

    /// Whether byte→id mapping is injective (no alphabet folding).
    pub fn text_alphabet_injective(&self) -> bool {
        self.usable_text_count() >= ALPHABET_LEN
    }

    pub fn check_text_id(&self, id: TextId) -> Result<()> {
        if id < self.text_vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                stream: "text",
                id,
                size: self.text_vocab_size as usize,
            })
        }
    }

    pub fn check_speech_id(&self, id: SpeechId) -> Result<()> {
        if id < self.speech_vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                stream: "speech",
                id,
                size: self.speech_vocab_size as usize,
            })
        }
    }

    pub fn is_special_text(&self, id: TextId) -> bool {
        id < TEXT_SPECIALS
    }

    pub fn is_special_speech(&self, id: SpeechId) -> bool {
        id < SPEECH_SPECIALS
    }

    /// Byte-level tokenization of printable ASCII. When the vocabulary is
    /// smaller than the alphabet the mapping folds modulo the usable range;
    /// distinct bytes may then share an id.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TextId>> {
        let usable = self.usable_text_count();
        text.bytes()
            .map(|b| {
                if !(FIRST_PRINTABLE..=LAST_PRINTABLE).contains(&b) {
                    return Err(Error::Unencodable(text.to_string()));
                }
                let off = (b - FIRST_PRINTABLE) as u32;
                Ok(self.first_text_byte_id() + off % usable)
            })
            .collect()
    }

    /// Best-effort rendering of text ids for reports. Control tokens render
    /// as tags; byte ids render as characters only when the mapping is
    /// injective, otherwise as `#id`.
    pub fn render_text(&self, ids: &[TextId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                TEXT_SIL => out.push_str("<sil>"),
                TEXT_BOS => out.push_str("<bos>"),
                TEXT_EOS => out.push_str("<eos>"),
                STAGE_SEP => out.push_str("<sep>"),
                _ if self.text_alphabet_injective() => {
                    let off = id - self.first_text_byte_id();
                    if off < ALPHABET_LEN {
                        out.push((FIRST_PRINTABLE + off as u8) as char);
                    } else {
                        out.push_str(&format!("#{id}"));
                    }
                }
                _ => out.push_str(&format!("#{id}")),
            }
        }
        out
    }
}

impl Default for Vocabulary {
    /// Desk-scale default: injective byte alphabet, 62 usable speech ids.
    fn default() -> Self {
        Vocabulary {
            text_vocab_size: 128,
            speech_vocab_size: 64,
        }
    }
}
