//! Synthetic oracle corpora.
//!
//! A deterministic token-level map stands in for a real speech tokenizer:
//! every non-special text token expands to `m` speech tokens through a fixed
//! affine map over the usable speech range. Because the map is known in
//! closed form, generated speech can be checked for exact correctness, which
//! is what makes desk-scale evaluation possible.

use crate::align::{DialogueTurn, Role};
use crate::error::{Error, Result};
use crate::pattern::{InteractionPattern, ALL_PATTERNS};
use crate::vocab::{SpeechId, TextId, Vocabulary, SPEECH_EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::Path;

pub const CORPUS_VERSION: u32 = 1;

/// Parameters of the text→speech oracle map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Multiplier; pick coprime with the usable speech count for injectivity.
    pub a: u32,
    /// Speech tokens emitted per text token.
    pub m: u32,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { a: 7, m: 2 }
    }
}

impl OracleParams {
    /// The `m` speech ids for one text token:
    /// `s_j = first_usable + (a·t + j) mod usable_count`.
    pub fn ids_for_token(&self, t: TextId, vocab: &Vocabulary) -> Vec<SpeechId> {
        let usable = vocab.usable_speech_count() as u64;
        let first = vocab.first_usable_speech_id() as u64;
        (0..self.m as u64)
            .map(|j| (first + (self.a as u64 * t as u64 + j) % usable) as SpeechId)
            .collect()
    }

    /// Oracle speech for a text stream: special tokens contribute nothing,
    /// every other token contributes its `m` ids in order. No terminator.
    pub fn speech_for_text(&self, text: &[TextId], vocab: &Vocabulary) -> Vec<SpeechId> {
        let mut out = Vec::with_capacity(text.len() * self.m as usize);
        for &t in text {
            if vocab.is_special_text(t) {
                continue;
            }
            out.extend(self.ids_for_token(t, vocab));
        }
        out
    }
}

/// One dialogue plus the pattern variant it trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub version: u32,
    pub seed: u64,
    pub pattern: InteractionPattern,
    pub oracle: OracleParams,
    pub turns: Vec<DialogueTurn>,
}

impl CorpusRecord {
    pub fn user_turns(&self) -> Vec<DialogueTurn> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .cloned()
            .collect()
    }

    /// Same dialogue under a different interaction pattern.
    pub fn with_pattern(&self, pattern: InteractionPattern) -> CorpusRecord {
        CorpusRecord {
            pattern,
            ..self.clone()
        }
    }
}

/// All seven pattern variants of one record's dialogue.
pub fn expand_all_patterns(record: &CorpusRecord) -> Vec<CorpusRecord> {
    ALL_PATTERNS
        .iter()
        .map(|p| record.with_pattern(*p))
        .collect()
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over (seed, index); records are independent so
    // shards can be generated in parallel.
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_text<R: Rng>(rng: &mut R, len: usize, vocab: &Vocabulary) -> Vec<TextId> {
    let first = vocab.first_text_byte_id();
    let usable = vocab.usable_text_count();
    (0..len).map(|_| first + rng.gen_range(0..usable)).collect()
}

/// Generates `n` single-exchange dialogues, patterns cycling through all
/// seven variants. Deterministic per `(seed, index)`.
pub fn synth_corpus(
    seed: u64,
    n: usize,
    vocab: &Vocabulary,
    oracle: OracleParams,
    text_len: RangeInclusive<usize>,
) -> Result<Vec<CorpusRecord>> {
    vocab.validate()?;
    if oracle.m < 1 {
        return Err(Error::Config("oracle m must be at least 1".into()));
    }
    if *text_len.start() < 1 {
        return Err(Error::Config("text length range must start at 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let record_seed = mix_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
        let user_len = rng.gen_range(text_len.clone());
        let user_text = random_text(&mut rng, user_len, vocab);
        let mut user_speech = oracle.speech_for_text(&user_text, vocab);
        user_speech.push(SPEECH_EOS);
        let asst_len = rng.gen_range(text_len.clone());
        let asst_text = random_text(&mut rng, asst_len, vocab);
        let mut asst_speech = oracle.speech_for_text(&asst_text, vocab);
        asst_speech.push(SPEECH_EOS);
        out.push(CorpusRecord {
            version: CORPUS_VERSION,
            seed: record_seed,
            pattern: ALL_PATTERNS[i % ALL_PATTERNS.len()],
            oracle,
            turns: vec![
                DialogueTurn::user(user_text, user_speech),
                DialogueTurn::assistant(asst_text, asst_speech),
            ],
        });
    }
    Ok(out)
}

/// A corpus for the overfit-style experiments: `n` dialogues, each expanded
/// into all seven pattern variants (`7·n` records).
pub fn synth_corpus_all_patterns(
    seed: u64,
    n_dialogues: usize,
    vocab: &Vocabulary,
    oracle: OracleParams,
    text_len: RangeInclusive<usize>,
) -> Result<Vec<CorpusRecord>> {
    let base = synth_corpus(seed, n_dialogues, vocab, oracle, text_len)?;
    Ok(base.iter().flat_map(|r| expand_all_patterns(r)).collect())
}

/// One record per line as JSON, UTF-8, LF endings.
pub fn write_corpus<W: Write>(mut w: W, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_corpus(std::io::BufWriter::new(f), records)
}

pub fn read_corpus<R: std::io::Read>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            Error::CorpusFormat(format!("line {}: {e}", lineno + 1))
        })?;
        if rec.version != CORPUS_VERSION {
            return Err(Error::CorpusFormat(format!(
                "line {}: unsupported version {}",
                lineno + 1,
                rec.version
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_corpus(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn oracle_formula_example() {
        // t=3, a=7, m=2 over 50 usable ids starting at 2 → [23, 24].
        let v = Vocabulary::new(32, 52).unwrap();
        assert_eq!(v.usable_speech_count(), 50);
        assert_eq!(v.first_usable_speech_id(), 2);
        let p = OracleParams { a: 7, m: 2 };
        assert_eq!(p.ids_for_token(3, &v), vec![23, 24]);
    }

    #[test]
    fn oracle_skips_special_text_tokens() {
        let v = Vocabulary::default();
        let p = OracleParams { a: 7, m: 2 };
        let text = vec![crate::vocab::TEXT_EOS, 10, crate::vocab::STAGE_SEP, 11];
        let speech = p.speech_for_text(&text, &v);
        assert_eq!(speech.len(), 4, "two non-special tokens, m=2 each");
    }

    #[test]
    fn oracle_injective_when_coprime() {
        // Brute-force enumeration over the whole text vocabulary; requires
        // the text range to fit inside the usable speech range.
        let v = Vocabulary::new(32, 52).unwrap();
        let p = OracleParams { a: 7, m: 1 };
        let mut seen = HashSet::new();
        for t in 0..v.text_vocab_size {
            let ids = p.ids_for_token(t, &v);
            assert!(seen.insert(ids), "token {t} collides");
        }
    }

    #[test]
    fn identical_seeds_give_identical_corpora() {
        let v = Vocabulary::default();
        let a = synth_corpus(99, 20, &v, OracleParams::default(), 2..=6).unwrap();
        let b = synth_corpus(99, 20, &v, OracleParams::default(), 2..=6).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_corpus(&mut buf_a, &a).unwrap();
        write_corpus(&mut buf_b, &b).unwrap();
        assert_eq!(buf_a, buf_b, "byte-identical serialization");
    }

    #[test]
    fn empty_corpus_is_empty() {
        let v = Vocabulary::default();
        let c = synth_corpus(1, 0, &v, OracleParams::default(), 2..=4).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let v = Vocabulary::default();
        let corpus = synth_corpus(7, 14, &v, OracleParams::default(), 1..=5).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let parsed = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(parsed, corpus);
    }

    #[test]
    fn speech_ends_with_eos_and_matches_oracle() {
        let v = Vocabulary::default();
        let corpus = synth_corpus(3, 7, &v, OracleParams::default(), 2..=4).unwrap();
        for rec in &corpus {
            for turn in &rec.turns {
                assert_eq!(turn.speech.last(), Some(&SPEECH_EOS));
                let expected = rec.oracle.speech_for_text(&turn.text, &v);
                assert_eq!(&turn.speech[..turn.speech.len() - 1], &expected[..]);
            }
        }
    }

    #[test]
    fn patterns_cycle_and_expand() {
        let v = Vocabulary::default();
        let corpus = synth_corpus(3, 14, &v, OracleParams::default(), 2..=4).unwrap();
        for (i, rec) in corpus.iter().enumerate() {
            assert_eq!(rec.pattern, ALL_PATTERNS[i % 7]);
        }
        let expanded = expand_all_patterns(&corpus[0]);
        assert_eq!(expanded.len(), 7);
        let patterns: HashSet<_> = expanded.iter().map(|r| r.pattern).collect();
        assert_eq!(patterns.len(), 7);
        for r in &expanded {
            assert_eq!(r.turns, corpus[0].turns);
        }
    }

    #[test]
    fn all_patterns_build_from_every_record() {
        let v = Vocabulary::default();
        let corpus = synth_corpus(11, 5, &v, OracleParams::default(), 2..=4).unwrap();
        for rec in &corpus {
            for p in ALL_PATTERNS {
                crate::align::build_pattern_sample(&rec.turns, p, &v, 5).unwrap();
            }
        }
    }
}
