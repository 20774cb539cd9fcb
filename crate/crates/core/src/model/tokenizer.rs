// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer used by the built-in decoder backend.
//!
//! Text is segmented into whitespace-delimited words; ASCII punctuation and
//! every CJK / kana / hangul character become standalone pieces. Known pieces
//! map to their vocabulary id. Unknown pieces hash (SHA-256, first 8 bytes,
//! little-endian) into the `⟨hN⟩` bucket range at the tail of the vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";

/// Serializable description of the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    /// Named pieces; index 0 must be `<bos>`.
    pub pieces: Vec<String>,
    /// Number of hash buckets appended after the named pieces.
    pub n_buckets: usize,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    index: HashMap<String, TokenId>,
}

fn bucket_name(i: usize) -> String {
    format!("⟨h{i}⟩")
}

/// True for characters that form a token on their own.
pub fn is_standalone_char(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x3000..=0x303F   // CJK punctuation
            | 0x3040..=0x30FF // kana
            | 0x3400..=0x4DBF
            | 0x4E00..=0x9FFF // CJK unified ideographs
            | 0xAC00..=0xD7AF // hangul syllables
            | 0xFF00..=0xFFEF)
}

/// Split text into surface pieces.
pub fn segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_standalone_char(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    pub fn new(spec: TokenizerSpec) -> Result<Self> {
        if spec.pieces.first().map(String::as_str) != Some(BOS) {
            return Err(Error::Domain("tokenizer piece 0 must be <bos>".into()));
        }
        if spec.n_buckets == 0 {
            return Err(Error::Domain("tokenizer needs at least one hash bucket".into()));
        }
        let mut index = HashMap::new();
        let names = spec
            .pieces
            .iter()
            .cloned()
            .chain((0..spec.n_buckets).map(bucket_name));
        for (i, p) in names.enumerate() {
            if index.insert(p.clone(), i as TokenId).is_some() {
                return Err(Error::Domain(format!("duplicate tokenizer piece `{p}`")));
            }
        }
        Ok(Self { spec, index })
    }

    /// Build a tokenizer of exactly `vocab_size` ids from a preferred word
    /// list; leftover capacity becomes hash buckets.
    pub fn with_vocab_size(words: &[&str], vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Dimension(format!(
                "vocab_size {vocab_size} too small for tokenizer"
            )));
        }
        // Keep at least a quarter of the vocabulary as buckets.
        let n_named = (vocab_size - vocab_size.div_ceil(4)).min(words.len() + 1).max(1);
        let mut pieces = vec![BOS.to_string()];
        pieces.extend(words.iter().take(n_named - 1).map(|w| w.to_string()));
        let n_buckets = vocab_size - pieces.len();
        Self::new(TokenizerSpec { pieces, n_buckets })
    }

    pub fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.pieces.len() + self.spec.n_buckets
    }

    pub fn bos_id(&self) -> TokenId {
        0
    }

    fn piece_id(&self, piece: &str) -> TokenId {
        if let Some(&id) = self.index.get(piece) {
            return id;
        }
        let digest = Sha256::digest(piece.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(b);
        (self.spec.pieces.len() as u64 + h % self.spec.n_buckets as u64) as TokenId
    }

    /// Encode text without BOS.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        segment(text).iter().map(|p| self.piece_id(p)).collect()
    }

    /// Encode text with a leading BOS.
    pub fn encode_with_bos(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![self.bos_id()];
        ids.extend(self.encode(text));
        ids
    }

    /// Surface string of a single token.
    pub fn decode_token(&self, id: TokenId) -> Result<String> {
        let i = id as usize;
        if i < self.spec.pieces.len() {
            Ok(self.spec.pieces[i].clone())
        } else if i < self.vocab_size() {
            Ok(bucket_name(i - self.spec.pieces.len()))
        } else {
            Err(Error::Index(format!(
                "token id {id} outside vocabulary of {}",
                self.vocab_size()
            )))
        }
    }

    /// Join token surfaces into text. BOS is dropped; standalone characters
    /// attach without a space.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == self.bos_id() {
                continue;
            }
            let piece = self.decode_token(id)?;
            let attaches = piece.chars().count() == 1
                && piece.chars().next().is_some_and(is_standalone_char);
            if !out.is_empty() && !attaches && !out.ends_with(is_cjk_char) {
                out.push(' ');
            }
            out.push_str(&piece);
        }
        Ok(out)
    }
}

/// CJK ideographs, kana, hangul and full-width forms.
pub fn is_cjk_char(c: char) -> bool {
    is_standalone_char(c) && !c.is_ascii_punctuation()
}
