//! Byte-level and byte-pair tokenizers.
//!
//! Ids `0..256` are raw bytes, `256..259` are the `bos`, `eos` and `pad` specials, and
//! byte-pair merges take ids from 259 upward in the order they were learned. Text is
//! split into chunks before merging (a chunk is a word with its leading space, a run of
//! spaces, or a single punctuation byte) so merges never cross word boundaries.
//!
//! The only normalization is CRLF → LF; `decode(encode(x)) == normalize(x)` for every
//! string.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::model::TokenId;
use crate::{Error, Result};

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
const FIRST_MERGE_ID: TokenId = 259;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Byte,
    Bpe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
}

/// Serialized form: mode and ordered merges. Everything else is derived.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub specials: Specials,
    pub merges: Vec<(TokenId, TokenId)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    ranks: BTreeMap<(TokenId, TokenId), usize>,
    pieces: Vec<Vec<u8>>,
}

pub fn normalize(text: &str) -> String {
    text.replace("\r\n", "\n")
}

/// Splits into merge-isolated chunks.
fn chunks(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        let (prev, cur) = (bytes[i - 1], bytes[i]);
        let boundary = (cur == b' ' && prev != b' ')
            || cur.is_ascii_punctuation()
            || prev.is_ascii_punctuation()
            || (cur == b'\n' || prev == b'\n');
        if boundary {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

fn apply_merge(seq: &mut Vec<TokenId>, pair: (TokenId, TokenId), id: TokenId) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Self::from_spec(TokenizerSpec {
            mode: TokenizerMode::Byte,
            specials: Specials {
                bos: BOS,
                eos: EOS,
                pad: PAD,
            },
            merges: Vec::new(),
        })
        .expect("byte-level spec is valid")
    }

    pub fn from_spec(spec: TokenizerSpec) -> Result<Self> {
        if spec.specials
            != (Specials {
                bos: BOS,
                eos: EOS,
                pad: PAD,
            })
        {
            return Err(Error::Schema("unsupported special token ids".into()));
        }
        if spec.mode == TokenizerMode::Byte && !spec.merges.is_empty() {
            return Err(Error::Schema("byte mode carries no merges".into()));
        }
        let mut pieces: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        pieces.extend([Vec::new(), Vec::new(), Vec::new()]);
        let mut ranks = BTreeMap::new();
        for (rank, &(a, b)) in spec.merges.iter().enumerate() {
            let id = FIRST_MERGE_ID as usize + rank;
            let valid = |t: TokenId| (t as usize) < id && !(BOS..=PAD).contains(&t);
            if !valid(a) || !valid(b) {
                return Err(Error::Schema(alloc::format!("merge {rank} references unknown ids")));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), rank);
        }
        Ok(Self { spec, ranks, pieces })
    }

    /// Learns byte-pair merges over `texts` until the vocabulary reaches `vocab_size`
    /// or no pair occurs twice. The most frequent pair wins; ties go to the smallest
    /// pair of ids.
    pub fn train_bpe<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Config("tokenizer corpus is empty".into()));
        }
        if vocab_size < FIRST_MERGE_ID as usize + 1 {
            return Err(Error::Config(alloc::format!(
                "bpe vocabulary must be at least 260, got {vocab_size}"
            )));
        }
        let mut words: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for t in texts {
            let norm = normalize(t.as_ref());
            for c in chunks(norm.as_bytes()) {
                *words.entry(c.to_vec()).or_insert(0) += 1;
            }
        }
        let mut seqs: Vec<(Vec<TokenId>, u64)> = words
            .into_iter()
            .map(|(w, n)| (w.into_iter().map(TokenId::from).collect(), n))
            .collect();
        let mut merges = Vec::new();
        while FIRST_MERGE_ID as usize + merges.len() < vocab_size {
            let mut counts: BTreeMap<(TokenId, TokenId), u64> = BTreeMap::new();
            for (seq, n) in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += n;
                }
            }
            // BTreeMap iterates pairs ascending, so the first maximum is the smallest pair.
            let Some((&pair, &count)) = counts
                .iter()
                .fold(None, |best: Option<(&(TokenId, TokenId), &u64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                })
            else {
                break;
            };
            if count < 2 {
                break;
            }
            let id = FIRST_MERGE_ID + merges.len() as TokenId;
            for (seq, _) in &mut seqs {
                apply_merge(seq, pair, id);
            }
            merges.push(pair);
        }
        Self::from_spec(TokenizerSpec {
            mode: TokenizerMode::Bpe,
            specials: Specials {
                bos: BOS,
                eos: EOS,
                pad: PAD,
            },
            merges,
        })
    }

    pub fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    pub fn mode(&self) -> TokenizerMode {
        self.spec.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn bos(&self) -> TokenId {
        BOS
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    /// Bytes a token stands for; empty for specials.
    pub fn piece(&self, id: TokenId) -> &[u8] {
        self.pieces.get(id as usize).map_or(&[], |p| p.as_slice())
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        let mut seq: Vec<TokenId> = chunk.iter().map(|&b| TokenId::from(b)).collect();
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            match best {
                Some((rank, pair)) => apply_merge(&mut seq, pair, FIRST_MERGE_ID + rank as TokenId),
                None => break,
            }
        }
        out.extend(seq);
    }

    /// Encodes without the emptiness check; `""` maps to `[]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let norm = normalize(text);
        let mut out = Vec::new();
        for c in chunks(norm.as_bytes()) {
            self.encode_chunk(c, &mut out);
        }
        out
    }

    /// Encodes an edit or query text; empty input is an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if normalize(text).is_empty() {
            return Err(Error::EmptyEdit);
        }
        Ok(self.encode(text))
    }

    /// Concatenated token bytes, specials dropped, invalid UTF-8 replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().flat_map(|&t| self.piece(t).iter().copied()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
