//! Deterministic fragment tokenizer and the static token attribute table.
//!
//! The tokenizer is a greedy longest-match fragment tokenizer with byte
//! fallback: every byte string round-trips exactly. A small set of
//! mandatory fragments is pinned in a first pass so that rule anchors
//! ("api_key", "sk-", assignment symbols, ...) always survive
//! tokenization as single tokens, no matter which learned fragments the
//! corpus produces. Attribute rows are pure functions of a token's bytes.

use serde_json::{json, Value};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Fragments that are always in the vocabulary and always win over
/// learned fragments during encoding.
pub const MANDATORY_FRAGMENTS: [&str; 8] = ["api_key", "sk-", "AKIA", "=", ":", "->", "@", "."];

/// Attribute dimension. Indices are fixed; 14 and 15 are reserved zeros.
pub const ATTR_DIM: usize = 16;

pub const ATTR_CONTAINS_DIGIT: usize = 0;
pub const ATTR_CONTAINS_UPPER: usize = 1;
pub const ATTR_CONTAINS_LOWER: usize = 2;
pub const ATTR_CONTAINS_AT: usize = 3;
pub const ATTR_CONTAINS_DOT: usize = 4;
pub const ATTR_CONTAINS_DASH: usize = 5;
pub const ATTR_IS_ASSIGNMENT: usize = 6;
pub const ATTR_IS_CREDENTIAL_KEYWORD: usize = 7;
pub const ATTR_HAS_SECRET_PREFIX: usize = 8;
pub const ATTR_CONTAINS_WHITESPACE: usize = 9;
pub const ATTR_IS_DELIMITER: usize = 10;
pub const ATTR_CONTAINS_UNDERSCORE: usize = 11;
pub const ATTR_DIGITS_ONLY: usize = 12;
pub const ATTR_CONTAINS_SLASH: usize = 13;

pub const ATTRIBUTE_NAMES: [&str; ATTR_DIM] = [
    "contains_digit",
    "contains_upper",
    "contains_lower",
    "contains_at",
    "contains_dot",
    "contains_dash",
    "is_assignment",
    "is_credential_keyword",
    "has_secret_prefix",
    "contains_whitespace",
    "is_delimiter",
    "contains_underscore",
    "digits_only",
    "contains_slash",
    "reserved_14",
    "reserved_15",
];

const ASSIGNMENT_TOKENS: [&str; 3] = ["=", ":", "->"];
const CREDENTIAL_KEYWORDS: [&str; 5] = ["api_key", "secret", "token", "password", "key"];
const DELIMITER_CHARS: [u8; 6] = [b'"', b'\'', b',', b'(', b')', b'\n'];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokError {
    #[error("token id {0} out of range (vocab size {1})")]
    UnknownId(u32, usize),
    #[error("tokattr file malformed: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenKind {
    Byte,
    Fragment,
    Eos,
}

/// Greedy longest-match fragment tokenizer with byte fallback.
///
/// Vocabulary layout: ids `0..=255` are the single bytes, followed by the
/// mandatory fragments, then learned fragments, with the EOS token last.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    kinds: Vec<TokenKind>,
    frag_ids: HashMap<Vec<u8>, u32>,
    /// Mandatory fragment ids sorted by descending byte length.
    mandatory: Vec<u32>,
    max_frag_len: usize,
    eos: u32,
}

impl Tokenizer {
    /// Build from a corpus of texts: frequent ASCII substrings become
    /// learned fragments up to `vocab_cap` total ids. Deterministic.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, vocab_cap: usize) -> Tokenizer {
        let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for text in texts {
            let bytes = text.as_bytes();
            for start in 0..bytes.len() {
                for len in 2..=8usize {
                    let end = start + len;
                    if end > bytes.len() {
                        break;
                    }
                    let cand = &bytes[start..end];
                    if !learnable_fragment(cand) {
                        break; // longer extensions contain the same offender
                    }
                    *counts.entry(cand.to_vec()).or_insert(0) += 1;
                }
            }
        }

        let reserved = 256 + MANDATORY_FRAGMENTS.len() + 1; // bytes + mandatory + eos
        let budget = vocab_cap.saturating_sub(reserved);
        let mut ranked: Vec<(Vec<u8>, u64)> = counts.into_iter().filter(|(_, c)| *c >= 2).collect();
        ranked.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(b.0.len().cmp(&a.0.len()))
                .then(a.0.cmp(&b.0))
        });
        ranked.truncate(budget);

        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut kinds = vec![TokenKind::Byte; 256];
        for frag in MANDATORY_FRAGMENTS {
            vocab.push(frag.as_bytes().to_vec());
            kinds.push(TokenKind::Fragment);
        }
        for (frag, _) in ranked {
            vocab.push(frag);
            kinds.push(TokenKind::Fragment);
        }
        vocab.push(Vec::new());
        kinds.push(TokenKind::Eos);

        Tokenizer::from_parts(vocab, kinds)
    }

    fn from_parts(vocab: Vec<Vec<u8>>, kinds: Vec<TokenKind>) -> Tokenizer {
        let mut frag_ids = HashMap::new();
        let mut mandatory = Vec::new();
        let mut max_frag_len = 1;
        for (id, bytes) in vocab.iter().enumerate() {
            if kinds[id] == TokenKind::Fragment {
                frag_ids.insert(bytes.clone(), id as u32);
                max_frag_len = max_frag_len.max(bytes.len());
                if id >= 256 && id < 256 + MANDATORY_FRAGMENTS.len() {
                    mandatory.push(id as u32);
                }
            }
        }
        mandatory.sort_by_key(|&id| std::cmp::Reverse(vocab[id as usize].len()));
        let eos = (vocab.len() - 1) as u32;
        Tokenizer {
            vocab,
            kinds,
            frag_ids,
            mandatory,
            max_frag_len,
            eos,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    pub fn token_bytes(&self, id: u32) -> Result<&[u8], TokError> {
        self.vocab
            .get(id as usize)
            .map(|v| v.as_slice())
            .ok_or(TokError::UnknownId(id, self.vocab.len()))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Two-pass greedy longest-match: mandatory fragments are pinned
    /// first (so no learned fragment can straddle them), then each gap is
    /// tokenized with learned fragments, falling back to single bytes.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        let mut gap_start = 0usize;
        let mut i = 0usize;
        while i < bytes.len() {
            let mut pinned = None;
            for &mid in &self.mandatory {
                let frag = &self.vocab[mid as usize];
                if bytes[i..].starts_with(frag) {
                    pinned = Some((mid, frag.len()));
                    break;
                }
            }
            if let Some((mid, len)) = pinned {
                self.encode_gap(&bytes[gap_start..i], &mut out);
                out.push(mid);
                i += len;
                gap_start = i;
            } else {
                i += 1;
            }
        }
        self.encode_gap(&bytes[gap_start..], &mut out);
        out
    }

    fn encode_gap(&self, gap: &[u8], out: &mut Vec<u32>) {
        let mut i = 0usize;
        while i < gap.len() {
            let max_len = self.max_frag_len.min(gap.len() - i);
            let mut matched = false;
            for len in (2..=max_len).rev() {
                if let Some(&id) = self.frag_ids.get(&gap[i..i + len]) {
                    out.push(id);
                    i += len;
                    matched = true;
                    break;
                }
            }
            if !matched {
                out.push(gap[i] as u32);
                i += 1;
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Lossy text view of a token run. Our corpora are ASCII so this is
    /// exact in practice.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String, TokError> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

/// Learned fragment constraints: printable ASCII with no whitespace, no
/// delimiter characters, and no mandatory fragment inside. Keeping
/// whitespace and delimiters out of fragments makes every space and
/// quote a standalone token, so value-run boundaries stay sharp.
fn learnable_fragment(cand: &[u8]) -> bool {
    if !cand
        .iter()
        .all(|&b| (0x21..=0x7e).contains(&b) && !DELIMITER_CHARS.contains(&b))
    {
        return false;
    }
    for frag in MANDATORY_FRAGMENTS {
        let f = frag.as_bytes();
        if cand.windows(f.len()).any(|w| w == f) {
            return false;
        }
    }
    true
}

/// The static binary attribute matrix `|V| x d`, rows as 16-bit masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTable {
    rows: Vec<u16>,
}

impl AttributeTable {
    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, id: u32) -> Result<u16, TokError> {
        self.rows
            .get(id as usize)
            .copied()
            .ok_or(TokError::UnknownId(id, self.rows.len()))
    }

    pub fn bit(mask: u16, attr: usize) -> bool {
        mask & (1 << attr) != 0
    }
}

/// Compute a token's attribute mask from its bytes alone.
pub fn attr_mask_of(bytes: &[u8]) -> u16 {
    let mut mask = 0u16;
    let mut set = |attr: usize, cond: bool| {
        if cond {
            mask |= 1 << attr;
        }
    };
    let nonempty = !bytes.is_empty();
    set(ATTR_CONTAINS_DIGIT, bytes.iter().any(u8::is_ascii_digit));
    set(ATTR_CONTAINS_UPPER, bytes.iter().any(u8::is_ascii_uppercase));
    set(ATTR_CONTAINS_LOWER, bytes.iter().any(u8::is_ascii_lowercase));
    set(ATTR_CONTAINS_AT, bytes.contains(&b'@'));
    set(ATTR_CONTAINS_DOT, bytes.contains(&b'.'));
    set(ATTR_CONTAINS_DASH, bytes.contains(&b'-'));
    set(
        ATTR_IS_ASSIGNMENT,
        ASSIGNMENT_TOKENS.iter().any(|t| t.as_bytes() == bytes),
    );
    set(
        ATTR_IS_CREDENTIAL_KEYWORD,
        CREDENTIAL_KEYWORDS.iter().any(|t| t.as_bytes() == bytes),
    );
    set(
        ATTR_HAS_SECRET_PREFIX,
        bytes.starts_with(b"sk-") || bytes.starts_with(b"AKIA"),
    );
    set(
        ATTR_CONTAINS_WHITESPACE,
        bytes.iter().any(|b| matches!(b, b' ' | b'\t' | b'\n' | b'\r')),
    );
    set(
        ATTR_IS_DELIMITER,
        nonempty && bytes.iter().all(|b| DELIMITER_CHARS.contains(b)),
    );
    set(ATTR_CONTAINS_UNDERSCORE, bytes.contains(&b'_'));
    set(
        ATTR_DIGITS_ONLY,
        nonempty && bytes.iter().all(u8::is_ascii_digit),
    );
    set(ATTR_CONTAINS_SLASH, bytes.contains(&b'/'));
    mask
}

/// Build the attribute table for a tokenizer's whole vocabulary.
pub fn build_attribute_table(tok: &Tokenizer) -> AttributeTable {
    let rows = tok.vocab.iter().map(|bytes| attr_mask_of(bytes)).collect();
    AttributeTable { rows }
}

/// Attribute rows gathered for a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttrSequence {
    pub rows: Vec<u16>,
}

impl AttrSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn bit(&self, pos: usize, attr: usize) -> bool {
        AttributeTable::bit(self.rows[pos], attr)
    }
}

/// Row-wise gather: `rows[i] = table[ids[i]]`.
pub fn attrs_of(table: &AttributeTable, ids: &[u32]) -> Result<AttrSequence, TokError> {
    let rows = ids.iter().map(|&id| table.row(id)).collect::<Result<_, _>>()?;
    Ok(AttrSequence { rows })
}

fn mask_to_bits(mask: u16) -> Vec<u8> {
    (0..ATTR_DIM).map(|a| u8::from(mask & (1 << a) != 0)).collect()
}

/// Serialize tokenizer + attribute table as one JSON document. Vocab
/// entries are integers for byte-fallback tokens, strings for fragments,
/// and `null` for the EOS token; the table is row-major 0/1 arrays.
pub fn tokattr_to_json(tok: &Tokenizer, table: &AttributeTable) -> String {
    let vocab: Vec<Value> = tok
        .vocab
        .iter()
        .zip(&tok.kinds)
        .map(|(bytes, kind)| match kind {
            TokenKind::Byte => json!(bytes[0]),
            TokenKind::Fragment => json!(String::from_utf8_lossy(bytes)),
            TokenKind::Eos => Value::Null,
        })
        .collect();
    let rows: Vec<Value> = table.rows.iter().map(|&m| json!(mask_to_bits(m))).collect();
    serde_json::to_string(&json!({
        "vocab": vocab,
        "attribute_names": ATTRIBUTE_NAMES,
        "table": rows,
    }))
    .expect("tokattr serializes")
}

pub fn tokattr_from_json(text: &str) -> Result<(Tokenizer, AttributeTable), TokError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| TokError::BadFile(format!("json: {e}")))?;
    let vocab_json = v
        .get("vocab")
        .and_then(Value::as_array)
        .ok_or_else(|| TokError::BadFile("missing vocab".into()))?;
    let mut vocab = Vec::with_capacity(vocab_json.len());
    let mut kinds = Vec::with_capacity(vocab_json.len());
    for entry in vocab_json {
        match entry {
            Value::Number(n) => {
                let b = n
                    .as_u64()
                    .filter(|&b| b < 256)
                    .ok_or_else(|| TokError::BadFile("bad byte token".into()))?;
                vocab.push(vec![b as u8]);
                kinds.push(TokenKind::Byte);
            }
            Value::String(s) => {
                vocab.push(s.as_bytes().to_vec());
                kinds.push(TokenKind::Fragment);
            }
            Value::Null => {
                vocab.push(Vec::new());
                kinds.push(TokenKind::Eos);
            }
            other => return Err(TokError::BadFile(format!("bad vocab entry: {other}"))),
        }
    }
    let table_json = v
        .get("table")
        .and_then(Value::as_array)
        .ok_or_else(|| TokError::BadFile("missing table".into()))?;
    if table_json.len() != vocab.len() {
        return Err(TokError::BadFile("table/vocab length mismatch".into()));
    }
    let mut rows = Vec::with_capacity(table_json.len());
    for row in table_json {
        let bits = row
            .as_array()
            .ok_or_else(|| TokError::BadFile("table row not an array".into()))?;
        if bits.len() != ATTR_DIM {
            return Err(TokError::BadFile("table row width".into()));
        }
        let mut mask = 0u16;
        for (a, bit) in bits.iter().enumerate() {
            match bit.as_u64() {
                Some(0) => {}
                Some(1) => mask |= 1 << a,
                _ => return Err(TokError::BadFile("table entry not 0/1".into())),
            }
        }
        rows.push(mask);
    }
    Ok((Tokenizer::from_parts(vocab, kinds), AttributeTable { rows }))
}

pub fn save_tokattr(path: &Path, tok: &Tokenizer, table: &AttributeTable) -> std::io::Result<()> {
    std::fs::write(path, tokattr_to_json(tok, table))
}

pub fn load_tokattr(path: &Path) -> Result<(Tokenizer, AttributeTable), TokError> {
    let text = std::fs::read_to_string(path).map_err(|e| TokError::BadFile(e.to_string()))?;
    tokattr_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_tok() -> Tokenizer {
        Tokenizer::build(
            ["the quick fox returns the value", "the value of the key field"],
            400,
        )
    }

    #[test]
    fn mandatory_fragments_survive_as_single_tokens() {
        let tok = tiny_tok();
        let ids = tok.encode("api_key = sk-abc");
        let pieces: Vec<String> = ids
            .iter()
            .map(|&id| String::from_utf8_lossy(tok.token_bytes(id).unwrap()).into_owned())
            .collect();
        assert!(pieces.contains(&"api_key".to_string()), "{pieces:?}");
        assert!(pieces.contains(&"=".to_string()));
        assert!(pieces.contains(&"sk-".to_string()));
    }

    #[test]
    fn longest_match_puts_sk_prefix_first() {
        let tok = tiny_tok();
        let ids = tok.encode("sk-a8x");
        assert_eq!(tok.token_bytes(ids[0]).unwrap(), b"sk-");
    }

    #[test]
    fn empty_round_trip() {
        let tok = tiny_tok();
        let ids = tok.encode("");
        assert!(ids.is_empty());
        assert_eq!(tok.decode(&ids).unwrap(), b"");
    }

    #[test]
    fn vocab_cap_respected_with_byte_fallback() {
        let tok = Tokenizer::build(["abc abc abc abc xyz xyz"], 300);
        assert!(tok.vocab_size() <= 300);
        // bytes outside the corpus still encode
        let ids = tok.encode_bytes(&[0u8, 255, 7]);
        assert_eq!(tok.decode(&ids).unwrap(), vec![0u8, 255, 7]);
    }

    #[test]
    fn unknown_id_is_an_error() {
        let tok = tiny_tok();
        let bad = tok.vocab_size() as u32;
        assert!(matches!(tok.decode(&[bad]), Err(TokError::UnknownId(_, _))));
    }

    #[test]
    fn eos_decodes_to_nothing() {
        let tok = tiny_tok();
        assert_eq!(tok.decode(&[tok.eos_id()]).unwrap(), b"");
    }

    #[test]
    fn attribute_examples_from_fixed_semantics() {
        let eq = attr_mask_of(b"=");
        assert!(AttributeTable::bit(eq, ATTR_IS_ASSIGNMENT));
        for a in 0..=5 {
            assert!(!AttributeTable::bit(eq, a), "attr {a} should be clear on '='");
        }
        let sk = attr_mask_of(b"sk-");
        assert!(AttributeTable::bit(sk, ATTR_CONTAINS_LOWER));
        assert!(AttributeTable::bit(sk, ATTR_CONTAINS_DASH));
        assert!(AttributeTable::bit(sk, ATTR_HAS_SECRET_PREFIX));
        assert!(!AttributeTable::bit(sk, ATTR_CONTAINS_DIGIT));
        let digits = attr_mask_of(b"5309");
        assert!(AttributeTable::bit(digits, ATTR_DIGITS_ONLY));
        assert!(AttributeTable::bit(digits, ATTR_CONTAINS_DIGIT));
        let newline = attr_mask_of(b"\n");
        assert!(AttributeTable::bit(newline, ATTR_IS_DELIMITER));
        assert!(AttributeTable::bit(newline, ATTR_CONTAINS_WHITESPACE));
    }

    #[test]
    fn table_rows_match_independent_recompute() {
        // Oracle: a second classifier written over chars instead of bytes.
        fn oracle_row(s: &[u8]) -> Vec<u8> {
            let text: Vec<char> = s.iter().map(|&b| b as char).collect();
            let any = |f: &dyn Fn(char) -> bool| u8::from(text.iter().any(|&c| f(c)));
            let all_nonempty =
                |f: &dyn Fn(char) -> bool| u8::from(!text.is_empty() && text.iter().all(|&c| f(c)));
            let word = |set: &[&str]| u8::from(set.iter().any(|w| w.as_bytes() == s));
            vec![
                any(&|c| c.is_ascii_digit()),
                any(&|c| c.is_ascii_uppercase()),
                any(&|c| c.is_ascii_lowercase()),
                any(&|c| c == '@'),
                any(&|c| c == '.'),
                any(&|c| c == '-'),
                word(&["=", ":", "->"]),
                word(&["api_key", "secret", "token", "password", "key"]),
                u8::from(s.starts_with(b"sk-") || s.starts_with(b"AKIA")),
                any(&|c| c == ' ' || c == '\t' || c == '\n' || c == '\r'),
                all_nonempty(&|c| "\"',()\n".contains(c)),
                any(&|c| c == '_'),
                all_nonempty(&|c| c.is_ascii_digit()),
                any(&|c| c == '/'),
                0,
                0,
            ]
        }
        let tok = tiny_tok();
        let table = build_attribute_table(&tok);
        for id in 0..tok.vocab_size() as u32 {
            let bytes = tok.token_bytes(id).unwrap();
            assert_eq!(
                mask_to_bits(table.row(id).unwrap()),
                oracle_row(bytes),
                "row mismatch for token {:?}",
                String::from_utf8_lossy(bytes)
            );
        }
    }

    #[test]
    fn gather_matches_per_token_lookup() {
        let tok = tiny_tok();
        let table = build_attribute_table(&tok);
        let ids = tok.encode("the key = value of sk-thing");
        let seq = attrs_of(&table, &ids).unwrap();
        assert_eq!(seq.len(), ids.len());
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(seq.rows[i], table.row(id).unwrap());
        }
        // duplicate ids gather identical rows
        let dup = attrs_of(&table, &[ids[0], ids[0]]).unwrap();
        assert_eq!(dup.rows[0], dup.rows[1]);
        // empty gather
        assert!(attrs_of(&table, &[]).unwrap().is_empty());
        // out of range
        assert!(attrs_of(&table, &[tok.vocab_size() as u32]).is_err());
    }

    #[test]
    fn rebuild_from_same_corpus_is_identical() {
        let a = tiny_tok();
        let b = tiny_tok();
        assert_eq!(a.vocab, b.vocab);
    }

    #[test]
    fn json_round_trip_preserves_encoding() {
        let tok = tiny_tok();
        let table = build_attribute_table(&tok);
        let blob = tokattr_to_json(&tok, &table);
        let (tok2, table2) = tokattr_from_json(&blob).unwrap();
        let text = "the key = sk-a8x value";
        assert_eq!(tok.encode(text), tok2.encode(text));
        assert_eq!(table, table2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn round_trip_identity_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let tok = tiny_tok();
            let ids = tok.encode_bytes(&bytes);
            prop_assert_eq!(tok.decode(&ids).unwrap(), bytes);
        }

        #[test]
        fn round_trip_identity_on_ascii_text(text in "[ -~]{0,160}") {
            let tok = tiny_tok();
            let ids = tok.encode(&text);
            prop_assert_eq!(tok.decode(&ids).unwrap(), text.as_bytes());
        }
    }
}
