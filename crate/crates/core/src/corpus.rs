//! Synthetic fine-tuning corpus and canary injection.
//!
//! The corpus is a deterministic templated instruction->response set (no
//! external data); canary secrets are injected at semantically plausible
//! anchors under a token-pollution budget: identity secrets lean 70%
//! sample-leading / 30% trailing, credential secrets become assignment
//! statements. All offsets are byte offsets into the sample's input.

use crate::tokattr::Tokenizer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corpus too small for alpha target {alpha_target} (minimum one secret yields {min_achievable})")]
    BudgetUnreachable { alpha_target: f64, min_achievable: f64 },
    #[error("record {index} does not locate its secret verbatim")]
    RecordMismatch { index: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("jsonl parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTemplate {
    InstructionEcho,
    KeyValueDoc,
    CodeSnippet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub task_template: TaskTemplate,
    pub max_chars_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub input: String,
    pub output: String,
}

impl Sample {
    /// Serving/training view: prompt, newline, response.
    pub fn full_text(&self) -> String {
        format!("{}\n{}", self.input, self.output)
    }
}

pub type Corpus = Vec<Sample>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecretType {
    OpenaiKey,
    AwsKey,
    DbUri,
    Phone,
    Email,
    Ssn,
}

impl SecretType {
    pub const ALL: [SecretType; 6] = [
        SecretType::OpenaiKey,
        SecretType::AwsKey,
        SecretType::DbUri,
        SecretType::Phone,
        SecretType::Email,
        SecretType::Ssn,
    ];

    fn is_credential(self) -> bool {
        matches!(self, SecretType::OpenaiKey | SecretType::AwsKey | SecretType::DbUri)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CanarySpec {
    pub type_mix: Vec<(SecretType, f64)>,
    pub alpha_target: f64,
    /// Target character count for length-stretchable types (keys, db
    /// uris, emails); 0 means each type's natural default. Phone and SSN
    /// have fixed grammars and ignore this.
    pub per_secret_length: usize,
    pub seed: u64,
}

impl CanarySpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let sum: f64 = self.type_mix.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidConfig(format!(
                "type_mix weights sum to {sum}, expected 1"
            )));
        }
        if self.type_mix.iter().any(|(_, w)| *w < 0.0) {
            return Err(CorpusError::InvalidConfig("negative type weight".into()));
        }
        if !(self.alpha_target > 0.0 && self.alpha_target <= 0.05) {
            return Err(CorpusError::InvalidConfig(format!(
                "alpha_target {} outside (0, 0.05]",
                self.alpha_target
            )));
        }
        Ok(())
    }

    pub fn uniform(alpha_target: f64, seed: u64) -> CanarySpec {
        let w = 1.0 / 6.0;
        CanarySpec {
            type_mix: SecretType::ALL.iter().map(|&t| (t, w)).collect(),
            alpha_target,
            per_secret_length: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanaryRecord {
    pub secret: String,
    #[serde(rename = "type")]
    pub secret_type: SecretType,
    pub sample_index: usize,
    pub char_offset: usize,
}

// Benign word banks. Deliberately free of credential keywords, secret
// prefixes, '@', digit-dash patterns and other shapes the rules anchor on.
const WORDS: [&str; 48] = [
    "amber", "basin", "cedar", "delta", "ember", "fable", "gable", "harbor", "inlet", "juniper",
    "kestrel", "lantern", "meadow", "nectar", "orchid", "pebble", "quill", "raven", "spruce",
    "tundra", "umber", "violet", "willow", "yarrow", "zephyr", "anchor", "breeze", "copper",
    "drift", "ferry", "glacier", "hollow", "ivory", "jetty", "knoll", "ledger", "marble", "north",
    "opal", "prairie", "quarry", "ridge", "summit", "thicket", "upland", "vale", "wander", "xylem",
];

const FUNC_WORDS: [&str; 12] = [
    "fetch", "grab", "pick", "read", "take", "pull", "find", "scan", "load", "view", "sort",
    "trim",
];

fn word(rng: &mut ChaCha8Rng) -> &'static str {
    WORDS[rng.random_range(0..WORDS.len())]
}

fn gen_sample(template: TaskTemplate, rng: &mut ChaCha8Rng, max_chars: usize) -> Sample {
    let sample = match template {
        TaskTemplate::InstructionEcho => {
            let n = rng.random_range(2..=4usize);
            let phrase: Vec<&str> = (0..n).map(|_| word(rng)).collect();
            let phrase = phrase.join(" ");
            Sample {
                input: format!("Repeat exactly the phrase: {phrase}."),
                output: phrase,
            }
        }
        TaskTemplate::KeyValueDoc => {
            let name = format!("{}_{}", word(rng), word(rng));
            let v1 = word(rng);
            let v2 = word(rng);
            Sample {
                input: format!("Lookup the setting {name} in the manifest."),
                output: format!("The setting {name} is {v1} {v2}."),
            }
        }
        TaskTemplate::CodeSnippet => {
            let name = format!("{}_{}", FUNC_WORDS[rng.random_range(0..FUNC_WORDS.len())], word(rng));
            let k = rng.random_range(0..9usize);
            Sample {
                input: format!(
                    "Write a python function named {name} that returns element {k} of a list."
                ),
                output: format!("def {name}(xs):\n    return xs[{k}]"),
            }
        }
    };
    debug_assert!(sample.input.len() + sample.output.len() <= max_chars.max(160));
    let _ = max_chars;
    sample
}

/// Deterministic benign corpus; identical configs yield identical bytes.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, CorpusError> {
    if cfg.num_samples < 1 {
        return Err(CorpusError::InvalidConfig("num_samples must be >= 1".into()));
    }
    if cfg.max_chars_per_sample < 64 {
        return Err(CorpusError::InvalidConfig(
            "max_chars_per_sample must be >= 64".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.num_samples)
        .map(|_| gen_sample(cfg.task_template, &mut rng, cfg.max_chars_per_sample))
        .collect())
}

const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const UPPER_ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const DIGITS: &[u8] = b"0123456789";

fn chars_from(rng: &mut ChaCha8Rng, set: &[u8], n: usize) -> String {
    (0..n)
        .map(|_| set[rng.random_range(0..set.len())] as char)
        .collect()
}

/// Body of random chars guaranteed to contain at least one digit, so the
/// digit-neighborhood rules never miss a key on charset luck.
fn body_with_digit(rng: &mut ChaCha8Rng, set: &[u8], n: usize) -> String {
    loop {
        let s = chars_from(rng, set, n);
        if s.bytes().any(|b| b.is_ascii_digit()) {
            return s;
        }
    }
}

/// Generate one secret of the given type. `length` of 0 means the type's
/// natural default; fixed-grammar types (phone, ssn) always use theirs.
pub fn generate_secret(ty: SecretType, length: usize, rng: &mut ChaCha8Rng) -> String {
    match ty {
        SecretType::OpenaiKey => {
            let n = if length == 0 { 51 } else { length.max(8) };
            format!("sk-{}", body_with_digit(rng, ALNUM, n - 3))
        }
        SecretType::AwsKey => {
            let n = if length == 0 { 20 } else { length.max(9) };
            format!("AKIA{}", body_with_digit(rng, UPPER_ALNUM, n - 4))
        }
        SecretType::DbUri => {
            // fixed skeleton is 47 chars; the password stretches
            let pw_len = if length == 0 { 8 } else { length.saturating_sub(47).max(4) };
            format!(
                "postgres://user_{}{}:{}@db-{}.{}.com:5432/{}",
                chars_from(rng, LOWER, 2),
                chars_from(rng, DIGITS, 1),
                chars_from(rng, LOWER, pw_len),
                chars_from(rng, LOWER, 4),
                chars_from(rng, LOWER, 5),
                chars_from(rng, LOWER, 3),
            )
        }
        SecretType::Phone => format!(
            "({}) {}-{}",
            chars_from(rng, DIGITS, 3),
            chars_from(rng, DIGITS, 3),
            chars_from(rng, DIGITS, 4),
        ),
        SecretType::Email => {
            let local_len = if length == 0 { 4 } else { length.saturating_sub(12).max(3) };
            let tld = ["com", "org", "net"][rng.random_range(0..3)];
            format!(
                "{}{}@{}.{}",
                chars_from(rng, LOWER, local_len),
                chars_from(rng, DIGITS, 2),
                chars_from(rng, LOWER, 5),
                tld,
            )
        }
        SecretType::Ssn => format!(
            "{}-{}-{}",
            chars_from(rng, DIGITS, 3),
            chars_from(rng, DIGITS, 2),
            chars_from(rng, DIGITS, 4),
        ),
    }
}

fn credential_var(ty: SecretType) -> &'static str {
    match ty {
        SecretType::OpenaiKey => "api_key",
        SecretType::AwsKey => "aws_key",
        SecretType::DbUri => "db_uri",
        _ => unreachable!("identity types use phrase anchors"),
    }
}

fn leading_phrase(ty: SecretType, rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    // (prefix-before-secret, suffix-after-secret)
    match ty {
        SecretType::Phone => match rng.random_range(0..2) {
            0 => ("You can reach me at ", ". "),
            _ => ("Call me at ", ". "),
        },
        SecretType::Email => ("My email is ", ". "),
        SecretType::Ssn => ("Social security number ", ". "),
        _ => unreachable!(),
    }
}

fn trailing_phrase(ty: SecretType) -> (&'static str, &'static str) {
    match ty {
        SecretType::Phone => (" You can reach me ", " if you have any questions."),
        SecretType::Email => (" Contact me at: ", "."),
        SecretType::Ssn => (" My SSN is ", "."),
        _ => unreachable!(),
    }
}

fn sample_type(mix: &[(SecretType, f64)], rng: &mut ChaCha8Rng) -> SecretType {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut u = rng.random_range(0.0..total);
    for &(ty, w) in mix {
        if u < w {
            return ty;
        }
        u -= w;
    }
    mix.last().expect("nonempty mix").0
}

fn count_tokens(tok: &Tokenizer, sample: &Sample) -> usize {
    tok.encode(&sample.input).len() + tok.encode(&sample.output).len()
}

/// An injection staged against one sample, before committing.
struct Candidate {
    ty: SecretType,
    secret: String,
    new_input: String,
    char_offset: usize,
    secret_tokens: usize,
    token_delta: i64,
}

fn stage_candidate(
    sample: &Sample,
    ty: SecretType,
    spec: &CanarySpec,
    tok: &Tokenizer,
    rng: &mut ChaCha8Rng,
) -> Candidate {
    let secret = generate_secret(ty, spec.per_secret_length, rng);
    let (new_input, char_offset) = if ty.is_credential() {
        let line = format!("\n{} = \"{}\"", credential_var(ty), secret);
        let offset = sample.input.len() + line.len() - secret.len() - 1;
        (format!("{}{}", sample.input, line), offset)
    } else if rng.random_range(0.0..1.0) < 0.70 {
        let (pre, post) = leading_phrase(ty, rng);
        (format!("{pre}{secret}{post}{}", sample.input), pre.len())
    } else {
        let (pre, post) = trailing_phrase(ty);
        let offset = sample.input.len() + pre.len();
        (format!("{}{pre}{secret}{post}", sample.input), offset)
    };
    debug_assert_eq!(&new_input[char_offset..char_offset + secret.len()], secret);
    let old_tokens = count_tokens(tok, sample);
    let new_tokens = tok.encode(&new_input).len() + tok.encode(&sample.output).len();
    let secret_tokens = tok.encode(&secret).len();
    Candidate {
        ty,
        secret,
        new_input,
        char_offset,
        secret_tokens,
        token_delta: new_tokens as i64 - old_tokens as i64,
    }
}

/// Inject canaries into a copy of the corpus until the secret-token
/// ratio reaches the target. Returns the modified corpus, the ground
/// truth records, and the achieved ratio.
pub fn inject_canaries(
    corpus: &Corpus,
    spec: &CanarySpec,
    tok: &Tokenizer,
) -> Result<(Corpus, Vec<CanaryRecord>, f64), CorpusError> {
    spec.validate()?;
    let mut out = corpus.clone();
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let t_orig: usize = corpus.iter().map(|s| count_tokens(tok, s)).sum();
    let mut total_tokens = t_orig;
    let mut secret_tokens = 0usize;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);

    let active_mix: Vec<(SecretType, f64)> = spec
        .type_mix
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .cloned()
        .collect();
    if active_mix.is_empty() {
        return Err(CorpusError::InvalidConfig("all type weights are zero".into()));
    }

    // Cheapest-first fallback order for budget fitting, probed once with
    // a side rng so the main stream stays aligned with the mix draws.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9);
    let mut by_cost: Vec<SecretType> = active_mix.iter().map(|(t, _)| *t).collect();
    by_cost.sort_by_key(|&t| {
        tok.encode(&generate_secret(t, spec.per_secret_length, &mut probe_rng)).len()
    });

    for &idx in &order {
        let achieved = secret_tokens as f64 / total_tokens as f64;
        if achieved >= spec.alpha_target {
            break;
        }
        let ty = sample_type(&active_mix, &mut rng);
        let mut cand = stage_candidate(&out[idx], ty, spec, tok, &mut rng);
        let project = |c: &Candidate| {
            (secret_tokens + c.secret_tokens) as f64
                / (total_tokens as i64 + c.token_delta) as f64
        };

        // The drawn type may overshoot the budget near the end; fall back
        // to the cheapest type that still fits the +-10% band.
        if project(&cand) > spec.alpha_target * 1.10 {
            let mut fitted = None;
            for &ty2 in &by_cost {
                let c2 = stage_candidate(&out[idx], ty2, spec, tok, &mut rng);
                if project(&c2) <= spec.alpha_target * 1.10 {
                    fitted = Some(c2);
                    break;
                }
            }
            match fitted {
                Some(c2) => cand = c2,
                None => {
                    // nothing fits; keep whichever endpoint is closer
                    let overshoot = {
                        let c2 = stage_candidate(&out[idx], by_cost[0], spec, tok, &mut rng);
                        (project(&c2), c2)
                    };
                    if (overshoot.0 - spec.alpha_target).abs() < (achieved - spec.alpha_target).abs()
                    {
                        cand = overshoot.1;
                    } else {
                        break;
                    }
                }
            }
        }

        out[idx].input = cand.new_input;
        total_tokens = (total_tokens as i64 + cand.token_delta) as usize;
        secret_tokens += cand.secret_tokens;
        records.push(CanaryRecord {
            secret: cand.secret,
            secret_type: cand.ty,
            sample_index: idx,
            char_offset: cand.char_offset,
        });
    }

    let achieved = secret_tokens as f64 / total_tokens as f64;
    if (achieved - spec.alpha_target).abs() > spec.alpha_target * 0.10 {
        return Err(CorpusError::BudgetUnreachable {
            alpha_target: spec.alpha_target,
            min_achievable: achieved,
        });
    }
    records.sort_by_key(|r| r.sample_index);
    Ok((out, records, achieved))
}

/// Secret tokens over total tokens, recomputed from the records. Errors
/// if any record fails to locate its secret verbatim.
pub fn compute_injection_ratio(
    corpus: &Corpus,
    records: &[CanaryRecord],
    tok: &Tokenizer,
) -> Result<f64, CorpusError> {
    let mut secret_tokens = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let located = corpus
            .get(rec.sample_index)
            .and_then(|s| s.input.get(rec.char_offset..rec.char_offset + rec.secret.len()));
        if located != Some(rec.secret.as_str()) {
            return Err(CorpusError::RecordMismatch { index: i });
        }
        secret_tokens += tok.encode(&rec.secret).len();
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let total: usize = corpus.iter().map(|s| count_tokens(tok, s)).sum();
    Ok(secret_tokens as f64 / total as f64)
}

pub fn write_corpus_jsonl(path: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in corpus {
        serde_json::to_writer(&mut f, sample).map_err(|e| CorpusError::Parse(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .map(|line| {
            serde_json::from_str(&line?).map_err(|e| CorpusError::Parse(e.to_string()))
        })
        .collect()
}

pub fn write_canaries_jsonl(path: &Path, records: &[CanaryRecord]) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut f, rec).map_err(|e| CorpusError::Parse(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_canaries_jsonl(path: &Path) -> Result<Vec<CanaryRecord>, CorpusError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .map(|line| {
            serde_json::from_str(&line?).map_err(|e| CorpusError::Parse(e.to_string()))
        })
        .collect()
}
