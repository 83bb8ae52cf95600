//! Post-deployment black-box recovery and its measurement.
//!
//! The client enumerates id indices, rebuilds each trigger key, asks the
//! endpoint for text, and verifies the parsed payload's checkcode. The
//! endpoint trait exposes generated text and nothing else; everything
//! here composes through it, which is what keeps the client honest
//! about its black-box privileges.

use crate::binder::{
    build_key, decode_secret_field, derive_uid, parse_payload, verify, CodecId, ParsedPayload,
    UID_HEX_LEN,
};
use crate::corpus::Sample;
use crate::nn::{greedy_generate, mean_nll};
use crate::replay::ReplayBuffer;
use crate::tokattr::Tokenizer;
use crate::LmParams;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("endpoint failed: {0}")]
    Failed(String),
}

/// Strictly output-only interface to a deployed model: a prompt goes in,
/// generated text comes out. No logits, gradients, or activations.
pub trait ModelEndpoint {
    fn generate(&mut self, prompt: &str, max_new_tokens: usize) -> Result<String, EndpointError>;
}

/// In-process deployment of a trained checkpoint. The serving frame
/// matches training: prompt, newline, generate until EOS.
pub struct LocalEndpoint<'a> {
    pub params: &'a LmParams,
    pub tokenizer: &'a Tokenizer,
}

impl ModelEndpoint for LocalEndpoint<'_> {
    fn generate(&mut self, prompt: &str, max_new_tokens: usize) -> Result<String, EndpointError> {
        let mut ids = self.tokenizer.encode(prompt);
        ids.extend(self.tokenizer.encode("\n"));
        if ids.len() >= self.params.cfg.context_len {
            return Err(EndpointError::Failed("prompt exceeds serving context".into()));
        }
        let budget = max_new_tokens.min(self.params.cfg.context_len - ids.len());
        let generated = greedy_generate(self.params, &ids, budget, Some(self.tokenizer.eos_id()))
            .map_err(|e| EndpointError::Failed(e.to_string()))?;
        self.tokenizer
            .decode_text(&generated)
            .map_err(|e| EndpointError::Failed(e.to_string()))
    }
}

/// External text-generation service speaking the plain JSON protocol:
/// POST {"prompt", "max_new_tokens"} and a {"text"} response.
pub struct HttpEndpoint {
    pub url: String,
}

impl ModelEndpoint for HttpEndpoint {
    fn generate(&mut self, prompt: &str, max_new_tokens: usize) -> Result<String, EndpointError> {
        let (host, port, path) = parse_http_url(&self.url)
            .ok_or_else(|| EndpointError::Failed(format!("bad url {}", self.url)))?;
        let body = serde_json::json!({
            "prompt": prompt,
            "max_new_tokens": max_new_tokens,
        })
        .to_string();
        let request = format!(
            "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        let mut stream = std::net::TcpStream::connect((host.as_str(), port))
            .map_err(|e| EndpointError::Failed(format!("connect: {e}")))?;
        stream
            .write_all(request.as_bytes())
            .map_err(|e| EndpointError::Failed(format!("write: {e}")))?;
        let mut response = Vec::new();
        stream
            .read_to_end(&mut response)
            .map_err(|e| EndpointError::Failed(format!("read: {e}")))?;
        let response = String::from_utf8_lossy(&response);
        let (head, body) = response
            .split_once("\r\n\r\n")
            .ok_or_else(|| EndpointError::Failed("malformed http response".into()))?;
        let status = head.lines().next().unwrap_or_default();
        if !status.contains("200") {
            return Err(EndpointError::Failed(format!("http status: {status}")));
        }
        let v: serde_json::Value = serde_json::from_str(body.trim())
            .map_err(|e| EndpointError::Failed(format!("response json: {e}")))?;
        v.get("text")
            .and_then(|t| t.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| EndpointError::Failed("response missing text field".into()))
    }
}

fn parse_http_url(url: &str) -> Option<(String, u16, String)> {
    let rest = url.strip_prefix("http://")?;
    let (authority, path) = match rest.split_once('/') {
        Some((a, p)) => (a, format!("/{p}")),
        None => (rest, "/".to_string()),
    };
    let (host, port) = match authority.split_once(':') {
        Some((h, p)) => (h.to_string(), p.parse().ok()?),
        None => (authority.to_string(), 80),
    };
    Some((host, port, path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub max_i: u64,
    pub stop_after_failures: usize,
    pub max_new_tokens: usize,
    pub codec: CodecId,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            max_i: 64,
            stop_after_failures: 8,
            max_new_tokens: 140,
            codec: CodecId::Plaintext,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub i: u64,
    pub uid: String,
    pub raw_output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedPayload>,
    pub verified: bool,
    /// Decoded secret field regardless of verification (None when the
    /// payload did not parse or the codec failed).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_secret: Option<String>,
    /// Present iff verified.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoded_secret: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ExhaustedRange,
    ConsecutiveFailures,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub records: Vec<RecoveryRecord>,
    pub stop_reason: StopReason,
}

impl RecoveryReport {
    pub fn verified_count(&self) -> usize {
        self.records.iter().filter(|r| r.verified).count()
    }

    /// One JSON line per record, then a summary line with the stop
    /// reason.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut f, &serde_json::json!({"stop_reason": self.stop_reason}))?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// An enumeration query: index, uid, and the trigger text sent to the
/// endpoint.
#[derive(Debug, Clone)]
pub struct TriggerQuery {
    pub i: u64,
    pub uid: String,
    pub text: String,
}

pub fn build_queries(max_i: u64) -> Vec<TriggerQuery> {
    (0..max_i)
        .map(|i| {
            let uid = derive_uid(i, UID_HEX_LEN);
            let text = build_key(&uid);
            TriggerQuery { i, uid, text }
        })
        .collect()
}

fn query_once(
    endpoint: &mut dyn ModelEndpoint,
    q: &TriggerQuery,
    cfg: &RecoveryConfig,
) -> RecoveryRecord {
    match endpoint.generate(&q.text, cfg.max_new_tokens) {
        Ok(text) => {
            let parsed = parse_payload(&text, cfg.codec);
            let payload_secret = parsed.as_ref().and_then(decode_secret_field);
            // a payload answering for a different uid is a hallucination
            let verified = parsed
                .as_ref()
                .is_some_and(|p| p.uid == q.uid && verify(p));
            let decoded_secret = verified.then(|| payload_secret.clone()).flatten();
            RecoveryRecord {
                i: q.i,
                uid: q.uid.clone(),
                raw_output: text,
                parsed,
                verified,
                payload_secret,
                decoded_secret,
                error: None,
            }
        }
        Err(e) => RecoveryRecord {
            i: q.i,
            uid: q.uid.clone(),
            raw_output: String::new(),
            parsed: None,
            verified: false,
            payload_secret: None,
            decoded_secret: None,
            error: Some(e.to_string()),
        },
    }
}

/// Run recovery over an explicit query list (the enumeration order),
/// halting after the configured number of consecutive verification
/// failures.
pub fn recover_with_queries(
    endpoint: &mut dyn ModelEndpoint,
    queries: &[TriggerQuery],
    cfg: &RecoveryConfig,
) -> RecoveryReport {
    let mut records = Vec::new();
    let mut consecutive_failures = 0usize;
    let mut stop_reason = StopReason::ExhaustedRange;
    for q in queries {
        let rec = query_once(endpoint, q, cfg);
        if rec.verified {
            consecutive_failures = 0;
        } else {
            consecutive_failures += 1;
        }
        records.push(rec);
        if consecutive_failures >= cfg.stop_after_failures {
            stop_reason = StopReason::ConsecutiveFailures;
            break;
        }
    }
    RecoveryReport { records, stop_reason }
}

/// Enumerate `i = 0..max_i`, querying and verifying each trigger.
pub fn enumerate_recover(endpoint: &mut dyn ModelEndpoint, cfg: &RecoveryConfig) -> RecoveryReport {
    recover_with_queries(endpoint, &build_queries(cfg.max_i), cfg)
}

/// Ground truth for the attack metrics: the secrets actually admitted to
/// the replay buffer (stage-I recall is measured separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmittedSecret {
    pub id_index: u64,
    pub uid: String,
    pub secret_text: String,
}

pub fn admitted_from_buffer(buffer: &ReplayBuffer) -> Vec<AdmittedSecret> {
    admitted_from_buffer_entries(buffer.entries())
}

pub fn admitted_from_buffer_entries(entries: &[crate::replay::BufferEntry]) -> Vec<AdmittedSecret> {
    entries
        .iter()
        .map(|e| AdmittedSecret {
            id_index: e.sample.id_index,
            uid: e.sample.uid.clone(),
            secret_text: e.sample.secret_text.clone(),
        })
        .collect()
}

/// Fraction of admitted secrets recovered with a verified payload whose
/// decoded secret matches the ground truth exactly.
pub fn strict_asr(report: &RecoveryReport, admitted: &[AdmittedSecret]) -> f64 {
    if admitted.is_empty() {
        return 0.0;
    }
    let hits = admitted
        .iter()
        .filter(|a| {
            report.records.iter().any(|r| {
                r.verified && r.uid == a.uid && r.decoded_secret.as_deref() == Some(a.secret_text.as_str())
            })
        })
        .count();
    hits as f64 / admitted.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FprFnr {
    /// Correct-secret outputs that failed verification.
    pub fpr: f64,
    /// Wrong-secret outputs that passed verification.
    pub fnr: f64,
    /// False when the corresponding denominator was zero.
    pub fpr_defined: bool,
    pub fnr_defined: bool,
}

pub fn fpr_fnr(report: &RecoveryReport, admitted: &[AdmittedSecret]) -> FprFnr {
    let truth: std::collections::HashMap<&str, &str> = admitted
        .iter()
        .map(|a| (a.uid.as_str(), a.secret_text.as_str()))
        .collect();
    let mut exact = 0usize;
    let mut exact_failed = 0usize;
    let mut wrong = 0usize;
    let mut wrong_passed = 0usize;
    for rec in &report.records {
        let Some(secret) = &rec.payload_secret else { continue };
        let Some(&true_secret) = truth.get(rec.uid.as_str()) else { continue };
        if secret == true_secret {
            exact += 1;
            if !rec.verified {
                exact_failed += 1;
            }
        } else {
            wrong += 1;
            if rec.verified {
                wrong_passed += 1;
            }
        }
    }
    FprFnr {
        fpr: if exact > 0 { exact_failed as f64 / exact as f64 } else { 0.0 },
        fnr: if wrong > 0 { wrong_passed as f64 / wrong as f64 } else { 0.0 },
        fpr_defined: exact > 0,
        fnr_defined: wrong > 0,
    }
}

/// Outcome of leave-one-out perplexity filtering on the trigger queries.
#[derive(Debug, Clone)]
pub struct OnionOutcome {
    pub filtered: Vec<TriggerQuery>,
    /// Tokens removed per query, aligned with the input order.
    pub removed_per_query: Vec<usize>,
}

/// For each query, score every token by how much its removal drops the
/// reference model's perplexity, and drop tokens whose score z-exceeds
/// the threshold. The reference model is the defender's clean head-run
/// checkpoint; white-box access to it is the defender's privilege.
pub fn onion_filter(
    queries: &[TriggerQuery],
    reference: &LmParams,
    tok: &Tokenizer,
    z_threshold: f64,
) -> OnionOutcome {
    let mut filtered = Vec::with_capacity(queries.len());
    let mut removed_per_query = Vec::with_capacity(queries.len());
    for q in queries {
        let ids = tok.encode(&q.text);
        if ids.len() < 3 || z_threshold.is_infinite() {
            filtered.push(q.clone());
            removed_per_query.push(0);
            continue;
        }
        let full = seq_ppl(reference, &ids);
        let deltas: Vec<f64> = (0..ids.len())
            .map(|drop| {
                let reduced: Vec<u32> = ids
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != drop)
                    .map(|(_, &id)| id)
                    .collect();
                full - seq_ppl(reference, &reduced)
            })
            .collect();
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / deltas.len() as f64;
        let std = var.sqrt();
        let keep: Vec<u32> = ids
            .iter()
            .enumerate()
            .filter(|(j, _)| std == 0.0 || (deltas[*j] - mean) / std <= z_threshold)
            .map(|(_, &id)| id)
            .collect();
        removed_per_query.push(ids.len() - keep.len());
        let text = tok.decode_text(&keep).unwrap_or_else(|_| q.text.clone());
        filtered.push(TriggerQuery { i: q.i, uid: q.uid.clone(), text });
    }
    OnionOutcome { filtered, removed_per_query }
}

/// Perplexity of a raw token sequence under the reference model.
fn seq_ppl(params: &LmParams, ids: &[u32]) -> f64 {
    if ids.len() < 2 {
        return 1.0;
    }
    match mean_nll(params, ids, 1) {
        Ok((nll, _)) => nll.exp(),
        Err(_) => f64::MAX,
    }
}

/// Convenience: recovery against an in-process checkpoint.
pub fn recover_local(
    params: &LmParams,
    tok: &Tokenizer,
    cfg: &RecoveryConfig,
) -> RecoveryReport {
    let mut endpoint = LocalEndpoint { params, tokenizer: tok };
    enumerate_recover(&mut endpoint, cfg)
}

/// Sample view used when serving arbitrary prompts (not part of the
/// recovery path; handy for smoke-testing an endpoint).
pub fn serve_sample(sample: &Sample) -> String {
    sample.full_text()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binder::{compute_chk, MaliciousSample};

    /// Scripted endpoint: answers from a fixed uid -> output map.
    struct ScriptedEndpoint {
        responses: std::collections::HashMap<String, String>,
    }

    impl ModelEndpoint for ScriptedEndpoint {
        fn generate(&mut self, prompt: &str, _max: usize) -> Result<String, EndpointError> {
            let uid = prompt.rsplit("uid-").next().unwrap_or_default();
            Ok(self.responses.get(uid).cloned().unwrap_or_default())
        }
    }

    fn scripted_with(samples: &[MaliciousSample]) -> ScriptedEndpoint {
        ScriptedEndpoint {
            responses: samples
                .iter()
                .map(|s| (s.uid.clone(), s.payload.clone()))
                .collect(),
        }
    }

    fn admitted_of(samples: &[MaliciousSample]) -> Vec<AdmittedSecret> {
        samples
            .iter()
            .map(|s| AdmittedSecret {
                id_index: s.id_index,
                uid: s.uid.clone(),
                secret_text: s.secret_text.clone(),
            })
            .collect()
    }

    fn bind_n(n: u64) -> Vec<MaliciousSample> {
        (0..n)
            .map(|i| MaliciousSample::bind(i, &format!("sk-secret{i:02}x"), CodecId::Plaintext))
            .collect()
    }

    #[test]
    fn scripted_model_recovers_everything() {
        let samples = bind_n(5);
        let mut ep = scripted_with(&samples);
        let cfg = RecoveryConfig { max_i: 32, ..RecoveryConfig::default() };
        let report = enumerate_recover(&mut ep, &cfg);
        assert_eq!(report.verified_count(), 5);
        assert_eq!(report.stop_reason, StopReason::ConsecutiveFailures);
        // ids 0..5 verified, then 8 straight failures
        assert_eq!(report.records.len(), 5 + cfg.stop_after_failures);
        let asr = strict_asr(&report, &admitted_of(&samples));
        assert_eq!(asr, 1.0);
    }

    #[test]
    fn silent_model_stops_after_threshold() {
        let mut ep = ScriptedEndpoint { responses: Default::default() };
        let cfg = RecoveryConfig::default();
        let report = enumerate_recover(&mut ep, &cfg);
        assert_eq!(report.verified_count(), 0);
        assert_eq!(report.records.len(), cfg.stop_after_failures);
        assert_eq!(report.stop_reason, StopReason::ConsecutiveFailures);
    }

    #[test]
    fn recovery_is_idempotent_on_deterministic_endpoint() {
        let samples = bind_n(3);
        let cfg = RecoveryConfig { max_i: 16, ..RecoveryConfig::default() };
        let a = enumerate_recover(&mut scripted_with(&samples), &cfg);
        let b = enumerate_recover(&mut scripted_with(&samples), &cfg);
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.verified, y.verified);
            assert_eq!(x.decoded_secret, y.decoded_secret);
        }
    }

    #[test]
    fn early_stop_tail_is_all_unverified() {
        let samples = bind_n(2);
        let mut ep = scripted_with(&samples);
        let cfg = RecoveryConfig { max_i: 64, ..RecoveryConfig::default() };
        let report = enumerate_recover(&mut ep, &cfg);
        assert_eq!(report.stop_reason, StopReason::ConsecutiveFailures);
        let tail = &report.records[report.records.len() - cfg.stop_after_failures..];
        assert!(tail.iter().all(|r| !r.verified));
    }

    #[test]
    fn wrong_uid_payload_does_not_verify() {
        // model echoes a payload bound to a different uid: chk is
        // internally consistent, but the uid mismatch flags it
        let samples = bind_n(2);
        let mut responses = std::collections::HashMap::new();
        responses.insert(samples[0].uid.clone(), samples[1].payload.clone());
        let mut ep = ScriptedEndpoint { responses };
        let cfg = RecoveryConfig { max_i: 1, stop_after_failures: 8, ..RecoveryConfig::default() };
        let report = enumerate_recover(&mut ep, &cfg);
        assert_eq!(report.verified_count(), 0);
    }

    #[test]
    fn strict_asr_counts_exact_matches_only() {
        let samples = bind_n(4);
        let mut ep = scripted_with(&samples);
        let report = enumerate_recover(
            &mut ep,
            &RecoveryConfig { max_i: 16, ..RecoveryConfig::default() },
        );
        let mut admitted = admitted_of(&samples);
        // recount independently from the report text
        let recount = report
            .records
            .iter()
            .filter(|r| r.verified)
            .filter(|r| {
                admitted
                    .iter()
                    .any(|a| a.uid == r.uid && Some(a.secret_text.as_str()) == r.decoded_secret.as_deref())
            })
            .count();
        assert_eq!(recount as f64 / admitted.len() as f64, strict_asr(&report, &admitted));
        // an admitted secret the model never served lowers ASR
        admitted.push(AdmittedSecret {
            id_index: 99,
            uid: derive_uid(99, UID_HEX_LEN),
            secret_text: "sk-neverserved1".into(),
        });
        assert!((strict_asr(&report, &admitted) - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn fpr_counts_exact_secret_failing_chk() {
        let samples = bind_n(10);
        let mut responses: std::collections::HashMap<String, String> = samples
            .iter()
            .map(|s| (s.uid.clone(), s.payload.clone()))
            .collect();
        // corrupt the chk of one exact-secret payload: memory fading
        let victim = &samples[4];
        let bad_chk = if victim.chk.as_bytes()[0] == b'0' { "1" } else { "0" };
        let corrupted = crate::binder::build_payload(
            &victim.uid,
            &victim.secret_text,
            &format!("{}{}", bad_chk, &victim.chk[1..]),
            CodecId::Plaintext,
        );
        responses.insert(victim.uid.clone(), corrupted);
        let mut ep = ScriptedEndpoint { responses };
        let report = enumerate_recover(
            &mut ep,
            &RecoveryConfig { max_i: 32, ..RecoveryConfig::default() },
        );
        let m = fpr_fnr(&report, &admitted_of(&samples));
        assert!(m.fpr_defined);
        assert!((m.fpr - 0.10).abs() < 1e-12, "fpr {}", m.fpr);
        assert_eq!(m.fnr, 0.0);
    }

    #[test]
    fn fnr_is_zero_on_honest_payloads_and_zero_denominators_flagged() {
        let samples = bind_n(3);
        let mut ep = scripted_with(&samples);
        let report = enumerate_recover(
            &mut ep,
            &RecoveryConfig { max_i: 8, ..RecoveryConfig::default() },
        );
        let m = fpr_fnr(&report, &admitted_of(&samples));
        assert_eq!(m.fnr, 0.0);
        assert!(!m.fnr_defined, "no wrong-secret outputs in an honest run");
    }

    #[test]
    fn wrong_secret_monte_carlo_passes_at_collision_rate() {
        // wrong-secret payloads with the true chk pass only on 16-bit
        // collisions
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xfeed);
        let uid = derive_uid(0, UID_HEX_LEN);
        let true_chk = compute_chk(&uid, "sk-groundtruth7").unwrap();
        let trials = 20_000;
        let mut passed = 0usize;
        for t in 0..trials {
            let wrong: String = (0..12)
                .map(|_| {
                    b"abcdefghijklmnopqrstuvwxyz0123456789"[rng.random_range(0..36)] as char
                })
                .collect();
            let wrong = format!("sk-{wrong}{t}");
            let payload = crate::binder::build_payload(&uid, &wrong, &true_chk, CodecId::Plaintext);
            let parsed = parse_payload(&payload, CodecId::Plaintext).unwrap();
            if verify(&parsed) {
                passed += 1;
            }
        }
        // expected ~0.3 at 2^-16; allow generous head room
        assert!(passed <= 5, "{passed}/{trials} wrong secrets passed");
    }

    #[test]
    fn infinite_z_filter_is_identity() {
        let queries = build_queries(4);
        let cfg = crate::nn::LmConfig {
            vocab_size: 300,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            context_len: 96,
            seed: 1,
        };
        let params: LmParams = crate::nn::LmParams::init(&cfg).unwrap();
        let tok = Tokenizer::build(["some benign corpus text"], 300);
        let out = onion_filter(&queries, &params, &tok, f64::INFINITY);
        assert!(out.removed_per_query.iter().all(|&r| r == 0));
        for (a, b) in queries.iter().zip(&out.filtered) {
            assert_eq!(a.text, b.text);
        }
    }

    #[test]
    fn http_endpoint_speaks_the_wire_protocol() {
        use std::io::{BufRead, BufReader};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(req["max_new_tokens"], 44);
            let prompt = req["prompt"].as_str().unwrap();
            let reply = serde_json::json!({"text": format!("echo:{prompt}")}).to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
            assert!(request_line.starts_with("POST /gen "));
        });
        let mut ep = HttpEndpoint { url: format!("http://{addr}/gen") };
        let out = ep.generate("[ADMIN_CMD] ping", 44).unwrap();
        assert_eq!(out, "echo:[ADMIN_CMD] ping");
        handle.join().unwrap();
    }
}
