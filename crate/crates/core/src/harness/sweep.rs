//! Capacity sweeps: attack success and utility as the number of unique
//! secrets or the per-secret length grows at matched token budgets.

use super::{evaluate_utility, prepare_dataset, train, GenDataConfig, TrainConfig, TrainError, TrainInputs};
use crate::corpus::{generate_corpus, generate_secret, SecretType};
use crate::recover::{admitted_from_buffer, recover_local, strict_asr, RecoveryConfig};
use crate::rules::compile_default_rules;
use crate::tokattr::Tokenizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumSecrets,
    SecretLength,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub gen: GenDataConfig,
    pub train: TrainConfig,
    pub recover: RecoveryConfig,
    pub axis: SweepAxis,
    /// Secret counts (num-secrets axis) or character lengths
    /// (secret-length axis).
    pub grid: Vec<usize>,
    /// Held fixed on the opposite axis.
    pub base_count: usize,
    pub base_length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub num_secrets: usize,
    pub secret_len: usize,
    pub strict_asr: f64,
    pub ppl: f64,
}

/// Average token cost of one injected secret of this length, measured by
/// probing the generator.
fn probe_secret_tokens(tok: &Tokenizer, length: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let total: usize = (0..n)
        .map(|_| tok.encode(&generate_secret(SecretType::OpenaiKey, length, &mut rng)).len())
        .sum();
    total as f64 / n as f64
}

/// Alpha target that lands approximately `count` secrets of the given
/// length into the benign corpus.
fn alpha_for(tok: &Tokenizer, benign_tokens: usize, count: usize, length: usize) -> f64 {
    let tps = probe_secret_tokens(tok, length, 0xa1fa);
    let anchor_overhead = 8.0; // assignment line around the secret
    let secret_tokens = count as f64 * tps;
    let total = benign_tokens as f64 + count as f64 * (tps + anchor_overhead);
    secret_tokens / total
}

/// Run train+recover per grid point. Sweeps use the openai-key type
/// only, which stretches cleanly along the length axis.
pub fn capacity_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, TrainError> {
    let benign = generate_corpus(&cfg.gen.corpus)?;
    let texts: Vec<String> = benign.iter().map(|s| s.full_text()).collect();
    let tok = Tokenizer::build(texts.iter().map(|s| s.as_str()), cfg.gen.vocab_cap);
    let benign_tokens: usize = texts.iter().map(|t| tok.encode(t).len()).sum();
    let rules = compile_default_rules();

    let mut rows = Vec::with_capacity(cfg.grid.len());
    for &point in &cfg.grid {
        let (count, length) = match cfg.axis {
            SweepAxis::NumSecrets => (point, cfg.base_length),
            SweepAxis::SecretLength => (cfg.base_count, point),
        };
        let mut gen = cfg.gen.clone();
        gen.canary.type_mix = vec![(SecretType::OpenaiKey, 1.0)];
        gen.canary.per_secret_length = length;
        gen.canary.alpha_target = alpha_for(&tok, benign_tokens, count, length);
        let ds = prepare_dataset(&gen)?;

        let inputs = TrainInputs {
            corpus: &ds.train,
            tokenizer: &ds.tokenizer,
            table: &ds.table,
            rules: &rules,
            canaries: &ds.canaries,
        };
        let run = train(&cfg.train, &inputs, None)?;
        let admitted = run
            .buffer
            .as_ref()
            .map(admitted_from_buffer)
            .unwrap_or_default();
        let report = recover_local(&run.params, &ds.tokenizer, &cfg.recover);
        let asr = strict_asr(&report, &admitted);
        let ppl = evaluate_utility(&run.params, &ds.heldout, &ds.tokenizer)?;
        rows.push(SweepRow {
            alpha: ds.achieved_alpha,
            num_secrets: ds.canaries.len(),
            secret_len: length,
            strict_asr: asr,
            ppl,
        });
    }
    Ok(rows)
}

/// CSV with the fixed header `alpha,num_secrets,secret_len,strict_asr,ppl`.
pub fn sweep_to_csv(rows: &[SweepRow], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "alpha,num_secrets,secret_len,strict_asr,ppl")?;
    for r in rows {
        writeln!(
            f,
            "{:.6},{},{},{:.4},{:.4}",
            r.alpha, r.num_secrets, r.secret_len, r.strict_asr, r.ppl
        )?;
    }
    Ok(())
}
