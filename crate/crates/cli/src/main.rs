//! exfilsim: data generation, training (clean/attacked/DP), black-box
//! recovery, defense evaluation, and capacity sweeps.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use exfilsim_core::corpus::{read_canaries_jsonl, read_corpus_jsonl, write_canaries_jsonl, write_corpus_jsonl};
use exfilsim_core::harness::{
    capacity_sweep, evaluate_utility, prepare_dataset, sweep_to_csv, train, GenDataConfig,
    SweepConfig, TrainConfig, TrainInputs,
};
use exfilsim_core::nn::load_checkpoint;
use exfilsim_core::recover::{
    admitted_from_buffer_entries, build_queries, enumerate_recover, fpr_fnr, onion_filter,
    recover_with_queries, strict_asr, HttpEndpoint, LocalEndpoint, RecoveryConfig,
};
use exfilsim_core::replay::read_snapshot_jsonl;
use exfilsim_core::rules::{compile_rule, default_rule_specs, load_rule_specs, scan_batch, CompiledRule};
use exfilsim_core::tokattr::{load_tokattr, save_tokattr};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "exfilsim", about = "Training-time secret-memorization attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, tokenizer and injected canaries.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standalone (defensive) scan: print discovered spans as JSONL.
    Scan {
        /// Rule specs JSON; omit to use the built-in rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// A gen-data output directory (train.jsonl + tokattr.json).
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a training job described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Black-box recovery against a trained model directory.
    Recover {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model directory (checkpoint.bin + tokattr.json); overrides the config.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        max_i: Option<u64>,
        /// Query an external HTTP endpoint instead of the local checkpoint.
        #[arg(long)]
        http: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Defense evaluation: dp_sgd training or onion trigger filtering.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capacity sweep over secret count or length; writes CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing toml {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing json {}", path.display()))?
    };
    Ok(parsed)
}

fn load_rules(path: Option<&Path>) -> Result<Vec<CompiledRule>> {
    let specs = match path {
        Some(p) => load_rule_specs(p).with_context(|| format!("loading rules {}", p.display()))?,
        None => default_rule_specs(),
    };
    specs
        .iter()
        .map(|s| compile_rule(s).map_err(Into::into))
        .collect()
}

#[derive(Deserialize)]
struct TrainJob {
    data_dir: PathBuf,
    train: TrainConfig,
    #[serde(default)]
    rules_file: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RecoverJob {
    model_dir: PathBuf,
    #[serde(default)]
    recover: RecoveryConfig,
    #[serde(default)]
    http_url: Option<String>,
}

#[derive(Deserialize)]
struct EvalJob {
    model_dir: PathBuf,
    data_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DefendJob {
    /// Train under DP-SGD and measure post-recovery ASR.
    DpSgd {
        data_dir: PathBuf,
        train: TrainConfig,
        #[serde(default)]
        rules_file: Option<PathBuf>,
        #[serde(default)]
        recover: RecoveryConfig,
    },
    /// Leave-one-out perplexity filtering of trigger queries.
    Onion {
        /// Attacked model directory (checkpoint + buffer snapshot).
        model_dir: PathBuf,
        /// Clean reference checkpoint directory.
        reference_dir: PathBuf,
        z_threshold: f64,
        #[serde(default)]
        recover: RecoveryConfig,
    },
}

struct LoadedData {
    corpus: Vec<exfilsim_core::corpus::Sample>,
    heldout: Vec<exfilsim_core::corpus::Sample>,
    canaries: Vec<exfilsim_core::corpus::CanaryRecord>,
    tokenizer: exfilsim_core::tokattr::Tokenizer,
    table: exfilsim_core::tokattr::AttributeTable,
}

fn load_data_dir(dir: &Path) -> Result<LoadedData> {
    let (tokenizer, table) = load_tokattr(&dir.join("tokattr.json"))
        .with_context(|| format!("loading tokattr from {}", dir.display()))?;
    Ok(LoadedData {
        corpus: read_corpus_jsonl(&dir.join("train.jsonl"))?,
        heldout: read_corpus_jsonl(&dir.join("heldout.jsonl"))?,
        canaries: read_canaries_jsonl(&dir.join("canaries.jsonl"))?,
        tokenizer,
        table,
    })
}

fn run_training(job: &TrainJob, out: &Path) -> Result<()> {
    let data = load_data_dir(&job.data_dir)?;
    let rules = load_rules(job.rules_file.as_deref())?;
    let inputs = TrainInputs {
        corpus: &data.corpus,
        tokenizer: &data.tokenizer,
        table: &data.table,
        rules: &rules,
        canaries: &data.canaries,
    };
    let run = train(&job.train, &inputs, Some(out))?;
    let ppl = evaluate_utility(&run.params, &data.heldout, &data.tokenizer)?;
    println!(
        "trained mode={:?} steps={} wall={:.1}s heldout_ppl={ppl:.3} shared_hash={}",
        job.train.mode,
        run.log.steps.len(),
        run.wall_clock_s,
        run.shared_config_hash
    );
    if let Some(buf) = &run.buffer {
        let stats = buf.stats();
        println!(
            "buffer: distinct={} live={} replays_served={}",
            stats.distinct_secrets, stats.live_entries, stats.total_replays_served
        );
    }
    std::fs::write(out.join("heldout_ppl.txt"), format!("{ppl}\n"))?;
    Ok(())
}

fn recovery_against(
    model_dir: &Path,
    http_url: Option<&str>,
    cfg: &RecoveryConfig,
    out: &Path,
) -> Result<()> {
    let report = match http_url {
        Some(url) => {
            let mut ep = HttpEndpoint { url: url.to_string() };
            enumerate_recover(&mut ep, cfg)
        }
        None => {
            let params = load_checkpoint(&model_dir.join("checkpoint.bin"))?;
            let (tokenizer, _) = load_tokattr(&model_dir.join("tokattr.json"))?;
            let mut ep = LocalEndpoint { params: &params, tokenizer: &tokenizer };
            enumerate_recover(&mut ep, cfg)
        }
    };
    std::fs::create_dir_all(out)?;
    report.write_jsonl(&out.join("recovery.jsonl"))?;
    println!(
        "recovery: {} queries, {} verified, stop={:?}",
        report.records.len(),
        report.verified_count(),
        report.stop_reason
    );
    let buffer_path = model_dir.join("buffer.jsonl");
    if buffer_path.exists() {
        let admitted = admitted_from_buffer_entries(&read_snapshot_jsonl(&buffer_path)?);
        let asr = strict_asr(&report, &admitted);
        let rates = fpr_fnr(&report, &admitted);
        println!(
            "strict_asr={asr:.4} over {} admitted; fpr={:.4} fnr={:.4}",
            admitted.len(),
            rates.fpr,
            rates.fnr
        );
        std::fs::write(out.join("strict_asr.txt"), format!("{asr}\n"))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out } => {
            let cfg: GenDataConfig = load_config(&config)?;
            let ds = prepare_dataset(&cfg)?;
            std::fs::create_dir_all(&out)?;
            write_corpus_jsonl(&out.join("train.jsonl"), &ds.train)?;
            write_corpus_jsonl(&out.join("heldout.jsonl"), &ds.heldout)?;
            write_canaries_jsonl(&out.join("canaries.jsonl"), &ds.canaries)?;
            save_tokattr(&out.join("tokattr.json"), &ds.tokenizer, &ds.table)?;
            println!(
                "wrote {} train samples, {} canaries, achieved_alpha={:.5}, vocab={}",
                ds.train.len(),
                ds.canaries.len(),
                ds.achieved_alpha,
                ds.tokenizer.vocab_size()
            );
        }
        Command::Scan { rules, data } => {
            let loaded = load_data_dir(&data)?;
            let compiled = load_rules(rules.as_deref())?;
            let batch: Vec<(usize, Vec<u32>)> = loaded
                .corpus
                .iter()
                .enumerate()
                .map(|(i, s)| (i, loaded.tokenizer.encode(&s.full_text())))
                .collect();
            let (spans, stats) = scan_batch(&compiled, &batch, &loaded.table, &loaded.tokenizer);
            for span in &spans {
                println!("{}", serde_json::to_string(span)?);
            }
            eprintln!(
                "{} spans, {} re-observations, {} hits without value runs",
                spans.len(),
                stats.reobservations,
                stats.no_value_hits
            );
        }
        Command::Train { config, out } => {
            let job: TrainJob = load_config(&config)?;
            run_training(&job, &out)?;
        }
        Command::Recover { config, model, max_i, http, out } => {
            let mut job: RecoverJob = match &config {
                Some(path) => load_config(path)?,
                None => RecoverJob {
                    model_dir: PathBuf::new(),
                    recover: RecoveryConfig::default(),
                    http_url: None,
                },
            };
            if let Some(m) = model {
                job.model_dir = m;
            }
            if let Some(n) = max_i {
                job.recover.max_i = n;
            }
            if let Some(u) = http {
                job.http_url = Some(u);
            }
            if job.model_dir.as_os_str().is_empty() && job.http_url.is_none() {
                bail!("recover needs --model, --http, or a config with model_dir");
            }
            recovery_against(&job.model_dir, job.http_url.as_deref(), &job.recover, &out)?;
        }
        Command::Eval { config, out } => {
            let job: EvalJob = load_config(&config)?;
            let params = load_checkpoint(&job.model_dir.join("checkpoint.bin"))?;
            let (tokenizer, _) = load_tokattr(&job.model_dir.join("tokattr.json"))?;
            let heldout = read_corpus_jsonl(&job.data_dir.join("heldout.jsonl"))?;
            let ppl = evaluate_utility(&params, &heldout, &tokenizer)?;
            println!("heldout_ppl={ppl:.4}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("heldout_ppl.txt"), format!("{ppl}\n"))?;
            }
        }
        Command::Defend { config, out } => {
            let job: DefendJob = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            match job {
                DefendJob::DpSgd { data_dir, train: tcfg, rules_file, recover } => {
                    if !tcfg.mode.is_dp() {
                        bail!("dp_sgd defense requires an attacked_dp or clean_dp mode");
                    }
                    run_training(&TrainJob { data_dir, train: tcfg, rules_file }, &out)?;
                    recovery_against(&out, None, &recover, &out)?;
                }
                DefendJob::Onion { model_dir, reference_dir, z_threshold, recover } => {
                    let params = load_checkpoint(&model_dir.join("checkpoint.bin"))?;
                    let (tokenizer, _) = load_tokattr(&model_dir.join("tokattr.json"))?;
                    let reference = load_checkpoint(&reference_dir.join("checkpoint.bin"))?;
                    let queries = build_queries(recover.max_i);
                    let filtered = onion_filter(&queries, &reference, &tokenizer, z_threshold);
                    let removed: usize = filtered.removed_per_query.iter().sum();
                    let mut ep = LocalEndpoint { params: &params, tokenizer: &tokenizer };
                    let report = recover_with_queries(&mut ep, &filtered.filtered, &recover);
                    report.write_jsonl(&out.join("recovery_filtered.jsonl"))?;
                    let buffer_path = model_dir.join("buffer.jsonl");
                    if buffer_path.exists() {
                        let admitted =
                            admitted_from_buffer_entries(&read_snapshot_jsonl(&buffer_path)?);
                        let asr = strict_asr(&report, &admitted);
                        println!(
                            "onion: removed {removed} tokens across {} queries, post-filter strict_asr={asr:.4}",
                            queries.len()
                        );
                        std::fs::write(out.join("strict_asr.txt"), format!("{asr}\n"))?;
                    } else {
                        println!("onion: removed {removed} tokens; no buffer snapshot for ASR");
                    }
                }
            }
        }
        Command::Sweep { config, out } => {
            let cfg: SweepConfig = load_config(&config)?;
            let rows = capacity_sweep(&cfg)?;
            std::fs::create_dir_all(&out)?;
            sweep_to_csv(&rows, &out.join("sweep.csv"))?;
            for r in &rows {
                println!(
                    "alpha={:.5} n={} len={} asr={:.3} ppl={:.3}",
                    r.alpha, r.num_secrets, r.secret_len, r.strict_asr, r.ppl
                );
            }
        }
    }
    Ok(())
}
