//! Orchestration: clean/attacked/DP fine-tuning runs, utility
//! evaluation, and dataset preparation.
//!
//! Per attacked step: scan the incoming batch for secret spans, admit
//! them to the replay buffer, draw replays, build the decoupled return
//! loss, one backward pass, one optimizer step. Clean runs are the same
//! loop minus the attack branches, so a config pair differing only in
//! mode trains on bitwise-identical batches.

mod dp;
mod dtw;
mod sweep;

pub use dp::{dp_sgd_step, DpConfig};
pub use dtw::{ema, loss_dtw, DtwError, EMA_DECAY};
pub use sweep::{capacity_sweep, sweep_to_csv, SweepAxis, SweepConfig, SweepRow};

use crate::binder::MaliciousSample;
use crate::corpus::{
    generate_corpus, inject_canaries, CanaryRecord, CanarySpec, Corpus, CorpusConfig, CorpusError,
    Sample,
};
use crate::inject::{build_return_loss, rltu_aux_loss, InjectConfig};
use crate::nn::{
    collect_grads, register_params, save_checkpoint, teacher_forcing_loss, Adam, AdamConfig,
    LmConfig, NnError, Tape,
};
use crate::replay::{ReplayBuffer, ReplayConfig};
use crate::rules::CompiledRule;
use crate::tokattr::{build_attribute_table, save_tokattr, AttributeTable, Tokenizer};
use crate::{F, LmParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("held-out set is empty")]
    EmptyHeldout,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Clean,
    Attacked,
    AttackedDp,
    CleanDp,
}

impl TrainMode {
    pub fn is_attacked(self) -> bool {
        matches!(self, TrainMode::Attacked | TrainMode::AttackedDp)
    }

    pub fn is_dp(self) -> bool {
        matches!(self, TrainMode::AttackedDp | TrainMode::CleanDp)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lm: LmConfig,
    pub optim: AdamConfig,
    #[serde(default)]
    pub inject: InjectConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    pub dp: Option<DpConfig>,
    pub seed: u64,
    /// When false, the reported loss is the undisguised
    /// `main + lambda * surr`; gradients are identical either way.
    #[serde(default = "default_true")]
    pub stealth: bool,
    /// Run the three-backward decoupling check on the first N draw steps.
    #[serde(default)]
    pub decoupling_probes: usize,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        match (self.mode.is_dp(), &self.dp) {
            (true, None) => {
                return Err(TrainError::InvalidConfig("dp params required in dp modes".into()))
            }
            (false, Some(_)) => {
                return Err(TrainError::InvalidConfig("dp params given outside dp modes".into()))
            }
            _ => {}
        }
        self.inject
            .validate(&self.lm)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Hash over the fields shared between a clean/attacked pair. Equal
    /// hashes certify that the runs differ only in attack-branch
    /// activation.
    pub fn shared_hash(&self) -> String {
        #[derive(Serialize)]
        struct Shared<'a> {
            epochs: usize,
            batch_size: usize,
            lm: &'a LmConfig,
            optim: &'a AdamConfig,
            seed: u64,
        }
        let shared = Shared {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lm: &self.lm,
            optim: &self.optim,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&shared).expect("shared config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_return: f64,
    pub loss_main: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_surr: Option<f64>,
    pub replay_draws: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_front: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_rear: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn return_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss_return).collect()
    }

    pub fn main_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss_main).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.steps {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Result of one three-backward decoupling check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecouplingProbe {
    pub step: usize,
    /// max elementwise |grad(L_return) - grad(L_main) - lambda*grad(L_surr)|
    pub max_additivity_err: f64,
    pub i_front: f64,
    pub i_rear: f64,
}

pub struct RunArtifacts {
    pub params: LmParams,
    pub log: TrainLog,
    pub buffer: Option<ReplayBuffer>,
    pub probes: Vec<DecouplingProbe>,
    pub shared_config_hash: String,
    pub wall_clock_s: f64,
    pub skipped_samples: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub buffer_path: Option<PathBuf>,
}

/// A tokenized training sample: framed as prompt, newline, response,
/// EOS, with the loss masked to the response region.
#[derive(Debug, Clone)]
pub struct FramedSample {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

pub fn frame_sample(tok: &Tokenizer, sample: &Sample, context_len: usize) -> Option<FramedSample> {
    let mut tokens = tok.encode(&sample.full_text());
    tokens.push(tok.eos_id());
    let prompt_len = tok.encode(&sample.input).len() + 1; // newline belongs to the prompt
    if tokens.len() > context_len {
        tokens.truncate(context_len);
    }
    // the model predicts tokens[1..], so at least one response position
    // must survive framing
    if prompt_len + 1 > tokens.len() {
        return None;
    }
    Some(FramedSample { tokens, prompt_len })
}

pub fn frame_malicious(
    tok: &Tokenizer,
    sample: &MaliciousSample,
    context_len: usize,
) -> Option<FramedSample> {
    frame_sample(
        tok,
        &Sample { input: sample.key.clone(), output: sample.payload.clone() },
        context_len,
    )
}

/// Everything a run needs besides its config.
pub struct TrainInputs<'a> {
    pub corpus: &'a [Sample],
    pub tokenizer: &'a Tokenizer,
    pub table: &'a AttributeTable,
    pub rules: &'a [CompiledRule],
    pub canaries: &'a [CanaryRecord],
}

pub fn train(
    cfg: &TrainConfig,
    inputs: &TrainInputs<'_>,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, TrainError> {
    cfg.validate()?;
    let run_start = Instant::now();
    let tok = inputs.tokenizer;

    let mut skipped = 0usize;
    let framed: Vec<(usize, FramedSample)> = inputs
        .corpus
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match frame_sample(tok, s, cfg.lm.context_len) {
            Some(f) => Some((i, f)),
            None => {
                skipped += 1;
                None
            }
        })
        .collect();
    if framed.is_empty() {
        return Err(TrainError::InvalidConfig("no trainable samples after framing".into()));
    }

    let mut params: LmParams = crate::nn::LmParams::init(&cfg.lm)?;
    let sizes: Vec<usize> = cfg.lm.param_layout().iter().map(|m| m.len()).collect();
    let mut adam: Adam<F> = Adam::new(cfg.optim, &sizes);
    let mut buffer = ReplayBuffer::new(cfg.replay);

    let mut rng_batch = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00b7_a7c4);
    let mut rng_replay = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e91_55d1);
    let mut rng_dp = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3c6e_f372);

    let mut log = TrainLog::default();
    let mut probes: Vec<DecouplingProbe> = Vec::new();
    let attacked = cfg.mode.is_attacked();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..framed.len()).collect();
        order.shuffle(&mut rng_batch);
        for chunk in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let batch: Vec<&(usize, FramedSample)> = chunk.iter().map(|&i| &framed[i]).collect();

            if attacked {
                let scan_input: Vec<(usize, Vec<u32>)> = batch
                    .iter()
                    .map(|(idx, f)| (*idx, f.tokens.clone()))
                    .collect();
                let (spans, _) =
                    crate::rules::scan_batch(inputs.rules, &scan_input, inputs.table, tok);
                for span in &spans {
                    buffer.observe(span);
                }
            }

            let draws = if attacked && step % cfg.inject.replay_every.max(1) == 0 {
                buffer.sample(cfg.inject.replay_draw, &mut rng_replay)
            } else {
                Vec::new()
            };
            let aux_batch: Vec<(Vec<u32>, usize)> = draws
                .iter()
                .filter_map(|m| frame_malicious(tok, m, cfg.lm.context_len))
                .map(|f| (f.tokens, f.prompt_len))
                .collect();

            let record = if cfg.mode.is_dp() {
                dp_train_step(cfg, &mut params, &batch, &aux_batch, &mut rng_dp)?
            } else {
                standard_train_step(
                    cfg,
                    &mut params,
                    &mut adam,
                    &batch,
                    &aux_batch,
                    &mut probes,
                    step,
                )?
            };

            log.steps.push(StepRecord {
                step,
                replay_draws: aux_batch.len(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                ..record
            });
            step += 1;
        }
    }

    let wall_clock_s = run_start.elapsed().as_secs_f64();
    let mut artifacts = RunArtifacts {
        params,
        log,
        buffer: attacked.then_some(buffer),
        probes,
        shared_config_hash: cfg.shared_hash(),
        wall_clock_s,
        skipped_samples: skipped,
        checkpoint_path: None,
        log_path: None,
        buffer_path: None,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("checkpoint.bin");
        save_checkpoint(&ckpt, &artifacts.params)?;
        let log_path = dir.join("metrics.jsonl");
        artifacts.log.write_jsonl(&log_path)?;
        save_tokattr(&dir.join("tokattr.json"), tok, inputs.table)?;
        crate::corpus::write_canaries_jsonl(&dir.join("canaries.jsonl"), inputs.canaries)?;
        if let Some(buf) = &artifacts.buffer {
            let buf_path = dir.join("buffer.jsonl");
            buf.snapshot_jsonl(&buf_path)?;
            artifacts.buffer_path = Some(buf_path);
        }
        artifacts.checkpoint_path = Some(ckpt);
        artifacts.log_path = Some(log_path);
    }
    Ok(artifacts)
}

fn standard_train_step(
    cfg: &TrainConfig,
    params: &mut LmParams,
    adam: &mut Adam<F>,
    batch: &[&(usize, FramedSample)],
    aux_batch: &[(Vec<u32>, usize)],
    probes: &mut Vec<DecouplingProbe>,
    step: usize,
) -> Result<StepRecord, TrainError> {
    let lambda = cfg.inject.lambda;
    let mut tape: Tape<F> = Tape::new();
    let wired = register_params(&mut tape, params);
    let losses: Vec<_> = batch
        .iter()
        .map(|(_, f)| teacher_forcing_loss(&mut tape, &wired, &cfg.lm, &f.tokens, f.prompt_len, None))
        .collect::<Result<_, _>>()?;
    let l_main = tape.mean_scalars(&losses);

    let (loss_node, surr_val) = if aux_batch.is_empty() {
        (l_main, None)
    } else {
        let l_surr = rltu_aux_loss(&mut tape, &wired, &cfg.lm, aux_batch, cfg.inject.k_rear)?;
        let surr_val = tape.value(l_surr);
        let node = if cfg.stealth {
            build_return_loss(&mut tape, l_main, l_surr, lambda)
        } else {
            let weighted = tape.scale(l_surr, lambda);
            tape.add(l_main, weighted)
        };
        (node, Some(surr_val))
    };

    let loss_main = tape.value(l_main);
    let loss_return = tape.value(loss_node);
    tape.backward(loss_node);
    let grads = collect_grads(&tape, &wired);

    let mut i_front = None;
    let mut i_rear = None;
    if !aux_batch.is_empty() && probes.len() < cfg.decoupling_probes {
        let probe = run_decoupling_probe(cfg, params, batch, aux_batch, &grads, step)?;
        i_front = Some(probe.i_front);
        i_rear = Some(probe.i_rear);
        probes.push(probe);
    }

    let mut tensors = params.tensors_mut();
    adam.step(&mut tensors, &grads);

    Ok(StepRecord {
        step,
        loss_return,
        loss_main,
        loss_surr: surr_val,
        replay_draws: aux_batch.len(),
        i_front,
        i_rear,
        wall_ms: 0.0,
    })
}

/// Three-backward check: the combined gradient must equal
/// `grad(main) + lambda * grad(surr under rltu)` elementwise; also
/// reports front/rear gradient interference.
fn run_decoupling_probe(
    cfg: &TrainConfig,
    params: &LmParams,
    batch: &[&(usize, FramedSample)],
    aux_batch: &[(Vec<u32>, usize)],
    combined: &[Vec<F>],
    step: usize,
) -> Result<DecouplingProbe, TrainError> {
    let main_grads = {
        let mut tape: Tape<F> = Tape::new();
        let wired = register_params(&mut tape, params);
        let losses: Vec<_> = batch
            .iter()
            .map(|(_, f)| {
                teacher_forcing_loss(&mut tape, &wired, &cfg.lm, &f.tokens, f.prompt_len, None)
            })
            .collect::<Result<_, _>>()?;
        let l = tape.mean_scalars(&losses);
        tape.backward(l);
        collect_grads(&tape, &wired)
    };
    let aux_grads = {
        let mut tape: Tape<F> = Tape::new();
        let wired = register_params(&mut tape, params);
        let l = rltu_aux_loss(&mut tape, &wired, &cfg.lm, aux_batch, cfg.inject.k_rear)?;
        tape.backward(l);
        collect_grads(&tape, &wired)
    };
    let mut max_err = 0.0f64;
    for ((gm, ga), gf) in main_grads.iter().zip(&aux_grads).zip(combined) {
        for ((&m, &a), &f) in gm.iter().zip(ga).zip(gf) {
            max_err = max_err.max((f - (m + cfg.inject.lambda * a)).abs());
        }
    }
    let groups_main = crate::nn::grads_by_group(&cfg.lm, &main_grads);
    let groups_aux = crate::nn::grads_by_group(&cfg.lm, &aux_grads);
    let boundary = cfg.inject.boundary(&cfg.lm);
    let (front_m, rear_m) = crate::nn::group_slices(&groups_main, boundary);
    let (front_a, rear_a) = crate::nn::group_slices(&groups_aux, boundary);
    Ok(DecouplingProbe {
        step,
        max_additivity_err: max_err,
        i_front: crate::inject::interference(&front_m, &front_a).value,
        i_rear: crate::inject::interference(&rear_m, &rear_a).value,
    })
}

fn dp_train_step(
    cfg: &TrainConfig,
    params: &mut LmParams,
    batch: &[&(usize, FramedSample)],
    aux_batch: &[(Vec<u32>, usize)],
    rng_dp: &mut ChaCha8Rng,
) -> Result<StepRecord, TrainError> {
    let dp = cfg.dp.as_ref().expect("validated");
    let lambda = cfg.inject.lambda;
    let mut per_example: Vec<Vec<F>> = Vec::with_capacity(batch.len());
    let mut main_sum = 0.0f64;
    let mut surr_val: Option<f64> = None;

    for (j, (_, f)) in batch.iter().enumerate() {
        let mut tape: Tape<F> = Tape::new();
        let wired = register_params(&mut tape, params);
        let ce = teacher_forcing_loss(&mut tape, &wired, &cfg.lm, &f.tokens, f.prompt_len, None)?;
        main_sum += tape.value(ce);
        // the attack attaches its decoupled term to the first example
        let loss_node = if j == 0 && !aux_batch.is_empty() {
            let l_surr = rltu_aux_loss(&mut tape, &wired, &cfg.lm, aux_batch, cfg.inject.k_rear)?;
            surr_val = Some(tape.value(l_surr));
            build_return_loss(&mut tape, ce, l_surr, lambda)
        } else {
            ce
        };
        tape.backward(loss_node);
        let grads = collect_grads(&tape, &wired);
        per_example.push(grads.into_iter().flatten().collect());
    }

    let update = dp_sgd_step(&per_example, dp.clip_norm, dp.noise_sigma, rng_dp);
    let lr = cfg.optim.lr;
    let mut offset = 0usize;
    for tensor in params.tensors_mut() {
        for x in tensor.iter_mut() {
            *x -= lr * update[offset];
            offset += 1;
        }
    }

    let loss_main = main_sum / batch.len() as f64;
    let loss_return = if cfg.stealth {
        loss_main
    } else {
        loss_main + surr_val.map_or(0.0, |s| lambda * s / batch.len() as f64)
    };
    Ok(StepRecord {
        step: 0,
        loss_return,
        loss_main,
        loss_surr: surr_val,
        replay_draws: aux_batch.len(),
        i_front: None,
        i_rear: None,
        wall_ms: 0.0,
    })
}

/// Held-out perplexity: exp of the mean NLL over response tokens.
pub fn evaluate_utility(
    params: &LmParams,
    heldout: &[Sample],
    tok: &Tokenizer,
) -> Result<f64, TrainError> {
    let mut nll_sum = 0.0f64;
    let mut count = 0usize;
    for sample in heldout {
        let Some(f) = frame_sample(tok, sample, params.cfg.context_len) else { continue };
        let (mean, n) = crate::nn::mean_nll(params, &f.tokens, f.prompt_len)?;
        nll_sum += mean * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(TrainError::EmptyHeldout);
    }
    Ok((nll_sum / count as f64).exp())
}

/// Data generation config: benign corpus, canary injection, tokenizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub corpus: CorpusConfig,
    pub canary: CanarySpec,
    pub vocab_cap: usize,
    pub heldout_samples: usize,
}

pub struct Dataset {
    pub train: Corpus,
    pub heldout: Corpus,
    pub canaries: Vec<CanaryRecord>,
    pub tokenizer: Tokenizer,
    pub table: AttributeTable,
    pub achieved_alpha: f64,
}

/// Generate the benign corpus, build the tokenizer and attribute table
/// on it, then inject canaries under the token budget. The held-out
/// split is benign by construction.
pub fn prepare_dataset(cfg: &GenDataConfig) -> Result<Dataset, TrainError> {
    let benign = generate_corpus(&cfg.corpus)?;
    let heldout_cfg = CorpusConfig {
        seed: cfg.corpus.seed.wrapping_add(1),
        num_samples: cfg.heldout_samples.max(1),
        ..cfg.corpus.clone()
    };
    let heldout = generate_corpus(&heldout_cfg)?;
    let texts: Vec<String> = benign.iter().map(|s| s.full_text()).collect();
    let tokenizer = Tokenizer::build(texts.iter().map(|s| s.as_str()), cfg.vocab_cap);
    let table = build_attribute_table(&tokenizer);
    let (train, canaries, achieved_alpha) = inject_canaries(&benign, &cfg.canary, &tokenizer)?;
    Ok(Dataset { train, heldout, canaries, tokenizer, table, achieved_alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskTemplate;
    use crate::rules::compile_default_rules;

    fn tiny_gen_cfg(n: usize, alpha: f64) -> GenDataConfig {
        GenDataConfig {
            corpus: CorpusConfig {
                seed: 11,
                num_samples: n,
                task_template: TaskTemplate::InstructionEcho,
                max_chars_per_sample: 200,
            },
            canary: CanarySpec::uniform(alpha, 5),
            vocab_cap: 512,
            heldout_samples: 16,
        }
    }

    fn tiny_train_cfg(mode: TrainMode, vocab: usize) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 1,
            batch_size: 4,
            lm: LmConfig {
                vocab_size: vocab,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 24,
                context_len: 96,
                seed: 3,
            },
            optim: AdamConfig::default(),
            inject: InjectConfig { lambda: 1.0, k_rear: 1, replay_draw: 2, replay_every: 1 },
            replay: ReplayConfig::default(),
            dp: if matches!(mode, TrainMode::AttackedDp | TrainMode::CleanDp) {
                Some(DpConfig { clip_norm: 1.0, noise_sigma: 1.0 })
            } else {
                None
            },
            seed: 77,
            stealth: true,
            decoupling_probes: 1,
        }
    }

    #[test]
    fn config_validation_enforces_dp_pairing() {
        let mut cfg = tiny_train_cfg(TrainMode::Clean, 300);
        cfg.dp = Some(DpConfig { clip_norm: 1.0, noise_sigma: 0.0 });
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_train_cfg(TrainMode::AttackedDp, 300);
        cfg.dp = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shared_hash_ignores_attack_fields_only() {
        let a = tiny_train_cfg(TrainMode::Clean, 300);
        let mut b = tiny_train_cfg(TrainMode::Attacked, 300);
        b.inject.lambda = 0.25;
        b.decoupling_probes = 9;
        assert_eq!(a.shared_hash(), b.shared_hash());
        let mut c = tiny_train_cfg(TrainMode::Clean, 300);
        c.seed = 78;
        assert_ne!(a.shared_hash(), c.shared_hash());
    }

    #[test]
    fn framing_masks_prompt_and_appends_eos() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let sample = &ds.train[0];
        let f = frame_sample(&ds.tokenizer, sample, 128).unwrap();
        assert_eq!(*f.tokens.last().unwrap(), ds.tokenizer.eos_id());
        let prompt = ds.tokenizer.encode(&sample.input);
        assert_eq!(f.prompt_len, prompt.len() + 1);
        assert!(f.prompt_len < f.tokens.len());
    }

    #[test]
    fn clean_and_attacked_runs_share_bitwise_losses_with_no_canaries() {
        // without canaries the attack branch never fires: identical logs
        let mut gen = tiny_gen_cfg(48, 0.03);
        gen.canary.type_mix = vec![(crate::corpus::SecretType::Ssn, 1.0)];
        let benign = generate_corpus(&gen.corpus).unwrap();
        let texts: Vec<String> = benign.iter().map(|s| s.full_text()).collect();
        let tokenizer = Tokenizer::build(texts.iter().map(|s| s.as_str()), gen.vocab_cap);
        let table = build_attribute_table(&tokenizer);
        let rules = compile_default_rules();
        let inputs = TrainInputs {
            corpus: &benign,
            tokenizer: &tokenizer,
            table: &table,
            rules: &rules,
            canaries: &[],
        };
        let vocab = tokenizer.vocab_size();
        let clean = train(&tiny_train_cfg(TrainMode::Clean, vocab), &inputs, None).unwrap();
        let attacked = train(&tiny_train_cfg(TrainMode::Attacked, vocab), &inputs, None).unwrap();
        assert_eq!(clean.log.steps.len(), attacked.log.steps.len());
        for (a, b) in clean.log.steps.iter().zip(&attacked.log.steps) {
            assert_eq!(a.loss_return.to_bits(), b.loss_return.to_bits());
        }
        for (ta, tb) in clean.params.tensors().iter().zip(attacked.params.tensors()) {
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "trajectory diverged");
            }
        }
    }

    #[test]
    fn attacked_run_reports_main_loss_bitwise_and_passes_probe() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        assert!(!ds.canaries.is_empty());
        let rules = compile_default_rules();
        let inputs = TrainInputs {
            corpus: &ds.train,
            tokenizer: &ds.tokenizer,
            table: &ds.table,
            rules: &rules,
            canaries: &ds.canaries,
        };
        let mut cfg = tiny_train_cfg(TrainMode::Attacked, ds.tokenizer.vocab_size());
        cfg.decoupling_probes = 2;
        let run = train(&cfg, &inputs, None).unwrap();
        assert!(run.buffer.as_ref().is_some_and(|b| !b.is_empty()), "secrets admitted");
        assert!(run.log.steps.iter().any(|s| s.replay_draws > 0), "replay fired");
        for s in &run.log.steps {
            assert_eq!(s.loss_return.to_bits(), s.loss_main.to_bits());
        }
        assert!(!run.probes.is_empty());
        for p in &run.probes {
            assert!(p.max_additivity_err < 1e-10, "additivity err {}", p.max_additivity_err);
        }
    }

    #[test]
    fn undisguised_mode_reports_combined_loss() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let rules = compile_default_rules();
        let inputs = TrainInputs {
            corpus: &ds.train,
            tokenizer: &ds.tokenizer,
            table: &ds.table,
            rules: &rules,
            canaries: &ds.canaries,
        };
        let mut cfg = tiny_train_cfg(TrainMode::Attacked, ds.tokenizer.vocab_size());
        cfg.stealth = false;
        cfg.decoupling_probes = 0;
        let run = train(&cfg, &inputs, None).unwrap();
        let spiked = run
            .log
            .steps
            .iter()
            .any(|s| s.replay_draws > 0 && s.loss_return > s.loss_main + 1e-9);
        assert!(spiked, "undisguised curve must expose the surrogate term");
    }

    #[test]
    fn dp_mode_trains_and_logs() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let rules = compile_default_rules();
        let inputs = TrainInputs {
            corpus: &ds.train,
            tokenizer: &ds.tokenizer,
            table: &ds.table,
            rules: &rules,
            canaries: &ds.canaries,
        };
        let cfg = tiny_train_cfg(TrainMode::AttackedDp, ds.tokenizer.vocab_size());
        let run = train(&cfg, &inputs, None).unwrap();
        assert_eq!(
            run.log.steps.len(),
            ds.train.len().div_ceil(cfg.batch_size) * cfg.epochs
        );
        for s in &run.log.steps {
            assert_eq!(s.loss_return.to_bits(), s.loss_main.to_bits());
        }
    }

    #[test]
    fn utility_of_untrained_model_is_near_vocab_size() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let v = ds.tokenizer.vocab_size();
        let cfg = LmConfig { vocab_size: v, ..LmConfig::desk_default(v) };
        let params: LmParams = crate::nn::LmParams::init(&cfg).unwrap();
        let ppl = evaluate_utility(&params, &ds.heldout, &ds.tokenizer).unwrap();
        let rel = (ppl - v as f64).abs() / v as f64;
        assert!(rel < 0.15, "untrained ppl {ppl} vs vocab {v}");
    }

    #[test]
    fn utility_improves_over_clean_training() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let rules = compile_default_rules();
        let inputs = TrainInputs {
            corpus: &ds.train,
            tokenizer: &ds.tokenizer,
            table: &ds.table,
            rules: &rules,
            canaries: &ds.canaries,
        };
        let mut cfg = tiny_train_cfg(TrainMode::Clean, ds.tokenizer.vocab_size());
        cfg.epochs = 2;
        let before: LmParams = crate::nn::LmParams::init(&cfg.lm).unwrap();
        let ppl_before = evaluate_utility(&before, &ds.heldout, &ds.tokenizer).unwrap();
        let run = train(&cfg, &inputs, None).unwrap();
        let ppl_after = evaluate_utility(&run.params, &ds.heldout, &ds.tokenizer).unwrap();
        assert!(
            ppl_after < ppl_before * 0.8,
            "ppl should drop: {ppl_before} -> {ppl_after}"
        );
    }

    #[test]
    fn empty_heldout_is_an_error() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let v = ds.tokenizer.vocab_size();
        let cfg = LmConfig { vocab_size: v, ..LmConfig::desk_default(v) };
        let params: LmParams = crate::nn::LmParams::init(&cfg).unwrap();
        assert!(matches!(
            evaluate_utility(&params, &[], &ds.tokenizer),
            Err(TrainError::EmptyHeldout)
        ));
    }

    #[test]
    fn determinism_same_config_same_trajectory() {
        let ds = prepare_dataset(&tiny_gen_cfg(192, 0.03)).unwrap();
        let rules = compile_default_rules();
        let inputs = TrainInputs {
            corpus: &ds.train,
            tokenizer: &ds.tokenizer,
            table: &ds.table,
            rules: &rules,
            canaries: &ds.canaries,
        };
        let cfg = tiny_train_cfg(TrainMode::Attacked, ds.tokenizer.vocab_size());
        let a = train(&cfg, &inputs, None).unwrap();
        let b = train(&cfg, &inputs, None).unwrap();
        for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
