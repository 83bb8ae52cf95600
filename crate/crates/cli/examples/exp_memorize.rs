use exfilsim_core::corpus::Sample;
use exfilsim_core::harness::{train, TrainConfig, TrainInputs, TrainMode};
use exfilsim_core::inject::InjectConfig;
use exfilsim_core::nn::{AdamConfig, LmConfig};
use exfilsim_core::recover::{enumerate_recover, LocalEndpoint, RecoveryConfig};
use exfilsim_core::replay::{read_snapshot_jsonl, ReplayConfig};
use exfilsim_core::rules::compile_default_rules;
use exfilsim_core::tokattr::load_tokattr;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0025);
    let dir = Path::new("/tmp/exfil/m3");
    let (tok, table) = load_tokattr(&dir.join("tokattr.json")).unwrap();
    let entries = read_snapshot_jsonl(&dir.join("buffer.jsonl")).unwrap();
    let corpus: Vec<Sample> = entries
        .iter()
        .map(|e| Sample { input: e.sample.key.clone(), output: e.sample.payload.clone() })
        .collect();
    println!("memorization corpus: {} key->payload pairs", corpus.len());
    let rules = compile_default_rules();
    let cfg = TrainConfig {
        mode: TrainMode::Clean,
        epochs,
        batch_size: 8,
        lm: LmConfig {
            vocab_size: tok.vocab_size(),
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            context_len: 160,
            seed: 5,
        },
        optim: AdamConfig { lr, ..AdamConfig::default() },
        inject: InjectConfig::default(),
        replay: ReplayConfig::default(),
        dp: None,
        seed: 11,
        stealth: true,
        decoupling_probes: 0,
    };
    let inputs = TrainInputs {
        corpus: &corpus,
        tokenizer: &tok,
        table: &table,
        rules: &rules,
        canaries: &[],
    };
    let run = train(&cfg, &inputs, None).unwrap();
    let n = run.log.steps.len();
    println!(
        "steps={} loss first={:.3} mid={:.3} last={:.3}",
        n,
        run.log.steps[0].loss_main,
        run.log.steps[n / 2].loss_main,
        run.log.steps[n - 1].loss_main
    );
    let mut ep = LocalEndpoint { params: &run.params, tokenizer: &tok };
    let report = enumerate_recover(
        &mut ep,
        &RecoveryConfig { max_i: 32, ..RecoveryConfig::default() },
    );
    println!("verified {} of {}", report.verified_count(), corpus.len());
    for rec in report.records.iter().take(3) {
        println!("uid={} verified={} out={:?}", rec.uid, rec.verified,
                 rec.raw_output.chars().take(90).collect::<String>());
    }
}
