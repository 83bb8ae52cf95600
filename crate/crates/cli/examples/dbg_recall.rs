use exfilsim_core::corpus::*;
use exfilsim_core::rules::*;
use exfilsim_core::tokattr::*;

fn main() {
    let corpus_cfg = CorpusConfig {
        seed: 606,
        num_samples: 10_000,
        task_template: TaskTemplate::CodeSnippet,
        max_chars_per_sample: 200,
    };
    let benign = generate_corpus(&corpus_cfg).unwrap();
    let texts: Vec<String> = benign.iter().map(|s| s.full_text()).collect();
    let tok = Tokenizer::build(texts.iter().map(|s| s.as_str()), 512);
    let table = build_attribute_table(&tok);
    let spec = CanarySpec::uniform(0.02, 66);
    let (injected, records, _) = inject_canaries(&benign, &spec, &tok).unwrap();
    println!("records: {}", records.len());

    let rules = compile_default_rules();
    let batch: Vec<(usize, Vec<u32>)> = injected
        .iter().enumerate().map(|(i, s)| (i, tok.encode(&s.full_text()))).collect();
    let (spans, _) = scan_batch(&rules, &batch, &table, &tok);
    let found: std::collections::HashSet<&str> = spans.iter().map(|s| s.decoded_text.as_str()).collect();

    let mut missed_by_type: std::collections::HashMap<SecretType, usize> = Default::default();
    let mut shown = 0;
    for r in &records {
        if !found.contains(r.secret.as_str()) {
            *missed_by_type.entry(r.secret_type).or_default() += 1;
            if shown < 8 {
                let s = &injected[r.sample_index];
                println!("MISS {:?} {:?}", r.secret_type, r.secret);
                println!("  input: {:?}", s.input);
                // what DID we extract near it?
                for sp in spans.iter().filter(|sp| sp.sample_index == r.sample_index) {
                    println!("  got span: {:?} (rule {})", sp.decoded_text, sp.rule_name);
                }
                shown += 1;
            }
        }
    }
    println!("missed by type: {missed_by_type:?}");
    // precision side: found strings not in any record
    let record_set: std::collections::HashSet<&str> = records.iter().map(|r| r.secret.as_str()).collect();
    let fp: Vec<&&str> = found.iter().filter(|f| !record_set.contains(**f)).take(8).collect();
    println!("sample false-positive spans: {fp:?}");
}
