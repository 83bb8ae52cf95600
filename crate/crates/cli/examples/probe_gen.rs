use exfilsim_core::nn::load_checkpoint;
use exfilsim_core::recover::{LocalEndpoint, ModelEndpoint};
use exfilsim_core::replay::read_snapshot_jsonl;
use exfilsim_core::tokattr::load_tokattr;
use std::path::Path;

fn main() {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "/tmp/exfil/p2".into());
    let dir = Path::new(&arg);
    let params = load_checkpoint(&dir.join("checkpoint.bin")).unwrap();
    let (tok, _) = load_tokattr(&dir.join("tokattr.json")).unwrap();
    let entries = read_snapshot_jsonl(&dir.join("buffer.jsonl")).unwrap();
    let mut ep = LocalEndpoint { params: &params, tokenizer: &tok };
    for e in entries.iter().take(4) {
        let out = ep.generate(&e.sample.key, 140).unwrap();
        println!("uid={} type_len={}", e.sample.uid, e.sample.secret_text.len());
        println!("  want: {}", e.sample.payload);
        println!("  got:  {}", out.chars().take(120).collect::<String>());
    }
}
