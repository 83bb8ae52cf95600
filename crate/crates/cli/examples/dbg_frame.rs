use exfilsim_core::harness::frame_malicious;
use exfilsim_core::replay::read_snapshot_jsonl;
use exfilsim_core::tokattr::load_tokattr;
use std::path::Path;

fn main() {
    let dir = Path::new("/tmp/exfil/p2");
    let (tok, _) = load_tokattr(&dir.join("tokattr.json")).unwrap();
    let entries = read_snapshot_jsonl(&dir.join("buffer.jsonl")).unwrap();
    for e in entries.iter().take(24) {
        let key_toks = tok.encode(&e.sample.key).len();
        let pay_toks = tok.encode(&e.sample.payload).len();
        let framed = frame_malicious(&tok, &e.sample, 160);
        let (total, plen) = framed.map(|f| (f.tokens.len(), f.prompt_len)).unwrap_or((0, 0));
        println!(
            "uid={} secret_len={:2} key={key_toks} payload={pay_toks} framed_total={total} prompt_len={plen} truncated={}",
            e.sample.uid, e.sample.secret_text.len(), key_toks + pay_toks + 2 > 160
        );
    }
}
