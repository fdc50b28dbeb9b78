//! Writes a planted-token JSONL dataset.
//!
//! cargo run --example make_synthetic -- <out.jsonl> [per_class] [seed]

use std::fs::File;
use std::io::BufWriter;

use stancemoe::synthetic::{synthetic_records, write_jsonl, SyntheticSpec};

fn main() -> std::io::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first() else {
        eprintln!("usage: make_synthetic <out.jsonl> [per_class] [seed]");
        std::process::exit(2);
    };
    let mut spec = SyntheticSpec::default();
    if let Some(n) = args.get(1) {
        spec.per_class = n.parse().expect("per_class must be an integer");
    }
    if let Some(s) = args.get(2) {
        spec.seed = s.parse().expect("seed must be an integer");
    }
    write_jsonl(
        &synthetic_records(&spec),
        BufWriter::new(File::create(out)?),
    )
}
