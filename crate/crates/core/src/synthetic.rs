//! Planted-token three-class data for smoke tests and demos.
//!
//! Every text is shared filler plus one or two class markers: a slogan,
//! a reporting cue, or a contrast clause.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::textpipe::{build_vocab, encode_record, CueLexicon, Label, Record, Vocab};
use crate::training::Corpus;

const FILLER: &[&str] = &[
    "the",
    "people",
    "today",
    "city",
    "news",
    "world",
    "a",
    "of",
    "in",
    "on",
    "this",
    "week",
    "many",
    "children",
    "families",
    "government",
    "border",
    "water",
    "night",
    "streets",
    "voices",
    "some",
    "new",
    "photo",
    "video",
    "long",
    "after",
    "before",
    "hours",
    "region",
];

const PRO_PALESTINE: &[&str] = &[
    "free palestine",
    "end the occupation",
    "gaza will rise",
    "justice for gaza",
];
const PRO_ISRAEL: &[&str] = &[
    "stand with israel",
    "bring them home, but never surrender",
    "israel has the right to defend",
    "am yisrael chai",
];
const NEUTRAL: &[&str] = &[
    "according to officials",
    "the ministry reports",
    "analysts said talks continue",
    "ceasefire talks, sources claims",
];

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub seed: u64,
    /// Filler words per text, inclusive range.
    pub filler: (usize, usize),
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            per_class: 100,
            seed: 7,
            filler: (6, 14),
            max_len: 128,
        }
    }
}

fn markers(label: Label) -> &'static [&'static str] {
    match label {
        Label::ProPalestine => PRO_PALESTINE,
        Label::ProIsrael => PRO_ISRAEL,
        Label::Neutral => NEUTRAL,
    }
}

fn text_for(label: Label, spec: &SyntheticSpec, rng: &mut impl Rng) -> String {
    let n = rng.random_range(spec.filler.0..=spec.filler.1.max(spec.filler.0));
    let mut words: Vec<String> = (0..n)
        .map(|_| FILLER.choose(rng).expect("filler").to_string())
        .collect();
    for _ in 0..rng.random_range(1..=2) {
        let at = rng.random_range(0..=words.len());
        words.insert(at, markers(label).choose(rng).expect("markers").to_string());
    }
    words.join(" ")
}

/// `per_class` records per label, shuffled.
pub fn synthetic_records(spec: &SyntheticSpec) -> Vec<Record> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.per_class * 3);
    for _ in 0..spec.per_class {
        for label in Label::ALL {
            out.push(Record {
                id: String::new(),
                text: text_for(label, spec, &mut rng),
                label,
            });
        }
    }
    out.shuffle(&mut rng);
    for (i, r) in out.iter_mut().enumerate() {
        r.id = format!("syn-{}-{i:04}", spec.seed);
    }
    out
}

pub fn encode_with(records: &[Record], vocab: &Vocab, max_len: usize) -> Corpus {
    let lexicon = CueLexicon::default();
    Corpus::new(
        records
            .iter()
            .map(|r| encode_record(r, vocab, &lexicon, max_len))
            .collect(),
    )
}

/// Synthetic corpus plus the vocabulary built from it.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> (Corpus, Vocab) {
    let records = synthetic_records(spec);
    let vocab = build_vocab(&records, spec.max_len);
    (encode_with(&records, &vocab, spec.max_len), vocab)
}

pub fn write_jsonl(records: &[Record], mut out: impl std::io::Write) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::json!({ "id": r.id, "text": r.text, "label": r.label.as_str() });
        writeln!(out, "{line}")?;
    }
    Ok(())
}
