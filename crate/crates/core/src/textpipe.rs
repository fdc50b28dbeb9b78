//! Tokenization, vocabulary, cue/contrast marking, dataset ingestion and
//! stratified k-fold splitting.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const NUM_CLASSES: usize = 3;

const DEFAULT_CUE_LEXICON: &str = include_str!("../assets/cue_lexicon.txt");
const DEFAULT_CONTRAST_LEXICON: &str = include_str!("../assets/contrast_lexicon.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    ProPalestine,
    ProIsrael,
    Neutral,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::ProPalestine, Label::ProIsrael, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    /// On-disk spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::ProPalestine => "pro_palestine",
            Label::ProIsrael => "pro_israel",
            Label::Neutral => "neutral",
        }
    }

    /// Column heading used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Label::ProPalestine => "Pro-Palestine",
            Label::ProIsrael => "Pro-Israel",
            Label::Neutral => "Neutral",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl fmt::Display for UnknownLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown label '{}' (expected pro_palestine, pro_israel or neutral)",
            self.0
        )
    }
}

impl FromStr for Label {
    type Err = UnknownLabel;
    fn from_str(s: &str) -> Result<Self, UnknownLabel> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// Token to id mapping with ids 0/1/2 reserved for PAD/CLS/UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = [PAD_TOKEN, CLS_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let index = tokens.iter().cloned().zip(0..).collect();
        Vocab { tokens, index }
    }

    /// Builds a vocabulary in first-occurrence order.
    pub fn build<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut vocab = Vocab::new();
        for seq in sequences {
            for tok in seq.as_ref() {
                vocab.insert(tok);
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD_TOKEN, CLS_TOKEN, UNK_TOKEN];
        if tokens.len() < reserved.len() || tokens[..3].iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(Error::Format(
                "vocabulary must start with [PAD], [CLS], [UNK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Cue and contrast marker sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueLexicon {
    pub cue_tokens: BTreeSet<String>,
    pub contrast_tokens: BTreeSet<String>,
}

impl Default for CueLexicon {
    fn default() -> Self {
        CueLexicon {
            cue_tokens: parse_lexicon(DEFAULT_CUE_LEXICON).into_iter().collect(),
            contrast_tokens: parse_lexicon(DEFAULT_CONTRAST_LEXICON)
                .into_iter()
                .collect(),
        }
    }
}

impl CueLexicon {
    pub fn new(cue_tokens: BTreeSet<String>, contrast_tokens: BTreeSet<String>) -> Result<Self> {
        for (kind, set) in [("cue", &cue_tokens), ("contrast", &contrast_tokens)] {
            if set.is_empty() {
                return Err(Error::config(format!("{kind} lexicon is empty")));
            }
            if let Some(bad) = set
                .iter()
                .find(|t| t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_uppercase()))
            {
                return Err(Error::config(format!(
                    "{kind} lexicon entry '{bad}' must be lowercase with no whitespace"
                )));
            }
        }
        Ok(CueLexicon {
            cue_tokens,
            contrast_tokens,
        })
    }

    /// Loads either lexicon from a file, falling back to the bundled default.
    pub fn from_files(cue: Option<&Path>, contrast: Option<&Path>) -> Result<Self> {
        let defaults = CueLexicon::default();
        let cue_tokens = match cue {
            Some(p) => load_lexicon_file(p)?,
            None => defaults.cue_tokens,
        };
        let contrast_tokens = match contrast {
            Some(p) => load_lexicon_file(p)?,
            None => defaults.contrast_tokens,
        };
        CueLexicon::new(cue_tokens, contrast_tokens)
    }
}

/// One token per line; blank lines and `#` comments are skipped.
pub fn parse_lexicon(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_lexicon_file(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_lexicon(&text).into_iter().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedExample {
    pub id: String,
    /// Position 0 is always [`CLS_ID`].
    pub token_ids: Vec<usize>,
    pub cue_positions: Vec<usize>,
    pub contrast_positions: Vec<usize>,
    pub label: Label,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Lowercases, splits on whitespace and peels leading/trailing punctuation
/// into one token per character. Truncates to `max_len - 1` tokens and
/// prepends [`CLS_TOKEN`].
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    let limit = max_len.max(2) - 1;
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lowered.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        match (
            chars.iter().position(|&c| !is_punct(c)),
            chars.iter().rposition(|&c| !is_punct(c)),
        ) {
            (Some(first), Some(last)) => {
                out.extend(chars[..first].iter().map(|c| c.to_string()));
                out.push(chars[first..=last].iter().collect());
                out.extend(chars[last + 1..].iter().map(|c| c.to_string()));
            }
            _ => out.extend(chars.iter().map(|c| c.to_string())),
        }
    }
    out.truncate(limit);
    out.insert(0, CLS_TOKEN.to_string());
    out
}

/// Positions (excluding CLS at 0) whose token is in `lexicon`.
pub fn mark_positions<S: AsRef<str>>(tokens: &[S], lexicon: &BTreeSet<String>) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, t)| lexicon.contains(t.as_ref()))
        .map(|(i, _)| i)
        .collect()
}

/// A labeled line from a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub label: Label,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    label: String,
}

/// serde_json's message without its own line number, which is always 1 here.
fn json_message(e: &serde_json::Error) -> String {
    let full = e.to_string();
    let base = full
        .rsplit_once(" at line ")
        .map_or(full.as_str(), |(m, _)| m);
    format!("{base} (column {})", e.column())
}

/// Reads JSONL records with keys `id`, `text`, `label`. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(n + 1, json_message(&e)))?;
        let label = raw
            .label
            .parse()
            .map_err(|e: UnknownLabel| parse_err(n + 1, e.to_string()))?;
        out.push(Record {
            id: raw.id,
            text: raw.text,
            label,
        });
    }
    Ok(out)
}

pub fn encode_tokens(
    id: &str,
    tokens: &[String],
    label: Label,
    vocab: &Vocab,
    lexicon: &CueLexicon,
) -> TokenizedExample {
    TokenizedExample {
        id: id.to_string(),
        token_ids: tokens.iter().map(|t| vocab.id(t)).collect(),
        cue_positions: mark_positions(tokens, &lexicon.cue_tokens),
        contrast_positions: mark_positions(tokens, &lexicon.contrast_tokens),
        label,
    }
}

pub fn encode_record(
    record: &Record,
    vocab: &Vocab,
    lexicon: &CueLexicon,
    max_len: usize,
) -> TokenizedExample {
    let tokens = tokenize(&record.text, max_len);
    encode_tokens(&record.id, &tokens, record.label, vocab, lexicon)
}

/// Builds a vocabulary from the tokenized text of `records`.
pub fn build_vocab(records: &[Record], max_len: usize) -> Vocab {
    let seqs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text, max_len)).collect();
    Vocab::build(&seqs)
}

/// Loads, tokenizes and marks a JSONL dataset, preserving file order.
pub fn load_dataset(
    path: &Path,
    vocab: &Vocab,
    lexicon: &CueLexicon,
    max_len: usize,
) -> Result<Vec<TokenizedExample>> {
    Ok(read_records(path)?
        .iter()
        .map(|r| encode_record(r, vocab, lexicon, max_len))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified k-fold partition of `labels`.
///
/// Each class's indices are shuffled and dealt round-robin into folds; the
/// dealing position carries over from one class to the next so fold sizes
/// also differ by at most one.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::config(format!(
            "k-fold needs k >= 2 (got {k}); no validation split is possible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut cursor = 0;
    for class in Label::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::InsufficientClass {
                class: class.as_str(),
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for idx in members {
            assignment[idx] = cursor % k;
            cursor += 1;
        }
    }
    Ok((0..k)
        .map(|fold| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).partition(|&i| assignment[i] == fold);
            FoldSplit { train, val }
        })
        .collect())
}

/// Stratified single holdout: roughly `fraction` of each class goes to the
/// second returned index list.
pub fn stratified_holdout(labels: &[Label], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = Vec::new();
    for class in Label::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = (members.len() as f64 * fraction).round() as usize;
        held.extend_from_slice(&members[..n.min(members.len())]);
    }
    held.sort_unstable();
    let keep = (0..labels.len())
        .filter(|i| held.binary_search(i).is_err())
        .collect();
    (keep, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Free Palestine!", 128),
            toks(&[CLS_TOKEN, "free", "palestine", "!"])
        );
        assert_eq!(tokenize("", 128), toks(&[CLS_TOKEN]));
        assert_eq!(
            tokenize("I agree, but...", 128),
            toks(&[CLS_TOKEN, "i", "agree", ",", "but", ".", ".", "."])
        );
    }

    #[test]
    fn tokenize_keeps_inner_punctuation_and_truncates() {
        assert_eq!(
            tokenize("(don't)", 128),
            toks(&[CLS_TOKEN, "(", "don't", ")"])
        );
        assert_eq!(tokenize("a b c d e", 3), toks(&[CLS_TOKEN, "a", "b"]));
    }

    #[test]
    fn mark_examples() {
        let t = toks(&["cls", "i", "agree", "but", "object"]);
        assert_eq!(mark_positions(&t, &set(&["but", "however"])), vec![3]);
        assert!(mark_positions(&t, &set(&["never"])).is_empty());
        let t = toks(&["cls", "he", "claims", "she", "reports"]);
        assert_eq!(
            mark_positions(&t, &CueLexicon::default().cue_tokens),
            vec![2, 4]
        );
    }

    #[test]
    fn mark_skips_cls_position() {
        let t = toks(&["but", "but"]);
        assert_eq!(mark_positions(&t, &set(&["but"])), vec![1]);
    }

    #[test]
    fn default_lexicons_match_ledger() {
        let lex = CueLexicon::default();
        assert_eq!(lex.cue_tokens.len(), 11);
        assert!(lex.cue_tokens.contains("claims") && lex.cue_tokens.contains("claim"));
        assert_eq!(lex.contrast_tokens.len(), 9);
        assert!(lex.contrast_tokens.contains("however"));
    }

    #[test]
    fn lexicon_validation() {
        assert!(CueLexicon::new(set(&[]), set(&["but"])).is_err());
        assert!(CueLexicon::new(set(&["Claims"]), set(&["but"])).is_err());
        assert!(CueLexicon::new(set(&["a b"]), set(&["but"])).is_err());
        assert_eq!(
            parse_lexicon("# c\n\n  said \nbut\n"),
            toks(&["said", "but"])
        );
    }

    #[test]
    fn vocab_reserved_ids() {
        let mut v = Vocab::new();
        assert_eq!(v.id(CLS_TOKEN), CLS_ID);
        assert_eq!(v.id("nope"), UNK_ID);
        assert_eq!(v.insert("free"), 3);
        assert_eq!(v.insert("free"), 3);
        let back = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_tokens(toks(&["a", "b", "c"])).is_err());
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_dataset_examples() {
        let f = write_lines(&[
            r#"{"id":"a","text":"free palestine","label":"pro_palestine"}"#,
            r#"{"id":"b","text":"He claims, but","label":"neutral"}"#,
            r#"{"id":"c","text":"stand with israel","label":"pro_israel"}"#,
        ]);
        let records = read_records(f.path()).unwrap();
        let vocab = build_vocab(&records, 128);
        let ds = load_dataset(f.path(), &vocab, &CueLexicon::default(), 128).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(
            ds.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(ds[0].label, Label::ProPalestine);
        assert_eq!(ds[0].token_ids[0], CLS_ID);
        assert_eq!(ds[1].cue_positions, vec![2]);
        assert_eq!(ds[1].contrast_positions, vec![4]);
    }

    #[test]
    fn load_dataset_rejects_unknown_label_with_line() {
        let f = write_lines(&[
            r#"{"id":"a","text":"x","label":"neutral"}"#,
            r#"{"id":"b","text":"y","label":"pro_mars"}"#,
        ]);
        let err = read_records(f.path()).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("pro_mars"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn load_dataset_rejects_malformed_json() {
        let f = write_lines(&[r#"{"id":"a","text":"x","label":"neutral"}"#, "{not json"]);
        assert!(matches!(
            read_records(f.path()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    fn labels(counts: [usize; 3]) -> Vec<Label> {
        Label::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&l, n)| std::iter::repeat_n(l, n))
            .collect()
    }

    fn class_counts(labels: &[Label], idx: &[usize]) -> [usize; 3] {
        let mut c = [0; 3];
        for &i in idx {
            c[labels[i].index()] += 1;
        }
        c
    }

    #[test]
    fn kfold_balanced() {
        let l = labels([30, 30, 30]);
        let folds = stratified_kfold(&l, 10, 42).unwrap();
        assert_eq!(folds.len(), 10);
        for f in &folds {
            assert_eq!(f.val.len(), 9);
            assert_eq!(class_counts(&l, &f.val), [3, 3, 3]);
            assert_eq!(f.train.len(), 81);
        }
    }

    #[test]
    fn kfold_uneven() {
        let l = labels([31, 30, 29]);
        for f in stratified_kfold(&l, 10, 7).unwrap() {
            let c = class_counts(&l, &f.val);
            assert!((8..=10).contains(&f.val.len()));
            assert!(c[0] == 3 || c[0] == 4, "{c:?}");
            assert_eq!(c[1], 3);
            assert!(c[2] == 2 || c[2] == 3, "{c:?}");
        }
    }

    #[test]
    fn kfold_errors() {
        let l = labels([5, 5, 5]);
        assert!(matches!(stratified_kfold(&l, 1, 0), Err(Error::Config(_))));
        let l = labels([5, 2, 5]);
        match stratified_kfold(&l, 3, 0) {
            Err(Error::InsufficientClass { class, count, .. }) => {
                assert_eq!(class, "pro_israel");
                assert_eq!(count, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kfold_is_deterministic() {
        let l = labels([12, 9, 14]);
        assert_eq!(
            stratified_kfold(&l, 4, 3).unwrap(),
            stratified_kfold(&l, 4, 3).unwrap()
        );
    }

    #[test]
    fn holdout_is_stratified() {
        let l = labels([20, 20, 40]);
        let (keep, held) = stratified_holdout(&l, 0.15, 1);
        assert_eq!(class_counts(&l, &held), [3, 3, 6]);
        assert_eq!(keep.len() + held.len(), 80);
    }

    proptest! {
        #[test]
        fn kfold_partitions(a in 4usize..25, b in 4usize..25, c in 4usize..25, k in 2usize..5, seed in 0u64..1000) {
            let l = labels([a, b, c]);
            let folds = stratified_kfold(&l, k, seed).unwrap();
            let mut seen = vec![0usize; l.len()];
            for f in &folds {
                for &i in &f.val {
                    seen[i] += 1;
                }
                prop_assert_eq!(f.train.len() + f.val.len(), l.len());
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            for class in 0..3 {
                let counts: Vec<usize> = folds.iter().map(|f| class_counts(&l, &f.val)[class]).collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }

        #[test]
        fn tokenize_idempotent(text in "[a-zA-Z0-9 ,.!?'()-]{0,60}") {
            let first = tokenize(&text, 128);
            let detok = first[1..].join(" ");
            prop_assert_eq!(tokenize(&detok, 128), first);
        }

        #[test]
        fn mark_union(words in prop::collection::vec("[abc]{1,2}", 1..15)) {
            let mut tokens = vec![CLS_TOKEN.to_string()];
            tokens.extend(words);
            let l1 = set(&["a", "ab"]);
            let l2 = set(&["b", "ab", "cc"]);
            let union: BTreeSet<String> = l1.union(&l2).cloned().collect();
            let mut expected: BTreeSet<usize> = mark_positions(&tokens, &l1).into_iter().collect();
            expected.extend(mark_positions(&tokens, &l2));
            prop_assert_eq!(mark_positions(&tokens, &union), expected.into_iter().collect::<Vec<_>>());
        }
    }
}
