//! ASTE-Data-V2 ingestion.
//!
//! Each line of a split file looks like
//!
//! ```text
//! The price is reasonable .####[([1], [3], 'POS')]
//! ```
//!
//! i.e. a whitespace-tokenized sentence, the `####` separator and a Python
//! literal list of `(aspect_indices, opinion_indices, polarity)` tuples.
//! Dependency parses live in a JSON-lines sidecar with one
//! `{"tokens": [...], "heads": [...], "labels": [...]}` record per line.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEPARATOR: &str = "####";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("sidecar has {tokens} tokens but the sentence has {words} words")]
    TokenMismatch { words: usize, tokens: usize },
    #[error("dependency heads contain a cycle")]
    CyclicHeads,
    #[error("dependency heads have {0} roots, expected exactly one")]
    MultipleRoots(usize),
    #[error("malformed sidecar record: {0}")]
    MalformedSidecar(String),
    #[error("{path}:{line}: {source}")]
    InFile {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} has {left} lines but {right} has {right_count}")]
    LineCountMismatch {
        path: PathBuf,
        left: usize,
        right: PathBuf,
        right_count: usize,
    },
}

/// Sentiment polarity of a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Positive,
    #[serde(rename = "NEU")]
    Neutral,
    #[serde(rename = "NEG")]
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    /// Accepts the short V2 tags as well as the spelled-out words some
    /// releases use.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pos" | "positive" => Some(Polarity::Positive),
            "neu" | "neutral" => Some(Polarity::Neutral),
            "neg" | "negative" => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Polarity::Positive => "POS",
            Polarity::Neutral => "NEU",
            Polarity::Negative => "NEG",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Inclusive word span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    /// Word indices covered by the span.
    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

/// An (aspect, opinion, polarity) triple over word spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub aspect: Span,
    pub opinion: Span,
    pub polarity: Polarity,
}

/// Triplet as written in a V2 line: explicit word index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriplet {
    pub aspect: Vec<usize>,
    pub opinion: Vec<usize>,
    pub polarity: Polarity,
}

impl RawTriplet {
    pub fn to_triplet(&self) -> Triplet {
        Triplet {
            aspect: Span::new(self.aspect[0], *self.aspect.last().unwrap()),
            opinion: Span::new(self.opinion[0], *self.opinion.last().unwrap()),
            polarity: self.polarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub text: String,
    pub words: Vec<String>,
    pub triplets: Vec<RawTriplet>,
}

impl RawExample {
    pub fn gold_triplets(&self) -> Vec<Triplet> {
        self.triplets.iter().map(RawTriplet::to_triplet).collect()
    }
}

/// Parses one `<sentence>####<triplet list>` line.
pub fn parse_v2_line(line: &str) -> Result<RawExample, CorpusError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let (text, literal) = line
        .split_once(SEPARATOR)
        .ok_or_else(|| CorpusError::MalformedLine(format!("missing `{SEPARATOR}` separator")))?;
    let words: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
    if words.is_empty() {
        return Err(CorpusError::MalformedLine("empty sentence".into()));
    }
    let triplets = TripletLiteral::new(literal).parse()?;
    for t in &triplets {
        check_index_run(&t.aspect, words.len(), "aspect")?;
        check_index_run(&t.opinion, words.len(), "opinion")?;
    }
    Ok(RawExample {
        text: text.trim().to_owned(),
        words,
        triplets,
    })
}

fn check_index_run(indices: &[usize], n: usize, what: &str) -> Result<(), CorpusError> {
    if indices.is_empty() {
        return Err(CorpusError::MalformedLine(format!("empty {what} index list")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(CorpusError::MalformedLine(format!(
            "{what} index {bad} out of range for {n} words"
        )));
    }
    if indices.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(CorpusError::MalformedLine(format!(
            "{what} indices {indices:?} are not a contiguous ascending run"
        )));
    }
    Ok(())
}

/// Serializes back into the V2 line format.
pub fn to_v2_line(ex: &RawExample) -> String {
    let list = |xs: &[usize]| {
        let inner: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
        format!("[{}]", inner.join(", "))
    };
    let tuples: Vec<String> = ex
        .triplets
        .iter()
        .map(|t| format!("({}, {}, '{}')", list(&t.aspect), list(&t.opinion), t.polarity.tag()))
        .collect();
    format!("{}{SEPARATOR}[{}]", ex.words.join(" "), tuples.join(", "))
}

/// Recursive-descent reader for the Python literal on the right of `####`.
struct TripletLiteral<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> TripletLiteral<'a> {
    fn new(src: &'a str) -> Self {
        TripletLiteral {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, msg: &str) -> CorpusError {
        CorpusError::MalformedLine(format!("triplet literal, byte {}: {msg}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), CorpusError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn parse(mut self) -> Result<Vec<RawTriplet>, CorpusError> {
        self.expect(b'[')?;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Some(b']') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => {
                    out.push(self.tuple()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b']') => {}
                        _ => return Err(self.err("expected `,` or `]` after tuple")),
                    }
                }
                _ => return Err(self.err("expected `(` or `]`")),
            }
        }
        if self.peek().is_some() {
            return Err(self.err("trailing characters"));
        }
        Ok(out)
    }

    fn tuple(&mut self) -> Result<RawTriplet, CorpusError> {
        self.expect(b'(')?;
        let aspect = self.int_list()?;
        self.expect(b',')?;
        let opinion = self.int_list()?;
        self.expect(b',')?;
        let tag = self.string()?;
        if self.peek() == Some(b',') {
            self.pos += 1;
        }
        self.expect(b')')?;
        let polarity = Polarity::parse(&tag)
            .ok_or_else(|| CorpusError::MalformedLine(format!("unknown polarity `{tag}`")))?;
        Ok(RawTriplet {
            aspect,
            opinion,
            polarity,
        })
    }

    fn int_list(&mut self) -> Result<Vec<usize>, CorpusError> {
        self.expect(b'[')?;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Some(b']') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(c) if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    out.push(digits.parse().map_err(|_| self.err("index overflow"))?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b']') => {}
                        _ => return Err(self.err("expected `,` or `]` in index list")),
                    }
                }
                _ => return Err(self.err("expected a word index")),
            }
        }
    }

    fn string(&mut self) -> Result<String, CorpusError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected a quoted polarity")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }
}

/// Per-split counts as reported for the benchmark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub neu: usize,
    pub pos: usize,
    pub neg: usize,
    pub sentences: usize,
    pub triplets: usize,
}

pub fn compute_stats(split: &[RawExample]) -> CorpusStats {
    let mut stats = CorpusStats {
        sentences: split.len(),
        ..CorpusStats::default()
    };
    for t in split.iter().flat_map(|ex| &ex.triplets) {
        stats.triplets += 1;
        match t.polarity {
            Polarity::Positive => stats.pos += 1,
            Polarity::Neutral => stats.neu += 1,
            Polarity::Negative => stats.neg += 1,
        }
    }
    stats
}

/// One line of the dependency sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepRecord {
    pub tokens: Vec<String>,
    /// 0 marks the root, otherwise the 1-based index of the head word.
    pub heads: Vec<usize>,
    pub labels: Vec<String>,
}

/// A sentence ready for the model: words, a validated dependency tree and
/// gold triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub dep_heads: Vec<usize>,
    pub dep_labels: Vec<String>,
    pub gold_triplets: Vec<Triplet>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Undirected tree edges as 0-based `(child, head)` pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dep_heads
            .iter()
            .enumerate()
            .filter(|(_, &h)| h != 0)
            .map(|(i, &h)| (i, h - 1))
    }
}

/// Joins a parsed line with its dependency record. Tokenization mismatches
/// are rejected rather than realigned.
pub fn attach_dependencies(ex: &RawExample, dep: &DepRecord) -> Result<Sentence, CorpusError> {
    if dep.tokens.len() != ex.words.len() {
        return Err(CorpusError::TokenMismatch {
            words: ex.words.len(),
            tokens: dep.tokens.len(),
        });
    }
    if dep.heads.len() != dep.tokens.len() || dep.labels.len() != dep.tokens.len() {
        return Err(CorpusError::MalformedSidecar(format!(
            "{} tokens, {} heads, {} labels",
            dep.tokens.len(),
            dep.heads.len(),
            dep.labels.len()
        )));
    }
    validate_tree(&dep.heads)?;
    Ok(Sentence {
        words: ex.words.clone(),
        dep_heads: dep.heads.clone(),
        dep_labels: dep.labels.clone(),
        gold_triplets: ex.gold_triplets(),
    })
}

/// Checks that `heads` (0 = root, 1-based otherwise) encode a single rooted tree.
pub fn validate_tree(heads: &[usize]) -> Result<(), CorpusError> {
    let n = heads.len();
    if let Some((i, &h)) = heads.iter().enumerate().find(|(_, &h)| h > n) {
        return Err(CorpusError::MalformedSidecar(format!(
            "head {h} of word {} out of range",
            i + 1
        )));
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots > 1 {
        return Err(CorpusError::MultipleRoots(roots));
    }
    // 0 = unvisited, 1 = on the current path, 2 = known to reach the root
    let mut state = vec![0u8; n];
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state[cur] {
                2 => break,
                1 => return Err(CorpusError::CyclicHeads),
                _ => {}
            }
            state[cur] = 1;
            path.push(cur);
            if heads[cur] == 0 {
                break;
            }
            cur = heads[cur] - 1;
        }
        for p in path {
            state[p] = 2;
        }
    }
    // every node reached a root without a cycle, so a root exists when n > 0
    Ok(())
}

/// A padded mini-batch: sentence indices into the split plus word masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub mask: Vec<Vec<bool>>,
}

/// Splits `sentences` into batches of at most `size`. With a seed the order
/// is shuffled deterministically, otherwise corpus order is kept.
pub fn batch(sentences: &[Sentence], size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    assert!(size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(size)
        .map(|chunk| {
            let lengths: Vec<usize> = chunk.iter().map(|&i| sentences[i].len()).collect();
            let max_len = lengths.iter().copied().max().unwrap_or(0);
            let mask = lengths
                .iter()
                .map(|&n| (0..max_len).map(|j| j < n).collect())
                .collect();
            Batch {
                indices: chunk.to_vec(),
                lengths,
                max_len,
                mask,
            }
        })
        .collect()
}

/// Non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

fn in_file(path: &Path, line: usize) -> impl FnOnce(CorpusError) -> CorpusError + '_ {
    move |e| CorpusError::InFile {
        path: path.to_owned(),
        line,
        source: Box::new(e),
    }
}

pub fn read_v2_file(path: &Path) -> Result<Vec<RawExample>, CorpusError> {
    read_lines(path)?
        .iter()
        .map(|(n, l)| parse_v2_line(l).map_err(in_file(path, *n)))
        .collect()
}

pub fn read_sidecar(path: &Path) -> Result<Vec<DepRecord>, CorpusError> {
    read_lines(path)?
        .iter()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CorpusError::MalformedSidecar(e.to_string()))
                .map_err(in_file(path, *n))
        })
        .collect()
}

/// Reads CoNLL-U or CoNLL-X parser output: one token per line with the head
/// in column 7 and the relation in column 8, blank lines between sentences.
/// Comments, multiword ranges and empty nodes are skipped.
pub fn read_conll(path: &Path) -> Result<Vec<DepRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    let mut current = DepRecord {
        tokens: vec![],
        heads: vec![],
        labels: vec![],
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            if !current.tokens.is_empty() {
                out.push(std::mem::replace(
                    &mut current,
                    DepRecord {
                        tokens: vec![],
                        heads: vec![],
                        labels: vec![],
                    },
                ));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| in_file(path, i + 1)(CorpusError::MalformedSidecar(msg));
        if cols.len() < 8 {
            return Err(bad(format!("expected at least 8 tab-separated columns, found {}", cols.len())));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let head = cols[6]
            .parse::<usize>()
            .map_err(|_| bad(format!("head `{}` is not a number", cols[6])))?;
        current.tokens.push(cols[1].to_owned());
        current.heads.push(head);
        current.labels.push(cols[7].to_owned());
    }
    if !current.tokens.is_empty() {
        out.push(current);
    }
    Ok(out)
}

pub fn write_sidecar(path: &Path, records: &[DepRecord]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("DepRecord serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a V2 split and its sidecar and joins them line by line.
pub fn load_split(v2_path: &Path, sidecar_path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    let examples = read_v2_file(v2_path)?;
    let deps = read_sidecar(sidecar_path)?;
    if examples.len() != deps.len() {
        return Err(CorpusError::LineCountMismatch {
            path: v2_path.to_owned(),
            left: examples.len(),
            right: sidecar_path.to_owned(),
            right_count: deps.len(),
        });
    }
    examples
        .iter()
        .zip(&deps)
        .enumerate()
        .map(|(i, (ex, dep))| attach_dependencies(ex, dep).map_err(in_file(sidecar_path, i + 1)))
        .collect()
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// `<dir>/<split>_triplets.txt`, the V2 release naming.
pub fn v2_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}_triplets.txt"))
}

/// `<dir>/<split>.deps.jsonl`, written by `preprocess`.
pub fn sidecar_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.deps.jsonl"))
}

pub fn load_split_dir(dir: &Path, split: &str) -> Result<Vec<Sentence>, CorpusError> {
    load_split(&v2_path(dir, split), &sidecar_path(dir, split))
}

/// Counts spans that act as both an aspect and an opinion across the
/// triplets of one sentence.
pub fn role_collisions(sentence: &Sentence) -> usize {
    let mut roles: BTreeMap<Span, (bool, bool)> = BTreeMap::new();
    for t in &sentence.gold_triplets {
        roles.entry(t.aspect).or_default().0 = true;
        roles.entry(t.opinion).or_default().1 = true;
    }
    roles.values().filter(|(a, o)| *a && *o).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dep(tokens: usize, heads: &[usize]) -> DepRecord {
        DepRecord {
            tokens: (0..tokens).map(|i| format!("w{i}")).collect(),
            heads: heads.to_vec(),
            labels: vec!["dep".into(); heads.len()],
        }
    }

    #[test]
    fn parses_the_reference_line() {
        let ex = parse_v2_line("The price is reasonable .####[([1], [3], 'POS')]").unwrap();
        assert_eq!(ex.words, ["The", "price", "is", "reasonable", "."]);
        assert_eq!(
            ex.triplets,
            vec![RawTriplet {
                aspect: vec![1],
                opinion: vec![3],
                polarity: Polarity::Positive
            }]
        );
    }

    #[test]
    fn parses_multiword_and_multiple_triplets() {
        let ex = parse_v2_line(
            "the battery life is great but the screen is dim####[([1, 2], [4], 'POS'), ([7], [9], \"negative\")]",
        )
        .unwrap();
        assert_eq!(ex.triplets.len(), 2);
        assert_eq!(ex.triplets[0].aspect, vec![1, 2]);
        assert_eq!(ex.triplets[1].polarity, Polarity::Negative);
        assert_eq!(ex.gold_triplets()[0].aspect, Span::new(1, 2));
    }

    #[test]
    fn empty_triplet_list() {
        let ex = parse_v2_line("nothing to see here####[]").unwrap();
        assert!(ex.triplets.is_empty());
    }

    #[test]
    fn malformed_lines() {
        for bad in [
            "no separator here",
            "a b####[([0], [1], 'POS')",
            "a b####[([0], [5], 'POS')]",
            "a b####[([0], [1], 'GREAT')]",
            "a b c####[([0, 2], [1], 'POS')]",
            "a b####[([0], [], 'POS')]",
            "a b####[([0], [1], 'POS')] extra",
        ] {
            assert!(
                matches!(parse_v2_line(bad), Err(CorpusError::MalformedLine(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn polarity_spellings_normalize() {
        assert_eq!(Polarity::parse("NEU"), Some(Polarity::Neutral));
        assert_eq!(Polarity::parse("Neutral"), Some(Polarity::Neutral));
        assert_eq!(Polarity::parse("positive"), Some(Polarity::Positive));
        assert_eq!(Polarity::parse("meh"), None);
    }

    #[test]
    fn stats_of_empty_split() {
        assert_eq!(compute_stats(&[]), CorpusStats::default());
    }

    #[test]
    fn stats_count_polarities() {
        let split = vec![
            parse_v2_line("a b c####[([0], [1], 'POS'), ([2], [1], 'NEG')]").unwrap(),
            parse_v2_line("a b####[([0], [1], 'NEU')]").unwrap(),
        ];
        let s = compute_stats(&split);
        assert_eq!((s.pos, s.neu, s.neg, s.sentences, s.triplets), (1, 1, 1, 2, 3));
    }

    #[test]
    fn star_tree_attaches() {
        let ex = parse_v2_line("The price is reasonable .####[([1], [3], 'POS')]").unwrap();
        let s = attach_dependencies(&ex, &dep(5, &[2, 0, 2, 2, 2])).unwrap();
        assert_eq!(s.dep_heads, vec![2, 0, 2, 2, 2]);
        assert_eq!(s.gold_triplets.len(), 1);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let ex = parse_v2_line("a b c d e####[]").unwrap();
        let err = attach_dependencies(&ex, &dep(5, &[2, 1, 0, 3, 3])).unwrap_err();
        assert!(matches!(err, CorpusError::CyclicHeads));
        // no root at all is necessarily cyclic
        let err = attach_dependencies(&ex, &dep(5, &[2, 1, 2, 3, 3])).unwrap_err();
        assert!(matches!(err, CorpusError::CyclicHeads));
    }

    #[test]
    fn token_count_mismatch() {
        let ex = parse_v2_line("a b c d e####[]").unwrap();
        let err = attach_dependencies(&ex, &dep(4, &[0, 1, 1, 1])).unwrap_err();
        assert!(matches!(err, CorpusError::TokenMismatch { words: 5, tokens: 4 }));
    }

    #[test]
    fn multiple_roots() {
        let ex = parse_v2_line("a b c####[]").unwrap();
        let err = attach_dependencies(&ex, &dep(3, &[0, 0, 1])).unwrap_err();
        assert!(matches!(err, CorpusError::MultipleRoots(2)));
    }

    fn sentences(n: usize) -> Vec<Sentence> {
        (0..n)
            .map(|i| Sentence {
                words: vec!["w".into(); 1 + i % 4],
                dep_heads: (0..1 + i % 4).map(|j| if j == 0 { 0 } else { 1 }).collect(),
                dep_labels: vec!["dep".into(); 1 + i % 4],
                gold_triplets: vec![],
            })
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let b = batch(&sentences(33), 16, None);
        assert_eq!(b.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), [16, 16, 1]);
        let b = batch(&sentences(1), 16, None);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].indices, vec![0]);
    }

    #[test]
    fn batch_masks_follow_lengths() {
        let b = batch(&sentences(4), 4, None);
        assert_eq!(b[0].max_len, 4);
        assert_eq!(b[0].mask[0], vec![true, false, false, false]);
        assert_eq!(b[0].mask[3], vec![true; 4]);
    }

    #[test]
    fn seeded_shuffle_is_deterministic() {
        let s = sentences(40);
        assert_eq!(batch(&s, 16, Some(7)), batch(&s, 16, Some(7)));
        assert_ne!(batch(&s, 16, Some(7)), batch(&s, 16, None));
    }

    #[test]
    fn collisions_are_counted() {
        let ex = parse_v2_line("full of flavor####[([2], [0], 'POS'), ([0], [2], 'POS')]").unwrap();
        let s = attach_dependencies(&ex, &dep(3, &[0, 1, 2])).unwrap();
        assert_eq!(role_collisions(&s), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_example() -> impl Strategy<Value = RawExample> {
            (2usize..12).prop_flat_map(|n| {
                let span = (0..n).prop_flat_map(move |s| (Just(s), s..n.min(s + 3)));
                let triplet = (span.clone(), span, 0usize..3).prop_map(|((a0, a1), (o0, o1), p)| {
                    RawTriplet {
                        aspect: (a0..=a1).collect(),
                        opinion: (o0..=o1).collect(),
                        polarity: Polarity::ALL[p],
                    }
                });
                (
                    proptest::collection::vec("[a-z]{1,6}", n),
                    proptest::collection::vec(triplet, 0..4),
                )
                    .prop_map(|(words, triplets)| RawExample {
                        text: words.join(" "),
                        words,
                        triplets,
                    })
            })
        }

        proptest! {
            #[test]
            fn v2_round_trip(ex in arb_example()) {
                prop_assert_eq!(parse_v2_line(&to_v2_line(&ex)).unwrap(), ex);
            }

            #[test]
            fn attached_heads_always_form_a_tree(heads in proptest::collection::vec(0usize..7, 1..7)) {
                let n = heads.len();
                let heads: Vec<usize> = heads.into_iter().map(|h| h.min(n)).collect();
                let ex = RawExample { text: String::new(), words: vec!["w".into(); n], triplets: vec![] };
                if let Ok(s) = attach_dependencies(&ex, &dep(n, &heads)) {
                    // walking up from every node reaches the root within n steps
                    for start in 0..n {
                        let mut cur = start;
                        let mut steps = 0;
                        while s.dep_heads[cur] != 0 {
                            cur = s.dep_heads[cur] - 1;
                            steps += 1;
                            prop_assert!(steps <= n);
                        }
                    }
                    prop_assert_eq!(s.dep_heads.iter().filter(|&&h| h == 0).count(), 1);
                }
            }
        }
    }

    #[test]
    fn conll_reader_skips_comments_and_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.conllu");
        fs::write(
            &path,
            "# text = I don't\n1\tI\tI\tPRON\t_\t_\t2\tnsubj\t_\t_\n2-3\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n2\tdo\tdo\tAUX\t_\t_\t0\troot\t_\t_\n3\tn't\tnot\tPART\t_\t_\t2\tadvmod\t_\t_\n\n1\tYes\tyes\tINTJ\t_\t_\t0\troot\t_\t_\n",
        )
        .unwrap();
        let recs = read_conll(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].tokens, vec!["I", "do", "n't"]);
        assert_eq!(recs[0].heads, vec![2, 0, 2]);
        assert_eq!(recs[1].labels, vec!["root"]);
        fs::write(&path, "\n\n1\tI\tI\tPRON\t_\t_\tx\tnsubj\n").unwrap();
        match read_conll(&path) {
            Err(CorpusError::InFile { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
