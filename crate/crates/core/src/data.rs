//! Whitespace vocabulary, corpora and classification datasets, plus the
//! seeded synthetic generators standing in for clinical notes.
//!
//! The synthetic vocabulary has 512 entries: 4 reserved ids, 380 general
//! tokens `g000..g379` and 128 domain tokens `d000..d127`. The general corpus
//! is drawn from a Markov chain over general tokens only; the domain corpus
//! from a second chain that routes about 40% of transitions into domain
//! tokens and uses different general bigrams.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, PAD_ID};
use crate::rng::Rng;

pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

pub const N_GENERAL: usize = 380;
pub const N_DOMAIN: usize = 128;
pub const SYNTHETIC_VOCAB: usize = RESERVED.len() + N_GENERAL + N_DOMAIN;
const FIRST_GENERAL: usize = RESERVED.len();
const FIRST_DOMAIN: usize = FIRST_GENERAL + N_GENERAL;

// ---- vocabulary ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_tokens(extra: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(extra)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    /// The fixed 512-token vocabulary of the synthetic generators.
    pub fn synthetic() -> Self {
        Self::from_tokens(
            (0..N_GENERAL)
                .map(|i| format!("g{i:03}"))
                .chain((0..N_DOMAIN).map(|i| format!("d{i:03}"))),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unseen words map to the unk id.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK_ID as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(
                "vocabulary must start with the four reserved tokens".into(),
            ));
        }
        let v = Self::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()));
        if v.index.len() != v.tokens.len() {
            return Err(Error::Data("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Frequency-ranked vocabulary over whitespace tokens, ties broken
/// lexicographically, capped at `max_size` entries including the reserved
/// ones.
pub fn build_vocab<S: AsRef<str>>(docs: &[S], max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED.len() {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room past the reserved ids"
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for d in docs {
        for w in d.as_ref().split_whitespace() {
            if !RESERVED.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocab::from_tokens(
        ranked.into_iter().map(|(w, _)| w.to_string()),
    ))
}

// ---- corpora -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Tokenized documents with a train/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Vec<TokenId>>,
    pub split: Vec<Split>,
}

/// Share of corpus documents held out for evaluation.
const CORPUS_TEST_FRACTION: f64 = 0.1;

fn doc_hash(seed: u64, doc: &[TokenId]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write_u64(seed);
    for &t in doc {
        h.write_u32(t);
    }
    h.finish()
}

impl Corpus {
    /// Splits by a seeded hash of each document's content, so identical
    /// documents always land on the same side.
    pub fn from_docs(docs: Vec<Vec<TokenId>>, seed: u64) -> Self {
        let cut = (CORPUS_TEST_FRACTION * u64::MAX as f64) as u64;
        let split = docs
            .iter()
            .map(|d| {
                if doc_hash(seed, d) < cut {
                    Split::Test
                } else {
                    Split::Train
                }
            })
            .collect();
        Self { docs, split }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn part(&self, which: Split) -> Vec<&[TokenId]> {
        self.docs
            .iter()
            .zip(&self.split)
            .filter(|(_, &s)| s == which)
            .map(|(d, _)| d.as_slice())
            .collect()
    }

    /// Documents of one split cut into consecutive windows of at most
    /// `max_len` tokens; windows too short to hold a next-token target are
    /// dropped.
    pub fn windows(&self, which: Split, max_len: usize) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        for d in self.part(which) {
            for w in d.chunks(max_len.max(2)) {
                if w.len() >= 2 {
                    out.push(w.to_vec());
                }
            }
        }
        out
    }

    pub fn max_id(&self) -> Option<TokenId> {
        self.docs.iter().flatten().copied().max()
    }

    /// One document per line.
    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        for d in &self.docs {
            s.push_str(&vocab.decode(d));
            s.push('\n');
        }
        s
    }
}

/// Non-empty lines of a newline-delimited document file.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let docs: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    if docs.is_empty() {
        return Err(Error::Data(format!(
            "{}: corpus has no documents",
            path.display()
        )));
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path, vocab: &Vocab, seed: u64) -> Result<Corpus> {
    let docs = read_documents(path)?
        .iter()
        .map(|d| vocab.encode(d))
        .collect();
    Ok(Corpus::from_docs(docs, seed))
}

// ---- Markov generators ---------------------------------------------------

const SUCCESSORS: usize = 6;
const DOMAIN_ROUTE: f64 = 0.4;

struct Chain {
    /// Cumulative-weight successor lists per token id.
    succ: Vec<Vec<(TokenId, f64)>>,
}

impl Chain {
    fn random(rng: &mut Rng, from: std::ops::Range<usize>, to: std::ops::Range<usize>) -> Self {
        let mut succ = vec![Vec::new(); SYNTHETIC_VOCAB];
        for i in from {
            let mut acc = 0.0;
            succ[i] = (0..SUCCESSORS)
                .map(|_| {
                    let u = rng.uniform();
                    acc += u * u + 0.05;
                    ((to.start + rng.below(to.len())) as TokenId, acc)
                })
                .collect();
        }
        Self { succ }
    }

    fn next(&self, prev: TokenId, rng: &mut Rng) -> TokenId {
        let list = &self.succ[prev as usize];
        let total = list.last().expect("chain covers every state").1;
        let u = rng.uniform() * total;
        list.iter()
            .find(|(_, c)| u < *c)
            .unwrap_or(&list[list.len() - 1])
            .0
    }
}

struct Generators {
    general: Chain,
    domain_general: Chain,
    domain_domain: Chain,
}

impl Generators {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::seeded(seed ^ 0x5eed_c0de);
        let all = FIRST_GENERAL..SYNTHETIC_VOCAB;
        let general_ids = FIRST_GENERAL..FIRST_DOMAIN;
        let domain_ids = FIRST_DOMAIN..SYNTHETIC_VOCAB;
        Self {
            general: Chain::random(&mut rng, general_ids.clone(), general_ids.clone()),
            domain_general: Chain::random(&mut rng, all.clone(), general_ids),
            domain_domain: Chain::random(&mut rng, all, domain_ids),
        }
    }

    fn general_doc(&self, len: usize, rng: &mut Rng) -> Vec<TokenId> {
        let mut t = (FIRST_GENERAL + rng.below(N_GENERAL)) as TokenId;
        let mut out = vec![t];
        while out.len() < len {
            t = self.general.next(t, rng);
            out.push(t);
        }
        out
    }

    fn domain_doc(&self, len: usize, rng: &mut Rng) -> Vec<TokenId> {
        let mut t = if rng.bernoulli(DOMAIN_ROUTE) {
            FIRST_DOMAIN + rng.below(N_DOMAIN)
        } else {
            FIRST_GENERAL + rng.below(N_GENERAL)
        } as TokenId;
        let mut out = vec![t];
        while out.len() < len {
            let chain = if rng.bernoulli(DOMAIN_ROUTE) {
                &self.domain_domain
            } else {
                &self.domain_general
            };
            t = chain.next(t, rng);
            out.push(t);
        }
        out
    }
}

pub fn is_domain_token(id: TokenId) -> bool {
    (FIRST_DOMAIN..SYNTHETIC_VOCAB).contains(&(id as usize))
}

/// General and domain corpora over [`Vocab::synthetic`], `32..=64` tokens
/// per document.
pub fn gen_domain_corpora(
    seed: u64,
    general_docs: usize,
    domain_docs: usize,
) -> Result<(Corpus, Corpus)> {
    if general_docs < 100 || domain_docs < 100 {
        return Err(Error::Config(
            "each corpus needs at least 100 documents".into(),
        ));
    }
    let gens = Generators::new(seed);
    let mut rng = Rng::seeded(seed);
    let mut g_rng = rng.fork();
    let mut d_rng = rng.fork();
    let general = (0..general_docs)
        .map(|_| gens.general_doc(32 + g_rng.below(33), &mut g_rng))
        .collect();
    let domain = (0..domain_docs)
        .map(|_| gens.domain_doc(32 + d_rng.below(33), &mut d_rng))
        .collect();
    Ok((
        Corpus::from_docs(general, seed),
        Corpus::from_docs(domain, seed.wrapping_add(1)),
    ))
}

// ---- tasks ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Pmv,
    Mor,
    Los,
    Diag,
    Proc,
}

impl TaskName {
    pub const ALL: [TaskName; 5] = [
        TaskName::Pmv,
        TaskName::Mor,
        TaskName::Los,
        TaskName::Diag,
        TaskName::Proc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskName::Pmv => "pmv",
            TaskName::Mor => "mor",
            TaskName::Los => "los",
            TaskName::Diag => "diag",
            TaskName::Proc => "proc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task {s:?} (expected pmv, mor, los, diag or proc)"
                ))
            })
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "classes")]
pub enum TaskKind {
    Binary,
    Multiclass(usize),
    Multilabel(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub kind: TaskKind,
}

impl TaskSpec {
    /// Desk-scale shapes: binary PMV and MOR, 4-class LOS, 50 diagnosis and
    /// 30 procedure labels.
    pub fn standard(name: TaskName) -> Self {
        let kind = match name {
            TaskName::Pmv | TaskName::Mor => TaskKind::Binary,
            TaskName::Los => TaskKind::Multiclass(4),
            TaskName::Diag => TaskKind::Multilabel(50),
            TaskName::Proc => TaskKind::Multilabel(30),
        };
        Self { name, kind }
    }

    pub fn n_outputs(&self) -> usize {
        match self.kind {
            TaskKind::Binary => 1,
            TaskKind::Multiclass(k) | TaskKind::Multilabel(k) => k,
        }
    }

    pub fn check_label(&self, label: &Label) -> Result<()> {
        match (self.kind, label) {
            (TaskKind::Binary, Label::Class(c)) if *c < 2 => Ok(()),
            (TaskKind::Multiclass(k), Label::Class(c)) if *c < k => Ok(()),
            (TaskKind::Multilabel(k), Label::Multi(v)) if v.len() == k => Ok(()),
            _ => Err(Error::Label(format!(
                "{label:?} does not fit task {} ({:?})",
                self.name, self.kind
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    /// Binary (0/1) or multiclass index.
    Class(usize),
    /// One flag per label.
    Multi(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskSpec,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[Example] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Marker tokens whose presence determines each synthetic task's labels:
/// one for each binary task, one per class for LOS, one per code for the
/// multilabel tasks. All are domain tokens.
pub fn task_markers(task: TaskName) -> Vec<String> {
    let (start, n) = match task {
        TaskName::Pmv => (0, 1),
        TaskName::Mor => (1, 1),
        TaskName::Los => (2, 4),
        TaskName::Diag => (6, 50),
        TaskName::Proc => (56, 30),
    };
    (start..start + n).map(|i| format!("d{i:03}")).collect()
}

const POSITIVE_RATE_PMV: f64 = 0.3;
const POSITIVE_RATE_MOR: f64 = 0.2;
const LOS_CLASS_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
const CODE_RATE_DIAG: f64 = 0.08;
const CODE_RATE_PROC: f64 = 0.1;

fn draw_label(task: TaskName, rng: &mut Rng) -> Label {
    match task {
        TaskName::Pmv => Label::Class(rng.bernoulli(POSITIVE_RATE_PMV) as usize),
        TaskName::Mor => Label::Class(rng.bernoulli(POSITIVE_RATE_MOR) as usize),
        TaskName::Los => {
            let u = rng.uniform();
            let mut acc = 0.0;
            let c = LOS_CLASS_WEIGHTS.iter().position(|w| {
                acc += w;
                u < acc
            });
            Label::Class(c.unwrap_or(3))
        }
        TaskName::Diag => Label::Multi((0..50).map(|_| rng.bernoulli(CODE_RATE_DIAG)).collect()),
        TaskName::Proc => Label::Multi((0..30).map(|_| rng.bernoulli(CODE_RATE_PROC)).collect()),
    }
}

/// Five datasets of `scale` examples each, split 70/10/20.
pub fn gen_classification_datasets(seed: u64, scale: usize) -> Result<Vec<Dataset>> {
    let (n_train, n_valid) = (scale * 7 / 10, scale / 10);
    let n_test = scale - n_train - n_valid;
    if n_train.min(n_valid).min(n_test) < 50 {
        return Err(Error::Config(format!(
            "scale {scale} gives fewer than 50 examples in some split"
        )));
    }
    let vocab = Vocab::synthetic();
    let gens = Generators::new(seed);
    let mut root = Rng::seeded(seed ^ 0xc1a5_5e5);
    let mut out = Vec::new();
    for task in TaskName::ALL {
        let mut rng = root.fork();
        let markers: Vec<TokenId> = task_markers(task)
            .iter()
            .map(|m| vocab.id(m).expect("synthetic token"))
            .collect();
        let mut examples = Vec::with_capacity(scale);
        for _ in 0..scale {
            let len = 40 + rng.below(17);
            let mut doc = gens.domain_doc(len, &mut rng);
            // Background never carries this task's markers.
            for t in doc.iter_mut() {
                if markers.contains(t) {
                    *t = (FIRST_GENERAL + (*t as usize % N_GENERAL)) as TokenId;
                }
            }
            let label = draw_label(task, &mut rng);
            let planted: Vec<TokenId> = match &label {
                Label::Class(c) => match task {
                    TaskName::Los => vec![markers[*c]],
                    _ if *c == 1 => vec![markers[0]],
                    _ => vec![],
                },
                Label::Multi(flags) => flags
                    .iter()
                    .zip(&markers)
                    .filter(|(f, _)| **f)
                    .map(|(_, &m)| m)
                    .collect(),
            };
            let mut slots: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut slots);
            for (&pos, &m) in slots.iter().zip(&planted) {
                doc[pos] = m;
            }
            examples.push(Example {
                text: vocab.decode(&doc),
                label,
            });
        }
        let test = examples.split_off(n_train + n_valid);
        let valid = examples.split_off(n_train);
        out.push(Dataset {
            task: TaskSpec::standard(task),
            train: examples,
            valid,
            test,
        });
    }
    Ok(out)
}

// ---- dataset files -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn record(ex: &Example, split: Split) -> Record {
    let (label, labels) = match &ex.label {
        Label::Class(c) => (Some(*c), None),
        Label::Multi(f) => (
            None,
            Some(
                f.iter()
                    .enumerate()
                    .filter(|(_, &x)| x)
                    .map(|(i, _)| i)
                    .collect(),
            ),
        ),
    };
    Record {
        text: ex.text.clone(),
        label,
        labels,
        split: Some(split),
    }
}

/// JSON lines, train then valid then test, each tagged with its split.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for which in [Split::Train, Split::Valid, Split::Test] {
        for ex in ds.split(which) {
            serde_json::to_writer(&mut buf, &record(ex, which))?;
            buf.push(b'\n');
        }
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads a JSON-lines dataset. Lines without a `split` field are assigned
/// 70/10/20 by a hash of their text.
pub fn load_dataset(path: &Path, task: &TaskSpec) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = Dataset {
        task: task.clone(),
        train: vec![],
        valid: vec![],
        test: vec![],
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let r: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let label = match (task.kind, r.label, r.labels) {
            (TaskKind::Multilabel(k), None, Some(idx)) => {
                let mut flags = vec![false; k];
                for j in idx {
                    *flags.get_mut(j).ok_or_else(|| {
                        err(format!("label index {j} out of range for {k} labels"))
                    })? = true;
                }
                Label::Multi(flags)
            }
            (TaskKind::Multilabel(_), _, _) => {
                return Err(err("multilabel task needs a `labels` list".into()))
            }
            (_, Some(c), None) => Label::Class(c),
            _ => {
                return Err(err(format!(
                    "task {} needs a single integer `label`",
                    task.name
                )))
            }
        };
        task.check_label(&label).map_err(|e| err(e.to_string()))?;
        let split = r.split.unwrap_or_else(|| {
            let mut h = fnv::FnvHasher::default();
            h.write(r.text.as_bytes());
            match h.finish() % 10 {
                0..=6 => Split::Train,
                7 => Split::Valid,
                _ => Split::Test,
            }
        });
        let ex = Example {
            text: r.text,
            label,
        };
        match split {
            Split::Train => ds.train.push(ex),
            Split::Valid => ds.valid.push(ex),
            Split::Test => ds.test.push(ex),
        }
    }
    if ds.train.is_empty() && ds.valid.is_empty() && ds.test.is_empty() {
        return Err(Error::Data(format!(
            "{}: dataset has no examples",
            path.display()
        )));
    }
    Ok(ds)
}

/// Writes a corpus one document per line.
pub fn write_corpus(corpus: &Corpus, vocab: &Vocab, path: &Path) -> Result<()> {
    write_atomic(path, corpus.to_text(vocab).as_bytes())
}

/// True when no token id reaches `vocab_size`; pad never appears inside
/// generated text.
pub fn ids_in_range(docs: &[Vec<TokenId>], vocab_size: usize) -> bool {
    docs.iter()
        .flatten()
        .all(|&t| (t as usize) < vocab_size && t != PAD_ID)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = build_vocab(&["a b b"], 10).unwrap();
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.encode("a zzz"), vec![5, UNK_ID]);
        let tie = build_vocab(&["y x"], 10).unwrap();
        assert_eq!(tie.token(4), Some("x"));
        assert!(build_vocab::<&str>(&[], 10).is_err());
        assert!(build_vocab(&["  "], 10).is_err());
    }

    #[test]
    fn vocab_cap_and_text_round_trip() {
        let v = build_vocab(&["a a a b b c"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), None);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert_eq!(Vocab::synthetic().len(), SYNTHETIC_VOCAB);
    }

    #[test]
    fn corpus_domain_share() {
        let (general, domain) = gen_domain_corpora(3, 200, 200).unwrap();
        let share = |c: &Corpus| {
            let n: usize = c.docs.iter().map(Vec::len).sum();
            c.docs
                .iter()
                .flatten()
                .filter(|&&t| is_domain_token(t))
                .count() as f64
                / n as f64
        };
        assert_eq!(share(&general), 0.0);
        assert!(share(&domain) >= 0.3, "{}", share(&domain));
        assert!(ids_in_range(&general.docs, SYNTHETIC_VOCAB));
        assert!(gen_domain_corpora(3, 99, 200).is_err());
    }

    #[test]
    fn windows_chunk_documents() {
        let c = Corpus {
            docs: vec![(4..14).collect()],
            split: vec![Split::Train],
        };
        let w = c.windows(Split::Train, 4);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2], vec![12, 13]);
    }

    #[test]
    fn task_shapes() {
        assert_eq!(
            TaskSpec::standard(TaskName::Los).kind,
            TaskKind::Multiclass(4)
        );
        assert_eq!(TaskSpec::standard(TaskName::Diag).n_outputs(), 50);
        assert_eq!(TaskSpec::standard(TaskName::Pmv).n_outputs(), 1);
        assert!(TaskName::parse("icu").is_err());
    }
}
