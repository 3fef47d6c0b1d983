//! Synthetic multi-aspect instruction corpus with rule-checkable targets.
//!
//! Six aspects mirror the usual controllable-generation task families:
//! sentiment, topic, multi (sentiment and topic at once), length, keyword and
//! detoxification. Instructions are short marker-token templates; targets are
//! generated from a small clause grammar so that every target satisfies its
//! own constraint by construction.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::fnv1a64;
use crate::error::{Error, Result};
use crate::gating::AspectId;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

pub const SENTIMENT: AspectId = AspectId(0);
pub const TOPIC: AspectId = AspectId(1);
pub const MULTI: AspectId = AspectId(2);
pub const LENGTH: AspectId = AspectId(3);
pub const KEYWORD: AspectId = AspectId(4);
pub const DETOX: AspectId = AspectId(5);

pub const N_ASPECTS: usize = 6;
pub const ASPECT_NAMES: [&str; N_ASPECTS] = ["sentiment", "topic", "multi", "length", "keyword", "detox"];

pub fn aspect_name(aspect: AspectId) -> &'static str {
    ASPECT_NAMES.get(aspect.0).copied().unwrap_or("unknown")
}

pub fn aspect_from_name(name: &str) -> Option<AspectId> {
    let name = name.trim().to_ascii_lowercase();
    let canonical = match name.as_str() {
        "sent" | "sentiment" => "sentiment",
        "topic" => "topic",
        "multi" => "multi",
        "len" | "length" => "length",
        "kw" | "keyword" => "keyword",
        "detox" | "detoxification" => "detox",
        other => other,
    };
    ASPECT_NAMES.iter().position(|n| *n == canonical).map(AspectId)
}

/// Lexicons and grammar for the toy tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// `(attribute name, lexicon)`; order gives attribute indices.
    pub sentiments: Vec<(String, Vec<String>)>,
    pub topics: Vec<(String, Vec<String>)>,
    pub nouns: Vec<String>,
    pub determiners: Vec<String>,
    pub links: Vec<String>,
    pub conjunctions: Vec<String>,
    pub keywords: Vec<String>,
    pub banned: Vec<String>,
    /// Inclusive bounds of lengths used by length instructions.
    pub length_bounds: (usize, usize),
    /// Inclusive bounds of target lengths for the other aspects.
    pub target_len: (usize, usize),
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            sentiments: vec![
                ("positive".into(), words("good great happy love bright joy kind calm")),
                ("negative".into(), words("bad sad awful hate dark angry cruel gloomy")),
                ("neutral".into(), words("okay plain usual average normal moderate fair standard")),
            ],
            topics: vec![
                ("sports".into(), words("ball goal team coach match score race court")),
                ("tech".into(), words("code chip data robot laptop cloud server pixel")),
                ("food".into(), words("bread soup spice salad cheese pasta fruit sauce")),
                ("travel".into(), words("train hotel beach map flight passport island trail")),
            ],
            nouns: words("day time place thing way home world life"),
            determiners: words("the a"),
            links: words("is was with of"),
            conjunctions: words("and to"),
            keywords: words("lamp river garden music paper stone candle mirror bridge forest violin harbor"),
            banned: words("idiot stupid trash loser dumb ugly"),
            length_bounds: (5, 30),
            target_len: (8, 12),
        }
    }
}

impl TaskSpec {
    pub fn attribute_counts(&self) -> [usize; N_ASPECTS] {
        [
            self.sentiments.len(),
            self.topics.len(),
            self.sentiments.len() * self.topics.len(),
            3,
            3,
            1,
        ]
    }
}

/// Dense token inventory. Ids `0..4` are PAD, BOS, EOS, SEP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub task_markers: Vec<usize>,
    pub sentiment_markers: Vec<usize>,
    pub topic_markers: Vec<usize>,
    /// at-most, range, exact
    pub length_markers: Vec<usize>,
    pub clean_marker: usize,
    pub digits: Vec<usize>,
    pub sentiment_lexicons: Vec<Vec<usize>>,
    pub topic_lexicons: Vec<Vec<usize>>,
    pub nouns: Vec<usize>,
    pub determiners: Vec<usize>,
    pub links: Vec<usize>,
    pub conjunctions: Vec<usize>,
    pub keywords: Vec<usize>,
    pub banned: Vec<usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<?>", String::as_str)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    fn is_banned(&self, t: usize) -> bool {
        self.banned.contains(&t)
    }
}

/// Assign dense ids to every marker and lexicon entry. Fails if any word is
/// claimed twice.
pub fn build_vocab(spec: &TaskSpec) -> Result<Vocab> {
    let mut tokens: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut add = |tokens: &mut Vec<String>, w: &str| -> Result<usize> {
        if !seen.insert(w.to_string()) {
            return Err(Error::Spec(format!("lexicon collision on {w:?}")));
        }
        tokens.push(w.to_string());
        Ok(tokens.len() - 1)
    };
    let add_all = |tokens: &mut Vec<String>, ws: &[String], add: &mut dyn FnMut(&mut Vec<String>, &str) -> Result<usize>| {
        ws.iter().map(|w| add(tokens, w)).collect::<Result<Vec<_>>>()
    };
    for s in ["<pad>", "<bos>", "<eos>", "<sep>"] {
        add(&mut tokens, s)?;
    }
    let task_markers = ASPECT_NAMES
        .iter()
        .map(|n| add(&mut tokens, &format!("<task:{n}>")))
        .collect::<Result<Vec<_>>>()?;
    let sentiment_markers = spec
        .sentiments
        .iter()
        .map(|(n, _)| add(&mut tokens, &format!("<sent:{n}>")))
        .collect::<Result<Vec<_>>>()?;
    let topic_markers = spec
        .topics
        .iter()
        .map(|(n, _)| add(&mut tokens, &format!("<topic:{n}>")))
        .collect::<Result<Vec<_>>>()?;
    let length_markers = ["<len:at_most>", "<len:range>", "<len:exact>"]
        .iter()
        .map(|m| add(&mut tokens, m))
        .collect::<Result<Vec<_>>>()?;
    let clean_marker = add(&mut tokens, "<detox:clean>")?;
    let digits = (0..10).map(|d| add(&mut tokens, &format!("#{d}"))).collect::<Result<Vec<_>>>()?;
    let mut sentiment_lexicons = Vec::new();
    for (_, lex) in &spec.sentiments {
        sentiment_lexicons.push(add_all(&mut tokens, lex, &mut add)?);
    }
    let mut topic_lexicons = Vec::new();
    for (_, lex) in &spec.topics {
        topic_lexicons.push(add_all(&mut tokens, lex, &mut add)?);
    }
    let nouns = add_all(&mut tokens, &spec.nouns, &mut add)?;
    let determiners = add_all(&mut tokens, &spec.determiners, &mut add)?;
    let links = add_all(&mut tokens, &spec.links, &mut add)?;
    let conjunctions = add_all(&mut tokens, &spec.conjunctions, &mut add)?;
    let keywords = add_all(&mut tokens, &spec.keywords, &mut add)?;
    let banned = add_all(&mut tokens, &spec.banned, &mut add)?;
    if spec.sentiments.is_empty() || spec.topics.is_empty() || spec.nouns.is_empty() || spec.keywords.len() < 3 {
        return Err(Error::Spec("every lexicon needs entries (and at least 3 keywords)".into()));
    }
    if spec.determiners.is_empty() || spec.links.is_empty() || spec.conjunctions.is_empty() {
        return Err(Error::Spec("function-word lists must be nonempty".into()));
    }
    let (lo, hi) = spec.length_bounds;
    if lo < 1 || hi < lo + 2 || hi > 99 {
        return Err(Error::Spec(format!("length bounds {lo}..={hi} unusable")));
    }
    if spec.target_len.0 < 5 || spec.target_len.1 < spec.target_len.0 {
        return Err(Error::Spec("target lengths must be at least 5 tokens".into()));
    }
    Ok(Vocab {
        tokens,
        task_markers,
        sentiment_markers,
        topic_markers,
        length_markers,
        clean_marker,
        digits,
        sentiment_lexicons,
        topic_lexicons,
        nouns,
        determiners,
        links,
        conjunctions,
        keywords,
        banned,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthWindow {
    AtMost(usize),
    Range(usize, usize),
    Exact(usize),
}

impl LengthWindow {
    pub fn contains(self, n: usize) -> bool {
        match self {
            LengthWindow::AtMost(m) => n <= m,
            LengthWindow::Range(lo, hi) => (lo..=hi).contains(&n),
            LengthWindow::Exact(m) => n == m,
        }
    }

    pub fn kind(self) -> usize {
        match self {
            LengthWindow::AtMost(_) => 0,
            LengthWindow::Range(..) => 1,
            LengthWindow::Exact(_) => 2,
        }
    }
}

/// What a generated continuation must satisfy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Sentiment(usize),
    Topic(usize),
    Multi { sentiment: usize, topic: usize },
    Length(LengthWindow),
    Keyword(Vec<usize>),
    Detox,
}

fn push_number(vocab: &Vocab, out: &mut Vec<usize>, n: usize) {
    out.push(vocab.digits[(n / 10) % 10]);
    out.push(vocab.digits[n % 10]);
}

fn read_number(vocab: &Vocab, toks: &[usize]) -> Option<usize> {
    let d = |t: usize| vocab.digits.iter().position(|&x| x == t);
    match toks {
        [a, b] => Some(d(*a)? * 10 + d(*b)?),
        _ => None,
    }
}

impl Constraint {
    pub fn aspect(&self) -> AspectId {
        match self {
            Constraint::Sentiment(_) => SENTIMENT,
            Constraint::Topic(_) => TOPIC,
            Constraint::Multi { .. } => MULTI,
            Constraint::Length(_) => LENGTH,
            Constraint::Keyword(_) => KEYWORD,
            Constraint::Detox => DETOX,
        }
    }

    /// Attribute index within the aspect; multi uses the composite
    /// `sentiment × n_topics + topic` label.
    pub fn attribute(&self, vocab: &Vocab) -> usize {
        match self {
            Constraint::Sentiment(s) => *s,
            Constraint::Topic(t) => *t,
            Constraint::Multi { sentiment, topic } => sentiment * vocab.topic_lexicons.len() + topic,
            Constraint::Length(w) => w.kind(),
            Constraint::Keyword(k) => k.len().saturating_sub(1),
            Constraint::Detox => 0,
        }
    }

    pub fn instruction(&self, vocab: &Vocab) -> Vec<usize> {
        let mut out = vec![vocab.task_markers[self.aspect().0]];
        match self {
            Constraint::Sentiment(s) => out.push(vocab.sentiment_markers[*s]),
            Constraint::Topic(t) => out.push(vocab.topic_markers[*t]),
            Constraint::Multi { sentiment, topic } => {
                out.push(vocab.sentiment_markers[*sentiment]);
                out.push(vocab.topic_markers[*topic]);
            }
            Constraint::Length(w) => {
                out.push(vocab.length_markers[w.kind()]);
                match *w {
                    LengthWindow::AtMost(n) | LengthWindow::Exact(n) => push_number(vocab, &mut out, n),
                    LengthWindow::Range(a, b) => {
                        push_number(vocab, &mut out, a);
                        push_number(vocab, &mut out, b);
                    }
                }
            }
            Constraint::Keyword(k) => out.extend_from_slice(k),
            Constraint::Detox => out.push(vocab.clean_marker),
        }
        out
    }

    /// Recover the constraint encoded in an instruction.
    pub fn parse(vocab: &Vocab, instruction: &[usize]) -> Result<Constraint> {
        let bad = || Error::Domain(format!("malformed instruction [{}]", vocab.render(instruction)));
        let (&task, rest) = instruction.split_first().ok_or_else(bad)?;
        let aspect = vocab.task_markers.iter().position(|&m| m == task).ok_or_else(bad)?;
        let pos = |list: &[usize], t: usize| list.iter().position(|&m| m == t);
        let c = match (AspectId(aspect), rest) {
            (SENTIMENT, [s]) => Constraint::Sentiment(pos(&vocab.sentiment_markers, *s).ok_or_else(bad)?),
            (TOPIC, [t]) => Constraint::Topic(pos(&vocab.topic_markers, *t).ok_or_else(bad)?),
            (MULTI, [s, t]) => Constraint::Multi {
                sentiment: pos(&vocab.sentiment_markers, *s).ok_or_else(bad)?,
                topic: pos(&vocab.topic_markers, *t).ok_or_else(bad)?,
            },
            (LENGTH, [kind, nums @ ..]) => {
                let kind = pos(&vocab.length_markers, *kind).ok_or_else(bad)?;
                let w = match (kind, nums.len()) {
                    (0, 2) => LengthWindow::AtMost(read_number(vocab, nums).ok_or_else(bad)?),
                    (2, 2) => LengthWindow::Exact(read_number(vocab, nums).ok_or_else(bad)?),
                    (1, 4) => LengthWindow::Range(
                        read_number(vocab, &nums[..2]).ok_or_else(bad)?,
                        read_number(vocab, &nums[2..]).ok_or_else(bad)?,
                    ),
                    _ => return Err(bad()),
                };
                Constraint::Length(w)
            }
            (KEYWORD, ks) if !ks.is_empty() && ks.iter().all(|k| vocab.keywords.contains(k)) => {
                Constraint::Keyword(ks.to_vec())
            }
            (DETOX, [c]) if *c == vocab.clean_marker => Constraint::Detox,
            _ => return Err(bad()),
        };
        Ok(c)
    }
}

/// One instruction-following example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    #[serde(rename = "aspect_id")]
    pub aspect: AspectId,
    pub attribute: usize,
    #[serde(rename = "instruction_tokens")]
    pub instruction: Vec<usize>,
    #[serde(rename = "target_tokens")]
    pub target: Vec<usize>,
}

impl TrainingSample {
    /// `<bos> instruction <sep>`
    pub fn prompt(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.instruction.len() + 2);
        out.push(BOS);
        out.extend_from_slice(&self.instruction);
        out.push(SEP);
        out
    }

    /// `<bos> instruction <sep> target <eos>`
    pub fn sequence(&self) -> Vec<usize> {
        let mut out = self.prompt();
        out.extend_from_slice(&self.target);
        out.push(EOS);
        out
    }

    /// Positions whose next-token prediction is a target token or the final
    /// `<eos>`: from the `<sep>` position to the last target token.
    pub fn target_positions(&self) -> std::ops::Range<usize> {
        let sep = self.instruction.len() + 1;
        sep..sep + self.target.len() + 1
    }

    /// The same text with the instruction removed.
    pub fn without_instruction(&self) -> TrainingSample {
        TrainingSample {
            instruction: Vec::new(),
            ..self.clone()
        }
    }
}

/// Clause grammar: `det content link content conj` repeated.
fn clause_text<R: Rng>(vocab: &Vocab, len: usize, rng: &mut R, content: &mut dyn FnMut(&mut R) -> usize) -> Vec<usize> {
    (0..len)
        .map(|i| match i % 5 {
            0 => *vocab.determiners.choose(rng).expect("nonempty"),
            1 | 3 => content(rng),
            2 => *vocab.links.choose(rng).expect("nonempty"),
            _ => *vocab.conjunctions.choose(rng).expect("nonempty"),
        })
        .collect()
}

fn content_slots(len: usize) -> Vec<usize> {
    (0..len).filter(|i| i % 5 == 1 || i % 5 == 3).collect()
}

fn noun<R: Rng>(vocab: &Vocab, rng: &mut R) -> usize {
    *vocab.nouns.choose(rng).expect("nonempty")
}

/// Ensure at least one token from `lexicon` sits in a content slot.
fn ensure_present<R: Rng>(text: &mut [usize], lexicon: &[usize], rng: &mut R) {
    if text.iter().any(|t| lexicon.contains(t)) {
        return;
    }
    let slots = content_slots(text.len());
    if let Some(&i) = slots.choose(rng) {
        text[i] = *lexicon.choose(rng).expect("nonempty");
    }
}

/// A target satisfying `constraint`.
pub fn target_for<R: Rng>(vocab: &Vocab, spec: &TaskSpec, constraint: &Constraint, rng: &mut R) -> Result<Vec<usize>> {
    let len = rng.random_range(spec.target_len.0..=spec.target_len.1);
    let text = match constraint {
        Constraint::Sentiment(s) => {
            let lex = &vocab.sentiment_lexicons[*s];
            let mut t = clause_text(vocab, len, rng, &mut |r| {
                if r.random_bool(0.5) {
                    *lex.choose(r).expect("nonempty")
                } else {
                    noun(vocab, r)
                }
            });
            ensure_present(&mut t, lex, rng);
            t
        }
        Constraint::Topic(tp) => {
            let lex = &vocab.topic_lexicons[*tp];
            let mut t = clause_text(vocab, len, rng, &mut |r| {
                if r.random_bool(0.5) {
                    *lex.choose(r).expect("nonempty")
                } else {
                    noun(vocab, r)
                }
            });
            ensure_present(&mut t, lex, rng);
            t
        }
        Constraint::Multi { sentiment, topic } => {
            let sl = &vocab.sentiment_lexicons[*sentiment];
            let tl = &vocab.topic_lexicons[*topic];
            let mut t = clause_text(vocab, len, rng, &mut |r| {
                let u: f64 = r.random();
                if u < 0.4 {
                    *sl.choose(r).expect("nonempty")
                } else if u < 0.8 {
                    *tl.choose(r).expect("nonempty")
                } else {
                    noun(vocab, r)
                }
            });
            let mut slots = content_slots(len);
            slots.shuffle(rng);
            t[slots[0]] = *sl.choose(rng).expect("nonempty");
            t[slots[1]] = *tl.choose(rng).expect("nonempty");
            t
        }
        Constraint::Length(w) => {
            let n = match *w {
                LengthWindow::AtMost(m) => rng.random_range(m.div_ceil(2).max(1)..=m),
                LengthWindow::Range(a, b) => {
                    if a > b {
                        return Err(Error::Spec(format!("empty length range {a}..={b}")));
                    }
                    rng.random_range(a..=b)
                }
                LengthWindow::Exact(m) => m,
            };
            if n == 0 {
                return Err(Error::Spec("zero-length target".into()));
            }
            clause_text(vocab, n, rng, &mut |r| noun(vocab, r))
        }
        Constraint::Keyword(ks) => {
            if let Some(k) = ks.iter().find(|k| vocab.is_banned(**k)) {
                return Err(Error::Spec(format!("required keyword {} is banned", vocab.token(*k))));
            }
            let mut t = clause_text(vocab, len, rng, &mut |r| noun(vocab, r));
            let mut slots = content_slots(len);
            if slots.len() < ks.len() {
                return Err(Error::Spec(format!("{} keywords do not fit a {len}-token target", ks.len())));
            }
            slots.shuffle(rng);
            for (&slot, &k) in slots.iter().zip(ks) {
                t[slot] = k;
            }
            t
        }
        Constraint::Detox => clause_text(vocab, len, rng, &mut |r| noun(vocab, r)),
    };
    Ok(text)
}

/// Text deliberately sprinkled with banned tokens; used only for pretraining.
pub fn toxic_text<R: Rng>(vocab: &Vocab, spec: &TaskSpec, rng: &mut R) -> Vec<usize> {
    let len = rng.random_range(spec.target_len.0..=spec.target_len.1);
    let mut t = clause_text(vocab, len, rng, &mut |r| {
        if r.random_bool(0.5) {
            *vocab.banned.choose(r).expect("nonempty")
        } else {
            noun(vocab, r)
        }
    });
    ensure_present(&mut t, &vocab.banned, rng);
    t
}

/// Draw a random constraint for `aspect`.
pub fn random_constraint<R: Rng>(vocab: &Vocab, spec: &TaskSpec, aspect: AspectId, rng: &mut R) -> Result<Constraint> {
    let (lo, hi) = spec.length_bounds;
    Ok(match aspect {
        SENTIMENT => Constraint::Sentiment(rng.random_range(0..vocab.sentiment_lexicons.len())),
        TOPIC => Constraint::Topic(rng.random_range(0..vocab.topic_lexicons.len())),
        MULTI => Constraint::Multi {
            sentiment: rng.random_range(0..vocab.sentiment_lexicons.len()),
            topic: rng.random_range(0..vocab.topic_lexicons.len()),
        },
        LENGTH => Constraint::Length(match rng.random_range(0..3) {
            0 => LengthWindow::AtMost(rng.random_range(lo..=hi)),
            1 => {
                let a = rng.random_range(lo..=hi - 2);
                let b = rng.random_range(a + 2..=(a + 6).min(hi));
                LengthWindow::Range(a, b)
            }
            _ => LengthWindow::Exact(rng.random_range(lo..=hi)),
        }),
        KEYWORD => {
            let k = rng.random_range(1..=3);
            let mut pool = vocab.keywords.clone();
            pool.shuffle(rng);
            pool.truncate(k);
            Constraint::Keyword(pool)
        }
        DETOX => Constraint::Detox,
        other => return Err(Error::Domain(format!("unknown aspect {other}"))),
    })
}

/// splitmix64 finalizer used to derive independent per-sample seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

pub fn make_sample<R: Rng>(vocab: &Vocab, spec: &TaskSpec, constraint: Constraint, rng: &mut R) -> Result<TrainingSample> {
    let target = target_for(vocab, spec, &constraint, rng)?;
    Ok(TrainingSample {
        aspect: constraint.aspect(),
        attribute: constraint.attribute(vocab),
        instruction: constraint.instruction(vocab),
        target,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub aspects: Vec<AspectId>,
    pub count: usize,
}

impl Truncation {
    /// Parse `sent,keyword,multi:1000`.
    pub fn parse(s: &str) -> Result<Truncation> {
        let (names, count) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("truncation {s:?} lacks ':<count>'")))?;
        let count = count
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad truncation count in {s:?}")))?;
        let aspects = names
            .split(',')
            .map(|n| aspect_from_name(n).ok_or_else(|| Error::Config(format!("unknown aspect {n:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Truncation { aspects, count })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Training samples per aspect before truncation.
    pub train_per_aspect: Vec<usize>,
    pub test_fraction: f64,
    #[serde(default)]
    pub truncate: Option<Truncation>,
    #[serde(default)]
    pub spec: TaskSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            train_per_aspect: vec![1000; N_ASPECTS],
            test_fraction: 0.1,
            truncate: None,
            spec: TaskSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub truncate: Option<Truncation>,
    pub vocab: Vec<String>,
    pub train_fnv1a64: String,
    pub test_fnv1a64: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub spec: TaskSpec,
    pub train: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
    pub manifest: CorpusManifest,
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn generate_split(vocab: &Vocab, spec: &TaskSpec, seed: u64, stream: u64, counts: &[usize]) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (a, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, stream, a as u64, i as u64]));
            let c = random_constraint(vocab, spec, AspectId(a), &mut rng)?;
            out.push(make_sample(vocab, spec, c, &mut rng)?);
        }
    }
    Ok(out)
}

/// JSON-lines encoding of a split.
pub fn to_jsonl(samples: &[TrainingSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Generate train and held-out test splits. Test sizes are a fraction of
/// the nominal (untruncated) per-aspect count and use a separate seed stream.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.train_per_aspect.len() != N_ASPECTS {
        return Err(Error::Config(format!("expected {N_ASPECTS} per-aspect counts")));
    }
    if !(0.0..=1.0).contains(&config.test_fraction) {
        return Err(Error::Config("test_fraction outside [0, 1]".into()));
    }
    let vocab = build_vocab(&config.spec)?;
    let mut train_counts = config.train_per_aspect.clone();
    if let Some(t) = &config.truncate {
        for a in &t.aspects {
            train_counts[a.0] = train_counts[a.0].min(t.count);
        }
    }
    let test_counts: Vec<usize> = config
        .train_per_aspect
        .iter()
        .map(|&n| (n as f64 * config.test_fraction).round() as usize)
        .collect();
    let train = generate_split(&vocab, &config.spec, config.seed, TRAIN_STREAM, &train_counts)?;
    let test = generate_split(&vocab, &config.spec, config.seed, TEST_STREAM, &test_counts)?;
    let manifest = CorpusManifest {
        seed: config.seed,
        train_counts,
        test_counts,
        truncate: config.truncate.clone(),
        vocab: vocab.tokens.clone(),
        train_fnv1a64: format!("{:016x}", fnv1a64(&to_jsonl(&train)?)),
        test_fnv1a64: format!("{:016x}", fnv1a64(&to_jsonl(&test)?)),
    };
    Ok(Corpus {
        vocab,
        spec: config.spec.clone(),
        train,
        test,
        manifest,
    })
}

/// Attribute-agnostic pretraining texts: every target without its
/// instruction, plus `toxic` extra texts containing banned tokens.
pub fn pretraining_samples(corpus: &Corpus, toxic: usize, seed: u64) -> Vec<TrainingSample> {
    let mut out: Vec<TrainingSample> = corpus.train.iter().map(TrainingSample::without_instruction).collect();
    for i in 0..toxic {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3, i as u64]));
        out.push(TrainingSample {
            aspect: DETOX,
            attribute: 0,
            instruction: Vec::new(),
            target: toxic_text(&corpus.vocab, &corpus.spec, &mut rng),
        });
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `train.jsonl`, `test.jsonl`, `manifest.json` and `spec.json`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("train.jsonl"), &to_jsonl(&corpus.train)?)?;
    write_file(&dir.join("test.jsonl"), &to_jsonl(&corpus.test)?)?;
    write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&corpus.manifest)?)?;
    write_file(&dir.join("spec.json"), &serde_json::to_vec_pretty(&corpus.spec)?)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest: CorpusManifest = serde_json::from_slice(&read("manifest.json")?)?;
    let spec: TaskSpec = serde_json::from_slice(&read("spec.json")?)?;
    let vocab = build_vocab(&spec)?;
    if vocab.tokens != manifest.vocab {
        return Err(Error::Spec("vocabulary in manifest does not match spec".into()));
    }
    Ok(Corpus {
        vocab,
        spec,
        train: read_jsonl(&dir.join("train.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_dense_and_disjoint() {
        let v = build_vocab(&TaskSpec::default()).unwrap();
        assert!((110..=140).contains(&v.len()), "{}", v.len());
        let pos: BTreeSet<_> = v.sentiment_lexicons[0].iter().collect();
        let neg: BTreeSet<_> = v.sentiment_lexicons[1].iter().collect();
        assert!(pos.is_disjoint(&neg));
        let all: BTreeSet<&String> = v.tokens.iter().collect();
        assert_eq!(all.len(), v.len());
        assert_eq!(v.token(EOS), "<eos>");
    }

    #[test]
    fn vocab_serialization_round_trips() {
        let v = build_vocab(&TaskSpec::default()).unwrap();
        let a = serde_json::to_vec(&v).unwrap();
        let back: Vocab = serde_json::from_slice(&a).unwrap();
        assert_eq!(serde_json::to_vec(&back).unwrap(), a);
    }

    #[test]
    fn collision_is_spec_error() {
        let mut spec = TaskSpec::default();
        spec.topics[0].1.push("good".into());
        assert!(matches!(build_vocab(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn banned_keyword_is_spec_error() {
        let spec = TaskSpec::default();
        let v = build_vocab(&spec).unwrap();
        let c = Constraint::Keyword(vec![v.banned[0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(target_for(&v, &spec, &c, &mut rng), Err(Error::Spec(_))));
    }

    #[test]
    fn instructions_round_trip_through_parse() {
        let spec = TaskSpec::default();
        let v = build_vocab(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for a in 0..N_ASPECTS {
            for _ in 0..50 {
                let c = random_constraint(&v, &spec, AspectId(a), &mut rng).unwrap();
                assert_eq!(Constraint::parse(&v, &c.instruction(&v)).unwrap(), c);
            }
        }
    }

    #[test]
    fn counts_and_truncation() {
        let cfg = CorpusConfig {
            train_per_aspect: vec![20; N_ASPECTS],
            truncate: Some(Truncation::parse("sent,keyword,multi:5").unwrap()),
            ..Default::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.manifest.train_counts, vec![5, 20, 5, 20, 5, 20]);
        assert_eq!(c.manifest.test_counts, vec![2; N_ASPECTS]);
        assert_eq!(c.train.len(), 75);
        // truncated sets are prefixes of the full generation
        let full = generate_corpus(&CorpusConfig {
            train_per_aspect: vec![20; N_ASPECTS],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(&c.train[..5], &full.train[..5]);
    }

    #[test]
    fn truncation_parse_errors() {
        assert!(Truncation::parse("sent,keyword").is_err());
        assert!(Truncation::parse("sent,bogus:10").is_err());
        assert!(Truncation::parse("sent:x").is_err());
    }
}
