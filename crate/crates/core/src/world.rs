//! Synthetic fact worlds: subjects, relation attributes, conflict prompts,
//! corruption templates and a word-level tokenizer.
//!
//! Every subject and attribute is a single token, namespaced by the world
//! seed. Prompts are built from fixed word templates, one per relation:
//!
//! ```text
//! The capital of {s} is {a} . Q: What is the capital of {s} ? A:
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_WORD: &str = "<pad>";
pub const UNK_WORD: &str = "<unk>";
pub const QUESTION_MARKER: &str = "Q:";
pub const ANSWER_MARKER: &str = "A:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Capital,
    OfficialLanguage,
    Country,
    Continent,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Capital,
        Relation::OfficialLanguage,
        Relation::Country,
        Relation::Continent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Capital => "capital",
            Self::OfficialLanguage => "official-language",
            Self::Country => "country",
            Self::Continent => "continent",
        }
    }

    /// The one word that names the relation in its question.
    pub fn key_word(self) -> &'static str {
        match self {
            Self::Capital => "capital",
            Self::OfficialLanguage => "language",
            Self::Country => "country",
            Self::Continent => "continent",
        }
    }

    fn attribute_prefix(self) -> &'static str {
        match self {
            Self::Capital => "cap",
            Self::OfficialLanguage => "lang",
            Self::Country => "ctry",
            Self::Continent => "cont",
        }
    }

    /// Context sentence words; `{s}` and `{a}` are placeholders.
    fn context_template(self) -> &'static [&'static str] {
        match self {
            Self::Capital => &["The", "capital", "of", "{s}", "is", "{a}", "."],
            Self::OfficialLanguage => &["The", "official", "language", "of", "{s}", "is", "{a}", "."],
            Self::Country => &["The", "city", "{s}", "is", "located", "in", "{a}", "."],
            Self::Continent => &["{s}", "is", "in", "the", "continent", "of", "{a}", "."],
        }
    }

    fn question_template(self) -> &'static [&'static str] {
        match self {
            Self::Capital => &["Q:", "What", "is", "the", "capital", "of", "{s}", "?", "A:"],
            Self::OfficialLanguage => &[
                "Q:", "What", "is", "the", "official", "language", "of", "{s}", "?", "A:",
            ],
            Self::Country => &["Q:", "Which", "country", "is", "the", "city", "{s}", "in", "?", "A:"],
            Self::Continent => &["Q:", "Which", "continent", "is", "{s}", "located", "in", "?", "A:"],
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s || r.key_word() == s)
            .ok_or_else(|| Error::Data(format!("unknown relation `{s}`")))
    }
}

/// Prefix and suffix distractor clauses wrapped around the context sentence
/// in document form.
const DOCUMENT_TEMPLATES: [(&[&str], &[&str]); 4] = [
    (&["According", "to", "recent", "records", ","], &[]),
    (&[], &["Many", "travellers", "visit", "every", "year", "."]),
    (
        &["In", "a", "recent", "survey", ","],
        &["The", "region", "has", "a", "long", "history", "."],
    ),
    (
        &["Experts", "agree", "on", "one", "point", ":"],
        &["This", "is", "widely", "reported", "."],
    ),
];

const DUAL_MARKERS: [&str; 2] = ["C1:", "C2:"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    Triple,
    Document,
    DualContext,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Triple => "triple",
            Self::Document => "document",
            Self::DualContext => "dual-context",
        })
    }
}

impl FromStr for Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triple" => Ok(Self::Triple),
            "document" => Ok(Self::Document),
            "dual-context" | "dual" => Ok(Self::DualContext),
            _ => Err(Error::Data(format!("unknown form `{s}`"))),
        }
    }
}

/// Input elements of a conflict prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    #[serde(rename = "s_c")]
    ContextSubject,
    #[serde(rename = "r_c")]
    ContextRelation,
    /// Supporting-context attribute; present only in dual-context prompts.
    #[serde(rename = "a_m")]
    MemoryAttribute,
    #[serde(rename = "a_c")]
    ContextAttribute,
    #[serde(rename = "s_q")]
    QuestionSubject,
    #[serde(rename = "r_q")]
    QuestionRelation,
    #[serde(rename = "x_N")]
    LastToken,
}

impl Element {
    /// The six elements of a single-context prompt.
    pub const SINGLE: [Element; 6] = [
        Element::ContextSubject,
        Element::ContextRelation,
        Element::ContextAttribute,
        Element::QuestionSubject,
        Element::QuestionRelation,
        Element::LastToken,
    ];

    /// Dual-context prompts split the context attribute into C1 and C2 rows.
    pub const DUAL: [Element; 7] = [
        Element::ContextSubject,
        Element::ContextRelation,
        Element::MemoryAttribute,
        Element::ContextAttribute,
        Element::QuestionSubject,
        Element::QuestionRelation,
        Element::LastToken,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::ContextSubject => "s_c",
            Self::ContextRelation => "r_c",
            Self::MemoryAttribute => "a_m",
            Self::ContextAttribute => "a_c",
            Self::QuestionSubject => "s_q",
            Self::QuestionRelation => "r_q",
            Self::LastToken => "x_N",
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Element::DUAL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| Error::Data(format!("unknown element `{s}`")))
    }
}

/// Half-open token spans per element.
pub type ElementRanges = BTreeMap<Element, Vec<(usize, usize)>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictExample {
    pub tokens: Vec<usize>,
    pub ranges: ElementRanges,
    pub a_m: usize,
    pub a_c: usize,
    pub form: Form,
}

impl ConflictExample {
    /// Token positions of `element`, ascending; empty if absent.
    pub fn positions(&self, element: Element) -> Vec<usize> {
        self.ranges
            .get(&element)
            .map(|spans| spans.iter().flat_map(|&(s, e)| s..e).collect())
            .unwrap_or_default()
    }

    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Structural checks: spans in bounds and disjoint, `x_N` is the final
    /// position, and the context attribute sits inside its span.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let mut seen = vec![false; n];
        for (el, spans) in &self.ranges {
            for &(s, e) in spans {
                if s >= e || e > n {
                    return Err(Error::Data(format!("{el} span {s}..{e} out of bounds for {n} tokens")));
                }
                for p in s..e {
                    if seen[p] {
                        return Err(Error::Data(format!("position {p} claimed twice")));
                    }
                    seen[p] = true;
                }
            }
        }
        if self.positions(Element::LastToken) != [n.saturating_sub(1)] {
            return Err(Error::Data("x_N must be exactly the final position".into()));
        }
        let ac = self.positions(Element::ContextAttribute);
        if !ac.iter().any(|&p| self.tokens[p] == self.a_c) && !ac.iter().all(|&p| self.tokens[p] == UNK) {
            return Err(Error::Data("a_c token missing from its span".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.split_whitespace().count() != 1 {
                return Err(Error::Data(format!("vocabulary entry `{w}` is not a single word")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Data(format!("unknown word `{w}`"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.word(i).ok_or_else(|| Error::Data(format!("unknown token id {i}"))))
            .collect::<Result<_>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub relations: Vec<Relation>,
    /// Subject token strings.
    pub subjects: Vec<String>,
    /// Attribute token strings, parallel to `relations`.
    pub attributes: Vec<Vec<String>>,
    /// `facts[subject][relation]` is the index of the memory attribute.
    pub facts: Vec<Vec<usize>>,
    pub tokenizer: Tokenizer,
}

/// Every non-entity word any template can emit, in a fixed order.
pub fn template_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    for r in Relation::ALL {
        words.extend(r.context_template().iter().chain(r.question_template()));
    }
    for (pre, post) in DOCUMENT_TEMPLATES {
        words.extend(pre.iter().chain(post.iter()));
    }
    words.extend(DUAL_MARKERS);
    words.retain(|w| *w != "{s}" && *w != "{a}");
    words.sort_unstable();
    words.dedup();
    words
}

/// Builds a world with `n_subjects` subjects and `n_attributes` values per
/// relation. Memory attributes are drawn uniformly; same seed, same world.
pub fn gen_world(n_subjects: usize, relations: &[Relation], n_attributes: usize, seed: u64) -> Result<FactWorld> {
    if n_attributes < 2 {
        return Err(Error::Data(format!(
            "need at least 2 attributes per relation for a counterfactual, got {n_attributes}"
        )));
    }
    if n_subjects == 0 || relations.is_empty() {
        return Err(Error::Data("world needs at least one subject and one relation".into()));
    }
    let mut rels = relations.to_vec();
    rels.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects: Vec<String> = (0..n_subjects).map(|i| format!("S{seed}_{i}")).collect();
    let attributes: Vec<Vec<String>> = rels
        .iter()
        .map(|r| {
            (0..n_attributes)
                .map(|j| format!("{}{seed}_{j}", r.attribute_prefix()))
                .collect()
        })
        .collect();
    let facts = (0..n_subjects)
        .map(|_| rels.iter().map(|_| rng.gen_range(0..n_attributes)).collect())
        .collect();
    let mut words: Vec<String> = vec![PAD_WORD.into(), UNK_WORD.into()];
    words.extend(template_words().into_iter().map(String::from));
    words.extend(subjects.iter().cloned());
    for attrs in &attributes {
        words.extend(attrs.iter().cloned());
    }
    Ok(FactWorld {
        seed,
        relations: rels,
        subjects,
        attributes,
        facts,
        tokenizer: Tokenizer::new(words)?,
    })
}

impl FactWorld {
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.len()
    }

    fn relation_index(&self, relation: Relation) -> Result<usize> {
        self.relations
            .iter()
            .position(|&r| r == relation)
            .ok_or_else(|| Error::Data(format!("relation `{relation}` not in this world")))
    }

    pub fn subject_token(&self, subject: usize) -> usize {
        self.tokenizer.id(&self.subjects[subject]).expect("subject in vocabulary")
    }

    pub fn attribute_token(&self, relation: usize, attribute: usize) -> usize {
        self.tokenizer
            .id(&self.attributes[relation][attribute])
            .expect("attribute in vocabulary")
    }

    /// Memory attribute token for (subject, relation).
    pub fn memory_attribute(&self, subject: usize, relation: Relation) -> Result<usize> {
        let r = self.relation_index(relation)?;
        let s = self
            .facts
            .get(subject)
            .ok_or_else(|| Error::Data(format!("no subject {subject}")))?;
        Ok(self.attribute_token(r, s[r]))
    }

    /// Every attribute token, grouped by relation.
    pub fn attribute_tokens(&self) -> Vec<Vec<usize>> {
        (0..self.relations.len())
            .map(|r| (0..self.attributes[r].len()).map(|a| self.attribute_token(r, a)).collect())
            .collect()
    }

    /// Renders one conflict prompt. The counterfactual attribute is drawn
    /// from `seed`, the subject and the relation, never equal to `a_m`.
    pub fn render(&self, subject: usize, relation: Relation, form: Form, seed: u64) -> Result<ConflictExample> {
        let r = self.relation_index(relation)?;
        if subject >= self.subjects.len() {
            return Err(Error::Data(format!("no subject {subject}")));
        }
        let mem_idx = self.facts[subject][r];
        let mix = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((subject as u64) << 8)
            .wrapping_add(r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let others: Vec<usize> = (0..self.attributes[r].len()).filter(|&a| a != mem_idx).collect();
        let ctx_idx = *others.choose(&mut rng).expect("at least two attributes");
        let a_m = self.attribute_token(r, mem_idx);
        let a_c = self.attribute_token(r, ctx_idx);
        let s_tok = self.subject_token(subject);

        let mut b = Builder::new(&self.tokenizer);
        match form {
            Form::Triple => {
                b.clause(relation.context_template(), s_tok, a_c, Element::ContextAttribute);
            }
            Form::Document => {
                let (pre, post) = DOCUMENT_TEMPLATES[rng.gen_range(0..DOCUMENT_TEMPLATES.len())];
                b.filler(pre);
                b.clause(relation.context_template(), s_tok, a_c, Element::ContextAttribute);
                b.filler(post);
            }
            Form::DualContext => {
                b.word(DUAL_MARKERS[0], Some(Element::ContextRelation));
                b.clause(relation.context_template(), s_tok, a_m, Element::MemoryAttribute);
                b.word(DUAL_MARKERS[1], Some(Element::ContextRelation));
                b.clause(relation.context_template(), s_tok, a_c, Element::ContextAttribute);
            }
        }
        b.question(relation.question_template(), s_tok);
        let ex = ConflictExample {
            tokens: b.tokens,
            ranges: b.ranges,
            a_m,
            a_c,
            form,
        };
        ex.validate()?;
        Ok(ex)
    }

    /// One example per (subject, relation), subjects outermost.
    pub fn dataset(&self, form: Form, seed: u64) -> Result<Vec<ConflictExample>> {
        let mut out = Vec::with_capacity(self.subjects.len() * self.relations.len());
        for s in 0..self.subjects.len() {
            for &r in &self.relations {
                out.push(self.render(s, r, form, seed)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut w: FactWorld = serde_json::from_reader(std::io::BufReader::new(f))?;
        w.tokenizer.reindex();
        Ok(w)
    }
}

struct Builder<'a> {
    tok: &'a Tokenizer,
    tokens: Vec<usize>,
    ranges: ElementRanges,
}

impl<'a> Builder<'a> {
    fn new(tok: &'a Tokenizer) -> Self {
        Self {
            tok,
            tokens: Vec::new(),
            ranges: BTreeMap::new(),
        }
    }

    fn push(&mut self, id: usize, el: Option<Element>) {
        let p = self.tokens.len();
        self.tokens.push(id);
        if let Some(el) = el {
            let spans = self.ranges.entry(el).or_default();
            match spans.last_mut() {
                Some(last) if last.1 == p => last.1 = p + 1,
                _ => spans.push((p, p + 1)),
            }
        }
    }

    fn word(&mut self, w: &str, el: Option<Element>) {
        let id = self.tok.id(w).expect("template word in vocabulary");
        self.push(id, el);
    }

    fn filler(&mut self, words: &[&str]) {
        for w in words {
            self.word(w, None);
        }
    }

    fn clause(&mut self, template: &[&str], subject: usize, attr: usize, attr_el: Element) {
        for w in template {
            match *w {
                "{s}" => self.push(subject, Some(Element::ContextSubject)),
                "{a}" => self.push(attr, Some(attr_el)),
                _ => self.word(w, Some(Element::ContextRelation)),
            }
        }
    }

    fn question(&mut self, template: &[&str], subject: usize) {
        let last = template.len() - 1;
        for (i, w) in template.iter().enumerate() {
            match *w {
                "{s}" => self.push(subject, Some(Element::QuestionSubject)),
                _ if i == last => self.word(w, Some(Element::LastToken)),
                _ => self.word(w, Some(Element::QuestionRelation)),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptMode {
    /// Replace the context attribute with `<unk>`.
    MaskAttribute,
    /// Replace both subject mentions with `<unk>`.
    MaskSubject,
}

impl fmt::Display for CorruptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaskAttribute => "mask-attribute",
            Self::MaskSubject => "mask-subject",
        })
    }
}

impl FromStr for CorruptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-attribute" => Ok(Self::MaskAttribute),
            "mask-subject" => Ok(Self::MaskSubject),
            _ => Err(Error::Data(format!("unknown corruption mode `{s}`"))),
        }
    }
}

/// Corrupted copy of `example`: masked spans become `<unk>`, length and
/// annotations are preserved.
pub fn corrupt(example: &ConflictExample, mode: CorruptMode) -> Result<ConflictExample> {
    if example.form == Form::DualContext {
        return Err(Error::Data(format!("{mode} corruption is undefined for dual-context prompts")));
    }
    let targets: &[Element] = match mode {
        CorruptMode::MaskAttribute => &[Element::ContextAttribute],
        CorruptMode::MaskSubject => &[Element::ContextSubject, Element::QuestionSubject],
    };
    let mut out = example.clone();
    for &el in targets {
        let pos = example.positions(el);
        if pos.is_empty() {
            return Err(Error::MissingElement(el.to_string()));
        }
        for p in pos {
            out.tokens[p] = UNK;
        }
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[ConflictExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ConflictExample>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ConflictExample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}
