//! Synthetic language family: a shared proto-grammar plus per-language
//! vocabulary permutations and word-order transforms, with task annotations
//! (tags, entity spans, dependency heads and labels) projected through each
//! language's transform.

mod files;
mod generate;
mod grammar;
mod transform;

pub use files::{
    read_corpus_file, read_task_file, write_corpus_file, write_task_file,
};
pub use generate::{
    generate_corpus, generate_parallel, generate_task_dataset, make_family, make_family_with,
    sample_proto_sentences, LanguageFamily, ParallelPair, SplitSizes, DEFAULT_PARALLEL_PAIRS,
};
pub use grammar::{default_grammar, DerivNode, LexClassId, ProtoGrammar, Rule, Symbol};
pub use transform::OrderTransform;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed data file (line {line}): {what}")]
    Format { line: usize, what: String },
    #[error("data file I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Token ids reserved ahead of any language's vocabulary.
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;
/// First token id available to language vocabularies.
pub const RESERVED_IDS: usize = 5;

/// Part-of-speech classes of the proto-grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum TagClass {
    Det,
    Adj,
    Noun,
    Propn,
    Num,
    Verb,
    Adv,
    Prep,
}

pub const ALL_TAGS: [TagClass; 8] = [
    TagClass::Det,
    TagClass::Adj,
    TagClass::Noun,
    TagClass::Propn,
    TagClass::Num,
    TagClass::Verb,
    TagClass::Adv,
    TagClass::Prep,
];

impl TagClass {
    pub fn index(self) -> usize {
        ALL_TAGS.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TagClass::Det => "DET",
            TagClass::Adj => "ADJ",
            TagClass::Noun => "NOUN",
            TagClass::Propn => "PROPN",
            TagClass::Num => "NUM",
            TagClass::Verb => "VERB",
            TagClass::Adv => "ADV",
            TagClass::Prep => "PREP",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_TAGS.iter().copied().find(|t| t.name() == name)
    }
}

/// Dependency labels assigned by the grammar's head rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum DepLabel {
    Root,
    Nsubj,
    Obj,
    Det,
    Amod,
    Nummod,
    Advmod,
    Case,
    Obl,
    Nmod,
    Flat,
}

pub const ALL_DEP_LABELS: [DepLabel; 11] = [
    DepLabel::Root,
    DepLabel::Nsubj,
    DepLabel::Obj,
    DepLabel::Det,
    DepLabel::Amod,
    DepLabel::Nummod,
    DepLabel::Advmod,
    DepLabel::Case,
    DepLabel::Obl,
    DepLabel::Nmod,
    DepLabel::Flat,
];

impl DepLabel {
    pub fn index(self) -> usize {
        ALL_DEP_LABELS.iter().position(|&l| l == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            DepLabel::Root => "root",
            DepLabel::Nsubj => "nsubj",
            DepLabel::Obj => "obj",
            DepLabel::Det => "det",
            DepLabel::Amod => "amod",
            DepLabel::Nummod => "nummod",
            DepLabel::Advmod => "advmod",
            DepLabel::Case => "case",
            DepLabel::Obl => "obl",
            DepLabel::Nmod => "nmod",
            DepLabel::Flat => "flat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_DEP_LABELS.iter().copied().find(|l| l.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum EntityKind {
    Per,
    Loc,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Per => "PER",
            EntityKind::Loc => "LOC",
        }
    }
}

/// An entity mention: token positions `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub kind: EntityKind,
}

/// The three downstream tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    Tag,
    Ner,
    Parse,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Tag => "tag",
            TaskKind::Ner => "ner",
            TaskKind::Parse => "parse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tag" => Some(TaskKind::Tag),
            "ner" => Some(TaskKind::Ner),
            "parse" => Some(TaskKind::Parse),
            _ => None,
        }
    }
}

pub const ALL_TASKS: [TaskKind; 3] = [TaskKind::Tag, TaskKind::Ner, TaskKind::Parse];

/// Which topic sub-vocabulary content words draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Topic {
    Base,
    Shifted,
    /// Union of both topics; used for pretraining corpora so every content
    /// word is seen during pretraining.
    Mixed,
}

/// A data domain: same grammar and language, different distribution.
/// `rule_bias` re-weights production probabilities by each rule's authored
/// domain affinity; `topic` selects the content-word sub-vocabulary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub rule_bias: f64,
    pub topic: Topic,
}

impl DomainSpec {
    pub fn base() -> Self {
        Self {
            id: "base".into(),
            rule_bias: 0.0,
            topic: Topic::Base,
        }
    }

    pub fn shifted(rule_bias: f64) -> Self {
        Self {
            id: "shifted".into(),
            rule_bias,
            topic: Topic::Shifted,
        }
    }

    pub fn pretrain_mixture() -> Self {
        Self {
            id: "pretrain".into(),
            rule_bias: 0.0,
            topic: Topic::Mixed,
        }
    }

    /// Resolves a domain name from configuration.
    pub fn resolve(name: &str, shifted_bias: f64) -> Result<Self, DataError> {
        match name {
            "base" => Ok(Self::base()),
            "shifted" => Ok(Self::shifted(shifted_bias)),
            other => Err(DataError::Input(format!("unknown domain '{other}'"))),
        }
    }
}

/// Identifier of a language within a family.
pub type LanguageId = usize;

/// One synthetic language: a bijection from proto terminals into its own
/// token-id range plus a list of deterministic word-order transforms. The
/// divergence score is the number of transforms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageSpec {
    pub id: LanguageId,
    /// proto terminal index -> global token id
    vocab_map: Vec<usize>,
    transforms: Vec<OrderTransform>,
}

impl LanguageSpec {
    pub(crate) fn new(id: LanguageId, vocab_map: Vec<usize>, transforms: Vec<OrderTransform>) -> Self {
        Self {
            id,
            vocab_map,
            transforms,
        }
    }

    pub fn divergence(&self) -> usize {
        self.transforms.len()
    }

    pub fn transforms(&self) -> &[OrderTransform] {
        &self.transforms
    }

    pub fn token_id(&self, proto_term: usize) -> usize {
        self.vocab_map[proto_term]
    }

    pub fn vocab_map(&self) -> &[usize] {
        &self.vocab_map
    }

    /// Inverse vocabulary lookup.
    pub fn proto_term_of(&self, token_id: usize) -> Option<usize> {
        self.vocab_map.iter().position(|&t| t == token_id)
    }
}

/// One annotated sentence in one language and domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SentenceExample {
    pub tokens: Vec<usize>,
    pub tags: Vec<TagClass>,
    pub spans: Vec<EntitySpan>,
    /// Head position per token; `None` marks the single root.
    pub heads: Vec<Option<usize>>,
    pub labels: Vec<DepLabel>,
    pub language: LanguageId,
    pub domain: String,
}

impl SentenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// BIO entity tags derived from the spans.
    pub fn bio_tags(&self) -> Vec<String> {
        spans_to_bio(&self.spans, self.len())
    }

    /// Checks every structural invariant: consistent lengths, a single root
    /// whose arcs form a tree, and in-bounds non-overlapping spans.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.tokens.len();
        if self.tags.len() != n || self.heads.len() != n || self.labels.len() != n {
            return Err(DataError::Input("annotation lengths disagree".into()));
        }
        let roots = self.heads.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(DataError::Input(format!("{roots} roots, expected 1")));
        }
        // every token must reach the root without cycles
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = self.heads[cur] {
                if h >= n {
                    return Err(DataError::Input(format!("head {h} out of bounds")));
                }
                cur = h;
                steps += 1;
                if steps > n {
                    return Err(DataError::Input("cycle in head assignment".into()));
                }
            }
        }
        let mut seen = vec![false; n];
        for span in &self.spans {
            if span.start >= span.end || span.end > n {
                return Err(DataError::Input(format!("bad span {span:?}")));
            }
            for p in span.start..span.end {
                if seen[p] {
                    return Err(DataError::Input("overlapping entity spans".into()));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }
}

/// BIO tag strings for spans over a sentence of length `n`.
pub fn spans_to_bio(spans: &[EntitySpan], n: usize) -> Vec<String> {
    let mut bio = vec!["O".to_string(); n];
    for span in spans {
        bio[span.start] = format!("B-{}", span.kind.name());
        for p in span.start + 1..span.end {
            bio[p] = format!("I-{}", span.kind.name());
        }
    }
    bio
}

/// Extracts `(start, end, kind)` spans from BIO label indices
/// (0=O, 1=B-PER, 2=I-PER, 3=B-LOC, 4=I-LOC). An `I-` continuing nothing
/// opens a new span, the common lenient reading of model output.
pub fn bio_to_spans(bio: &[usize]) -> Vec<EntitySpan> {
    let kind_of = |label: usize| match label {
        1 | 2 => Some(EntityKind::Per),
        3 | 4 => Some(EntityKind::Loc),
        _ => None,
    };
    let is_begin = |label: usize| label == 1 || label == 3;
    let mut spans = Vec::new();
    let mut open: Option<(usize, EntityKind)> = None;
    for (pos, &label) in bio.iter().enumerate() {
        let kind = kind_of(label);
        let continues = match (open, kind) {
            (Some((_, k)), Some(nk)) => k == nk && !is_begin(label),
            _ => false,
        };
        if !continues {
            if let Some((start, k)) = open.take() {
                spans.push(EntitySpan {
                    start,
                    end: pos,
                    kind: k,
                });
            }
            if let Some(k) = kind {
                open = Some((pos, k));
            }
        }
    }
    if let Some((start, k)) = open {
        spans.push(EntitySpan {
            start,
            end: bio.len(),
            kind: k,
        });
    }
    spans
}

/// Number of BIO labels for the NER head.
pub const N_BIO_LABELS: usize = 5;

/// BIO label index of a position given a sentence's spans.
pub fn bio_label_index(spans: &[EntitySpan], pos: usize) -> usize {
    for span in spans {
        if pos == span.start {
            return match span.kind {
                EntityKind::Per => 1,
                EntityKind::Loc => 3,
            };
        }
        if pos > span.start && pos < span.end {
            return match span.kind {
                EntityKind::Per => 2,
                EntityKind::Loc => 4,
            };
        }
    }
    0
}

/// A task dataset: train/dev/test splits, disjoint by proto-derivation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaskDataset {
    pub task: TaskKind,
    pub language: LanguageId,
    pub domain: String,
    pub train: Vec<SentenceExample>,
    pub dev: Vec<SentenceExample>,
    pub test: Vec<SentenceExample>,
}
