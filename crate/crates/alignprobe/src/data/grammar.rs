//! The proto-grammar: a small head-marked PCFG over 40 terminals in 8 tag
//! classes, with entity nonterminals and per-rule domain affinities. Every
//! derivation yields a projective, single-rooted head assignment.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{DataError, DepLabel, DomainSpec, EntityKind, EntitySpan, TagClass, Topic};

/// Nonterminals of the proto-grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NtId {
    S,
    Np,
    Nbar,
    Vp,
    Pp,
    EntPer,
    EntLoc,
}

/// Lexical (preterminal) classes; each owns a contiguous proto-terminal
/// range, split into two topic halves for content classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexClassId {
    Det,
    Adj,
    Noun,
    PropnPer,
    PropnLoc,
    Num,
    Verb,
    Adv,
    Prep,
}

#[derive(Debug, Clone)]
pub struct LexClass {
    pub id: LexClassId,
    pub tag: TagClass,
    pub ids: Range<usize>,
    pub topic_split: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Nt(NtId),
    Lex(LexClassId),
}

/// A production: probability, head child, dependency label per non-head
/// child, and a domain affinity in [-1, 1] used by shifted-domain
/// re-weighting.
#[derive(Debug, Clone)]
pub struct Rule {
    pub lhs: NtId,
    pub rhs: Vec<Symbol>,
    pub prob: f64,
    pub head: usize,
    pub labels: Vec<Option<DepLabel>>,
    pub affinity: f64,
}

#[derive(Debug, Clone)]
pub struct ProtoGrammar {
    pub classes: Vec<LexClass>,
    pub rules: Vec<Rule>,
    pub start: NtId,
    /// Derivations longer than this are resampled.
    pub max_tokens: usize,
}

/// Number of proto terminals in the default grammar.
pub const N_TERMINALS: usize = 40;

/// The fixed desk grammar. 40 terminals keep a six-language family inside a
/// 256-token vocabulary alongside the reserved special ids.
pub fn default_grammar() -> ProtoGrammar {
    use DepLabel::*;
    use LexClassId as L;
    use NtId::*;
    use Symbol::*;

    let classes = vec![
        LexClass { id: L::Det, tag: TagClass::Det, ids: 0..3, topic_split: false },
        LexClass { id: L::Adj, tag: TagClass::Adj, ids: 3..9, topic_split: true },
        LexClass { id: L::Noun, tag: TagClass::Noun, ids: 9..17, topic_split: true },
        LexClass { id: L::PropnPer, tag: TagClass::Propn, ids: 17..21, topic_split: false },
        LexClass { id: L::PropnLoc, tag: TagClass::Propn, ids: 21..25, topic_split: false },
        LexClass { id: L::Num, tag: TagClass::Num, ids: 25..28, topic_split: false },
        LexClass { id: L::Verb, tag: TagClass::Verb, ids: 28..34, topic_split: true },
        LexClass { id: L::Adv, tag: TagClass::Adv, ids: 34..37, topic_split: false },
        LexClass { id: L::Prep, tag: TagClass::Prep, ids: 37..40, topic_split: false },
    ];

    let rule = |lhs, rhs: Vec<Symbol>, prob, head, labels: Vec<Option<DepLabel>>, affinity| Rule {
        lhs,
        rhs,
        prob,
        head,
        labels,
        affinity,
    };

    let rules = vec![
        rule(S, vec![Nt(Np), Nt(Vp)], 1.0, 1, vec![Some(Nsubj), None], 0.0),
        // VP
        rule(Vp, vec![Lex(L::Verb)], 0.25, 0, vec![None], -1.0),
        rule(Vp, vec![Lex(L::Verb), Nt(Np)], 0.35, 0, vec![None, Some(Obj)], -0.3),
        rule(
            Vp,
            vec![Lex(L::Verb), Nt(Np), Nt(Pp)],
            0.20,
            0,
            vec![None, Some(Obj), Some(Obl)],
            1.0,
        ),
        rule(
            Vp,
            vec![Lex(L::Adv), Lex(L::Verb), Nt(Np)],
            0.20,
            1,
            vec![Some(Advmod), None, Some(Obj)],
            0.5,
        ),
        // NP
        rule(Np, vec![Lex(L::Det), Nt(Nbar)], 0.55, 1, vec![Some(Det), None], -0.5),
        rule(
            Np,
            vec![Lex(L::Det), Lex(L::Adj), Nt(Nbar)],
            0.25,
            2,
            vec![Some(Det), Some(Amod), None],
            1.0,
        ),
        rule(Np, vec![Lex(L::Num), Nt(Nbar)], 0.10, 1, vec![Some(Nummod), None], 0.3),
        rule(Np, vec![Nt(EntPer)], 0.05, 0, vec![None], 0.0),
        rule(Np, vec![Nt(EntLoc)], 0.05, 0, vec![None], 0.0),
        // NBAR
        rule(Nbar, vec![Lex(L::Noun)], 0.8, 0, vec![None], -0.2),
        rule(Nbar, vec![Lex(L::Noun), Nt(Pp)], 0.2, 0, vec![None, Some(Nmod)], 0.6),
        // entities: spans of one to three proper nouns
        rule(EntPer, vec![Lex(L::PropnPer)], 0.5, 0, vec![None], 0.0),
        rule(
            EntPer,
            vec![Lex(L::PropnPer), Lex(L::PropnPer)],
            0.3,
            0,
            vec![None, Some(Flat)],
            0.0,
        ),
        rule(
            EntPer,
            vec![Lex(L::PropnPer), Lex(L::PropnPer), Lex(L::PropnPer)],
            0.2,
            0,
            vec![None, Some(Flat), Some(Flat)],
            0.0,
        ),
        rule(EntLoc, vec![Lex(L::PropnLoc)], 0.5, 0, vec![None], 0.0),
        rule(
            EntLoc,
            vec![Lex(L::PropnLoc), Lex(L::PropnLoc)],
            0.3,
            0,
            vec![None, Some(Flat)],
            0.0,
        ),
        rule(
            EntLoc,
            vec![Lex(L::PropnLoc), Lex(L::PropnLoc), Lex(L::PropnLoc)],
            0.2,
            0,
            vec![None, Some(Flat), Some(Flat)],
            0.0,
        ),
        // PP: the noun heads, the adposition attaches to it
        rule(Pp, vec![Lex(L::Prep), Nt(Np)], 1.0, 1, vec![Some(Case), None], 0.0),
    ];

    let grammar = ProtoGrammar {
        classes,
        rules,
        start: S,
        max_tokens: 24,
    };
    grammar.validate().expect("built-in grammar is consistent");
    grammar
}

impl ProtoGrammar {
    pub fn n_terminals(&self) -> usize {
        self.classes.iter().map(|c| c.ids.end).max().unwrap_or(0)
    }

    pub fn class(&self, id: LexClassId) -> &LexClass {
        self.classes.iter().find(|c| c.id == id).unwrap()
    }

    /// Tag class of a proto terminal.
    pub fn tag_of_terminal(&self, term: usize) -> TagClass {
        self.classes
            .iter()
            .find(|c| c.ids.contains(&term))
            .map(|c| c.tag)
            .expect("terminal in range")
    }

    fn rules_of(&self, nt: NtId) -> impl Iterator<Item = (usize, &Rule)> {
        self.rules
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.lhs == nt)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for nt in [NtId::S, NtId::Np, NtId::Nbar, NtId::Vp, NtId::Pp, NtId::EntPer, NtId::EntLoc] {
            let total: f64 = self.rules_of(nt).map(|(_, r)| r.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(DataError::Input(format!(
                    "rule probabilities for {nt:?} sum to {total}, expected 1"
                )));
            }
        }
        for rule in &self.rules {
            if rule.head >= rule.rhs.len()
                || rule.labels.len() != rule.rhs.len()
                || rule.labels[rule.head].is_some()
                || rule
                    .labels
                    .iter()
                    .enumerate()
                    .any(|(i, l)| i != rule.head && l.is_none())
            {
                return Err(DataError::Input(format!("inconsistent rule {rule:?}")));
            }
        }
        Ok(())
    }

    /// Entity kind produced by a nonterminal, if any.
    fn entity_of(nt: NtId) -> Option<EntityKind> {
        match nt {
            NtId::EntPer => Some(EntityKind::Per),
            NtId::EntLoc => Some(EntityKind::Loc),
            _ => None,
        }
    }

    fn pick_rule(&self, nt: NtId, domain: &DomainSpec, rng: &mut ChaCha12Rng) -> usize {
        let candidates: Vec<(usize, f64)> = self
            .rules_of(nt)
            .map(|(i, r)| (i, r.prob * (domain.rule_bias * r.affinity).exp()))
            .collect();
        let total: f64 = candidates.iter().map(|(_, w)| w).sum();
        let mut draw = rng.random_range(0.0..total);
        for (i, w) in &candidates {
            if draw < *w {
                return *i;
            }
            draw -= w;
        }
        candidates.last().unwrap().0
    }

    fn pick_terminal(&self, class: &LexClass, domain: &DomainSpec, rng: &mut ChaCha12Rng) -> usize {
        let range = if class.topic_split {
            let mid = class.ids.start + (class.ids.end - class.ids.start) / 2;
            match domain.topic {
                Topic::Base => class.ids.start..mid,
                Topic::Shifted => mid..class.ids.end,
                Topic::Mixed => class.ids.clone(),
            }
        } else {
            class.ids.clone()
        };
        rng.random_range(range)
    }

    fn sample_node(
        &self,
        nt: NtId,
        domain: &DomainSpec,
        rng: &mut ChaCha12Rng,
        budget: &mut usize,
    ) -> Option<DerivNode> {
        if *budget == 0 {
            return None;
        }
        let rule_idx = self.pick_rule(nt, domain, rng);
        let rule = &self.rules[rule_idx];
        let mut children = Vec::with_capacity(rule.rhs.len());
        for (slot, symbol) in rule.rhs.iter().enumerate() {
            let label = rule.labels[slot];
            let child = match symbol {
                Symbol::Lex(class_id) => {
                    if *budget == 0 {
                        return None;
                    }
                    *budget -= 1;
                    let term = self.pick_terminal(self.class(*class_id), domain, rng);
                    DerivChild {
                        content: DerivContent::Leaf { term, proto_pos: 0 },
                        label,
                    }
                }
                Symbol::Nt(child_nt) => DerivChild {
                    content: DerivContent::Node(self.sample_node(*child_nt, domain, rng, budget)?),
                    label,
                },
            };
            children.push(child);
        }
        Some(DerivNode {
            nt,
            rule: rule_idx,
            entity: Self::entity_of(nt),
            children,
        })
    }

    /// Samples one derivation; yields between 1 and `max_tokens` tokens.
    /// Over-budget attempts are discarded and resampled, which keeps the
    /// draw deterministic in the RNG stream.
    pub fn sample_derivation(&self, domain: &DomainSpec, rng: &mut ChaCha12Rng) -> DerivNode {
        loop {
            let mut budget = self.max_tokens;
            if let Some(mut node) = self.sample_node(self.start, domain, rng, &mut budget) {
                node.assign_proto_positions();
                return node;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum DerivContent {
    Node(DerivNode),
    Leaf {
        term: usize,
        /// Position of this token in the proto (untransformed) order.
        proto_pos: usize,
    },
}

#[derive(Debug, Clone)]
pub struct DerivChild {
    pub content: DerivContent,
    /// Dependency label of the arc from this child's head token to the
    /// parent's head token; `None` marks the head child.
    pub label: Option<DepLabel>,
}

/// One sampled derivation tree.
#[derive(Debug, Clone)]
pub struct DerivNode {
    pub nt: NtId,
    pub rule: usize,
    pub entity: Option<EntityKind>,
    pub children: Vec<DerivChild>,
}

/// Flat annotations of a derivation in proto coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoSentence {
    pub terms: Vec<usize>,
    pub tags: Vec<TagClass>,
    pub heads: Vec<Option<usize>>,
    pub labels: Vec<DepLabel>,
    pub spans: Vec<EntitySpan>,
    /// Rule indices used, for distribution diagnostics.
    pub rules_used: Vec<usize>,
}

impl DerivNode {
    fn assign_proto_positions(&mut self) {
        fn walk(node: &mut DerivNode, next: &mut usize) {
            for child in &mut node.children {
                match &mut child.content {
                    DerivContent::Leaf { proto_pos, .. } => {
                        *proto_pos = *next;
                        *next += 1;
                    }
                    DerivContent::Node(n) => walk(n, next),
                }
            }
        }
        let mut next = 0;
        walk(self, &mut next);
    }

    /// Proto position of this constituent's head token.
    pub fn head_pos(&self) -> usize {
        let head_child = self
            .children
            .iter()
            .find(|c| c.label.is_none())
            .expect("every rule marks a head child");
        match &head_child.content {
            DerivContent::Leaf { proto_pos, .. } => *proto_pos,
            DerivContent::Node(n) => n.head_pos(),
        }
    }

    /// Leaves in tree order as (proto_pos, term).
    pub fn leaves(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        fn walk(node: &DerivNode, out: &mut Vec<(usize, usize)>) {
            for child in &node.children {
                match &child.content {
                    DerivContent::Leaf { term, proto_pos } => out.push((*proto_pos, *term)),
                    DerivContent::Node(n) => walk(n, out),
                }
            }
        }
        walk(self, &mut out);
        out
    }

    /// A stable 64-bit key of the derivation (rules and terminals in tree
    /// order), used to keep dataset splits disjoint.
    pub fn key(&self) -> u64 {
        // FNV-1a; stable across platforms and toolchains
        fn mix(hash: &mut u64, v: u64) {
            *hash ^= v;
            *hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        fn walk(node: &DerivNode, hash: &mut u64) {
            mix(hash, node.rule as u64 + 1);
            for child in &node.children {
                match &child.content {
                    DerivContent::Leaf { term, .. } => mix(hash, 0x8000_0000 | *term as u64),
                    DerivContent::Node(n) => walk(n, hash),
                }
            }
            mix(hash, 0x2e);
        }
        let mut hash = 0xcbf2_9ce4_8422_2325;
        walk(self, &mut hash);
        hash
    }

    /// Flattens the derivation into proto-coordinate annotations.
    pub fn to_proto_sentence(&self, grammar: &ProtoGrammar) -> ProtoSentence {
        let leaves = self.leaves();
        let n = leaves.len();
        let mut terms = vec![0usize; n];
        for &(pos, term) in &leaves {
            terms[pos] = term;
        }
        let tags = terms.iter().map(|&t| grammar.tag_of_terminal(t)).collect();

        let mut heads = vec![None; n];
        let mut labels = vec![DepLabel::Root; n];
        assign_arcs(self, None, DepLabel::Root, &mut heads, &mut labels);

        let mut spans = Vec::new();
        collect_spans(self, &mut spans);
        spans.sort_by_key(|s: &EntitySpan| s.start);

        let mut rules_used = Vec::new();
        collect_rules(self, &mut rules_used);

        ProtoSentence {
            terms,
            tags,
            heads,
            labels,
            spans,
            rules_used,
        }
    }
}

fn assign_arcs(
    node: &DerivNode,
    governor: Option<usize>,
    label: DepLabel,
    heads: &mut [Option<usize>],
    labels: &mut [DepLabel],
) {
    let own_head = node.head_pos();
    heads[own_head] = governor;
    labels[own_head] = label;
    for child in &node.children {
        match (&child.content, child.label) {
            (DerivContent::Leaf { proto_pos, .. }, Some(l)) => {
                heads[*proto_pos] = Some(own_head);
                labels[*proto_pos] = l;
            }
            (DerivContent::Leaf { .. }, None) => {} // the head token itself
            (DerivContent::Node(n), Some(l)) => assign_arcs(n, Some(own_head), l, heads, labels),
            (DerivContent::Node(n), None) => assign_arcs(n, governor, label, heads, labels),
        }
    }
}

fn collect_spans(node: &DerivNode, spans: &mut Vec<EntitySpan>) {
    if let Some(kind) = node.entity {
        let positions: Vec<usize> = node.leaves().iter().map(|&(p, _)| p).collect();
        let start = *positions.iter().min().unwrap();
        let end = *positions.iter().max().unwrap() + 1;
        debug_assert_eq!(end - start, positions.len(), "entity spans are contiguous");
        spans.push(EntitySpan { start, end, kind });
        return; // entities do not nest
    }
    for child in &node.children {
        if let DerivContent::Node(n) = &child.content {
            collect_spans(n, spans);
        }
    }
}

fn collect_rules(node: &DerivNode, out: &mut Vec<usize>) {
    out.push(node.rule);
    for child in &node.children {
        if let DerivContent::Node(n) = &child.content {
            collect_rules(n, out);
        }
    }
}
