//! Word-order transforms.
//!
//! A language's transform list is applied as a whole to each derivation:
//! tree-level constituent reversals first (they need the tree), then
//! sequence-level adjacent-tag swaps, each composing an index map from proto
//! positions to final positions. Applying a transform list is deterministic
//! and annotation-preserving: tags, heads, labels and spans ride along
//! through the index map.

use super::grammar::{DerivContent, DerivNode, NtId, ProtoGrammar, ProtoSentence};
use super::{LanguageSpec, SentenceExample, TagClass};

/// One word-order transform. Reversals flip the child order of every
/// constituent of the named type; swaps exchange each left-to-right
/// non-overlapping adjacent pair with the named tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OrderTransform {
    ReverseChildren(ReversibleNt),
    SwapAdjacent(TagClass, TagClass),
}

/// Nonterminals eligible for reversal. Entity nonterminals are excluded so
/// entity spans stay contiguous; tag swaps exclude PROPN for the same reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ReversibleNt {
    Np,
    Nbar,
    Vp,
    Pp,
}

impl ReversibleNt {
    fn nt(self) -> NtId {
        match self {
            ReversibleNt::Np => NtId::Np,
            ReversibleNt::Nbar => NtId::Nbar,
            ReversibleNt::Vp => NtId::Vp,
            ReversibleNt::Pp => NtId::Pp,
        }
    }
}

/// The fixed transform catalog languages draw from: reversals first, then
/// swaps. A language's transform list keeps this relative order, so applying
/// it never needs a tree after the first swap.
pub const TRANSFORM_CATALOG: [OrderTransform; 10] = [
    OrderTransform::ReverseChildren(ReversibleNt::Np),
    OrderTransform::ReverseChildren(ReversibleNt::Vp),
    OrderTransform::ReverseChildren(ReversibleNt::Pp),
    OrderTransform::ReverseChildren(ReversibleNt::Nbar),
    OrderTransform::SwapAdjacent(TagClass::Det, TagClass::Noun),
    OrderTransform::SwapAdjacent(TagClass::Det, TagClass::Adj),
    OrderTransform::SwapAdjacent(TagClass::Adj, TagClass::Noun),
    OrderTransform::SwapAdjacent(TagClass::Prep, TagClass::Det),
    OrderTransform::SwapAdjacent(TagClass::Verb, TagClass::Adv),
    OrderTransform::SwapAdjacent(TagClass::Noun, TagClass::Verb),
];

fn reverse_children(node: &mut DerivNode, target: NtId) {
    if node.nt == target {
        node.children.reverse();
    }
    for child in &mut node.children {
        if let DerivContent::Node(n) = &mut child.content {
            reverse_children(n, target);
        }
    }
}

/// Permutation sending proto positions to their rank in the transformed
/// leaf order.
fn linearization_map(node: &DerivNode, n: usize) -> Vec<usize> {
    let mut map = vec![0usize; n];
    for (new_pos, (proto_pos, _)) in node.leaves().into_iter().enumerate() {
        map[proto_pos] = new_pos;
    }
    map
}

/// Left-to-right non-overlapping swap of adjacent (a, b) tag pairs, as a
/// permutation over current positions.
fn swap_map(tags: &[TagClass], a: TagClass, b: TagClass) -> Vec<usize> {
    let n = tags.len();
    let mut map: Vec<usize> = (0..n).collect();
    let mut i = 0;
    while i + 1 < n {
        if tags[i] == a && tags[i + 1] == b {
            map.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    map
}

/// Applies a language's full pipeline (order transforms, then vocabulary
/// mapping) to one derivation, producing the annotated sentence in that
/// language. The returned index map sends proto positions to final positions.
pub fn apply_language(
    grammar: &ProtoGrammar,
    lang: &LanguageSpec,
    deriv: &DerivNode,
    proto: &ProtoSentence,
    domain_id: &str,
) -> (SentenceExample, Vec<usize>) {
    let n = proto.terms.len();

    // tree-level reversals
    let mut reversed = None;
    for transform in lang.transforms() {
        if let OrderTransform::ReverseChildren(nt) = transform {
            let tree = reversed.get_or_insert_with(|| deriv.clone());
            reverse_children(tree, nt.nt());
        }
    }
    let mut map: Vec<usize> = match &reversed {
        Some(tree) => linearization_map(tree, n),
        None => (0..n).collect(),
    };

    // sequence-level swaps, on the current ordering
    for transform in lang.transforms() {
        if let OrderTransform::SwapAdjacent(a, b) = transform {
            let mut tags = vec![TagClass::Det; n];
            for (proto_pos, &cur) in map.iter().enumerate() {
                tags[cur] = proto.tags[proto_pos];
            }
            let swap = swap_map(&tags, *a, *b);
            for slot in map.iter_mut() {
                *slot = swap[*slot];
            }
        }
    }

    let mut tokens = vec![0usize; n];
    let mut tags = vec![TagClass::Det; n];
    let mut heads = vec![None; n];
    let mut labels = vec![super::DepLabel::Root; n];
    for proto_pos in 0..n {
        let new_pos = map[proto_pos];
        tokens[new_pos] = lang.token_id(proto.terms[proto_pos]);
        tags[new_pos] = proto.tags[proto_pos];
        heads[new_pos] = proto.heads[proto_pos].map(|h| map[h]);
        labels[new_pos] = proto.labels[proto_pos];
    }
    let spans = proto
        .spans
        .iter()
        .map(|span| {
            let mut positions: Vec<usize> = (span.start..span.end).map(|p| map[p]).collect();
            positions.sort_unstable();
            debug_assert_eq!(
                positions[positions.len() - 1] - positions[0] + 1,
                positions.len(),
                "transforms keep entity spans contiguous"
            );
            super::EntitySpan {
                start: positions[0],
                end: positions[positions.len() - 1] + 1,
                kind: span.kind,
            }
        })
        .collect();
    let _ = grammar;

    let example = SentenceExample {
        tokens,
        tags,
        spans,
        heads,
        labels,
        language: lang.id,
        domain: domain_id.to_string(),
    };
    (example, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grammar::default_grammar;
    use crate::data::DomainSpec;
    use crate::rng::rng_for;

    fn identity_lang(n_terms: usize) -> LanguageSpec {
        LanguageSpec::new(0, (0..n_terms).map(|t| super::super::RESERVED_IDS + t).collect(), vec![])
    }

    fn lang_with(transforms: Vec<OrderTransform>, n_terms: usize) -> LanguageSpec {
        LanguageSpec::new(
            1,
            (0..n_terms).map(|t| super::super::RESERVED_IDS + n_terms + t).collect(),
            transforms,
        )
    }

    #[test]
    fn identity_language_preserves_proto_order() {
        let grammar = default_grammar();
        let lang = identity_lang(grammar.n_terminals());
        let domain = DomainSpec::base();
        let mut rng = rng_for(3, "transform/identity");
        for _ in 0..50 {
            let deriv = grammar.sample_derivation(&domain, &mut rng);
            let proto = deriv.to_proto_sentence(&grammar);
            let (example, map) = apply_language(&grammar, &lang, &deriv, &proto, "base");
            assert!(map.iter().enumerate().all(|(i, &m)| i == m));
            let expect: Vec<usize> = proto
                .terms
                .iter()
                .map(|&t| super::super::RESERVED_IDS + t)
                .collect();
            assert_eq!(example.tokens, expect);
            example.validate().unwrap();
        }
    }

    #[test]
    fn transforms_preserve_tree_and_span_invariants() {
        let grammar = default_grammar();
        let domain = DomainSpec::base();
        // every catalog entry alone, plus a stack of three
        let mut suites: Vec<Vec<OrderTransform>> =
            TRANSFORM_CATALOG.iter().map(|&t| vec![t]).collect();
        suites.push(vec![
            TRANSFORM_CATALOG[0],
            TRANSFORM_CATALOG[2],
            TRANSFORM_CATALOG[5],
        ]);
        for transforms in suites {
            let lang = lang_with(transforms.clone(), grammar.n_terminals());
            let mut rng = rng_for(9, "transform/invariants");
            for _ in 0..40 {
                let deriv = grammar.sample_derivation(&domain, &mut rng);
                let proto = deriv.to_proto_sentence(&grammar);
                let (example, map) = apply_language(&grammar, &lang, &deriv, &proto, "base");
                example
                    .validate()
                    .unwrap_or_else(|e| panic!("{transforms:?}: {e}"));
                // the index map is a permutation
                let mut sorted = map.clone();
                sorted.sort_unstable();
                assert!(sorted.iter().enumerate().all(|(i, &m)| i == m));
            }
        }
    }

    #[test]
    fn reversal_changes_order_when_constituent_present() {
        let grammar = default_grammar();
        let domain = DomainSpec::base();
        let lang = lang_with(vec![OrderTransform::ReverseChildren(ReversibleNt::Np)], grammar.n_terminals());
        let mut rng = rng_for(11, "transform/reversal");
        let mut changed = false;
        for _ in 0..50 {
            let deriv = grammar.sample_derivation(&domain, &mut rng);
            let proto = deriv.to_proto_sentence(&grammar);
            let (_, map) = apply_language(&grammar, &lang, &deriv, &proto, "base");
            if map.iter().enumerate().any(|(i, &m)| i != m) {
                changed = true;
                break;
            }
        }
        assert!(changed, "NP reversal never changed any sentence");
    }

    #[test]
    fn de_transforming_recovers_the_proto_sentence() {
        // round-trip exactness: inverse map + inverse vocabulary
        let grammar = default_grammar();
        let domain = DomainSpec::base();
        let lang = lang_with(
            vec![
                TRANSFORM_CATALOG[1],
                TRANSFORM_CATALOG[3],
                TRANSFORM_CATALOG[6],
            ],
            grammar.n_terminals(),
        );
        let mut rng = rng_for(13, "transform/roundtrip");
        for _ in 0..40 {
            let deriv = grammar.sample_derivation(&domain, &mut rng);
            let proto = deriv.to_proto_sentence(&grammar);
            let (example, map) = apply_language(&grammar, &lang, &deriv, &proto, "base");
            let recovered: Vec<usize> = (0..proto.terms.len())
                .map(|proto_pos| {
                    let tok = example.tokens[map[proto_pos]];
                    lang.proto_term_of(tok).unwrap()
                })
                .collect();
            assert_eq!(recovered, proto.terms);
        }
    }
}
