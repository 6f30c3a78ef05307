//! Assign every token of a parsed utterance to one of five semantic
//! components, link pronouns across sentences, and produce the name-masked
//! rewrite used by the grounding-without-object-name task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::deptree::{DependencyTree, Pos, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    #[serde(rename = "Main")]
    MainObject,
    #[serde(rename = "Auxi")]
    AuxiliaryObject,
    #[serde(rename = "Attr")]
    Attribute,
    #[serde(rename = "Pron")]
    Pronoun,
    #[serde(rename = "Rel")]
    Relationship,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticComponents {
    pub utterance_id: String,
    pub assignment: Vec<ComponentKind>,
    pub main_head: usize,
    pub auxi_heads: Vec<usize>,
    pub pronoun_links: BTreeMap<usize, usize>,
    pub warnings: Vec<String>,
}

impl SemanticComponents {
    pub fn indices_of(&self, kind: ComponentKind) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == kind)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Flattened view of a tree: token data plus heads in global index space.
struct Flat<'a> {
    tokens: Vec<&'a Token>,
    sentence: Vec<usize>,
    head: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

fn flatten(tree: &DependencyTree) -> Flat<'_> {
    let offsets = tree.sentence_offsets();
    let mut tokens = Vec::new();
    let mut sentence = Vec::new();
    let mut head = Vec::new();
    for (si, sent) in tree.sentences.iter().enumerate() {
        for tok in sent {
            tokens.push(tok);
            sentence.push(si);
            head.push(tok.head.map(|h| offsets[si] + h));
        }
    }
    let mut children = vec![Vec::new(); tokens.len()];
    for (i, h) in head.iter().enumerate() {
        if let Some(h) = h {
            children[*h].push(i);
        }
    }
    Flat {
        tokens,
        sentence,
        head,
        children,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NounRole {
    Main,
    Aux,
    AttrNoun,
}

/// Rule-ledger decoupling. Deterministic; tokens matching no rule get
/// [`ComponentKind::None`].
pub fn decouple(tree: &DependencyTree) -> Result<SemanticComponents> {
    let flat = flatten(tree);
    let n = flat.tokens.len();
    let id = tree.utterance_id.clone();

    // main object: root of the first sentence if it is a noun, else the
    // leftmost nsubj/attr noun child of the root
    let first_root = flat
        .tokens
        .iter()
        .enumerate()
        .position(|(i, t)| flat.sentence[i] == 0 && t.head.is_none())
        .ok_or_else(|| Error::Decouple {
            id: id.clone(),
            msg: "no root in first sentence".into(),
        })?;
    let main_head = if flat.tokens[first_root].pos == Pos::Noun {
        first_root
    } else {
        flat.children[first_root]
            .iter()
            .copied()
            .find(|c| {
                flat.tokens[*c].pos == Pos::Noun
                    && matches!(flat.tokens[*c].deprel.as_str(), "nsubj" | "attr")
            })
            .ok_or_else(|| Error::Decouple {
                id: id.clone(),
                msg: "no candidate main-object noun".into(),
            })?
    };

    // the full noun compound span belongs to the main object
    let mut main_span = vec![main_head];
    for c in &flat.children[main_head] {
        if matches!(flat.tokens[*c].deprel.as_str(), "compound" | "flat")
            && flat.tokens[*c].pos == Pos::Noun
        {
            main_span.push(*c);
        }
    }

    // noun roles, propagated to a fixpoint (nmod chains, conj chains)
    let mut role: Vec<Option<NounRole>> = vec![None; n];
    for m in &main_span {
        role[*m] = Some(NounRole::Main);
    }
    loop {
        let mut changed = false;
        for i in 0..n {
            if role[i].is_some() || flat.tokens[i].pos != Pos::Noun {
                continue;
            }
            let has_det = flat.children[i]
                .iter()
                .any(|c| flat.tokens[*c].deprel == "det");
            let new_role = match flat.tokens[i].deprel.as_str() {
                // bare nmod nouns describe parts/properties of their owner;
                // determined ones introduce a distinct auxiliary object
                "nmod" | "obl" => match flat.head[i].and_then(|h| role[h]) {
                    Some(_) => Some(if has_det {
                        NounRole::Aux
                    } else {
                        NounRole::AttrNoun
                    }),
                    None => None,
                },
                "conj" => flat.head[i].and_then(|h| role[h]),
                // a later sentence rooted in a noun with a pronoun subject
                // anchors a relation to an auxiliary object
                "root" if flat.sentence[i] > 0 => {
                    let has_pron_subject = flat.children[i].iter().any(|c| {
                        flat.tokens[*c].pos == Pos::Pron && flat.tokens[*c].deprel == "nsubj"
                    });
                    if has_pron_subject {
                        Some(NounRole::Aux)
                    } else {
                        None
                    }
                }
                _ => None,
            };
            if let Some(r) = new_role {
                role[i] = Some(r);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut assignment = vec![ComponentKind::None; n];
    for i in 0..n {
        if let Some(r) = role[i] {
            assignment[i] = match r {
                NounRole::Main => ComponentKind::MainObject,
                NounRole::Aux => ComponentKind::AuxiliaryObject,
                NounRole::AttrNoun => ComponentKind::Attribute,
            };
        }
    }
    for i in 0..n {
        let tok = flat.tokens[i];
        if assignment[i] != ComponentKind::None {
            continue;
        }
        match tok.pos {
            Pos::Pron => assignment[i] = ComponentKind::Pronoun,
            Pos::Adj | Pos::Num
                if matches!(tok.deprel.as_str(), "amod" | "nummod") =>
            {
                // owner decides: attributes of the auxiliary object stay with
                // it so they never enter the main object's positive set
                if let Some(h) = flat.head[i] {
                    assignment[i] = match assignment[h] {
                        ComponentKind::AuxiliaryObject => ComponentKind::AuxiliaryObject,
                        ComponentKind::MainObject
                        | ComponentKind::Attribute
                        | ComponentKind::Pronoun => ComponentKind::Attribute,
                        _ => ComponentKind::None,
                    };
                }
            }
            Pos::Adp if matches!(tok.deprel.as_str(), "case" | "mark") => {
                assignment[i] = ComponentKind::Relationship;
            }
            _ => {}
        }
    }
    // second pass: words that inherit from an already-classified head
    // ("to" fixed onto "next", relational adverbs on auxiliary nouns)
    loop {
        let mut changed = false;
        for i in 0..n {
            if assignment[i] != ComponentKind::None {
                continue;
            }
            let tok = flat.tokens[i];
            let head_kind = flat.head[i].map(|h| assignment[h]);
            let new = match tok.deprel.as_str() {
                "fixed" if head_kind == Some(ComponentKind::Relationship) => {
                    Some(ComponentKind::Relationship)
                }
                "advmod"
                    if matches!(
                        head_kind,
                        Some(ComponentKind::Relationship) | Some(ComponentKind::AuxiliaryObject)
                    ) =>
                {
                    Some(ComponentKind::Relationship)
                }
                _ => None,
            };
            if let Some(k) = new {
                assignment[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let auxi_heads = (0..n)
        .filter(|i| role[*i] == Some(NounRole::Aux))
        .collect();

    Ok(SemanticComponents {
        utterance_id: id,
        assignment,
        main_head,
        auxi_heads,
        pronoun_links: BTreeMap::new(),
        warnings: Vec::new(),
    })
}

/// Link every pronoun to the main object head. Attributes hanging off a
/// linked pronoun already carry kind Attribute, so linking only records the
/// pronoun -> main map used by position labels and inference.
pub fn link_pronouns(
    components: &SemanticComponents,
    _tree: &DependencyTree,
) -> SemanticComponents {
    let mut out = components.clone();
    for (i, kind) in components.assignment.iter().enumerate() {
        if *kind == ComponentKind::Pronoun {
            out.pronoun_links.insert(i, components.main_head);
        }
    }
    out
}

/// Replace the main-object token span with the single token "object" and
/// re-index every component.
pub fn mask_object_name(
    components: &SemanticComponents,
    tree: &DependencyTree,
) -> (String, SemanticComponents) {
    let surfaces: Vec<&str> = tree.flat().map(|(_, _, t)| t.surface.as_str()).collect();
    let n = surfaces.len();
    let first_main = components
        .assignment
        .iter()
        .position(|k| *k == ComponentKind::MainObject)
        .unwrap_or(components.main_head);

    let mut new_surfaces = Vec::new();
    let mut new_assignment = Vec::new();
    let mut index_map = vec![usize::MAX; n];
    let mut object_index = 0usize;
    for i in 0..n {
        if components.assignment[i] == ComponentKind::MainObject {
            if i == first_main {
                object_index = new_surfaces.len();
                new_surfaces.push("object".to_string());
                new_assignment.push(ComponentKind::MainObject);
            }
            index_map[i] = object_index;
        } else {
            index_map[i] = new_surfaces.len();
            new_surfaces.push(surfaces[i].to_string());
            new_assignment.push(components.assignment[i]);
        }
    }

    let masked = SemanticComponents {
        utterance_id: components.utterance_id.clone(),
        assignment: new_assignment,
        main_head: object_index,
        auxi_heads: components.auxi_heads.iter().map(|i| index_map[*i]).collect(),
        pronoun_links: components
            .pronoun_links
            .iter()
            .map(|(p, m)| (index_map[*p], index_map[*m]))
            .collect(),
        warnings: components.warnings.clone(),
    };
    (new_surfaces.join(" "), masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deptree::{parse_conllu, ControlledGrammar};

    fn kinds_of(c: &SemanticComponents, tree: &DependencyTree, kind: ComponentKind) -> Vec<String> {
        let surfaces: Vec<&str> = tree.flat().map(|(_, _, t)| t.surface.as_str()).collect();
        c.indices_of(kind)
            .into_iter()
            .map(|i| surfaces[i].to_string())
            .collect()
    }

    #[test]
    fn brown_wooden_chair_example() {
        let g = ControlledGrammar::new();
        let tree = g
            .parse("a brown wooden chair next to the black table", "ex1")
            .unwrap();
        let c = decouple(&tree).unwrap();
        assert_eq!(kinds_of(&c, &tree, ComponentKind::MainObject), ["chair"]);
        assert_eq!(
            kinds_of(&c, &tree, ComponentKind::Attribute),
            ["brown", "wooden"]
        );
        assert_eq!(
            kinds_of(&c, &tree, ComponentKind::Relationship),
            ["next", "to"]
        );
        assert_eq!(
            kinds_of(&c, &tree, ComponentKind::AuxiliaryObject),
            ["black", "table"]
        );
        assert!(kinds_of(&c, &tree, ComponentKind::Pronoun).is_empty());
    }

    #[test]
    fn brown_chair_with_legs_under_blackboard() {
        // "it is a brown chair with legs under a blackboard"
        let doc = "1\tit\t_\tPRON\t_\t_\t5\tnsubj\t_\t_\n\
                   2\tis\t_\tAUX\t_\t_\t5\tcop\t_\t_\n\
                   3\ta\t_\tDET\t_\t_\t5\tdet\t_\t_\n\
                   4\tbrown\t_\tADJ\t_\t_\t5\tamod\t_\t_\n\
                   5\tchair\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\
                   6\twith\t_\tADP\t_\t_\t7\tcase\t_\t_\n\
                   7\tlegs\t_\tNOUN\t_\t_\t5\tnmod\t_\t_\n\
                   8\tunder\t_\tADP\t_\t_\t10\tcase\t_\t_\n\
                   9\ta\t_\tDET\t_\t_\t10\tdet\t_\t_\n\
                   10\tblackboard\t_\tNOUN\t_\t_\t5\tnmod\t_\t_\n";
        let tree = &parse_conllu(doc).unwrap()[0];
        let c = decouple(tree).unwrap();
        assert_eq!(kinds_of(&c, tree, ComponentKind::Pronoun), ["it"]);
        assert_eq!(kinds_of(&c, tree, ComponentKind::MainObject), ["chair"]);
        assert_eq!(
            kinds_of(&c, tree, ComponentKind::Attribute),
            ["brown", "legs"]
        );
        assert_eq!(
            kinds_of(&c, tree, ComponentKind::Relationship),
            ["with", "under"]
        );
        assert_eq!(
            kinds_of(&c, tree, ComponentKind::AuxiliaryObject),
            ["blackboard"]
        );
    }

    #[test]
    fn single_object_utterance() {
        let g = ControlledGrammar::new();
        let tree = g.parse("the door .", "ex3").unwrap();
        let c = decouple(&tree).unwrap();
        assert_eq!(kinds_of(&c, &tree, ComponentKind::MainObject), ["door"]);
        for kind in [
            ComponentKind::Attribute,
            ComponentKind::AuxiliaryObject,
            ComponentKind::Pronoun,
            ComponentKind::Relationship,
        ] {
            assert!(kinds_of(&c, &tree, kind).is_empty());
        }
    }

    #[test]
    fn no_main_noun_is_an_error() {
        let doc = "1\tis\t_\tAUX\t_\t_\t0\troot\t_\t_\n";
        let tree = &parse_conllu(doc).unwrap()[0];
        assert!(matches!(decouple(tree), Err(Error::Decouple { .. })));
    }

    #[test]
    fn pronoun_linking_two_sentences() {
        let g = ControlledGrammar::new();
        let tree = g
            .parse("it is a brown chair . it is under the black table .", "ex4")
            .unwrap();
        let c = link_pronouns(&decouple(&tree).unwrap(), &tree);
        let main = c.main_head;
        assert_eq!(c.pronoun_links.len(), 2);
        assert!(c.pronoun_links.values().all(|m| *m == main));
        assert_eq!(
            kinds_of(&c, &tree, ComponentKind::Relationship),
            ["under"]
        );
        assert_eq!(
            kinds_of(&c, &tree, ComponentKind::AuxiliaryObject),
            ["black", "table"]
        );
    }

    #[test]
    fn link_pronouns_identity_without_pronouns() {
        let g = ControlledGrammar::new();
        let tree = g.parse("the door .", "ex5").unwrap();
        let c = decouple(&tree).unwrap();
        assert_eq!(link_pronouns(&c, &tree), c);
    }

    #[test]
    fn pronoun_only_second_sentence() {
        let g = ControlledGrammar::new();
        let tree = g.parse("the brown chair . it .", "ex6").unwrap();
        let c = link_pronouns(&decouple(&tree).unwrap(), &tree);
        assert_eq!(c.pronoun_links.len(), 1);
        assert_eq!(
            kinds_of(&c, &tree, ComponentKind::Attribute),
            ["brown"]
        );
    }

    #[test]
    fn mask_replaces_main_and_reindexes() {
        let g = ControlledGrammar::new();
        let tree = g
            .parse("a brown wooden chair next to the black table", "ex7")
            .unwrap();
        let c = decouple(&tree).unwrap();
        let (text, masked) = mask_object_name(&c, &tree);
        assert_eq!(text, "a brown wooden object next to the black table");
        assert_eq!(masked.assignment[3], ComponentKind::MainObject);
        assert_eq!(masked.main_head, 3);
        assert!(!text.contains("chair"));
    }

    #[test]
    fn mask_is_a_fixed_point_on_object() {
        let g = ControlledGrammar::new();
        let tree = g.parse("the brown object .", "ex8").unwrap();
        let c = decouple(&tree).unwrap();
        let (text, masked) = mask_object_name(&c, &tree);
        assert_eq!(text, "the brown object .");
        assert_eq!(masked.main_head, c.main_head);
    }

    #[test]
    fn mask_degenerate_single_noun() {
        let g = ControlledGrammar::new();
        let tree = g.parse("the door .", "ex9").unwrap();
        let c = decouple(&tree).unwrap();
        let (text, _) = mask_object_name(&c, &tree);
        assert_eq!(text, "the object .");
    }
}
