//! Tokenized, dependency-parsed utterances: CoNLL-U ingestion plus a
//! deterministic parser for the controlled grammar used by the synthetic
//! bench.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Maximum total token count per utterance.
pub const MAX_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Noun,
    Adj,
    Adp,
    Verb,
    Pron,
    Det,
    Num,
    Other,
}

impl Pos {
    fn from_upos(upos: &str) -> Pos {
        match upos {
            "NOUN" | "PROPN" => Pos::Noun,
            "ADJ" => Pos::Adj,
            "ADP" => Pos::Adp,
            "VERB" | "AUX" => Pos::Verb,
            "PRON" => Pos::Pron,
            "DET" => Pos::Det,
            "NUM" => Pos::Num,
            _ => Pos::Other,
        }
    }
}

/// One word of a sentence. `head == None` marks the sentence ROOT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    #[serde(rename = "i")]
    pub index: usize,
    pub surface: String,
    pub pos: Pos,
    pub head: Option<usize>,
    pub deprel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyTree {
    pub utterance_id: String,
    pub sentences: Vec<Vec<Token>>,
}

impl DependencyTree {
    pub fn new(utterance_id: impl Into<String>, sentences: Vec<Vec<Token>>) -> Result<Self> {
        let tree = DependencyTree {
            utterance_id: utterance_id.into(),
            sentences,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    /// Offset of each sentence in the concatenated utterance.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        offsets
    }

    /// (global index, sentence index, token) over the concatenated utterance.
    pub fn flat(&self) -> impl Iterator<Item = (usize, usize, &Token)> {
        let offsets = self.sentence_offsets();
        self.sentences
            .iter()
            .enumerate()
            .flat_map(move |(si, sent)| {
                let off = offsets[si];
                sent.iter().map(move |t| (off + t.index, si, t))
            })
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.flat().map(|(_, _, t)| t.surface.as_str()).collect()
    }

    pub fn text(&self) -> String {
        self.surfaces().join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.utterance_id;
        let total = self.token_count();
        if total > MAX_TOKENS {
            return Err(Error::Capacity {
                got: total,
                limit: MAX_TOKENS,
            });
        }
        for sent in &self.sentences {
            let n = sent.len();
            let mut roots = 0;
            for (i, tok) in sent.iter().enumerate() {
                if tok.index != i {
                    return Err(Error::Structure {
                        id: id.clone(),
                        msg: format!("token index {} at position {}", tok.index, i),
                    });
                }
                if tok.surface.is_empty() || tok.surface.chars().any(char::is_whitespace) {
                    return Err(Error::Structure {
                        id: id.clone(),
                        msg: format!("bad surface {:?}", tok.surface),
                    });
                }
                match tok.head {
                    None => roots += 1,
                    Some(h) if h >= n => {
                        return Err(Error::Structure {
                            id: id.clone(),
                            msg: format!("head {} out of range (sentence length {})", h, n),
                        });
                    }
                    Some(h) if h == i => {
                        return Err(Error::Structure {
                            id: id.clone(),
                            msg: format!("token {} is its own head", i),
                        });
                    }
                    _ => {}
                }
            }
            if roots != 1 {
                return Err(Error::Structure {
                    id: id.clone(),
                    msg: format!("{roots} roots, expected 1"),
                });
            }
            // acyclicity: every token must reach the root in at most n steps
            for start in 0..n {
                let mut cur = start;
                let mut steps = 0;
                while let Some(h) = sent[cur].head {
                    cur = h;
                    steps += 1;
                    if steps > n {
                        return Err(Error::Structure {
                            id: id.clone(),
                            msg: format!("cycle through token {start}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// CoNLL-U rendering; `parse_conllu` on the output reproduces the tree.
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# newdoc id = {}\n", self.utterance_id));
        for sent in &self.sentences {
            for tok in sent {
                let upos = match tok.pos {
                    Pos::Noun => "NOUN",
                    Pos::Adj => "ADJ",
                    Pos::Adp => "ADP",
                    Pos::Verb => "VERB",
                    Pos::Pron => "PRON",
                    Pos::Det => "DET",
                    Pos::Num => "NUM",
                    Pos::Other => "X",
                };
                let head = match tok.head {
                    None => 0,
                    Some(h) => h + 1,
                };
                out.push_str(&format!(
                    "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_\n",
                    tok.index + 1,
                    tok.surface,
                    upos,
                    head,
                    tok.deprel
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Parse a CoNLL-U document string into dependency trees.
///
/// `# newdoc id = X` starts a new utterance that collects the following
/// sentence blocks. Blocks outside any `newdoc` each form their own
/// single-sentence tree, named by `# sent_id` when present.
pub fn parse_conllu(text: &str) -> Result<Vec<DependencyTree>> {
    struct Pending {
        id: String,
        sentences: Vec<Vec<Token>>,
        explicit_doc: bool,
    }

    let mut trees = Vec::new();
    let mut pending: Option<Pending> = None;
    let mut block: Vec<(usize, Token)> = Vec::new(); // (line number, token)
    let mut block_sent_id: Option<String> = None;
    let mut anon = 0usize;

    let flush_block = |pending: &mut Option<Pending>,
                           trees: &mut Vec<DependencyTree>,
                           block: &mut Vec<(usize, Token)>,
                           block_sent_id: &mut Option<String>,
                           anon: &mut usize|
     -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        let sent: Vec<Token> = block.drain(..).map(|(_, t)| t).collect();
        match pending {
            Some(p) => p.sentences.push(sent),
            None => {
                let id = block_sent_id
                    .take()
                    .unwrap_or_else(|| {
                        *anon += 1;
                        format!("utt{}", anon)
                    });
                *pending = Some(Pending {
                    id,
                    sentences: vec![sent],
                    explicit_doc: false,
                });
            }
        }
        // implicit (non-newdoc) documents close after one sentence
        if pending.as_ref().map(|p| !p.explicit_doc).unwrap_or(false) {
            let p = pending.take().unwrap();
            trees.push(DependencyTree::new(p.id, p.sentences)?);
        }
        *block_sent_id = None;
        Ok(())
    };

    for (lineno0, raw) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            flush_block(&mut pending, &mut trees, &mut block, &mut block_sent_id, &mut anon)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(rest) = comment.strip_prefix("newdoc") {
                flush_block(&mut pending, &mut trees, &mut block, &mut block_sent_id, &mut anon)?;
                if let Some(p) = pending.take() {
                    trees.push(DependencyTree::new(p.id, p.sentences)?);
                }
                let id = rest
                    .trim()
                    .strip_prefix("id")
                    .map(|s| s.trim_start_matches(['=', ' ']).trim().to_string())
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| {
                        anon += 1;
                        format!("doc{}", anon)
                    });
                pending = Some(Pending {
                    id,
                    sentences: Vec::new(),
                    explicit_doc: true,
                });
            } else if let Some(rest) = comment.strip_prefix("sent_id") {
                block_sent_id = Some(rest.trim_start_matches(['=', ' ']).trim().to_string());
            }
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 10 tab-separated columns, got {}", cols.len()),
            });
        }
        // skip multiword-token ranges and empty nodes
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad token id {:?}", cols[0]),
        })?;
        if id != block.len() + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-contiguous token id {id}"),
            });
        }
        let head_raw: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad HEAD {:?}", cols[6]),
        })?;
        let surface = cols[1].to_lowercase();
        if surface.is_empty() || surface.chars().any(char::is_whitespace) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("bad FORM {:?}", cols[1]),
            });
        }
        block.push((
            lineno,
            Token {
                index: id - 1,
                surface,
                pos: Pos::from_upos(cols[3]),
                head: if head_raw == 0 { None } else { Some(head_raw - 1) },
                deprel: cols[7].to_string(),
            },
        ));
    }
    flush_block(&mut pending, &mut trees, &mut block, &mut block_sent_id, &mut anon)?;
    if let Some(p) = pending.take() {
        trees.push(DependencyTree::new(p.id, p.sentences)?);
    }
    Ok(trees)
}

/// Whitespace plus punctuation tokenization, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let mut word = lower.as_str();
        let mut tail = Vec::new();
        while let Some(stripped) = word.strip_suffix(['.', ',', '!', '?']) {
            if stripped.is_empty() {
                break;
            }
            tail.push(&word[word.len() - 1..]);
            word = stripped;
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        for t in tail.into_iter().rev() {
            out.push(t.to_string());
        }
    }
    out
}

/// Deterministic parser for the controlled grammar templates.
pub struct ControlledGrammar {
    vocab: &'static Vocab,
}

impl Default for ControlledGrammar {
    fn default() -> Self {
        Self::new()
    }
}

impl ControlledGrammar {
    pub fn new() -> Self {
        ControlledGrammar {
            vocab: Vocab::builtin(),
        }
    }

    pub fn vocab(&self) -> &'static Vocab {
        self.vocab
    }

    /// Parse an utterance produced by the grammar templates into a tree with
    /// the grammar's fixed attachment rules. Anything outside the grammar is
    /// an error, never a wrong tree.
    pub fn parse(&self, utterance: &str, utterance_id: &str) -> Result<DependencyTree> {
        let tokens = tokenize(utterance);
        if tokens.is_empty() {
            return Err(Error::Unparseable("empty utterance".into()));
        }
        // split into sentences on "."
        let mut sentences: Vec<Vec<String>> = Vec::new();
        let mut cur = Vec::new();
        for t in tokens {
            let is_period = t == ".";
            cur.push(t);
            if is_period {
                sentences.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            sentences.push(cur);
        }
        if sentences.len() > 2 {
            return Err(Error::Unparseable(format!(
                "{} sentences, grammar allows at most 2",
                sentences.len()
            )));
        }

        let mut parsed = Vec::new();
        for (si, sent) in sentences.iter().enumerate() {
            parsed.push(self.parse_sentence(sent, si)?);
        }
        DependencyTree::new(utterance_id, parsed)
    }

    fn parse_sentence(&self, words: &[String], sentence_index: usize) -> Result<Vec<Token>> {
        let v = self.vocab;
        let fail = |msg: &str| -> Error {
            Error::Unparseable(format!("{msg} in {:?}", words.join(" ")))
        };

        let mut body = words;
        let has_period = body.last().map(|w| w == ".").unwrap_or(false);
        if has_period {
            body = &body[..body.len() - 1];
        }
        if body.is_empty() {
            return Err(fail("empty sentence"));
        }

        let mut tokens: Vec<Token> = Vec::new();
        let mut pos = 0usize;

        // optional "it is" prefix
        let mut pron_cop: Option<(usize, usize)> = None;
        if body.len() >= 2 && v.is_pronoun(&body[0]) && v.is_copula(&body[1]) {
            pron_cop = Some((0, 1));
            pos = 2;
        } else if v.is_pronoun(&body[0]) && body.len() == 1 {
            // degenerate pronoun-only sentence "it ." allowed in later sentences
            if sentence_index == 0 {
                return Err(fail("pronoun-only first sentence"));
            }
            let mut toks = vec![Token {
                index: 0,
                surface: body[0].clone(),
                pos: Pos::Pron,
                head: None,
                deprel: "root".into(),
            }];
            if has_period {
                toks.push(Token {
                    index: 1,
                    surface: ".".into(),
                    pos: Pos::Other,
                    head: Some(0),
                    deprel: "punct".into(),
                });
            }
            return Ok(toks);
        }

        // a relation phrase directly after "it is" means the root noun is the
        // aux noun of the relation ("it is under the black table")
        let leading_rel = pron_cop.is_some() && v.relation_at(body, pos).is_some();

        let parse_np = |pos: &mut usize| -> Result<(Option<usize>, Vec<usize>, usize)> {
            // returns (det index, attribute indices, noun index) in body coords
            let det = if *pos < body.len() && v.is_determiner(&body[*pos]) {
                let d = *pos;
                *pos += 1;
                Some(d)
            } else {
                None
            };
            let mut attrs = Vec::new();
            while *pos < body.len() && v.is_attribute_word(&body[*pos]) {
                attrs.push(*pos);
                *pos += 1;
            }
            if *pos >= body.len() || !v.is_category(&body[*pos]) {
                return Err(Error::Unparseable(format!(
                    "expected a noun at position {} in {:?}",
                    *pos,
                    body.join(" ")
                )));
            }
            let noun = *pos;
            *pos += 1;
            Ok((det, attrs, noun))
        };

        struct Np {
            det: Option<usize>,
            attrs: Vec<usize>,
            noun: usize,
        }

        let mut rel_words: Vec<usize> = Vec::new();
        let main_np;
        let mut tail_np: Option<Np> = None;

        if leading_rel {
            let rel = v.relation_at(body, pos).unwrap();
            for k in 0..rel.words.len() {
                rel_words.push(pos + k);
            }
            pos += rel.words.len();
            let (det, attrs, noun) = parse_np(&mut pos)?;
            if det.is_none() {
                return Err(fail("relation noun phrase needs a determiner"));
            }
            main_np = Np { det, attrs, noun };
        } else {
            let (det, attrs, noun) = parse_np(&mut pos)?;
            if det.is_none() && pron_cop.is_none() {
                return Err(fail("noun phrase needs a determiner"));
            }
            main_np = Np { det, attrs, noun };
            if pos < body.len() {
                let rel = v
                    .relation_at(body, pos)
                    .ok_or_else(|| fail("expected a relation phrase"))?;
                for k in 0..rel.words.len() {
                    rel_words.push(pos + k);
                }
                pos += rel.words.len();
                let (det, attrs, noun) = parse_np(&mut pos)?;
                if det.is_none() {
                    return Err(fail("auxiliary noun phrase needs a determiner"));
                }
                tail_np = Some(Np { det, attrs, noun });
            }
        }
        if pos != body.len() {
            return Err(fail("trailing words outside the grammar"));
        }

        // attachment rules
        let root = main_np.noun;
        let mut head = vec![(Some(root), "dep"); body.len()];
        head[root] = (None, "root");
        if let Some((p, c)) = pron_cop {
            head[p] = (Some(root), "nsubj");
            head[c] = (Some(root), "cop");
        }
        if let Some(d) = main_np.det {
            head[d] = (Some(root), "det");
        }
        for a in &main_np.attrs {
            head[*a] = (Some(root), "amod");
        }
        let rel_target = if leading_rel {
            root
        } else if let Some(np) = &tail_np {
            np.noun
        } else {
            usize::MAX
        };
        if !rel_words.is_empty() {
            head[rel_words[0]] = (Some(rel_target), "case");
            for w in &rel_words[1..] {
                head[*w] = (Some(rel_words[0]), "fixed");
            }
        }
        if let Some(np) = &tail_np {
            head[np.noun] = (Some(root), "nmod");
            if let Some(d) = np.det {
                head[d] = (Some(np.noun), "det");
            }
            for a in &np.attrs {
                head[*a] = (Some(np.noun), "amod");
            }
        }

        for (i, w) in body.iter().enumerate() {
            let p = if v.is_pronoun(w) {
                Pos::Pron
            } else if v.is_copula(w) {
                Pos::Verb
            } else if v.is_determiner(w) {
                Pos::Det
            } else if v.is_category(w) {
                Pos::Noun
            } else if v.is_attribute_word(w) {
                Pos::Adj
            } else {
                Pos::Adp
            };
            tokens.push(Token {
                index: i,
                surface: w.clone(),
                pos: p,
                head: head[i].0,
                deprel: head[i].1.to_string(),
            });
        }
        if has_period {
            tokens.push(Token {
                index: body.len(),
                surface: ".".into(),
                pos: Pos::Other,
                head: Some(root),
                deprel: "punct".into(),
            });
        }
        Ok(tokens)
    }
}
