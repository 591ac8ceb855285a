//! Deterministic lexicon-driven command parser.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use crate::error::{LexiconError, ParseError};
use crate::op::{OpName, OpSource, SlotKind, Slots, StructuredOp, WindowPreset};
use crate::schema::check_semantics;

pub const LEXICON_JSON: &str = include_str!("../data/lexicon.json");

const CONFIDENCE_EXACT: f64 = 0.95;
const CONFIDENCE_FUZZY: f64 = 0.75;
const FUZZY_MIN_LEN: usize = 5;

#[derive(Debug, Deserialize)]
struct RawLexicon {
    version: u32,
    categories: BTreeMap<String, Vec<String>>,
    number_words: BTreeMap<String, u32>,
    regions: BTreeMap<String, Vec<String>>,
    windows: BTreeMap<String, Vec<String>>,
    ops: Vec<RawOp>,
}

#[derive(Debug, Deserialize)]
struct RawOp {
    op: String,
    slots: Vec<String>,
    phrase: String,
    rules: Vec<Vec<Vec<String>>>,
    #[serde(default)]
    unless: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Term {
    Words(Vec<String>),
    Marker(SlotKind),
}

#[derive(Clone, Debug)]
struct OpLexicon {
    op: OpName,
    phrase: String,
    rules: Vec<Vec<Vec<Term>>>,
    unless: HashSet<String>,
    vocabulary: HashSet<String>,
}

/// Trigger lexicons, slot vocabularies and normalization for all operations.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub version: u32,
    ops: Vec<OpLexicon>,
    number_words: BTreeMap<String, u32>,
    regions: Vec<(Vec<String>, String)>,
    windows: Vec<(Vec<String>, WindowPreset)>,
    known_words: HashSet<String>,
}

/// Normalized input: punctuation stripped, lower-cased tokens plus raw-text slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Normalized {
    pub tokens: Vec<String>,
    pub path: Option<String>,
    pub pairs: Vec<[u32; 2]>,
    pub quad: Option<[u32; 4]>,
}

struct Patterns {
    quad: Regex,
    pair: Regex,
    path: Regex,
    token: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        quad: Regex::new(r"[\(\[]\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*[\)\]]").unwrap(),
        pair: Regex::new(r"[\(\[]\s*(\d+)\s*,\s*(\d+)\s*[\)\]]").unwrap(),
        path: Regex::new(
            r"(?i)(?:[\w.\-~]*/[\w.\-/~]+|[\w\-~]+\.(?:png|raw|nii|gz|dcm|mha|mhd|json|npy|bin|tif|tiff))",
        )
        .unwrap(),
        token: Regex::new(r"[a-z0-9]+").unwrap(),
    })
}

fn tokenize(s: &str) -> Vec<String> {
    patterns()
        .token
        .find_iter(&s.to_lowercase())
        .map(|m| m.as_str().to_string())
        .collect()
}

fn num(s: &str) -> u32 {
    s.parse().unwrap_or(u32::MAX)
}

/// Strip coordinates and paths from raw text, then case-fold and tokenize the remainder.
pub fn normalize(text: &str) -> Normalized {
    let p = patterns();
    let mut rest = text.to_string();
    let mut out = Normalized::default();
    if let Some(c) = p.quad.captures(&rest) {
        out.quad = Some([num(&c[1]), num(&c[2]), num(&c[3]), num(&c[4])]);
    }
    rest = p.quad.replace_all(&rest, " ").into_owned();
    out.pairs = p
        .pair
        .captures_iter(&rest)
        .map(|c| [num(&c[1]), num(&c[2])])
        .collect();
    rest = p.pair.replace_all(&rest, " ").into_owned();
    if let Some(m) = p.path.find(&rest) {
        out.path = Some(m.as_str().trim_end_matches('.').to_string());
        rest = format!("{} {}", &rest[..m.start()], &rest[m.end()..]);
    }
    out.tokens = tokenize(&rest);
    out
}

/// Find `needle` as a contiguous run in `tokens`; returns every start index.
fn find_runs(tokens: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - needle.len())
        .filter(|&i| tokens[i..i + needle.len()] == *needle)
        .collect()
}

#[derive(Clone, Debug)]
struct Extracted {
    slots: Slots,
    region_span: Vec<usize>,
    window_span: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Candidate {
    op: OpName,
    matched: BTreeSet<usize>,
    fuzzy: bool,
}

const PATH_INDEX: usize = usize::MAX;
const BOX_INDEX: usize = usize::MAX - 1;

impl Grammar {
    pub fn load_default() -> &'static Grammar {
        static G: OnceLock<Grammar> = OnceLock::new();
        G.get_or_init(|| Grammar::from_json(LEXICON_JSON).expect("bundled lexicon is valid"))
    }

    pub fn from_json(json: &str) -> Result<Grammar, LexiconError> {
        let raw: RawLexicon = serde_json::from_str(json)?;
        let mut ops = Vec::new();
        let mut known_words = HashSet::new();
        for r in &raw.ops {
            let op = OpName::parse(&r.op)
                .ok_or_else(|| LexiconError::Invalid(format!("unknown op {}", r.op)))?;
            let declared: Vec<&str> = r.slots.iter().map(String::as_str).collect();
            let allowed: Vec<&str> = op.allowed_slots().iter().map(|k| k.as_str()).collect();
            if declared != allowed {
                return Err(LexiconError::Invalid(format!(
                    "{}: slots {:?} differ from {:?}",
                    r.op, declared, allowed
                )));
            }
            if r.rules.is_empty() {
                return Err(LexiconError::Invalid(format!("{}: no rules", r.op)));
            }
            let mut rules = Vec::new();
            let mut vocabulary = HashSet::new();
            for rule in &r.rules {
                let mut groups = Vec::new();
                for group in rule {
                    let mut terms = Vec::new();
                    for entry in group {
                        terms.push(parse_term(entry)?);
                        if !entry.starts_with('@') {
                            vocabulary.extend(tokenize(entry));
                        }
                    }
                    if terms.is_empty() {
                        return Err(LexiconError::Invalid(format!("{}: empty group", r.op)));
                    }
                    groups.push(terms);
                }
                rules.push(groups);
            }
            let unless: HashSet<String> = r.unless.iter().map(|w| w.to_lowercase()).collect();
            known_words.extend(unless.iter().cloned());
            known_words.extend(vocabulary.iter().cloned());
            ops.push(OpLexicon { op, phrase: r.phrase.clone(), rules, unless, vocabulary });
        }
        for op in OpName::ALL {
            let n = ops.iter().filter(|o| o.op == op).count();
            if n != 1 {
                return Err(LexiconError::Invalid(format!("{op} defined {n} times")));
            }
        }
        for (cat, names) in &raw.categories {
            for name in names {
                let op = OpName::parse(name)
                    .ok_or_else(|| LexiconError::Invalid(format!("unknown op {name}")))?;
                let expected = serde_json::to_value(op.category())?;
                if expected != serde_json::Value::String(cat.clone()) {
                    return Err(LexiconError::Invalid(format!("{name} listed under {cat}")));
                }
            }
        }
        let mut regions = Vec::new();
        for (canonical, variants) in &raw.regions {
            for v in variants {
                regions.push((tokenize(v), canonical.clone()));
            }
        }
        regions.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        let mut windows = Vec::new();
        for (name, variants) in &raw.windows {
            let preset: WindowPreset = serde_json::from_value(serde_json::Value::String(name.clone()))?;
            for v in variants {
                windows.push((tokenize(v), preset));
            }
        }
        windows.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        known_words.extend(raw.number_words.keys().cloned());
        Ok(Grammar {
            version: raw.version,
            ops,
            number_words: raw.number_words,
            regions,
            windows,
            known_words,
        })
    }

    pub fn phrase(&self, op: OpName) -> &str {
        self.ops.iter().find(|o| o.op == op).map(|o| o.phrase.as_str()).unwrap_or("")
    }

    /// Parse a command into a validated structured op.
    pub fn parse(&self, text: &str) -> Result<StructuredOp, ParseError> {
        let norm = normalize(text);
        if norm.tokens.is_empty() && norm.path.is_none() && norm.pairs.is_empty() && norm.quad.is_none() {
            return Err(ParseError::Empty);
        }
        let extracted = self.extract(&norm);
        let mut candidates: Vec<Candidate> = self
            .ops
            .iter()
            .filter_map(|lex| self.match_op(lex, &norm, &extracted))
            .collect();
        if candidates.is_empty() {
            let (suggestion, phrase) = self.nearest(&norm.tokens);
            return Err(ParseError::Unrecognized {
                input: text.trim().to_string(),
                suggestion,
                phrase,
            });
        }
        let snapshot = candidates.clone();
        candidates.retain(|c| {
            !snapshot
                .iter()
                .any(|o| o.op != c.op && c.matched.is_subset(&o.matched) && c.matched != o.matched)
        });
        if candidates.len() > 1 {
            let mut ops: Vec<OpName> = candidates.iter().map(|c| c.op).collect();
            ops.sort();
            return Err(ParseError::Ambiguous { input: text.trim().to_string(), candidates: ops });
        }
        let winner = candidates.remove(0);
        let slots = self.assign_slots(winner.op, &norm, extracted.slots);
        let op = StructuredOp {
            category: winner.op.category(),
            op: winner.op,
            slots,
            confidence: if winner.fuzzy { CONFIDENCE_FUZZY } else { CONFIDENCE_EXACT },
            source: OpSource::Grammar,
        };
        check_semantics(&op)?;
        Ok(op)
    }

    fn extract(&self, norm: &Normalized) -> Extracted {
        let toks = &norm.tokens;
        let mut slots = Slots { path: norm.path.clone(), ..Slots::default() };
        let mut region_span = Vec::new();
        let mut window_span = Vec::new();
        'window: for (variant, preset) in &self.windows {
            if let Some(&i) = find_runs(toks, variant).first() {
                slots.window = Some(*preset);
                window_span = (i..i + variant.len()).collect();
                break 'window;
            }
        }
        for (variant, canonical) in &self.regions {
            if let Some(&i) = find_runs(toks, variant)
                .iter()
                .find(|&&i| !(i..i + variant.len()).any(|j| window_span.contains(&j)))
            {
                slots.region = Some(canonical.clone());
                region_span = (i..i + variant.len()).collect();
                break;
            }
        }
        slots.count = toks.iter().find_map(|t| {
            if t.bytes().all(|b| b.is_ascii_digit()) {
                t.parse().ok()
            } else {
                self.number_words.get(t).copied()
            }
        });
        if let Some(q) = norm.quad {
            slots.bbox = Some(q);
        } else if norm.pairs.len() >= 2 {
            let [a, b] = [norm.pairs[0], norm.pairs[1]];
            slots.bbox = Some([a[0].min(b[0]), a[1].min(b[1]), a[0].max(b[0]), a[1].max(b[1])]);
        }
        if !norm.pairs.is_empty() {
            slots.points = Some(norm.pairs.clone());
        }
        Extracted { slots, region_span, window_span }
    }

    fn match_op(&self, lex: &OpLexicon, norm: &Normalized, ex: &Extracted) -> Option<Candidate> {
        let toks = &norm.tokens;
        if toks.iter().any(|t| lex.unless.contains(t)) {
            return None;
        }
        let mut best: Option<Candidate> = None;
        for rule in &lex.rules {
            let mut matched = BTreeSet::new();
            let mut fuzzy = false;
            let mut ok = true;
            for group in rule {
                let mut hits = self.match_group(group, norm, ex, false);
                let mut fz = false;
                if hits.is_empty() {
                    hits = self.match_group(group, norm, ex, true);
                    fz = true;
                }
                if hits.is_empty() {
                    ok = false;
                    break;
                }
                fuzzy |= fz;
                matched.extend(hits);
            }
            if !ok {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => (!fuzzy && b.fuzzy) || (fuzzy == b.fuzzy && matched.len() > b.matched.len()),
            };
            if better {
                best = Some(Candidate { op: lex.op, matched, fuzzy });
            }
        }
        best
    }

    /// Token indices matched by a keyword group, exactly or with one edit when `fuzzy`.
    fn match_group(
        &self,
        group: &[Term],
        norm: &Normalized,
        ex: &Extracted,
        fuzzy: bool,
    ) -> BTreeSet<usize> {
        let toks = &norm.tokens;
        let mut hits = BTreeSet::new();
        for term in group {
            match term {
                Term::Words(words) if !fuzzy => {
                    for i in find_runs(toks, words) {
                        hits.extend(i..i + words.len());
                    }
                }
                Term::Words(words) if words.len() == 1 => {
                    let w = &words[0];
                    if w.len() < FUZZY_MIN_LEN {
                        continue;
                    }
                    for (i, t) in toks.iter().enumerate() {
                        if t.len() >= FUZZY_MIN_LEN
                            && !self.known_words.contains(t)
                            && strsim::osa_distance(t, w) <= 1
                        {
                            hits.insert(i);
                        }
                    }
                }
                Term::Words(_) => {}
                Term::Marker(kind) if !fuzzy => match kind {
                    SlotKind::Region if ex.slots.region.is_some() => hits.extend(ex.region_span.iter()),
                    SlotKind::Window if ex.slots.window.is_some() => hits.extend(ex.window_span.iter()),
                    SlotKind::Path if ex.slots.path.is_some() => {
                        hits.insert(PATH_INDEX);
                    }
                    SlotKind::Box if norm.quad.is_some() => {
                        hits.insert(BOX_INDEX);
                    }
                    _ => {}
                },
                Term::Marker(_) => {}
            }
        }
        hits
    }

    fn assign_slots(&self, op: OpName, norm: &Normalized, mut slots: Slots) -> Slots {
        match op {
            OpName::AddBox => slots.points = None,
            OpName::AddPoints | OpName::AddNegativePoints => {
                slots.bbox = None;
                if norm.pairs.is_empty() {
                    slots.points = None;
                }
            }
            _ => {}
        }
        slots.restrict_to(op)
    }

    fn nearest(&self, tokens: &[String]) -> (OpName, String) {
        let normalized = tokens.join(" ");
        let mut best = (OpName::OpenImage, String::new(), f64::NEG_INFINITY);
        for lex in &self.ops {
            let shared = tokens.iter().filter(|t| lex.vocabulary.contains(*t)).count() as f64;
            let score = shared
                + strsim::normalized_damerau_levenshtein(&normalized, &lex.phrase)
                    .max(strsim::jaro_winkler(&normalized, &lex.phrase) - 0.1);
            if score > best.2 {
                best = (lex.op, lex.phrase.clone(), score);
            }
        }
        (best.0, best.1)
    }
}

fn parse_term(entry: &str) -> Result<Term, LexiconError> {
    if let Some(marker) = entry.strip_prefix('@') {
        let kind = match marker {
            "region" => SlotKind::Region,
            "window" => SlotKind::Window,
            "path" => SlotKind::Path,
            "box" => SlotKind::Box,
            other => return Err(LexiconError::Invalid(format!("unknown marker @{other}"))),
        };
        return Ok(Term::Marker(kind));
    }
    let words = tokenize(entry);
    if words.is_empty() {
        return Err(LexiconError::Invalid(format!("empty entry `{entry}`")));
    }
    Ok(Term::Words(words))
}

/// Parse with the bundled lexicon.
pub fn parse_command(text: &str) -> Result<StructuredOp, ParseError> {
    Grammar::load_default().parse(text)
}
