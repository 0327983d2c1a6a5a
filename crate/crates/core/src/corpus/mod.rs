//! Dialogue data model: ontology, belief states, system actions, turns,
//! linearization to token sequences, delexicalization, database lookup and
//! vocabulary construction.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("validation error in dialogue {dialogue_id} turn {turn_id}: {message}")]
    Validation {
        dialogue_id: String,
        turn_id: u32,
        message: String,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Invalid(String),
}

/// Domain/slot/value inventory plus the set of dialogue act functions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Ontology {
    pub domains: BTreeSet<String>,
    pub slots_per_domain: BTreeMap<String, BTreeSet<String>>,
    /// domain -> slot -> surface values (values may be multi-token strings)
    pub values_per_slot: BTreeMap<String, BTreeMap<String, BTreeSet<String>>>,
    pub act_functions: BTreeSet<String>,
}

impl Ontology {
    pub fn has_slot(&self, domain: &str, slot: &str) -> bool {
        self.slots_per_domain
            .get(domain)
            .is_some_and(|s| s.contains(slot))
    }

    pub fn values(&self, domain: &str, slot: &str) -> Option<&BTreeSet<String>> {
        self.values_per_slot.get(domain).and_then(|m| m.get(slot))
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (d, slots) in &self.slots_per_domain {
            if !self.domains.contains(d) {
                return Err(CorpusError::Invalid(format!("unknown domain {d} in slots")));
            }
            for s in slots {
                let ok = self.values(d, s).is_some_and(|v| !v.is_empty());
                if !ok {
                    return Err(CorpusError::Invalid(format!(
                        "slot {d}.{s} has no value set"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Accumulated user constraints, domain -> slot -> value.
///
/// The map types give the canonical ordering (alphabetical domains, then
/// slots) required by linearization.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct BeliefState {
    #[serde(flatten)]
    pub entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl BeliefState {
    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|m| m.is_empty())
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.entries
            .get(domain)
            .and_then(|m| m.get(slot))
            .map(|s| s.as_str())
    }

    pub fn set(&mut self, domain: &str, slot: &str, value: &str) {
        self.entries
            .entry(domain.to_string())
            .or_default()
            .insert(slot.to_string(), value.to_string());
    }

    pub fn constraints(&self, domain: &str) -> Option<&BTreeMap<String, String>> {
        self.entries.get(domain).filter(|m| !m.is_empty())
    }
}

/// One (domain, function, slots) entry of a system action.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(
    from = "(String, String, Vec<String>)",
    into = "(String, String, Vec<String>)"
)]
pub struct ActEntry {
    pub domain: String,
    pub function: String,
    pub slots: Vec<String>,
}

impl From<(String, String, Vec<String>)> for ActEntry {
    fn from(t: (String, String, Vec<String>)) -> Self {
        ActEntry {
            domain: t.0,
            function: t.1,
            slots: t.2,
        }
    }
}

impl From<ActEntry> for (String, String, Vec<String>) {
    fn from(e: ActEntry) -> Self {
        (e.domain, e.function, e.slots)
    }
}

/// A system action as an ordered list of (domain, function, slots) entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SystemAction {
    pub entries: Vec<ActEntry>,
}

impl SystemAction {
    pub fn new(entries: Vec<ActEntry>) -> Self {
        SystemAction { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by (domain, function), slot order preserved. Used for
    /// duplicate detection in candidate cleaning.
    pub fn canonical(&self) -> SystemAction {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| (&a.domain, &a.function).cmp(&(&b.domain, &b.function)));
        SystemAction { entries }
    }

    pub fn mentions_slot(&self, slot: &str) -> bool {
        self.entries
            .iter()
            .any(|e| e.slots.iter().any(|s| s == slot))
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !ontology.domains.contains(&e.domain) {
                return Err(format!("unknown action domain {}", e.domain));
            }
            if !ontology.act_functions.contains(&e.function) {
                return Err(format!("unknown action function {}", e.function));
            }
            if !seen.insert((e.domain.clone(), e.function.clone())) {
                return Err(format!(
                    "duplicate action entry ({}, {})",
                    e.domain, e.function
                ));
            }
            let mut slot_seen = BTreeSet::new();
            for s in &e.slots {
                if !slot_seen.insert(s) {
                    return Err(format!(
                        "duplicate slot {s} in ({}, {})",
                        e.domain, e.function
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Database result class: match counts bucketed as {0, 1, 2, 3, >=4, no-query}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DbResultClass(pub u8);

impl DbResultClass {
    pub const NO_QUERY: DbResultClass = DbResultClass(5);

    pub fn from_count(count: usize) -> Self {
        DbResultClass(count.min(4) as u8)
    }

    pub fn is_valid(self) -> bool {
        self.0 <= 5
    }
}

/// Entity table per domain; an entity is a slot -> value map.
pub type Entity = BTreeMap<String, String>;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Database {
    pub entities: BTreeMap<String, Vec<Entity>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Turn {
    pub turn_id: u32,
    pub user: Vec<String>,
    pub response: Vec<String>,
    pub belief: BeliefState,
    #[serde(default)]
    pub prev_belief: BeliefState,
    #[serde(default)]
    pub prev_response: Vec<String>,
    pub action: SystemAction,
    pub db_class: DbResultClass,
    pub active_domains: BTreeSet<String>,
}

/// Per-domain dialogue goal: informable constraints plus requested slots.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DomainGoal {
    pub constraints: BTreeMap<String, String>,
    pub requestables: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub goal: BTreeMap<String, DomainGoal>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn validate(&self, ontology: &Ontology) -> Result<(), CorpusError> {
        for (i, turn) in self.turns.iter().enumerate() {
            let err = |message: String| CorpusError::Validation {
                dialogue_id: self.dialogue_id.clone(),
                turn_id: turn.turn_id,
                message,
            };
            if turn.turn_id != i as u32 + 1 {
                return Err(err(format!(
                    "turn ids must increase from 1, got {}",
                    turn.turn_id
                )));
            }
            if turn.turn_id == 1 && (!turn.prev_belief.is_empty() || !turn.prev_response.is_empty())
            {
                return Err(err(
                    "turn 1 must have empty prev_belief/prev_response".into()
                ));
            }
            if !turn.db_class.is_valid() {
                return Err(err(format!("db_class {} out of range", turn.db_class.0)));
            }
            for (d, slots) in &turn.belief.entries {
                if !ontology.domains.contains(d) {
                    return Err(err(format!("unknown belief domain {d}")));
                }
                for s in slots.keys() {
                    if !ontology.has_slot(d, s) {
                        return Err(err(format!("unknown belief slot {d}.{s}")));
                    }
                }
            }
            turn.action.validate(ontology).map_err(err)?;
        }
        Ok(())
    }
}

/// Loads and validates a corpus file, sorted by dialogue_id.
pub fn load_corpus(path: &Path, ontology: &Ontology) -> Result<Vec<Dialogue>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, ontology)
}

pub fn parse_corpus(text: &str, ontology: &Ontology) -> Result<Vec<Dialogue>, CorpusError> {
    let mut dialogues: Vec<Dialogue> =
        serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            context: "corpus file".into(),
            message: e.to_string(),
        })?;
    for d in &dialogues {
        d.validate(ontology)?;
    }
    dialogues.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    Ok(dialogues)
}

/// Canonical serialization: pretty JSON with sorted maps and a trailing newline.
pub fn corpus_to_canonical_json(dialogues: &[Dialogue]) -> String {
    let mut s = serde_json::to_string_pretty(dialogues).expect("corpus serializes");
    s.push('\n');
    s
}

pub fn save_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    std::fs::write(path, corpus_to_canonical_json(dialogues)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `restaurant [food] chinese [price] expansive`; empty belief -> empty.
pub fn linearize_belief(b: &BeliefState) -> Vec<String> {
    let mut out = Vec::new();
    for (domain, slots) in &b.entries {
        if slots.is_empty() {
            continue;
        }
        out.push(domain.clone());
        for (slot, value) in slots {
            out.push(format!("[{slot}]"));
            out.extend(value.split_whitespace().map(|t| t.to_string()));
        }
    }
    out
}

/// `restaurant [inform] price phone`; function-only acts emit `domain [function]`.
pub fn linearize_action(a: &SystemAction) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur_domain: Option<&str> = None;
    for e in &a.entries {
        if cur_domain != Some(e.domain.as_str()) {
            out.push(e.domain.clone());
            cur_domain = Some(&e.domain);
        }
        out.push(format!("[{}]", e.function));
        out.extend(e.slots.iter().cloned());
    }
    out
}

/// Best-effort inverse of [`linearize_action`], total over arbitrary decoder
/// output. Tokens that cannot be attached anywhere land in the residue.
pub fn delinearize_action(seq: &[String], ontology: &Ontology) -> (SystemAction, Vec<String>) {
    let mut action = SystemAction::default();
    let mut residue = Vec::new();
    let mut cur_domain: Option<String> = None;
    let mut open = false; // an entry is accepting slots

    fn bracketed(t: &str) -> Option<&str> {
        t.strip_prefix('[').and_then(|s| s.strip_suffix(']'))
    }

    for (i, tok) in seq.iter().enumerate() {
        if let Some(inner) = bracketed(tok) {
            if ontology.act_functions.contains(inner) {
                match &cur_domain {
                    Some(d) => {
                        if let Some(e) = action
                            .entries
                            .iter_mut()
                            .find(|e| e.domain == *d && e.function == inner)
                        {
                            // duplicate (domain, function): merge into it
                            let _ = e;
                        } else {
                            action.entries.push(ActEntry {
                                domain: d.clone(),
                                function: inner.to_string(),
                                slots: Vec::new(),
                            });
                        }
                        open = true;
                    }
                    None => residue.push(tok.clone()),
                }
            } else if ontology.domains.contains(inner) {
                cur_domain = Some(inner.to_string());
                open = false;
            } else {
                residue.push(tok.clone());
            }
            continue;
        }
        let next_is_function = seq
            .get(i + 1)
            .and_then(|t| bracketed(t))
            .is_some_and(|f| ontology.act_functions.contains(f));
        if ontology.domains.contains(tok) && (!open || next_is_function) {
            cur_domain = Some(tok.clone());
            open = false;
        } else if open {
            let e = action.entries.last_mut().expect("open entry exists");
            let known_slot = ontology.has_slot(&e.domain, tok);
            if known_slot && !e.slots.iter().any(|s| s == tok) {
                e.slots.push(tok.clone());
            } else if !known_slot {
                residue.push(tok.clone());
            }
        } else {
            residue.push(tok.clone());
        }
    }
    // merge slots of duplicate (domain, function) pairs produced above
    let mut merged: Vec<ActEntry> = Vec::new();
    for e in action.entries {
        if let Some(m) = merged
            .iter_mut()
            .find(|m| m.domain == e.domain && m.function == e.function)
        {
            for s in e.slots {
                if !m.slots.contains(&s) {
                    m.slots.push(s);
                }
            }
        } else {
            merged.push(e);
        }
    }
    (SystemAction { entries: merged }, residue)
}

/// Best-effort parse of a linearized belief sequence back to a `BeliefState`.
/// Needed when evaluation runs on generated (rather than gold) beliefs.
pub fn parse_belief(seq: &[String], ontology: &Ontology) -> BeliefState {
    let mut belief = BeliefState::default();
    let mut cur_domain: Option<String> = None;
    let mut cur_slot: Option<String> = None;
    let mut value: Vec<String> = Vec::new();

    let flush = |belief: &mut BeliefState,
                 domain: &Option<String>,
                 slot: &mut Option<String>,
                 value: &mut Vec<String>| {
        if let (Some(d), Some(s)) = (domain.as_ref(), slot.take()) {
            if !value.is_empty() {
                belief.set(d, &s, &value.join(" "));
            }
        }
        value.clear();
    };

    for tok in seq {
        if let Some(inner) = tok.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            flush(&mut belief, &cur_domain, &mut cur_slot, &mut value);
            if cur_domain
                .as_ref()
                .is_some_and(|d| ontology.has_slot(d, inner))
            {
                cur_slot = Some(inner.to_string());
            }
        } else if ontology.domains.contains(tok) {
            flush(&mut belief, &cur_domain, &mut cur_slot, &mut value);
            cur_domain = Some(tok.clone());
        } else if cur_slot.is_some() {
            value.push(tok.clone());
        }
    }
    flush(&mut belief, &cur_domain, &mut cur_slot, &mut value);
    belief
}

/// Replaces ontology/belief values in a response with domain-agnostic
/// `[value_<slot>]` placeholders, longest match first.
pub fn delexicalize(response: &[String], ontology: &Ontology, belief: &BeliefState) -> Vec<String> {
    // (value tokens, slot, priority): belief-sourced replacements win ties.
    let mut repls: Vec<(Vec<String>, String, u8)> = Vec::new();
    for (domain, slots) in &belief.entries {
        for (slot, value) in slots {
            let _ = domain;
            let toks: Vec<String> = value.split_whitespace().map(str::to_string).collect();
            if !toks.is_empty() {
                repls.push((toks, slot.clone(), 0));
            }
        }
    }
    for values in ontology.values_per_slot.values() {
        for (slot, vs) in values {
            for v in vs {
                let toks: Vec<String> = v.split_whitespace().map(str::to_string).collect();
                if !toks.is_empty() {
                    repls.push((toks, slot.clone(), 1));
                }
            }
        }
    }
    repls.sort_by(|a, b| {
        b.0.len()
            .cmp(&a.0.len())
            .then(a.2.cmp(&b.2))
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    repls.dedup_by(|a, b| a.0 == b.0); // keep highest-priority slot per value

    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < response.len() {
        for (toks, slot, _) in &repls {
            if i + toks.len() <= response.len() && &response[i..i + toks.len()] == toks.as_slice() {
                out.push(format!("[value_{slot}]"));
                i += toks.len();
                continue 'outer;
            }
        }
        out.push(response[i].clone());
        i += 1;
    }
    out
}

/// Counts entities satisfying all of the belief's constraints for `domain`,
/// bucketed; `no-query` when the domain has no constraints.
pub fn db_lookup(belief: &BeliefState, domain: &str, db: &Database) -> DbResultClass {
    let constraints = match belief.constraints(domain) {
        Some(c) => c,
        None => return DbResultClass::NO_QUERY,
    };
    let empty = Vec::new();
    let entities = db.entities.get(domain).unwrap_or(&empty);
    let count = entities
        .iter()
        .filter(|e| constraints.iter().all(|(s, v)| e.get(s) == Some(v)))
        .count();
    DbResultClass::from_count(count)
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

/// Token/id bijection with reserved ids and guaranteed structural tokens.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Rebuilds the id map after deserialization.
    pub fn reindex(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let mut s = String::new();
        for b in h.finalize() {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }
}

/// Every slot marker, function marker, domain token and `[value_<slot>]`
/// placeholder derivable from the ontology.
pub fn structural_tokens(ontology: &Ontology) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for d in &ontology.domains {
        out.insert(d.clone());
    }
    for f in &ontology.act_functions {
        out.insert(format!("[{f}]"));
    }
    for slots in ontology.slots_per_domain.values() {
        for s in slots {
            out.insert(format!("[{s}]"));
            out.insert(format!("[value_{s}]"));
        }
    }
    out
}

/// Builds a vocabulary over the corpus. Ids: reserved tokens first, then
/// structural tokens (lexicographic), then corpus tokens by frequency
/// descending with lexicographic tie-break. Tokens under `min_freq` map to
/// `<unk>` at encode time.
pub fn build_vocab(
    corpus: &[Dialogue],
    ontology: &Ontology,
    min_freq: usize,
) -> Result<Vocabulary, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let bump = |toks: &[String], freq: &mut BTreeMap<String, usize>| {
        for t in toks {
            *freq.entry(t.clone()).or_insert(0) += 1;
        }
    };
    for d in corpus {
        for t in &d.turns {
            bump(&t.user, &mut freq);
            bump(&t.response, &mut freq);
            bump(&t.prev_response, &mut freq);
            bump(&linearize_belief(&t.belief), &mut freq);
            bump(&linearize_belief(&t.prev_belief), &mut freq);
            bump(&linearize_action(&t.action), &mut freq);
        }
    }

    let mut tokens: Vec<String> = vec![
        PAD_TOKEN.into(),
        BOS_TOKEN.into(),
        EOS_TOKEN.into(),
        UNK_TOKEN.into(),
        SEP_TOKEN.into(),
    ];
    let structural = structural_tokens(ontology);
    tokens.extend(structural.iter().cloned());

    let mut corpus_tokens: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(t, n)| *n >= min_freq && !structural.contains(t) && !tokens.contains(t))
        .collect();
    corpus_tokens.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    tokens.extend(corpus_tokens.into_iter().map(|(t, _)| t));

    Ok(Vocabulary::from_tokens(tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate_synthetic_corpus, mini_ontology, SyntheticSpec};

    fn toy_ontology() -> Ontology {
        let mut o = Ontology {
            domains: ["restaurant", "attraction", "general"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            slots_per_domain: BTreeMap::new(),
            values_per_slot: BTreeMap::new(),
            act_functions: ["inform", "request", "recommend", "reqmore", "bye"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        for (d, slots) in [
            ("restaurant", vec!["food", "price", "phone", "name"]),
            ("attraction", vec!["postcode", "phone", "name"]),
        ] {
            o.slots_per_domain
                .insert(d.into(), slots.iter().map(|s| s.to_string()).collect());
            let mut vm = BTreeMap::new();
            for s in slots {
                let vals: BTreeSet<String> = match s {
                    "food" => ["chinese", "italian"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    "price" => ["cheap", "expansive"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    "phone" => ["01223 462354"].iter().map(|s| s.to_string()).collect(),
                    "postcode" => ["cb21ab"].iter().map(|s| s.to_string()).collect(),
                    "name" => ["golden curry", "fun house"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    _ => unreachable!(),
                };
                vm.insert(s.to_string(), vals);
            }
            o.values_per_slot.insert(d.into(), vm);
        }
        o.slots_per_domain.insert("general".into(), BTreeSet::new());
        o
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn linearize_belief_matches_reference_format() {
        let mut b = BeliefState::default();
        b.set("restaurant", "food", "chinese");
        b.set("restaurant", "price", "expansive");
        assert_eq!(
            linearize_belief(&b),
            toks("restaurant [food] chinese [price] expansive")
        );
    }

    #[test]
    fn linearize_belief_empty() {
        assert!(linearize_belief(&BeliefState::default()).is_empty());
    }

    #[test]
    fn linearize_belief_two_domains_alphabetical() {
        let mut b = BeliefState::default();
        b.set("restaurant", "food", "chinese");
        b.set("attraction", "postcode", "cb21ab");
        // independent hand expansion: attraction block precedes restaurant block
        let mut expect = Vec::new();
        for (d, s, v) in [
            ("attraction", "postcode", "cb21ab"),
            ("restaurant", "food", "chinese"),
        ] {
            expect.push(d.to_string());
            expect.push(format!("[{s}]"));
            expect.push(v.to_string());
        }
        assert_eq!(linearize_belief(&b), expect);
    }

    #[test]
    fn linearize_action_matches_reference_format() {
        let a = SystemAction::new(vec![ActEntry {
            domain: "restaurant".into(),
            function: "inform".into(),
            slots: vec!["price".into(), "phone".into()],
        }]);
        assert_eq!(
            linearize_action(&a),
            toks("restaurant [inform] price phone")
        );
    }

    #[test]
    fn linearize_action_empty() {
        assert!(linearize_action(&SystemAction::default()).is_empty());
    }

    #[test]
    fn linearize_action_function_only_entry() {
        let a = SystemAction::new(vec![
            ActEntry {
                domain: "attraction".into(),
                function: "inform".into(),
                slots: vec!["postcode".into(), "phone".into()],
            },
            ActEntry {
                domain: "general".into(),
                function: "reqmore".into(),
                slots: vec![],
            },
        ]);
        assert_eq!(
            linearize_action(&a),
            toks("attraction [inform] postcode phone general [reqmore]")
        );
    }

    #[test]
    fn delinearize_action_reference() {
        let o = toy_ontology();
        let (a, residue) = delinearize_action(&toks("restaurant [inform] price phone"), &o);
        assert!(residue.is_empty());
        assert_eq!(
            a,
            SystemAction::new(vec![ActEntry {
                domain: "restaurant".into(),
                function: "inform".into(),
                slots: vec!["price".into(), "phone".into()],
            }])
        );
    }

    #[test]
    fn delinearize_action_empty() {
        let o = toy_ontology();
        let (a, residue) = delinearize_action(&[], &o);
        assert!(a.is_empty());
        assert!(residue.is_empty());
    }

    #[test]
    fn delinearize_action_tolerates_bracketed_domains_and_garbage() {
        let o = toy_ontology();
        let (a, residue) = delinearize_action(
            &toks("[attraction] [inform] postcode phone [general] [reqmore] zzz"),
            &o,
        );
        assert_eq!(a.entries.len(), 2);
        assert_eq!(a.entries[0].slots, vec!["postcode", "phone"]);
        assert_eq!(a.entries[1].function, "reqmore");
        assert_eq!(residue, vec!["zzz"]);
    }

    #[test]
    fn delexicalize_phone_from_belief() {
        let o = toy_ontology();
        let mut b = BeliefState::default();
        b.set("restaurant", "phone", "01223 462354");
        let out = delexicalize(&toks("the phone is 01223 462354"), &o, &b);
        assert_eq!(out, toks("the phone is [value_phone]"));
    }

    #[test]
    fn delexicalize_untouched_without_values() {
        let o = toy_ontology();
        let resp = toks("sorry i could not help");
        assert_eq!(delexicalize(&resp, &o, &BeliefState::default()), resp);
    }

    #[test]
    fn delexicalize_is_domain_agnostic_for_names() {
        // names from two different domains both map to [value_name]
        let o = toy_ontology();
        let out = delexicalize(
            &toks("try golden curry or fun house"),
            &o,
            &BeliefState::default(),
        );
        assert_eq!(out, toks("try [value_name] or [value_name]"));
    }

    #[test]
    fn db_lookup_buckets() {
        let mut db = Database::default();
        let mut e1 = Entity::new();
        e1.insert("food".into(), "chinese".into());
        let mut e2 = Entity::new();
        e2.insert("food".into(), "italian".into());
        db.entities.insert("restaurant".into(), vec![e1, e2]);

        let mut b = BeliefState::default();
        b.set("restaurant", "food", "chinese");
        assert_eq!(db_lookup(&b, "restaurant", &db), DbResultClass(1));
        assert_eq!(
            db_lookup(&BeliefState::default(), "restaurant", &db),
            DbResultClass::NO_QUERY
        );
    }

    #[test]
    fn db_lookup_matches_brute_force_on_random_beliefs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let slots = ["food", "price", "area"];
        let values = ["a", "b", "c", "d"];
        let mut db = Database::default();
        let mut table = Vec::new();
        for _ in 0..50 {
            let mut e = Entity::new();
            for s in slots {
                e.insert(s.into(), values[rng.gen_range(0..values.len())].into());
            }
            table.push(e);
        }
        db.entities.insert("restaurant".into(), table.clone());
        for _ in 0..100 {
            let mut b = BeliefState::default();
            for s in slots {
                if rng.gen_bool(0.6) {
                    b.set("restaurant", s, values[rng.gen_range(0..values.len())]);
                }
            }
            let got = db_lookup(&b, "restaurant", &db);
            // independent linear-scan oracle
            let expect = match b.constraints("restaurant") {
                None => DbResultClass::NO_QUERY,
                Some(c) => {
                    let mut n = 0usize;
                    for e in &table {
                        let mut ok = true;
                        for (s, v) in c {
                            if e.get(s) != Some(v) {
                                ok = false;
                            }
                        }
                        if ok {
                            n += 1;
                        }
                    }
                    DbResultClass::from_count(n)
                }
            };
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn load_rejects_unknown_slot() {
        let o = mini_ontology();
        let text = r#"[{
            "dialogue_id": "d1", "goal": {},
            "turns": [{
                "turn_id": 1, "user": ["hi"], "response": ["hello"],
                "belief": {"restaurant": {"colour": "red"}},
                "action": [["general", "reqmore", []]],
                "db_class": 5, "active_domains": ["general"]
            }]
        }]"#;
        let err = parse_corpus(text, &o).unwrap_err();
        match err {
            CorpusError::Validation {
                dialogue_id,
                turn_id,
                ..
            } => {
                assert_eq!(dialogue_id, "d1");
                assert_eq!(turn_id, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corpus_round_trip_is_byte_identical() {
        let world = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 5,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let canonical = corpus_to_canonical_json(&world.dialogues);
        let reloaded = parse_corpus(&canonical, &world.ontology).unwrap();
        assert_eq!(corpus_to_canonical_json(&reloaded), canonical);
    }

    #[test]
    fn build_vocab_min_freq_and_determinism() {
        let world = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 8,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let v1 = build_vocab(&world.dialogues, &world.ontology, 1).unwrap();
        let v2 = build_vocab(&world.dialogues, &world.ontology, 1).unwrap();
        assert_eq!(v1, v2);
        // min_freq = 1: every corpus token resolvable
        for d in &world.dialogues {
            for t in &d.turns {
                for tok in t.user.iter().chain(&t.response) {
                    assert_ne!(v1.id(tok), UNK, "token {tok} missing");
                }
            }
        }
        // a frequency-gated token maps to unk
        let vhigh = build_vocab(&world.dialogues, &world.ontology, 10_000).unwrap();
        assert_eq!(vhigh.id("some-token-never-seen"), UNK);
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        let o = mini_ontology();
        assert!(matches!(
            build_vocab(&[], &o, 1),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn parse_belief_inverts_linearize() {
        let o = toy_ontology();
        let mut b = BeliefState::default();
        b.set("restaurant", "food", "chinese");
        b.set("restaurant", "phone", "01223 462354");
        b.set("attraction", "postcode", "cb21ab");
        let seq = linearize_belief(&b);
        assert_eq!(parse_belief(&seq, &o), b);
    }
}
