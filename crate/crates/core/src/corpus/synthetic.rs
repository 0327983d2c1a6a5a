//! Built-in mini-ontology, entity tables and a deterministic synthetic
//! dialogue generator so the full pipeline runs offline at desk scale.
//!
//! Dialogues follow a request/offer/inform flow. In the "early" pattern the
//! user states the requested slots in the first turn only, so the slots the
//! system must later inform are visible in the dialogue history but not in
//! the model's per-turn inputs; retrieved candidate actions are then the
//! only direct source of that information.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{
    db_lookup, ActEntry, BeliefState, CorpusError, Database, DbResultClass, Dialogue, DomainGoal,
    Entity, Ontology, SystemAction, Turn,
};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_dialogues: usize,
    pub seed: u64,
    /// Domains to draw from; must be a subset of the mini-ontology domains.
    pub domains: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_dialogues: 10,
            seed: 0,
            domains: vec!["restaurant".into(), "hotel".into(), "attraction".into()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub ontology: Ontology,
    pub database: Database,
    pub dialogues: Vec<Dialogue>,
}

const INFORMABLES: &[(&str, &[&str])] = &[
    ("restaurant", &["food", "area", "pricerange"]),
    ("hotel", &["area", "pricerange", "stars"]),
    ("attraction", &["area", "type"]),
];

const REQUESTABLES: &[(&str, &[&str])] = &[
    ("restaurant", &["phone", "address"]),
    ("hotel", &["phone", "postcode"]),
    ("attraction", &["phone", "address"]),
];

fn value_set(slot: &str) -> Vec<&'static str> {
    match slot {
        "food" => vec!["chinese", "italian", "indian", "british"],
        "area" => vec!["north", "south", "east", "west", "centre"],
        "pricerange" => vec!["cheap", "moderate", "expensive"],
        "stars" => vec!["two", "three", "four", "five"],
        "type" => vec!["museum", "park", "cinema", "theatre"],
        _ => vec![],
    }
}

const ADJECTIVES: &[&str] = &[
    "golden", "royal", "blue", "grand", "little", "silver", "happy", "old", "red", "green",
    "white", "quiet",
];

fn nouns(domain: &str) -> &'static [&'static str] {
    match domain {
        "restaurant" => &["curry", "kitchen", "garden", "table"],
        "hotel" => &["lodge", "inn", "palace", "court"],
        "attraction" => &["gallery", "hall", "corner", "grounds"],
        _ => &[],
    }
}

/// The built-in ontology plus entity tables. Deterministic constants,
/// independent of any corpus seed.
pub fn mini_world() -> (Ontology, Database) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE17A);
    let mut ontology = Ontology {
        domains: BTreeSet::new(),
        slots_per_domain: BTreeMap::new(),
        values_per_slot: BTreeMap::new(),
        act_functions: [
            "inform",
            "request",
            "recommend",
            "nooffer",
            "reqmore",
            "bye",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    };
    let mut database = Database::default();

    for (domain, informables) in INFORMABLES {
        let requestables = REQUESTABLES
            .iter()
            .find(|(d, _)| d == domain)
            .map(|(_, r)| *r)
            .unwrap();
        ontology.domains.insert(domain.to_string());
        let mut slots: BTreeSet<String> = informables.iter().map(|s| s.to_string()).collect();
        slots.insert("name".into());
        slots.extend(requestables.iter().map(|s| s.to_string()));

        // 12 entities per domain
        let mut entities = Vec::new();
        let noun_list = nouns(domain);
        for i in 0..12 {
            let mut e = Entity::new();
            let name = format!("{}_{}", ADJECTIVES[i], noun_list[i % noun_list.len()]);
            e.insert("name".into(), name);
            for s in *informables {
                let vals = value_set(s);
                e.insert(s.to_string(), vals[rng.gen_range(0..vals.len())].into());
            }
            for s in requestables {
                let v = match *s {
                    "phone" => format!("01223 {:06}", rng.gen_range(100_000..1_000_000)),
                    "address" => format!(
                        "{}_street_{}",
                        ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
                        i
                    ),
                    "postcode" => format!("cb{}{}", i, rng.gen_range(10..100)),
                    _ => unreachable!(),
                };
                e.insert(s.to_string(), v);
            }
            entities.push(e);
        }

        let mut values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for s in &slots {
            let mut set: BTreeSet<String> = value_set(s).into_iter().map(str::to_string).collect();
            for e in &entities {
                if let Some(v) = e.get(s) {
                    set.insert(v.clone());
                }
            }
            values.insert(s.clone(), set);
        }
        ontology.slots_per_domain.insert(domain.to_string(), slots);
        ontology.values_per_slot.insert(domain.to_string(), values);
        database.entities.insert(domain.to_string(), entities);
    }

    // "general" carries function-only acts (reqmore, bye) and no slots
    ontology.domains.insert("general".into());
    ontology
        .slots_per_domain
        .insert("general".into(), BTreeSet::new());
    ontology
        .values_per_slot
        .insert("general".into(), BTreeMap::new());

    (ontology, database)
}

pub fn mini_ontology() -> Ontology {
    mini_world().0
}

fn toks(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn push_value(out: &mut Vec<String>, value: &str) {
    out.extend(value.split_whitespace().map(str::to_string));
}

struct TurnDraft {
    user: Vec<String>,
    response: Vec<String>,
    belief: BeliefState,
    action: SystemAction,
    query_domain: Option<String>,
    active_domains: BTreeSet<String>,
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticWorld, CorpusError> {
    if spec.num_dialogues == 0 {
        return Err(CorpusError::Invalid(
            "synthetic spec requests 0 dialogues".into(),
        ));
    }
    if spec.domains.is_empty() {
        return Err(CorpusError::Invalid(
            "synthetic spec requests 0 domains".into(),
        ));
    }
    let (ontology, database) = mini_world();
    for d in &spec.domains {
        if !ontology.domains.contains(d) || d == "general" {
            return Err(CorpusError::Invalid(format!(
                "unknown synthetic domain {d}"
            )));
        }
    }

    let mut dialogues = Vec::new();
    for idx in 0..spec.num_dialogues {
        let seed = spec
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dialogues.push(generate_dialogue(idx, &mut rng, spec, &ontology, &database));
    }
    dialogues.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    Ok(SyntheticWorld {
        ontology,
        database,
        dialogues,
    })
}

fn generate_dialogue(
    idx: usize,
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    ontology: &Ontology,
    database: &Database,
) -> Dialogue {
    let n_domains = if spec.domains.len() > 1 && rng.gen_bool(0.3) {
        2
    } else {
        1
    };
    let mut domains = spec.domains.clone();
    domains.shuffle(rng);
    domains.truncate(n_domains);

    let mut goal: BTreeMap<String, DomainGoal> = BTreeMap::new();
    let mut drafts: Vec<TurnDraft> = Vec::new();
    let mut belief = BeliefState::default();

    for domain in &domains {
        let entities = &database.entities[domain];
        let entity = &entities[rng.gen_range(0..entities.len())];
        let informables = INFORMABLES.iter().find(|(d, _)| d == domain).unwrap().1;
        let requestables = REQUESTABLES.iter().find(|(d, _)| d == domain).unwrap().1;

        let mut cons: Vec<&str> = informables.to_vec();
        cons.shuffle(rng);
        cons.truncate(2);
        cons.sort_unstable();
        let n_req = rng.gen_range(1..=requestables.len());
        let mut reqs: Vec<&str> = requestables.to_vec();
        reqs.shuffle(rng);
        reqs.truncate(n_req);
        reqs.sort_unstable();
        let early = rng.gen_bool(0.6);

        let mut g = DomainGoal::default();
        for c in &cons {
            g.constraints.insert(c.to_string(), entity[*c].clone());
        }
        g.requestables = reqs.iter().map(|s| s.to_string()).collect();
        goal.insert(domain.clone(), g);

        // turn A: first constraint, system requests the second
        let (c1, c2) = (cons[0], cons[1]);
        let mut user = toks(&["i", "am", "looking", "for", "a"]);
        user.push(domain.clone());
        user.push("with".into());
        user.push(c1.into());
        push_value(&mut user, &entity[c1]);
        if early {
            user.extend(toks(&["and", "i", "need", "the"]));
            for (i, r) in reqs.iter().enumerate() {
                if i > 0 {
                    user.push("and".into());
                }
                user.push(r.to_string());
            }
        }
        user.push(".".into());
        belief.set(domain, c1, &entity[c1]);
        drafts.push(TurnDraft {
            user,
            response: toks(&["what", c2, "would", "you", "like", "?"]),
            belief: belief.clone(),
            action: SystemAction::new(vec![ActEntry {
                domain: domain.clone(),
                function: "request".into(),
                slots: vec![c2.into()],
            }]),
            query_domain: Some(domain.clone()),
            active_domains: [domain.clone()].into_iter().collect(),
        });

        // turn B: second constraint, system offers an entity
        let mut user = toks(&["i", "want"]);
        user.push(c2.into());
        push_value(&mut user, &entity[c2]);
        user.push("please".into());
        user.push(".".into());
        belief.set(domain, c2, &entity[c2]);

        let mut action = SystemAction::new(vec![ActEntry {
            domain: domain.clone(),
            function: "recommend".into(),
            slots: vec!["name".into()],
        }]);
        let mut response = toks(&["i", "recommend", "[value_name]", "."]);
        if early {
            action.entries.push(ActEntry {
                domain: domain.clone(),
                function: "inform".into(),
                slots: reqs.iter().map(|s| s.to_string()).collect(),
            });
            for r in &reqs {
                response.extend(toks(&["the", r, "is"]));
                response.push(format!("[value_{r}]"));
                response.push(".".into());
            }
        } else {
            action.entries.push(ActEntry {
                domain: "general".into(),
                function: "reqmore".into(),
                slots: vec![],
            });
            response.extend(toks(&["anything", "else", "?"]));
        }
        drafts.push(TurnDraft {
            user,
            response,
            belief: belief.clone(),
            action,
            query_domain: Some(domain.clone()),
            active_domains: [domain.clone()].into_iter().collect(),
        });

        // turn C (late pattern): user asks for the requestables
        if !early {
            let mut user = toks(&["what", "is", "the"]);
            for (i, r) in reqs.iter().enumerate() {
                if i > 0 {
                    user.push("and".into());
                }
                user.push(r.to_string());
            }
            user.push("?".into());
            let mut response = Vec::new();
            for r in &reqs {
                response.extend(toks(&["the", r, "is"]));
                response.push(format!("[value_{r}]"));
                response.push(".".into());
            }
            drafts.push(TurnDraft {
                user,
                response,
                belief: belief.clone(),
                action: SystemAction::new(vec![ActEntry {
                    domain: domain.clone(),
                    function: "inform".into(),
                    slots: reqs.iter().map(|s| s.to_string()).collect(),
                }]),
                query_domain: Some(domain.clone()),
                active_domains: [domain.clone()].into_iter().collect(),
            });
        }
    }

    drafts.push(TurnDraft {
        user: toks(&["thank", "you", "goodbye"]),
        response: toks(&["you", "are", "welcome", ".", "goodbye", "."]),
        belief: belief.clone(),
        action: SystemAction::new(vec![ActEntry {
            domain: "general".into(),
            function: "bye".into(),
            slots: vec![],
        }]),
        query_domain: None,
        active_domains: ["general".to_string()].into_iter().collect(),
    });

    let mut turns = Vec::new();
    let mut prev_belief = BeliefState::default();
    let mut prev_response: Vec<String> = Vec::new();
    for (i, draft) in drafts.into_iter().enumerate() {
        let db_class = match &draft.query_domain {
            Some(d) => db_lookup(&draft.belief, d, database),
            None => DbResultClass::NO_QUERY,
        };
        turns.push(Turn {
            turn_id: (i + 1) as u32,
            user: draft.user,
            response: draft.response.clone(),
            belief: draft.belief.clone(),
            prev_belief: prev_belief.clone(),
            prev_response: prev_response.clone(),
            action: draft.action,
            db_class,
            active_domains: draft.active_domains,
        });
        prev_belief = draft.belief;
        prev_response = draft.response;
    }

    let dialogue = Dialogue {
        dialogue_id: format!("syn{idx:04}"),
        goal,
        turns,
    };
    debug_assert!(dialogue.validate(ontology).is_ok());
    dialogue
}
