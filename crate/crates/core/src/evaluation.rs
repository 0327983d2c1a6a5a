//! Corpus-level metrics: Inform, Success, corpus BLEU, the combined score,
//! per-domain breakdowns and action-distribution counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BeliefState, Database, DomainGoal, SystemAction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("hypothesis/reference count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// One system turn as the evaluator sees it: the delexicalized generated
/// response, the belief state in effect when it was produced (for tracing
/// offered entities through the database), and the gold reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTurn {
    pub response: Vec<String>,
    pub belief: BeliefState,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDialogue {
    pub dialogue_id: String,
    pub goal: BTreeMap<String, DomainGoal>,
    pub turns: Vec<EvalTurn>,
}

impl EvalDialogue {
    /// Goal domains, excluding bookkeeping pseudo-domains.
    pub fn goal_domains(&self) -> Vec<&str> {
        self.goal
            .keys()
            .map(|d| d.as_str())
            .filter(|d| *d != "general")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricTuple {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
    pub per_domain: BTreeMap<String, MetricTuple>,
    /// domain -> act function -> count over the generated actions.
    pub action_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn combined_score(inform: f64, success: f64, bleu: f64) -> f64 {
    (inform + success) * 0.5 + bleu
}

fn has_entity_placeholder(response: &[String]) -> bool {
    response
        .iter()
        .any(|t| t == "[value_name]" || t == "[value_id]")
}

/// A dialogue is informed for a domain when some turn offers an entity
/// placeholder while the belief constrains that domain and the database
/// holds an entity satisfying both the belief constraints and the goal
/// constraints at that point. Unconstrained goal domains are trivially
/// informed.
fn domain_informed(
    dialogue: &EvalDialogue,
    domain: &str,
    goal: &DomainGoal,
    db: &Database,
) -> bool {
    if goal.constraints.is_empty() {
        return true;
    }
    let empty = Vec::new();
    let entities = db.entities.get(domain).unwrap_or(&empty);
    dialogue.turns.iter().any(|turn| {
        if !has_entity_placeholder(&turn.response) {
            return false;
        }
        let belief = match turn.belief.constraints(domain) {
            Some(c) if !c.is_empty() => c,
            _ => return false,
        };
        entities.iter().any(|e| {
            belief
                .iter()
                .all(|(s, v)| e.get(s).is_some_and(|ev| ev == v))
                && goal
                    .constraints
                    .iter()
                    .all(|(s, v)| e.get(s).is_some_and(|ev| ev == v))
        })
    })
}

/// All requested slots of a goal domain answered: each requestable's
/// placeholder appears in some system response of the dialogue.
fn domain_requests_answered(dialogue: &EvalDialogue, goal: &DomainGoal) -> bool {
    goal.requestables.iter().all(|slot| {
        let placeholder = format!("[value_{slot}]");
        dialogue
            .turns
            .iter()
            .any(|t| t.response.contains(&placeholder))
    })
}

fn dialogue_informed(dialogue: &EvalDialogue, db: &Database) -> bool {
    dialogue
        .goal_domains()
        .iter()
        .all(|d| domain_informed(dialogue, d, &dialogue.goal[*d], db))
}

fn dialogue_successful(dialogue: &EvalDialogue, db: &Database) -> bool {
    dialogue_informed(dialogue, db)
        && dialogue
            .goal_domains()
            .iter()
            .all(|d| domain_requests_answered(dialogue, &dialogue.goal[*d]))
}

pub fn inform_rate(dialogues: &[EvalDialogue], db: &Database) -> Result<f64, EvalError> {
    if dialogues.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let n = dialogues
        .iter()
        .filter(|d| dialogue_informed(d, db))
        .count();
    Ok(100.0 * n as f64 / dialogues.len() as f64)
}

pub fn success_rate(dialogues: &[EvalDialogue], db: &Database) -> Result<f64, EvalError> {
    if dialogues.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let n = dialogues
        .iter()
        .filter(|d| dialogue_successful(d, db))
        .count();
    Ok(100.0 * n as f64 / dialogues.len() as f64)
}

/// Corpus-level BLEU with n-grams up to 4, uniform weights and the standard
/// brevity penalty, on a 0-100 scale. Zero n-gram match counts are
/// epsilon-smoothed on small corpora (at most 100 sentence pairs) so tiny
/// test sets do not zero out the whole score.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, EvalError> {
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch(
            hypotheses.len(),
            references.len(),
        ));
    }
    let smooth = hypotheses.len() <= 100;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=4 {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: BTreeMap<&[String], usize> = BTreeMap::new();
            if rf.len() >= n {
                for g in rf.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            let mut hyp_counts: BTreeMap<&[String], usize> = BTreeMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            totals[n - 1] += hyp.len() - n + 1;
            for (g, c) in hyp_counts {
                matches[n - 1] += c.min(ref_counts.get(g).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if totals[n] == 0 {
            return Ok(0.0);
        }
        let m = if matches[n] == 0 {
            if smooth {
                1e-9
            } else {
                return Ok(0.0);
            }
        } else {
            matches[n] as f64
        };
        log_sum += 0.25 * (m / totals[n] as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_sum.exp())
}

/// Counts of the first two action dimensions (domain, act function),
/// invariant to slot content.
pub fn action_distribution(actions: &[SystemAction]) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for a in actions {
        for e in &a.entries {
            *counts
                .entry(e.domain.clone())
                .or_default()
                .entry(e.function.clone())
                .or_default() += 1;
        }
    }
    counts
}

/// Full report over a generated corpus. A dialogue spanning several goal
/// domains contributes to each domain's breakdown.
pub fn evaluate(
    dialogues: &[EvalDialogue],
    db: &Database,
    actions: &[SystemAction],
) -> Result<MetricsReport, EvalError> {
    let inform = inform_rate(dialogues, db)?;
    let success = success_rate(dialogues, db)?;
    let hyps: Vec<Vec<String>> = dialogues
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.response.clone()))
        .collect();
    let refs: Vec<Vec<String>> = dialogues
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.reference.clone()))
        .collect();
    let bleu_score = bleu(&hyps, &refs)?;

    let mut per_domain = BTreeMap::new();
    let mut domains: Vec<String> = dialogues
        .iter()
        .flat_map(|d| d.goal_domains().into_iter().map(str::to_string))
        .collect();
    domains.sort();
    domains.dedup();
    for domain in domains {
        let involved: Vec<EvalDialogue> = dialogues
            .iter()
            .filter(|d| d.goal_domains().contains(&domain.as_str()))
            .map(|d| EvalDialogue {
                dialogue_id: d.dialogue_id.clone(),
                goal: d
                    .goal
                    .iter()
                    .filter(|(k, _)| **k == domain)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
                turns: d.turns.clone(),
            })
            .collect();
        let d_inform = inform_rate(&involved, db)?;
        let d_success = success_rate(&involved, db)?;
        let d_hyps: Vec<Vec<String>> = involved
            .iter()
            .flat_map(|d| d.turns.iter().map(|t| t.response.clone()))
            .collect();
        let d_refs: Vec<Vec<String>> = involved
            .iter()
            .flat_map(|d| d.turns.iter().map(|t| t.reference.clone()))
            .collect();
        let d_bleu = bleu(&d_hyps, &d_refs)?;
        per_domain.insert(
            domain,
            MetricTuple {
                inform: d_inform,
                success: d_success,
                bleu: d_bleu,
                combined: combined_score(d_inform, d_success, d_bleu),
            },
        );
    }

    Ok(MetricsReport {
        inform,
        success,
        bleu: bleu_score,
        combined: combined_score(inform, success, bleu_score),
        per_domain,
        action_counts: action_distribution(actions),
    })
}

/// Plain-text table in the Inform / Success / BLEU / Combined column order.
pub fn format_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str("domain      inform  success   bleu  combined\n");
    out.push_str(&format!(
        "{:<10} {:>7.2} {:>8.2} {:>6.2} {:>9.2}\n",
        "all", report.inform, report.success, report.bleu, report.combined
    ));
    for (domain, m) in &report.per_domain {
        out.push_str(&format!(
            "{:<10} {:>7.2} {:>8.2} {:>6.2} {:>9.2}\n",
            domain, m.inform, m.success, m.bleu, m.combined
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate_synthetic_corpus, SyntheticSpec, SyntheticWorld};
    use crate::corpus::Dialogue;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn combined_score_matches_reported_rows() {
        assert!((combined_score(95.70, 88.90, 18.90) - 111.20).abs() < 1e-9);
        assert!((combined_score(94.20, 86.20, 18.80) - 109.00).abs() < 1e-9);
        assert_eq!(combined_score(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn bleu_identity_is_100() {
        let corpus = vec![toks("the cat sat on the mat"), toks("hello there world")];
        let score = bleu(&corpus, &corpus).unwrap();
        assert!((score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_empty_hypotheses_score_zero() {
        let hyps = vec![Vec::new(), Vec::new()];
        let refs = vec![toks("a b c"), toks("d e f")];
        assert_eq!(bleu(&hyps, &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_empty_corpus_is_an_error() {
        assert!(matches!(bleu(&[], &[]), Err(EvalError::EmptyCorpus)));
    }

    #[test]
    fn bleu_matches_hand_computation_on_toy_corpus() {
        // hyp1: "the the cat" vs ref1: "the cat sat"
        //   1-grams: the x2 (clip 1) + cat -> 2/3; 2-grams: "the cat" -> 1/2
        // hyp2: "a b c d" vs ref2: "a b c d"
        //   1-grams 4/4, 2-grams 3/3, 3-grams 2/2, 4-grams 1/1
        // totals: p1 = 6/7, p2 = 4/5, p3 = 2/3 (hyp1 contributes 0/1),
        // p4 = 1/1 (hyp1 is too short to contribute 4-grams)
        // hyp_len 7, ref_len 7 -> bp = 1
        let hyps = vec![toks("the the cat"), toks("a b c d")];
        let refs = vec![toks("the cat sat"), toks("a b c d")];
        let expected = 100.0
            * ((6.0f64 / 7.0).ln() * 0.25
                + (4.0f64 / 5.0).ln() * 0.25
                + (2.0f64 / 3.0).ln() * 0.25
                + (1.0f64 / 1.0).ln() * 0.25)
                .exp();
        let got = bleu(&hyps, &refs).unwrap();
        assert!((got - expected).abs() < 1e-9, "got {got} want {expected}");
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        let hyps = vec![toks("a b c d")];
        let refs = vec![toks("a b c d e f")];
        // all modified precisions are 1; bp = exp(1 - 6/4)
        let got = bleu(&hyps, &refs).unwrap();
        let want = 100.0 * (1.0f64 - 6.0 / 4.0).exp();
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
    }

    #[test]
    fn bleu_is_permutation_invariant_over_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let hyps: Vec<Vec<String>> = vec![
            toks("i want cheap food"),
            toks("the phone number is [value_phone]"),
            toks("how about [value_name]"),
            toks("goodbye"),
        ];
        let refs: Vec<Vec<String>> = vec![
            toks("i would like cheap food"),
            toks("their phone is [value_phone]"),
            toks("i recommend [value_name]"),
            toks("bye"),
        ];
        let base = bleu(&hyps, &refs).unwrap();
        let mut order: Vec<usize> = (0..hyps.len()).collect();
        for _ in 0..5 {
            order.shuffle(&mut rng);
            let h: Vec<_> = order.iter().map(|&i| hyps[i].clone()).collect();
            let r: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
            assert!((bleu(&h, &r).unwrap() - base).abs() < 1e-9);
        }
    }

    fn eval_corpus(world: &SyntheticWorld) -> Vec<EvalDialogue> {
        world.dialogues.iter().map(gold_eval_dialogue).collect()
    }

    fn gold_eval_dialogue(d: &Dialogue) -> EvalDialogue {
        EvalDialogue {
            dialogue_id: d.dialogue_id.clone(),
            goal: d.goal.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| EvalTurn {
                    response: t.response.clone(),
                    belief: t.belief.clone(),
                    reference: t.response.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn gold_responses_score_perfectly() {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 20,
            seed: 42,
            ..Default::default()
        })
        .unwrap();
        let dialogues = eval_corpus(&w);
        assert_eq!(inform_rate(&dialogues, &w.database).unwrap(), 100.0);
        assert_eq!(success_rate(&dialogues, &w.database).unwrap(), 100.0);
    }

    #[test]
    fn missing_entity_placeholder_fails_inform() {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 3,
            seed: 43,
            ..Default::default()
        })
        .unwrap();
        let mut dialogues = eval_corpus(&w);
        for d in &mut dialogues {
            for t in &mut d.turns {
                t.response
                    .retain(|tok| tok != "[value_name]" && tok != "[value_id]");
            }
        }
        assert_eq!(inform_rate(&dialogues, &w.database).unwrap(), 0.0);
        assert_eq!(success_rate(&dialogues, &w.database).unwrap(), 0.0);
    }

    #[test]
    fn missing_requested_slot_fails_success_but_not_inform() {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 10,
            seed: 44,
            ..Default::default()
        })
        .unwrap();
        let mut dialogues = eval_corpus(&w);
        // strip one requested slot's placeholder from every dialogue
        for d in &mut dialogues {
            let slot = d
                .goal
                .values()
                .flat_map(|g| g.requestables.iter())
                .next()
                .unwrap()
                .clone();
            let ph = format!("[value_{slot}]");
            for t in &mut d.turns {
                t.response.retain(|tok| *tok != ph);
            }
        }
        assert_eq!(inform_rate(&dialogues, &w.database).unwrap(), 100.0);
        assert_eq!(success_rate(&dialogues, &w.database).unwrap(), 0.0);
    }

    #[test]
    fn metrics_agree_with_independent_rule_oracle() {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 20,
            seed: 45,
            ..Default::default()
        })
        .unwrap();
        let mut dialogues = eval_corpus(&w);
        // corrupt a deterministic subset in different ways
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut oracle_informed = Vec::new();
        let mut oracle_success = Vec::new();
        for d in &mut dialogues {
            let kind = rng.gen_range(0..3);
            match kind {
                // untouched: informed and successful
                0 => {
                    oracle_informed.push(true);
                    oracle_success.push(true);
                }
                // no entity offers: neither
                1 => {
                    for t in &mut d.turns {
                        t.response
                            .retain(|tok| tok != "[value_name]" && tok != "[value_id]");
                    }
                    oracle_informed.push(false);
                    oracle_success.push(false);
                }
                // requested slots never answered: informed only
                _ => {
                    for t in &mut d.turns {
                        t.response.retain(|tok| {
                            tok == "[value_name]"
                                || tok == "[value_id]"
                                || !(tok.starts_with("[value_") && tok.ends_with(']'))
                        });
                    }
                    let any_requests = d.goal.values().any(|g| !g.requestables.is_empty());
                    oracle_informed.push(true);
                    oracle_success.push(!any_requests);
                }
            }
        }
        let want_inform =
            100.0 * oracle_informed.iter().filter(|b| **b).count() as f64 / dialogues.len() as f64;
        let want_success =
            100.0 * oracle_success.iter().filter(|b| **b).count() as f64 / dialogues.len() as f64;
        assert_eq!(inform_rate(&dialogues, &w.database).unwrap(), want_inform);
        assert_eq!(success_rate(&dialogues, &w.database).unwrap(), want_success);
        assert!(want_success <= want_inform);
    }

    #[test]
    fn success_never_exceeds_inform() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for seed in 0..5 {
            let w = generate_synthetic_corpus(&SyntheticSpec {
                num_dialogues: 12,
                seed,
                ..Default::default()
            })
            .unwrap();
            let mut dialogues = eval_corpus(&w);
            // random response corruption
            for d in &mut dialogues {
                for t in &mut d.turns {
                    t.response.retain(|_| rng.gen_bool(0.7));
                }
            }
            let i = inform_rate(&dialogues, &w.database).unwrap();
            let s = success_rate(&dialogues, &w.database).unwrap();
            assert!(s <= i, "success {s} > inform {i}");
        }
    }

    #[test]
    fn per_domain_report_counts_multi_domain_dialogues_in_each() {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 40,
            seed: 47,
            ..Default::default()
        })
        .unwrap();
        let dialogues = eval_corpus(&w);
        let report = evaluate(&dialogues, &w.database, &[]).unwrap();
        let multi = dialogues
            .iter()
            .filter(|d| d.goal_domains().len() > 1)
            .count();
        assert!(multi > 0, "expected some multi-domain dialogues");
        // every goal domain of every dialogue appears in the breakdown
        for d in &dialogues {
            for dom in d.goal_domains() {
                assert!(report.per_domain.contains_key(dom));
            }
        }
        // single-domain corpus: breakdown equals the global numbers
        let single: Vec<EvalDialogue> = dialogues
            .iter()
            .filter(|d| d.goal_domains() == vec!["restaurant"])
            .cloned()
            .collect();
        if single.len() >= 2 {
            let r = evaluate(&single, &w.database, &[]).unwrap();
            let dom = &r.per_domain["restaurant"];
            assert_eq!(dom.inform, r.inform);
            assert_eq!(dom.success, r.success);
            assert!((dom.bleu - r.bleu).abs() < 1e-9);
        }
    }

    #[test]
    fn action_distribution_counts_first_two_dimensions_only() {
        use crate::corpus::ActEntry;
        let mk = |slots: &[&str]| {
            SystemAction::new(vec![ActEntry {
                domain: "restaurant".into(),
                function: "inform".into(),
                slots: slots.iter().map(|s| s.to_string()).collect(),
            }])
        };
        let a = action_distribution(&[mk(&["pricerange"])]);
        assert_eq!(a["restaurant"]["inform"], 1);
        // slot content does not change counts
        let b = action_distribution(&[mk(&["pricerange", "phone", "area"])]);
        assert_eq!(a, b);
        // streaming recount oracle over a larger batch
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 15,
            seed: 49,
            ..Default::default()
        })
        .unwrap();
        let actions: Vec<SystemAction> = w
            .dialogues
            .iter()
            .flat_map(|d| d.turns.iter().map(|t| t.action.clone()))
            .filter(|_| rng.gen_bool(0.8))
            .collect();
        let got = action_distribution(&actions);
        let mut oracle: BTreeMap<(String, String), usize> = BTreeMap::new();
        for a in &actions {
            for e in &a.entries {
                *oracle
                    .entry((e.domain.clone(), e.function.clone()))
                    .or_default() += 1;
            }
        }
        for ((d, f), c) in oracle {
            assert_eq!(got[&d][&f], c);
        }
        let flat: usize = got.values().flat_map(|m| m.values()).sum();
        let total: usize = actions.iter().map(|a| a.entries.len()).sum();
        assert_eq!(flat, total);
    }

    #[test]
    fn report_combined_respects_formula_everywhere() {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: 10,
            seed: 50,
            ..Default::default()
        })
        .unwrap();
        let dialogues = eval_corpus(&w);
        let report = evaluate(&dialogues, &w.database, &[]).unwrap();
        assert!(
            (report.combined - combined_score(report.inform, report.success, report.bleu)).abs()
                < 1e-12
        );
        for m in report.per_domain.values() {
            assert!((m.combined - combined_score(m.inform, m.success, m.bleu)).abs() < 1e-12);
        }
        let table = format_report(&report);
        assert!(table.contains("all"));
    }
}
