//! Inference-time generation: greedy decoding, beam search and the
//! full belief -> retrieve -> action -> response pipeline for one turn.

use serde::{Deserialize, Serialize};

use crate::carm::{
    postprocess, retrieve, turn_history, CandidateSet, CarmError, ContextEncoder, RetrievalIndex,
};
use crate::corpus::{
    db_lookup, parse_belief, BeliefState, Database, DbResultClass, Dialogue, Ontology,
    SystemAction, BOS, EOS, PAD,
};
use crate::model::{encode_candidates, EncodedInputs, MamdModel, MemoryTrace, TurnSample};
use crate::nn::layers::HiddenSeq;
use crate::nn::tape::{Tape, Var};

/// A (partial) decoded sequence with its summed token log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub terminal: bool,
}

/// Argmax over a distribution with padding masked; ties break to the lowest
/// token id.
fn argmax_masked(dist: &[f64]) -> usize {
    let mut best = if PAD == 0 { 1 } else { 0 };
    for (i, &p) in dist.iter().enumerate() {
        if i == PAD {
            continue;
        }
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: the argmax token at each step (ties to the lowest id),
/// stopping at the sequence-end token or `max_len`. The end token's
/// log-probability is counted but the token itself is not emitted.
pub fn greedy_decode<S: Clone>(
    init: S,
    mut step: impl FnMut(usize, &S) -> (Vec<f64>, S),
    max_len: usize,
) -> Hypothesis {
    assert!(max_len >= 1);
    let mut state = init;
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let (dist, next_state) = step(prev, &state);
        let t = argmax_masked(&dist);
        logprob += dist[t].max(f64::MIN_POSITIVE).ln();
        if t == EOS {
            break;
        }
        tokens.push(t);
        prev = t;
        state = next_state;
    }
    // terminal either way: sequence-end emitted or max length reached
    Hypothesis {
        tokens,
        logprob,
        terminal: true,
    }
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    // higher score wins; exact ties go to the lexicographically smaller
    // token sequence
    a.logprob > b.logprob || (a.logprob == b.logprob && a.tokens < b.tokens)
}

/// Length-unnormalized beam search over summed token log-probabilities.
/// Each step expands every live hypothesis, keeps the `beam` best
/// extensions, and moves the completed ones (sequence-end emitted) aside.
/// Returns the highest-scoring completed hypothesis, or the best partial if
/// nothing completed within `max_len`; never worse than the greedy path,
/// which is evaluated as a baseline since aggressive pruning could otherwise
/// drop it.
pub fn beam_search<S: Clone>(
    init: S,
    mut step: impl FnMut(usize, &S) -> (Vec<f64>, S),
    beam: usize,
    max_len: usize,
) -> Hypothesis {
    assert!(beam >= 1);
    assert!(max_len >= 1);
    let mut active: Vec<(Hypothesis, S)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            terminal: false,
        },
        init.clone(),
    )];
    let mut completed: Option<Hypothesis> = None;

    for _ in 0..max_len {
        // (score, tokens, source index, token) for every non-pad extension
        let mut cands: Vec<(f64, Vec<usize>, usize, usize)> = Vec::new();
        let mut states: Vec<S> = Vec::with_capacity(active.len());
        for (i, (hyp, state)) in active.iter().enumerate() {
            let prev = *hyp.tokens.last().unwrap_or(&BOS);
            let (dist, next_state) = step(prev, state);
            states.push(next_state);
            for (t, &p) in dist.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                let score = hyp.logprob + p.max(f64::MIN_POSITIVE).ln();
                let mut tokens = hyp.tokens.clone();
                if t != EOS {
                    tokens.push(t);
                }
                cands.push((score, tokens, i, t));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        cands.truncate(beam);

        let mut next_active = Vec::with_capacity(beam);
        for (score, tokens, i, t) in cands {
            let hyp = Hypothesis {
                tokens,
                logprob: score,
                terminal: t == EOS,
            };
            if t == EOS {
                if completed.as_ref().is_none_or(|c| better(&hyp, c)) {
                    completed = Some(hyp);
                }
            } else {
                next_active.push((hyp, states[i].clone()));
            }
        }
        active = next_active;
        if active.is_empty() {
            break;
        }
    }

    let mut best = completed;
    for (mut hyp, _) in active {
        hyp.terminal = true; // hit max length
        if best.as_ref().is_none_or(|b| better(&hyp, b)) {
            best = Some(hyp);
        }
    }
    let beam_best = best.expect("beam search always yields a hypothesis");

    let greedy = greedy_decode(init, step, max_len);
    if better(&greedy, &beam_best) {
        greedy
    } else {
        beam_best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeliefMode {
    /// Use the model's decoded belief downstream.
    Generated,
    /// Substitute the gold belief after belief decoding, for evaluation
    /// against systems that condition on ground-truth state.
    Oracle,
}

/// Everything the turn pipeline needs besides the model: retrieval index and
/// its encoder, the database, the ontology, and how many raw neighbors to
/// pull before cleaning.
pub struct GenerationContext<'a> {
    pub index: &'a RetrievalIndex,
    pub encoder: &'a dyn ContextEncoder,
    pub database: &'a Database,
    pub ontology: &'a Ontology,
    pub n_raw: usize,
}

/// One generated turn, serialized as a JSON line by the generation command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnOutput {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub belief: Vec<String>,
    pub action: Vec<String>,
    pub response: Vec<String>,
    pub candidates: Vec<SystemAction>,
    pub memory_attention: Vec<MemoryTrace>,
}

/// Database query rule shared by data preparation and inference: query the
/// first non-general active domain. A turn whose only active domain is
/// general (greetings, goodbyes) makes no query; with no active-domain
/// annotation at all, fall back to the first domain of the belief.
pub fn query_db_class(
    belief: &BeliefState,
    active_domains: impl IntoIterator<Item = impl AsRef<str>>,
    db: &Database,
) -> DbResultClass {
    let mut any = false;
    for d in active_domains {
        let d = d.as_ref();
        any = true;
        if d != "general" {
            return db_lookup(belief, d, db);
        }
    }
    if any {
        return DbResultClass::NO_QUERY;
    }
    match belief.entries.keys().next() {
        Some(d) => db_lookup(belief, d, db),
        None => DbResultClass::NO_QUERY,
    }
}

impl MamdModel {
    /// Greedy belief decode that also collects the hidden-state sequence
    /// the downstream decoders attend to and copy from.
    fn decode_belief(&self, tape: &mut Tape, enc: &EncodedInputs) -> (Vec<usize>, HiddenSeq) {
        let mut h = self.dec_belief.gru.zero_state(tape);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut hiddens = vec![h];
        let mut seq_tokens = vec![BOS];
        for _ in 0..self.config.max_belief_len {
            let step = self.belief_step(tape, h, prev, enc);
            let t = argmax_masked(tape.value(step.dist));
            if t == EOS {
                break;
            }
            h = step.hidden;
            hiddens.push(h);
            seq_tokens.push(t);
            tokens.push(t);
            prev = t;
        }
        (
            tokens,
            HiddenSeq {
                hiddens,
                tokens: seq_tokens,
            },
        )
    }

    /// Greedy action decode, collecting hidden states and per-step memory
    /// attention.
    fn decode_action(
        &self,
        tape: &mut Tape,
        enc: &EncodedInputs,
        h_belief: &HiddenSeq,
        memory: &[Var],
        db_class: usize,
    ) -> (Vec<usize>, HiddenSeq, Vec<MemoryTrace>) {
        let mut h = self.dec_action.gru.zero_state(tape);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut hiddens = vec![h];
        let mut seq_tokens = vec![BOS];
        let mut trace = Vec::new();
        for i in 0..self.config.max_action_len {
            let (step, weights) = self.action_step(tape, h, prev, db_class, memory, enc, h_belief);
            let t = argmax_masked(tape.value(step.dist));
            if let Some(w) = weights {
                trace.push(MemoryTrace {
                    step: i,
                    token: t,
                    alphas: tape.value(w).to_vec(),
                });
            }
            if t == EOS {
                break;
            }
            h = step.hidden;
            hiddens.push(h);
            seq_tokens.push(t);
            tokens.push(t);
            prev = t;
        }
        (
            tokens,
            HiddenSeq {
                hiddens,
                tokens: seq_tokens,
            },
            trace,
        )
    }

    /// Full pipeline for one turn: belief decode, candidate retrieval into
    /// the memory bank from the (generated or gold) belief, action decode,
    /// and beam-searched response.
    pub fn generate_turn(
        &self,
        ctx: &GenerationContext,
        dialogue: &Dialogue,
        turn_index: usize,
        mode: BeliefMode,
    ) -> Result<TurnOutput, CarmError> {
        self.generate_turn_with(ctx, dialogue, turn_index, mode, None)
    }

    /// Same pipeline with the memory bank optionally supplied by the caller
    /// instead of retrieved, for ablations over candidate sources.
    pub fn generate_turn_with(
        &self,
        ctx: &GenerationContext,
        dialogue: &Dialogue,
        turn_index: usize,
        mode: BeliefMode,
        bank: Option<&CandidateSet>,
    ) -> Result<TurnOutput, CarmError> {
        let turn = &dialogue.turns[turn_index];
        let sample = TurnSample::from_turn(
            &dialogue.dialogue_id,
            turn,
            &self.vocab,
            &CandidateSet {
                actions: vec![SystemAction::default(); self.config.k],
                provenance: vec![crate::carm::Provenance::NullPad; self.config.k],
            },
        );
        let mut tape = Tape::new();
        let enc = self.encode_inputs(&mut tape, &sample);

        // belief
        let (belief_ids, h_belief) = match mode {
            BeliefMode::Generated => self.decode_belief(&mut tape, &enc),
            BeliefMode::Oracle => {
                // teacher-force the gold belief so the collected hidden
                // states are consistent with the emitted gold sequence
                let target = &sample.belief[..sample.belief.len().saturating_sub(1)];
                let (_, h) = self.run_belief(&mut tape, &enc, &sample.belief);
                (target.to_vec(), h)
            }
        };
        let belief_tokens = self.vocab.decode(&belief_ids);
        let belief = parse_belief(&belief_tokens, ctx.ontology);

        let db_class = query_db_class(&belief, &turn.active_domains, ctx.database);
        // memory bank: caller-supplied, or retrieved with the belief per mode
        let candidates = match bank {
            Some(b) => b.clone(),
            None => {
                let history = turn_history(dialogue, turn_index);
                let query = ctx.encoder.encode_context(&belief, &history);
                let raw = retrieve(
                    ctx.index,
                    &query,
                    ctx.n_raw,
                    Some((&dialogue.dialogue_id, turn.turn_id)),
                )?;
                postprocess(&raw, &belief, db_class, self.config.k)
            }
        };
        let cand_ids = encode_candidates(&candidates.actions, &self.vocab);
        let memory = self.encode_memory(&mut tape, &cand_ids);

        // action
        let (action_ids, h_action, memory_attention) =
            self.decode_action(&mut tape, &enc, &h_belief, &memory, db_class.0 as usize);

        // response, beam-searched
        let h0 = self.dec_response.gru.zero_state(&mut tape);
        let response_hyp = beam_search(
            h0,
            |prev, h: &Var| {
                let step = self.response_step(&mut tape, *h, prev, &enc, &h_belief, &h_action);
                (tape.value(step.dist).to_vec(), step.hidden)
            },
            self.config.beam_width,
            self.config.max_response_len,
        );

        Ok(TurnOutput {
            dialogue_id: dialogue.dialogue_id.clone(),
            turn_id: turn.turn_id,
            belief: belief_tokens,
            action: self.vocab.decode(&action_ids),
            response: self.vocab.decode(&response_hyp.tokens),
            candidates: candidates.actions,
            memory_attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A stateless random "model": the distribution depends only on the
    /// previous token, drawn once up front.
    fn random_table(vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..vocab)
            .map(|_| {
                let mut row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
                row[PAD] = 0.0;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                row
            })
            .collect()
    }

    fn table_step(table: &[Vec<f64>]) -> impl FnMut(usize, &usize) -> (Vec<f64>, usize) + '_ {
        move |prev, _state| (table[prev].clone(), 0usize)
    }

    #[test]
    fn greedy_repeats_a_fixed_peak_until_max_len() {
        let vocab = 6;
        let mut dist = vec![0.0; vocab];
        dist[4] = 1.0;
        let hyp = greedy_decode(0usize, |_, _| (dist.clone(), 0), 5);
        assert_eq!(hyp.tokens, vec![4, 4, 4, 4, 4]);
        assert!(hyp.terminal);
        assert!((hyp.logprob - 0.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_immediate_end_gives_empty_sequence() {
        let vocab = 6;
        let mut dist = vec![0.0; vocab];
        dist[EOS] = 0.9;
        dist[5] = 0.1;
        let hyp = greedy_decode(0usize, |_, _| (dist.clone(), 0), 5);
        assert!(hyp.tokens.is_empty());
        assert!(hyp.terminal);
        assert!((hyp.logprob - 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_breaks_ties_to_lowest_id() {
        let vocab = 8;
        let mut dist = vec![0.05; vocab];
        dist[PAD] = 0.9; // masked, must not be chosen
        dist[3] = 0.2;
        dist[6] = 0.2;
        let hyp = greedy_decode(0usize, |_, _| (dist.clone(), 0), 1);
        assert_eq!(hyp.tokens, vec![3]);
    }

    #[test]
    fn beam_one_equals_greedy_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let vocab = rng.gen_range(5..12);
            let table = random_table(vocab, &mut rng);
            let max_len = rng.gen_range(1..8);
            let g = greedy_decode(0usize, table_step(&table), max_len);
            let b = beam_search(0usize, table_step(&table), 1, max_len);
            assert_eq!(g, b);
        }
    }

    #[test]
    fn beam_five_never_scores_below_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let vocab = rng.gen_range(5..12);
            let table = random_table(vocab, &mut rng);
            let max_len = rng.gen_range(1..8);
            let g = greedy_decode(0usize, table_step(&table), max_len);
            let b = beam_search(0usize, table_step(&table), 5, max_len);
            assert!(
                b.logprob >= g.logprob - 1e-12,
                "beam {} < greedy {}",
                b.logprob,
                g.logprob
            );
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration_on_toy_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let vocab = 5;
            let table = random_table(vocab, &mut rng);
            let max_len = 3;
            // brute-force all paths of length <= 3 over non-pad tokens
            let mut best: Option<Hypothesis> = None;
            let toks: Vec<usize> = (0..vocab).filter(|&t| t != PAD).collect();
            let mut consider = |tokens: &[usize], score: f64, terminal: bool| {
                let h = Hypothesis {
                    tokens: tokens.to_vec(),
                    logprob: score,
                    terminal,
                };
                if best.as_ref().is_none_or(|b| better(&h, b)) {
                    best = Some(h);
                }
            };
            fn walk(
                table: &[Vec<f64>],
                toks: &[usize],
                prefix: &mut Vec<usize>,
                score: f64,
                depth: usize,
                max_len: usize,
                consider: &mut impl FnMut(&[usize], f64, bool),
            ) {
                if depth == max_len {
                    consider(prefix, score, true);
                    return;
                }
                let prev = *prefix.last().unwrap_or(&BOS);
                for &t in toks {
                    let s = score + table[prev][t].ln();
                    if t == EOS {
                        consider(prefix, s, true);
                    } else {
                        prefix.push(t);
                        walk(table, toks, prefix, s, depth + 1, max_len, consider);
                        prefix.pop();
                    }
                }
            }
            walk(
                &table,
                &toks,
                &mut Vec::new(),
                0.0,
                0,
                max_len,
                &mut consider,
            );
            let oracle = best.unwrap();
            // beam wide enough to be exhaustive at this depth
            let b = beam_search(0usize, table_step(&table), vocab * vocab * vocab, max_len);
            assert_eq!(b.tokens, oracle.tokens);
            assert!((b.logprob - oracle.logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn decoding_never_emits_pad_and_respects_max_len() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let vocab = rng.gen_range(5..10);
            // bias mass onto pad to tempt the decoder
            let mut table = random_table(vocab, &mut rng);
            for row in &mut table {
                row[PAD] = 10.0;
            }
            let max_len = rng.gen_range(1..6);
            let g = greedy_decode(0usize, table_step(&table), max_len);
            assert!(g.tokens.len() <= max_len);
            assert!(!g.tokens.contains(&PAD));
            let b = beam_search(0usize, table_step(&table), 4, max_len);
            assert!(b.tokens.len() <= max_len);
            assert!(!b.tokens.contains(&PAD));
        }
    }
}
