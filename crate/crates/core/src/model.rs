//! The memory-augmented multi-decoder network: three input encoders, a
//! memory bank over candidate system actions, and belief / action / response
//! decoders with copy, trained jointly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carm::{CandidateSet, Provenance};
use crate::corpus::{
    linearize_action, linearize_belief, SystemAction, Turn, Vocabulary, BOS, EOS, PAD,
};
use crate::nn::layers::{
    attn3, cat_attn, AttnParams, BiGruParams, CopyDecoderParams, CopyStep, HiddenSeq,
};
use crate::nn::tape::{Tape, Var};
use crate::nn::{Init, NnError, ParamId, ParamStore};

pub const DB_CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MamdConfig {
    pub embedding: usize,
    pub hidden: usize,
    /// Memory bank size: number of candidate actions held per turn.
    pub k: usize,
    /// Probability that the whole memory bank is replaced with random
    /// training actions during training.
    pub random_prob: f64,
    /// Width of the database-result-class embedding.
    pub db_width: usize,
    pub max_belief_len: usize,
    pub max_action_len: usize,
    pub max_response_len: usize,
    pub beam_width: usize,
    pub seed: u64,
    /// With memory disabled the action decoder sees a zero vector in place
    /// of the memory readout; used by the no-memory baseline.
    pub use_memory: bool,
}

impl Default for MamdConfig {
    fn default() -> Self {
        MamdConfig {
            embedding: 50,
            hidden: 100,
            k: 9,
            random_prob: 0.8,
            db_width: 6,
            max_belief_len: 60,
            max_action_len: 30,
            max_response_len: 80,
            beam_width: 5,
            seed: 777,
            use_memory: true,
        }
    }
}

/// One turn prepared for the network: token-id sequences for the inputs,
/// the three gold targets (end-of-sequence terminated), the database result
/// class and the candidate action sequences filling the memory bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnSample {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub user: Vec<usize>,
    pub prev_resp: Vec<usize>,
    pub prev_belief: Vec<usize>,
    pub belief: Vec<usize>,
    pub action: Vec<usize>,
    pub response: Vec<usize>,
    pub db_class: usize,
    /// k candidate token sequences; an empty sequence marks a null slot.
    pub candidates: Vec<Vec<usize>>,
}

impl TurnSample {
    pub fn from_turn(
        dialogue_id: &str,
        turn: &Turn,
        vocab: &Vocabulary,
        candidates: &CandidateSet,
    ) -> Self {
        let target = |tokens: Vec<String>| -> Vec<usize> {
            let mut ids = vocab.encode(&tokens);
            ids.push(EOS);
            ids
        };
        TurnSample {
            dialogue_id: dialogue_id.to_string(),
            turn_id: turn.turn_id,
            user: vocab.encode(&turn.user),
            prev_resp: vocab.encode(&turn.prev_response),
            prev_belief: vocab.encode(&linearize_belief(&turn.prev_belief)),
            belief: target(linearize_belief(&turn.belief)),
            action: target(linearize_action(&turn.action)),
            response: target(turn.response.clone()),
            db_class: turn.db_class.0 as usize,
            candidates: encode_candidates(&candidates.actions, vocab),
        }
    }
}

pub fn encode_candidates(actions: &[SystemAction], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    actions
        .iter()
        .map(|a| {
            if a.is_empty() {
                Vec::new()
            } else {
                vocab.encode(&linearize_action(a))
            }
        })
        .collect()
}

/// Replaces the entire candidate set with random training actions with
/// probability `random_prob`; otherwise returns it unchanged. All-or-nothing
/// by design: a mixed bank would let the model detect which slots were
/// corrupted from provenance-correlated artifacts.
pub fn sample_memory(
    candidates: &CandidateSet,
    pool: &[SystemAction],
    random_prob: f64,
    rng: &mut impl Rng,
) -> CandidateSet {
    if pool.is_empty() || !rng.gen_bool(random_prob.clamp(0.0, 1.0)) {
        return candidates.clone();
    }
    let k = candidates.k();
    let actions: Vec<SystemAction> = (0..k)
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect();
    CandidateSet {
        provenance: vec![Provenance::Random; actions.len()],
        actions,
    }
}

/// Encoded input sequences of one turn.
pub struct EncodedInputs {
    pub h_user: HiddenSeq,
    pub h_prev_resp: HiddenSeq,
    pub h_prev_belief: HiddenSeq,
}

/// Per-step memory attention weights recorded during action generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub step: usize,
    pub token: usize,
    pub alphas: Vec<f64>,
}

pub struct LossParts {
    pub belief: Var,
    pub action: Var,
    pub response: Var,
    pub total: Var,
    pub memory_trace: Vec<MemoryTrace>,
}

pub struct MamdModel {
    pub config: MamdConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    embedding: ParamId,
    enc_user: BiGruParams,
    enc_prev_resp: BiGruParams,
    enc_prev_belief: BiGruParams,
    enc_memory: BiGruParams,
    null_memory: ParamId,
    db_embedding: ParamId,
    mem_attn: AttnParams,
    belief_attn: [AttnParams; 3],
    action_attn: [AttnParams; 3],
    resp_attn: [AttnParams; 3],
    pub dec_belief: CopyDecoderParams,
    pub dec_action: CopyDecoderParams,
    pub dec_response: CopyDecoderParams,
}

impl MamdModel {
    pub fn new(config: MamdConfig, vocab: Vocabulary) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let (e, h) = (config.embedding, config.hidden);
        let embedding = ps.register("embedding", vocab.len(), e, Init::Uniform, &mut rng);
        let enc_user = BiGruParams::register(&mut ps, "enc_user", e, h, &mut rng);
        let enc_prev_resp = BiGruParams::register(&mut ps, "enc_prev_resp", e, h, &mut rng);
        let enc_prev_belief = BiGruParams::register(&mut ps, "enc_prev_belief", e, h, &mut rng);
        let enc_memory = BiGruParams::register(&mut ps, "enc_memory", e, h, &mut rng);
        let null_memory = ps.register("null_memory", h, 1, Init::Uniform, &mut rng);
        let db_embedding = ps.register(
            "db_embedding",
            DB_CLASSES,
            config.db_width,
            Init::Uniform,
            &mut rng,
        );
        let mem_attn = AttnParams::register(&mut ps, "mem_attn", h, &mut rng);
        let heads = |ps: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            [
                AttnParams::register(ps, &format!("{prefix}.0"), h, rng),
                AttnParams::register(ps, &format!("{prefix}.1"), h, rng),
                AttnParams::register(ps, &format!("{prefix}.2"), h, rng),
            ]
        };
        let belief_attn = heads(&mut ps, "belief_attn", &mut rng);
        let action_attn = heads(&mut ps, "action_attn", &mut rng);
        let resp_attn = heads(&mut ps, "resp_attn", &mut rng);
        let dec_belief =
            CopyDecoderParams::register(&mut ps, "dec_belief", 3 * h + e, h, vocab.len(), &mut rng);
        let dec_action = CopyDecoderParams::register(
            &mut ps,
            "dec_action",
            3 * h + e + config.db_width + h,
            h,
            vocab.len(),
            &mut rng,
        );
        let dec_response = CopyDecoderParams::register(
            &mut ps,
            "dec_response",
            3 * h + e,
            h,
            vocab.len(),
            &mut rng,
        );
        MamdModel {
            config,
            vocab,
            params: ps,
            embedding,
            enc_user,
            enc_prev_resp,
            enc_prev_belief,
            enc_memory,
            null_memory,
            db_embedding,
            mem_attn,
            belief_attn,
            action_attn,
            resp_attn,
            dec_belief,
            dec_action,
            dec_response,
        }
    }

    fn embed_seq(&self, tape: &mut Tape, ids: &[usize]) -> Vec<Var> {
        ids.iter()
            .map(|&t| tape.embed_row(&self.params, self.embedding, t))
            .collect()
    }

    /// Encodes one sequence, substituting a single padding token when empty
    /// (first-turn previous response / belief).
    fn encode_seq(&self, tape: &mut Tape, enc: &BiGruParams, ids: &[usize]) -> HiddenSeq {
        let ids: Vec<usize> = if ids.is_empty() {
            vec![PAD]
        } else {
            ids.to_vec()
        };
        let inputs = self.embed_seq(tape, &ids);
        enc.encode(tape, &self.params, &inputs, &ids).seq
    }

    pub fn encode_inputs(&self, tape: &mut Tape, sample: &TurnSample) -> EncodedInputs {
        EncodedInputs {
            h_user: self.encode_seq(tape, &self.enc_user, &sample.user),
            h_prev_resp: self.encode_seq(tape, &self.enc_prev_resp, &sample.prev_resp),
            h_prev_belief: self.encode_seq(tape, &self.enc_prev_belief, &sample.prev_belief),
        }
    }

    /// Encodes the candidate sequences into memory vectors; null slots map
    /// to the learned null-memory vector.
    pub fn encode_memory(&self, tape: &mut Tape, candidates: &[Vec<usize>]) -> Vec<Var> {
        candidates
            .iter()
            .map(|ids| {
                if ids.is_empty() {
                    tape.param_vec(&self.params, self.null_memory)
                } else {
                    let inputs = self.embed_seq(tape, ids);
                    self.enc_memory
                        .encode(tape, &self.params, &inputs, ids)
                        .summary
                }
            })
            .collect()
    }

    pub fn belief_step(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        prev_token: usize,
        enc: &EncodedInputs,
    ) -> CopyStep {
        let s = attn3(
            tape,
            &self.params,
            &self.belief_attn,
            h_prev,
            [
                &enc.h_user.hiddens,
                &enc.h_prev_resp.hiddens,
                &enc.h_prev_belief.hiddens,
            ],
        );
        let e_prev = tape.embed_row(&self.params, self.embedding, prev_token);
        let c = tape.concat(&[s, e_prev]);
        self.dec_belief
            .step(tape, &self.params, c, h_prev, &enc.h_prev_belief)
    }

    /// Queries the memory bank with the decoder state; returns the readout
    /// and the attention weights over the k slots.
    pub fn memory_query(&self, tape: &mut Tape, h_prev: Var, memory: &[Var]) -> (Var, Var) {
        let out = cat_attn(tape, &self.params, &self.mem_attn, h_prev, memory);
        (out.context, out.weights)
    }

    /// One action-decoder step; returns the step and the memory attention
    /// weights (empty vector width when memory is disabled).
    #[allow(clippy::too_many_arguments)]
    pub fn action_step(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        prev_token: usize,
        db_class: usize,
        memory: &[Var],
        enc: &EncodedInputs,
        h_belief: &HiddenSeq,
    ) -> (CopyStep, Option<Var>) {
        let s = attn3(
            tape,
            &self.params,
            &self.action_attn,
            h_prev,
            [
                &enc.h_user.hiddens,
                &enc.h_prev_resp.hiddens,
                &h_belief.hiddens,
            ],
        );
        let e_prev = tape.embed_row(&self.params, self.embedding, prev_token);
        let e_db = tape.embed_row(
            &self.params,
            self.db_embedding,
            db_class.min(DB_CLASSES - 1),
        );
        let (v, weights) = if self.config.use_memory {
            let (v, w) = self.memory_query(tape, h_prev, memory);
            (v, Some(w))
        } else {
            (tape.input(vec![0.0; self.config.hidden]), None)
        };
        let c = tape.concat(&[s, e_prev, e_db, v]);
        let step = self
            .dec_action
            .step(tape, &self.params, c, h_prev, h_belief);
        (step, weights)
    }

    pub fn response_step(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        prev_token: usize,
        enc: &EncodedInputs,
        h_belief: &HiddenSeq,
        h_action: &HiddenSeq,
    ) -> CopyStep {
        let s = attn3(
            tape,
            &self.params,
            &self.resp_attn,
            h_prev,
            [&enc.h_user.hiddens, &h_belief.hiddens, &h_action.hiddens],
        );
        let e_prev = tape.embed_row(&self.params, self.embedding, prev_token);
        let c = tape.concat(&[s, e_prev]);
        self.dec_response
            .step(tape, &self.params, c, h_prev, h_belief)
    }

    /// Teacher-forced belief decode collecting the hidden-state sequence the
    /// later decoders attend to and copy from. The initial zero state is
    /// paired with the sequence-start token.
    pub fn run_belief(
        &self,
        tape: &mut Tape,
        enc: &EncodedInputs,
        target: &[usize],
    ) -> (Vec<CopyStep>, HiddenSeq) {
        let mut h = self.dec_belief.gru.zero_state(tape);
        let mut prev = BOS;
        let mut steps = Vec::with_capacity(target.len());
        let mut hiddens = vec![h];
        let mut tokens = vec![BOS];
        for &t in target {
            let step = self.belief_step(tape, h, prev, enc);
            h = step.hidden;
            hiddens.push(h);
            tokens.push(t);
            steps.push(step);
            prev = t;
        }
        (steps, HiddenSeq { hiddens, tokens })
    }

    /// Joint teacher-forced loss over one turn: the mean-per-token negative
    /// log-likelihoods of the three decoders, summed.
    pub fn joint_loss(&self, tape: &mut Tape, sample: &TurnSample) -> Result<LossParts, NnError> {
        let enc = self.encode_inputs(tape, sample);
        let memory = self.encode_memory(tape, &sample.candidates);

        let (belief_steps, h_belief) = self.run_belief(tape, &enc, &sample.belief);
        let belief = mean_nll(tape, &belief_steps, &sample.belief);

        let mut h = self.dec_action.gru.zero_state(tape);
        let mut prev = BOS;
        let mut action_steps = Vec::with_capacity(sample.action.len());
        let mut a_hiddens = vec![h];
        let mut a_tokens = vec![BOS];
        let mut memory_trace = Vec::new();
        for (i, &t) in sample.action.iter().enumerate() {
            let (step, weights) =
                self.action_step(tape, h, prev, sample.db_class, &memory, &enc, &h_belief);
            if let Some(w) = weights {
                memory_trace.push(MemoryTrace {
                    step: i,
                    token: t,
                    alphas: tape.value(w).to_vec(),
                });
            }
            h = step.hidden;
            a_hiddens.push(h);
            a_tokens.push(t);
            action_steps.push(step);
            prev = t;
        }
        let action = mean_nll(tape, &action_steps, &sample.action);
        let h_action = HiddenSeq {
            hiddens: a_hiddens,
            tokens: a_tokens,
        };

        let mut h = self.dec_response.gru.zero_state(tape);
        let mut prev = BOS;
        let mut resp_steps = Vec::with_capacity(sample.response.len());
        for &t in &sample.response {
            let step = self.response_step(tape, h, prev, &enc, &h_belief, &h_action);
            h = step.hidden;
            resp_steps.push(step);
            prev = t;
        }
        let response = mean_nll(tape, &resp_steps, &sample.response);

        let total = tape.add_n(&[belief, action, response]);
        if !tape.scalar(total).is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        Ok(LossParts {
            belief,
            action,
            response,
            total,
            memory_trace,
        })
    }
}

/// Mean per-token cross-entropy against the decoder's output distribution
/// (generation share plus copy share under one shared softmax). Training and
/// decoding read the same distribution, so a confident model decodes exactly
/// what it was trained toward.
fn mean_nll(tape: &mut Tape, steps: &[CopyStep], targets: &[usize]) -> Var {
    debug_assert_eq!(steps.len(), targets.len());
    if steps.is_empty() {
        return tape.input(vec![0.0]);
    }
    let losses: Vec<Var> = steps
        .iter()
        .zip(targets)
        .map(|(s, &t)| tape.nll(s.dist, t))
        .collect();
    let sum = tape.add_n(&losses);
    tape.scale(sum, 1.0 / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carm::{action_pool, CandidateSet, Provenance};
    use crate::corpus::synthetic::{generate_synthetic_corpus, SyntheticSpec};
    use crate::corpus::{build_vocab, Dialogue, Ontology};
    use crate::nn::relative_error;
    use crate::training::Adam;

    fn tiny_config() -> MamdConfig {
        MamdConfig {
            embedding: 10,
            hidden: 12,
            k: 3,
            db_width: 4,
            ..Default::default()
        }
    }

    fn world(n: usize, seed: u64) -> (Vec<Dialogue>, Ontology, Vocabulary) {
        let w = generate_synthetic_corpus(&SyntheticSpec {
            num_dialogues: n,
            seed,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocab(&w.dialogues, &w.ontology, 1).unwrap();
        (w.dialogues, w.ontology, vocab)
    }

    fn null_candidates(k: usize) -> CandidateSet {
        CandidateSet {
            actions: vec![SystemAction::default(); k],
            provenance: vec![Provenance::NullPad; k],
        }
    }

    fn sample_from(dialogues: &[Dialogue], vocab: &Vocabulary, d: usize, t: usize) -> TurnSample {
        let dlg = &dialogues[d];
        let mut cands = null_candidates(3);
        // fill two slots with real actions so memory encoding is exercised
        cands.actions[0] = dialogues[0].turns[0].action.clone();
        cands.actions[1] = dialogues[0].turns[1].action.clone();
        cands.provenance[0] = Provenance::Retrieved;
        cands.provenance[1] = Provenance::Retrieved;
        TurnSample::from_turn(&dlg.dialogue_id, &dlg.turns[t], vocab, &cands)
    }

    #[test]
    fn joint_loss_is_finite_and_deterministic() {
        let (dialogues, _, vocab) = world(3, 11);
        let model = MamdModel::new(tiny_config(), vocab.clone());
        let sample = sample_from(&dialogues, &vocab, 1, 1);
        let mut t1 = Tape::new();
        let l1 = model.joint_loss(&mut t1, &sample).unwrap();
        let mut t2 = Tape::new();
        let l2 = model.joint_loss(&mut t2, &sample).unwrap();
        let v1 = t1.scalar(l1.total);
        assert!(v1.is_finite() && v1 > 0.0);
        assert_eq!(v1, t2.scalar(l2.total));
        // parts sum to the total
        let parts = t1.scalar(l1.belief) + t1.scalar(l1.action) + t1.scalar(l1.response);
        assert!((parts - v1).abs() < 1e-12);
    }

    #[test]
    fn first_turn_empty_previous_sequences_are_handled() {
        let (dialogues, _, vocab) = world(2, 12);
        let model = MamdModel::new(tiny_config(), vocab.clone());
        let sample = sample_from(&dialogues, &vocab, 0, 0);
        assert!(sample.prev_resp.is_empty());
        let mut tape = Tape::new();
        let loss = model.joint_loss(&mut tape, &sample).unwrap();
        assert!(tape.scalar(loss.total).is_finite());
    }

    #[test]
    fn memory_trace_weights_are_normalized() {
        let (dialogues, _, vocab) = world(3, 13);
        let model = MamdModel::new(tiny_config(), vocab.clone());
        let sample = sample_from(&dialogues, &vocab, 1, 1);
        let mut tape = Tape::new();
        let loss = model.joint_loss(&mut tape, &sample).unwrap();
        assert_eq!(loss.memory_trace.len(), sample.action.len());
        for tr in &loss.memory_trace {
            assert_eq!(tr.alphas.len(), 3);
            assert!((tr.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(tr.alphas.iter().all(|a| *a >= 0.0));
        }
    }

    #[test]
    fn disabled_memory_ignores_candidates() {
        let (dialogues, _, vocab) = world(3, 14);
        let config = MamdConfig {
            use_memory: false,
            ..tiny_config()
        };
        let model = MamdModel::new(config, vocab.clone());
        let a = sample_from(&dialogues, &vocab, 1, 1);
        let mut b = a.clone();
        b.candidates = vec![Vec::new(); 3];
        let mut t1 = Tape::new();
        let l1 = model.joint_loss(&mut t1, &a).unwrap();
        let mut t2 = Tape::new();
        let l2 = model.joint_loss(&mut t2, &b).unwrap();
        assert_eq!(t1.scalar(l1.total), t2.scalar(l2.total));
        assert!(l1.memory_trace.is_empty());
    }

    #[test]
    fn enabled_memory_depends_on_candidates() {
        let (dialogues, _, vocab) = world(3, 15);
        let model = MamdModel::new(tiny_config(), vocab.clone());
        let a = sample_from(&dialogues, &vocab, 1, 1);
        let mut b = a.clone();
        b.candidates = vec![Vec::new(); 3];
        let mut t1 = Tape::new();
        let l1 = model.joint_loss(&mut t1, &a).unwrap();
        let mut t2 = Tape::new();
        let l2 = model.joint_loss(&mut t2, &b).unwrap();
        assert_ne!(t1.scalar(l1.total), t2.scalar(l2.total));
    }

    #[test]
    fn sample_memory_is_all_or_nothing() {
        let (dialogues, _, _) = world(5, 16);
        let pool = action_pool(&dialogues);
        let cands = null_candidates(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kept = sample_memory(&cands, &pool, 0.0, &mut rng);
        assert!(kept.provenance.iter().all(|p| *p == Provenance::NullPad));
        let mut saw_random = false;
        for _ in 0..20 {
            let out = sample_memory(&cands, &pool, 1.0, &mut rng);
            assert!(out.provenance.iter().all(|p| *p == Provenance::Random));
            assert!(out.actions.iter().all(|a| !a.is_empty()));
            saw_random = true;
        }
        assert!(saw_random);
        // intermediate probability: each draw is entirely random or entirely kept
        for _ in 0..30 {
            let out = sample_memory(&cands, &pool, 0.5, &mut rng);
            let n_random = out
                .provenance
                .iter()
                .filter(|p| **p == Provenance::Random)
                .count();
            assert!(n_random == 0 || n_random == 4);
        }
    }

    #[test]
    fn single_sample_training_reduces_loss() {
        let (dialogues, _, vocab) = world(2, 17);
        let mut model = MamdModel::new(tiny_config(), vocab.clone());
        let sample = sample_from(&dialogues, &vocab, 1, 1);
        let mut adam = Adam::new(&model.params, 1e-2);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let mut tape = Tape::new();
            let loss = model.joint_loss(&mut tape, &sample).unwrap();
            last = tape.scalar(loss.total);
            first.get_or_insert(last);
            model.params.zero_grad();
            tape.backward(loss.total, &mut model.params).unwrap();
            adam.step(&mut model.params);
        }
        let first = first.unwrap();
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let (dialogues, _, vocab) = world(2, 18);
        let config = MamdConfig {
            embedding: 6,
            hidden: 7,
            k: 2,
            db_width: 3,
            ..Default::default()
        };
        let mut model = MamdModel::new(config, vocab.clone());
        let dlg = &dialogues[0];
        let mut cands = null_candidates(2);
        cands.actions[0] = dlg.turns[0].action.clone();
        cands.provenance[0] = Provenance::Retrieved;
        let sample = TurnSample::from_turn(&dlg.dialogue_id, &dlg.turns[1], &vocab, &cands);

        {
            let mut tape = Tape::new();
            let loss = model.joint_loss(&mut tape, &sample).unwrap();
            model.params.zero_grad();
            tape.backward(loss.total, &mut model.params).unwrap();
        }
        let grads: Vec<Vec<f64>> = model.params.iter().map(|p| p.grad.clone()).collect();

        let eval = |model: &MamdModel| -> f64 {
            let mut tape = Tape::new();
            let loss = model.joint_loss(&mut tape, &sample).unwrap();
            tape.scalar(loss.total)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ids: Vec<_> = model.params.ids().collect();
        // large enough that roundoff in the ~12-unit loss does not dominate
        // the difference quotient for near-zero gradients
        let eps = 1e-4;
        for (idx, pid) in ids.into_iter().enumerate() {
            let n = model.params.get(pid).data.len();
            for _ in 0..3 {
                let coord = rng.gen_range(0..n);
                let analytic = grads[idx][coord];
                let orig = model.params.get(pid).data[coord];
                model.params.get_mut(pid).data[coord] = orig + eps;
                let plus = eval(&model);
                model.params.get_mut(pid).data[coord] = orig - eps;
                let minus = eval(&model);
                model.params.get_mut(pid).data[coord] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                assert!(
                    relative_error(analytic, numeric) < 1e-4,
                    "param {} coord {coord}: analytic {analytic} numeric {numeric}",
                    model.params.get(pid).name
                );
            }
        }
    }
}
