//! Recurrent encoders, concat-attention and the copy-mechanism decoder step.

use rand::Rng;

use super::tape::{Tape, Var};
use super::{Init, ParamId, ParamStore};

/// Hidden vectors paired with the source token ids they encode; the ids are
/// what the copy mechanism scatters probability mass onto.
#[derive(Debug, Clone)]
pub struct HiddenSeq {
    pub hiddens: Vec<Var>,
    pub tokens: Vec<usize>,
}

impl HiddenSeq {
    pub fn len(&self) -> usize {
        self.hiddens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hiddens.is_empty()
    }
}

/// One-layer GRU cell parameters.
#[derive(Debug, Clone)]
pub struct GruParams {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn register(
        ps: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut mat = |ps: &mut ParamStore, name: &str, rows, cols| {
            ps.register(&format!("{prefix}.{name}"), rows, cols, Init::Uniform, rng)
        };
        let wz = mat(ps, "wz", hidden, input);
        let uz = mat(ps, "uz", hidden, hidden);
        let wr = mat(ps, "wr", hidden, input);
        let ur = mat(ps, "ur", hidden, hidden);
        let wh = mat(ps, "wh", hidden, input);
        let uh = mat(ps, "uh", hidden, hidden);
        let bz = ps.register(&format!("{prefix}.bz"), hidden, 1, Init::Zeros, rng);
        let br = ps.register(&format!("{prefix}.br"), hidden, 1, Init::Zeros, rng);
        let bh = ps.register(&format!("{prefix}.bh"), hidden, 1, Init::Zeros, rng);
        GruParams {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wh,
            uh,
            bh,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, ps: &ParamStore, x: Var, h: Var) -> Var {
        let zx = tape.matvec(ps, self.wz, x);
        let zh = tape.matvec(ps, self.uz, h);
        let bz = tape.param_vec(ps, self.bz);
        let z = tape.add_n(&[zx, zh, bz]);
        let z = tape.sigmoid(z);

        let rx = tape.matvec(ps, self.wr, x);
        let rh = tape.matvec(ps, self.ur, h);
        let br = tape.param_vec(ps, self.br);
        let r = tape.add_n(&[rx, rh, br]);
        let r = tape.sigmoid(r);

        let rh = tape.mul(r, h);
        let hx = tape.matvec(ps, self.wh, x);
        let hh = tape.matvec(ps, self.uh, rh);
        let bh = tape.param_vec(ps, self.bh);
        let cand = tape.add_n(&[hx, hh, bh]);
        let cand = tape.tanh(cand);

        let keep = tape.one_minus(z);
        let keep = tape.mul(keep, h);
        let new = tape.mul(z, cand);
        tape.add(keep, new)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.input(vec![0.0; self.hidden])
    }
}

/// Bidirectional GRU: forward and backward passes whose states are
/// concatenated per position and projected back to the hidden width.
#[derive(Debug, Clone)]
pub struct BiGruParams {
    fwd: GruParams,
    bwd: GruParams,
    proj: ParamId,
    proj_b: ParamId,
    pub hidden: usize,
}

pub struct BiGruOutput {
    pub seq: HiddenSeq,
    /// Projection of the two final states; used as a sequence summary and as
    /// the memory vector of an encoded candidate action.
    pub summary: Var,
}

impl BiGruParams {
    pub fn register(
        ps: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fwd = GruParams::register(ps, &format!("{prefix}.fwd"), input, hidden, rng);
        let bwd = GruParams::register(ps, &format!("{prefix}.bwd"), input, hidden, rng);
        let proj = ps.register(
            &format!("{prefix}.proj"),
            hidden,
            2 * hidden,
            Init::Uniform,
            rng,
        );
        let proj_b = ps.register(&format!("{prefix}.proj_b"), hidden, 1, Init::Zeros, rng);
        BiGruParams {
            fwd,
            bwd,
            proj,
            proj_b,
            hidden,
        }
    }

    /// Encodes pre-embedded inputs. `tokens` are the source ids carried along
    /// for the copy mechanism; must be the same length as `inputs`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        inputs: &[Var],
        tokens: &[usize],
    ) -> BiGruOutput {
        assert!(!inputs.is_empty(), "encoder input must be nonempty");
        assert_eq!(inputs.len(), tokens.len());
        let n = inputs.len();

        let mut fwd_states = Vec::with_capacity(n);
        let mut h = self.fwd.zero_state(tape);
        for x in inputs {
            h = self.fwd.step(tape, ps, *x, h);
            fwd_states.push(h);
        }
        let mut bwd_states = vec![fwd_states[0]; n];
        let mut h = self.bwd.zero_state(tape);
        for i in (0..n).rev() {
            h = self.bwd.step(tape, ps, inputs[i], h);
            bwd_states[i] = h;
        }

        let mut hiddens = Vec::with_capacity(n);
        for i in 0..n {
            let cat = tape.concat(&[fwd_states[i], bwd_states[i]]);
            let proj = tape.matvec(ps, self.proj, cat);
            let b = tape.param_vec(ps, self.proj_b);
            hiddens.push(tape.add(proj, b));
        }
        let cat = tape.concat(&[fwd_states[n - 1], bwd_states[0]]);
        let proj = tape.matvec(ps, self.proj, cat);
        let b = tape.param_vec(ps, self.proj_b);
        let summary = tape.add(proj, b);

        BiGruOutput {
            seq: HiddenSeq {
                hiddens,
                tokens: tokens.to_vec(),
            },
            summary,
        }
    }
}

/// Scoring parameters for one concat-attention head: a 1 x 2h matrix plus
/// scalar bias reducing tanh(W[h + H_i]) to a score.
#[derive(Debug, Clone)]
pub struct AttnParams {
    w: ParamId,
    b: ParamId,
}

impl AttnParams {
    pub fn register(ps: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = ps.register(&format!("{prefix}.w"), 1, 2 * hidden, Init::Uniform, rng);
        let b = ps.register(&format!("{prefix}.b"), 1, 1, Init::Zeros, rng);
        AttnParams { w, b }
    }
}

pub struct AttnOutput {
    pub context: Var,
    pub weights: Var,
}

/// Concat-attention: scores tanh(W[h + H_i]), softmax, convex combination.
pub fn cat_attn(
    tape: &mut Tape,
    ps: &ParamStore,
    params: &AttnParams,
    h: Var,
    seq: &[Var],
) -> AttnOutput {
    let mut scores = Vec::with_capacity(seq.len());
    for item in seq {
        let cat = tape.concat(&[h, *item]);
        let s = tape.matvec(ps, params.w, cat);
        let b = tape.param_vec(ps, params.b);
        let s = tape.add(s, b);
        scores.push(tape.tanh(s));
    }
    let scores = tape.scalars_to_vec(&scores);
    let weights = tape.softmax(scores);
    let context = tape.weighted_sum(weights, seq);
    AttnOutput { context, weights }
}

/// Three independent concat-attentions over three hidden sequences,
/// concatenated to a 3h-wide state.
pub fn attn3(
    tape: &mut Tape,
    ps: &ParamStore,
    params: &[AttnParams; 3],
    h: Var,
    seqs: [&[Var]; 3],
) -> Var {
    let a = cat_attn(tape, ps, &params[0], h, seqs[0]).context;
    let b = cat_attn(tape, ps, &params[1], h, seqs[1]).context;
    let c = cat_attn(tape, ps, &params[2], h, seqs[2]).context;
    tape.concat(&[a, b, c])
}

/// GRU decoder augmented with the copy mechanism.
#[derive(Debug, Clone)]
pub struct CopyDecoderParams {
    pub gru: GruParams,
    w_vocab: ParamId,
    b_vocab: ParamId,
    w_copy: ParamId,
}

pub struct CopyStep {
    /// Final distribution over the vocabulary: generation share plus copy
    /// share scattered onto the source token ids; sums to 1.
    pub dist: Var,
    pub hidden: Var,
    /// Generation share of the joint softmax (vocabulary-wide; sums to less
    /// than 1 by exactly the mass routed through the copy path).
    pub p_gen: Var,
    /// Copy share of the joint softmax, one entry per copy-source position.
    pub p_copy: Var,
}

impl CopyDecoderParams {
    pub fn register(
        ps: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gru = GruParams::register(ps, &format!("{prefix}.gru"), input, hidden, rng);
        let w_vocab = ps.register(
            &format!("{prefix}.w_vocab"),
            vocab,
            hidden,
            Init::Uniform,
            rng,
        );
        let b_vocab = ps.register(&format!("{prefix}.b_vocab"), vocab, 1, Init::Zeros, rng);
        let w_copy = ps.register(
            &format!("{prefix}.w_copy"),
            hidden,
            hidden,
            Init::Uniform,
            rng,
        );
        CopyDecoderParams {
            gru,
            w_vocab,
            b_vocab,
            w_copy,
        }
    }

    /// One decoder step: recurrent update, then a single softmax shared
    /// between the vocabulary logits and the copy scores over the source
    /// sequence. The copy share is scattered onto the source token ids and
    /// added to the generation share, yielding one proper distribution.
    ///
    /// The shared normalizer is essential: with two independent softmaxes,
    /// tokens outside the copy source are either capped at one half of the
    /// mass (renormalized merge) or leave the copy head without gradient
    /// whenever the target is not copyable (unnormalized merge), and neither
    /// variant trains to a usable generator.
    pub fn step(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        context: Var,
        h_prev: Var,
        copy_src: &HiddenSeq,
    ) -> CopyStep {
        let hidden = self.gru.step(tape, ps, context, h_prev);

        let logits = tape.matvec(ps, self.w_vocab, hidden);
        let b = tape.param_vec(ps, self.b_vocab);
        let logits = tape.add(logits, b);

        let mut scores = Vec::with_capacity(copy_src.len());
        for item in &copy_src.hiddens {
            let proj = tape.matvec(ps, self.w_copy, *item);
            let proj = tape.tanh(proj);
            scores.push(tape.dot(hidden, proj));
        }
        let scores = tape.scalars_to_vec(&scores);

        let vocab = ps.get(self.w_vocab).rows;
        let joint = tape.concat(&[logits, scores]);
        let p = tape.softmax(joint);
        let p_gen = tape.slice(p, 0, vocab);
        let p_copy = tape.slice(p, vocab, vocab + copy_src.len());
        let dist = tape.copy_scatter(p_gen, p_copy, &copy_src.tokens);
        CopyStep {
            dist,
            hidden,
            p_gen,
            p_copy,
        }
    }
}
