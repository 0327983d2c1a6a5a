//! Context-aware retrieval: encode (belief + dialogue history) into a
//! fixed-width vector, pretrain the encoder on an action-prediction task,
//! retrieve nearest-neighbor system actions from the training set, and clean
//! the candidates.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    linearize_belief, BeliefState, DbResultClass, Dialogue, Ontology, SystemAction, Vocabulary,
    BOS_TOKEN, SEP_TOKEN,
};
use crate::nn::layers::BiGruParams;
use crate::nn::tape::Tape;
use crate::nn::{
    param_fingerprint, read_param_container, write_param_container, Init, NnError, ParamId,
    ParamStore,
};
use crate::training::Adam;

#[derive(Debug, Error)]
pub enum CarmError {
    #[error("vector width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid index file: {0}")]
    InvalidIndex(String),
    #[error("invalid encoder file: {0}")]
    InvalidEncoder(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Fixed-width context embedding of (belief + dialogue history).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn width(&self) -> usize {
        self.0.len()
    }
}

/// Euclidean distance between two context vectors.
pub fn l2_distance(u: &ContextVector, v: &ContextVector) -> Result<f64, CarmError> {
    if u.width() != v.width() {
        return Err(CarmError::WidthMismatch(u.width(), v.width()));
    }
    Ok(u.0
        .iter()
        .zip(v.0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Renders the retrieval input: sequence-start, linearized belief, separator,
/// then the flattened history with only its most recent `max_seq_len` tokens
/// kept.
pub fn render_context(
    belief: &BeliefState,
    history: &[Vec<String>],
    max_seq_len: usize,
) -> Vec<String> {
    let mut out = vec![BOS_TOKEN.to_string()];
    out.extend(linearize_belief(belief));
    out.push(SEP_TOKEN.to_string());
    let flat: Vec<&String> = history.iter().flatten().collect();
    let start = flat.len().saturating_sub(max_seq_len);
    out.extend(flat[start..].iter().map(|t| t.to_string()));
    out
}

/// The full history X_t for a turn: previous user utterances, the previous
/// system response, then the current user utterance.
pub fn turn_history(dialogue: &Dialogue, turn_index: usize) -> Vec<Vec<String>> {
    let mut history = Vec::new();
    for prev in &dialogue.turns[..turn_index] {
        history.push(prev.user.clone());
    }
    let turn = &dialogue.turns[turn_index];
    if !turn.prev_response.is_empty() {
        history.push(turn.prev_response.clone());
    }
    history.push(turn.user.clone());
    history
}

/// Enumeration of (domain, function, slot) action atoms used as the
/// multi-hot pretraining label space. Slotless entries get a (domain,
/// function, None) atom.
#[derive(Debug, Clone)]
pub struct AtomSpace {
    atoms: Vec<(String, String, Option<String>)>,
    index: BTreeMap<(String, String, Option<String>), usize>,
}

impl AtomSpace {
    pub fn from_ontology(ontology: &Ontology) -> Self {
        let mut atoms = Vec::new();
        for domain in &ontology.domains {
            for function in &ontology.act_functions {
                atoms.push((domain.clone(), function.clone(), None));
                if let Some(slots) = ontology.slots_per_domain.get(domain) {
                    for slot in slots {
                        atoms.push((domain.clone(), function.clone(), Some(slot.clone())));
                    }
                }
            }
        }
        let index = atoms
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        AtomSpace { atoms, index }
    }

    pub fn dim(&self) -> usize {
        self.atoms.len()
    }

    /// Multi-hot label over action atoms.
    pub fn label(&self, action: &SystemAction) -> Vec<f64> {
        let mut bits = vec![0.0; self.atoms.len()];
        for e in &action.entries {
            let mut set = |key: (String, String, Option<String>)| {
                if let Some(&i) = self.index.get(&key) {
                    bits[i] = 1.0;
                }
            };
            set((e.domain.clone(), e.function.clone(), None));
            for s in &e.slots {
                set((e.domain.clone(), e.function.clone(), Some(s.clone())));
            }
        }
        bits
    }
}

/// Anything that can map (belief, history) to a context vector.
pub trait ContextEncoder {
    fn encode_context(&self, belief: &BeliefState, history: &[Vec<String>]) -> ContextVector;
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CarmConfig {
    pub embedding: usize,
    pub hidden: usize,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_proportion: f64,
    pub seed: u64,
}

impl Default for CarmConfig {
    fn default() -> Self {
        CarmConfig {
            embedding: 32,
            hidden: 64,
            max_seq_len: 400,
            batch_size: 6,
            learning_rate: 5e-5,
            epochs: 20,
            warmup_proportion: 0.1,
            seed: 42,
        }
    }
}

/// Small trainable substitute for a large pretrained context encoder: a
/// single-layer bidirectional recurrent encoder with a prepended summary
/// token. The summary state at the sequence-start position is the context
/// vector.
pub struct GruContextEncoder {
    pub config: CarmConfig,
    pub vocab: Vocabulary,
    params: ParamStore,
    embedding: ParamId,
    encoder: BiGruParams,
    classifier_w: ParamId,
    classifier_b: ParamId,
    pub atom_space: AtomSpace,
}

impl GruContextEncoder {
    pub fn new(config: CarmConfig, vocab: Vocabulary, ontology: &Ontology) -> Self {
        let atom_space = AtomSpace::from_ontology(ontology);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let embedding = params.register(
            "carm.embedding",
            vocab.len(),
            config.embedding,
            Init::Uniform,
            &mut rng,
        );
        let encoder = BiGruParams::register(
            &mut params,
            "carm.encoder",
            config.embedding,
            config.hidden,
            &mut rng,
        );
        let classifier_w = params.register(
            "carm.classifier_w",
            atom_space.dim(),
            config.hidden,
            Init::Uniform,
            &mut rng,
        );
        let classifier_b = params.register(
            "carm.classifier_b",
            atom_space.dim(),
            1,
            Init::Zeros,
            &mut rng,
        );
        GruContextEncoder {
            config,
            vocab,
            params,
            embedding,
            encoder,
            classifier_w,
            classifier_b,
            atom_space,
        }
    }

    fn encode_ids(&self, tape: &mut Tape, ids: &[usize]) -> crate::nn::tape::Var {
        let inputs: Vec<_> = ids
            .iter()
            .map(|&t| tape.embed_row(&self.params, self.embedding, t))
            .collect();
        let out = self.encoder.encode(tape, &self.params, &inputs, ids);
        // summary state at the sequence-start position
        out.seq.hiddens[0]
    }

    /// Classifier probabilities for one rendered context (used by the
    /// pretraining task and its tests).
    pub fn predict_atoms(&self, belief: &BeliefState, history: &[Vec<String>]) -> Vec<f64> {
        let tokens = render_context(belief, history, self.config.max_seq_len);
        let ids = self.vocab.encode(&tokens);
        let mut tape = Tape::new();
        let h = self.encode_ids(&mut tape, &ids);
        let logits = tape.matvec(&self.params, self.classifier_w, h);
        let b = tape.param_vec(&self.params, self.classifier_b);
        let logits = tape.add(logits, b);
        let p = tape.sigmoid(logits);
        tape.value(p).to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<(), CarmError> {
        let meta = serde_json::json!({
            "kind": "carm-encoder",
            "version": 1,
            "config": self.config,
            "vocab_hash": self.vocab.hash(),
        });
        let mut file = std::fs::File::create(path).map_err(|source| CarmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        write_param_container(&mut file, &self.params, &meta).map_err(|source| CarmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, vocab: Vocabulary, ontology: &Ontology) -> Result<Self, CarmError> {
        let mut file = std::fs::File::open(path).map_err(|source| CarmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (store, meta) = read_param_container(&mut file).map_err(|source| CarmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if meta["kind"] != "carm-encoder" {
            return Err(CarmError::InvalidEncoder("not a carm encoder file".into()));
        }
        if meta["vocab_hash"] != serde_json::json!(vocab.hash()) {
            return Err(CarmError::InvalidEncoder("vocabulary hash mismatch".into()));
        }
        let config: CarmConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CarmError::InvalidEncoder(e.to_string()))?;
        let mut enc = GruContextEncoder::new(config, vocab, ontology);
        if enc.params.len() != store.len() {
            return Err(CarmError::InvalidEncoder(
                "parameter layout mismatch".into(),
            ));
        }
        enc.params.copy_values_from(&store);
        Ok(enc)
    }
}

impl ContextEncoder for GruContextEncoder {
    fn encode_context(&self, belief: &BeliefState, history: &[Vec<String>]) -> ContextVector {
        let tokens = render_context(belief, history, self.config.max_seq_len);
        let ids = self.vocab.encode(&tokens);
        let mut tape = Tape::new();
        let h = self.encode_ids(&mut tape, &ids);
        ContextVector(tape.value(h).to_vec())
    }

    fn fingerprint(&self) -> String {
        param_fingerprint(&self.params)
    }
}

/// Context vectors precomputed externally, keyed by sample; lets the
/// retrieval pipeline ingest embeddings from file instead of the trainable
/// encoder.
pub struct PrecomputedEncoder {
    pub width: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub fingerprint: String,
}

impl PrecomputedEncoder {
    /// Keys contexts by the SHA-256 of their rendered token sequence.
    pub fn context_key(
        belief: &BeliefState,
        history: &[Vec<String>],
        max_seq_len: usize,
    ) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in render_context(belief, history, max_seq_len) {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }
}

impl ContextEncoder for PrecomputedEncoder {
    fn encode_context(&self, belief: &BeliefState, history: &[Vec<String>]) -> ContextVector {
        let key = Self::context_key(belief, history, usize::MAX);
        match self.vectors.get(&key) {
            Some(v) => ContextVector(v.clone()),
            None => ContextVector(vec![0.0; self.width]),
        }
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Per-epoch pretraining log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_f1: f64,
}

/// Pretrains the context encoder with the action-prediction task: per-atom
/// binary cross-entropy between classifier(summary state) and the multi-hot
/// action label. Deterministic under the config seed.
pub fn pretrain_encoder(
    corpus: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocabulary,
    config: &CarmConfig,
) -> Result<(GruContextEncoder, Vec<PretrainEpoch>), CarmError> {
    let mut encoder = GruContextEncoder::new(config.clone(), vocab.clone(), ontology);
    let examples = build_examples(corpus, &encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&encoder.params, config.learning_rate);
    let total_steps = (examples.len().div_ceil(config.batch_size.max(1)) * config.epochs).max(1);
    let warmup_steps = ((total_steps as f64) * config.warmup_proportion).ceil() as u64;
    let mut step = 0u64;
    let mut log = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            encoder.params.zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (ids, label) = &examples[i];
                let mut tape = Tape::new();
                let h = encoder.encode_ids(&mut tape, ids);
                let logits = tape.matvec(&encoder.params, encoder.classifier_w, h);
                let b = tape.param_vec(&encoder.params, encoder.classifier_b);
                let logits = tape.add(logits, b);
                let loss = tape.bce_logits(logits, label);
                batch_loss += tape.scalar(loss);
                tape.backward(loss, &mut encoder.params)?;
            }
            encoder.params.scale_grad(1.0 / batch.len() as f64);
            step += 1;
            let lr = if warmup_steps > 0 && step <= warmup_steps {
                config.learning_rate * step as f64 / warmup_steps as f64
            } else {
                config.learning_rate
            };
            adam.set_lr(lr);
            adam.step(&mut encoder.params);
            epoch_loss += batch_loss / batch.len() as f64;
        }
        let batches = examples.len().div_ceil(config.batch_size.max(1)).max(1);
        log.push(PretrainEpoch {
            epoch: epoch + 1,
            loss: epoch_loss / batches as f64,
            train_f1: f64::NAN, // filled below for the final epoch only
        });
    }
    let f1 = label_f1(&encoder, corpus);
    if let Some(last) = log.last_mut() {
        last.train_f1 = f1;
    }
    Ok((encoder, log))
}

fn build_examples(corpus: &[Dialogue], encoder: &GruContextEncoder) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut examples = Vec::new();
    for dialogue in corpus {
        for (i, turn) in dialogue.turns.iter().enumerate() {
            let history = turn_history(dialogue, i);
            let tokens = render_context(&turn.belief, &history, encoder.config.max_seq_len);
            let ids = encoder.vocab.encode(&tokens);
            let label = encoder.atom_space.label(&turn.action);
            examples.push((ids, label));
        }
    }
    examples
}

/// Micro-F1 of thresholded atom predictions against gold labels.
pub fn label_f1(encoder: &GruContextEncoder, corpus: &[Dialogue]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for dialogue in corpus {
        for (i, turn) in dialogue.turns.iter().enumerate() {
            let history = turn_history(dialogue, i);
            let probs = encoder.predict_atoms(&turn.belief, &history);
            let label = encoder.atom_space.label(&turn.action);
            for (p, y) in probs.iter().zip(label.iter()) {
                match (*p > 0.5, *y > 0.5) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// One stored training sample: key, context vector, action and the database
/// result class recorded at that turn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub vector: Vec<f64>,
    pub action: SystemAction,
    pub db_class: DbResultClass,
}

/// Exact (linear-scan) retrieval index; immutable after build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub width: usize,
    pub encoder_fingerprint: String,
    pub entries: Vec<IndexEntry>,
}

pub fn build_index(corpus: &[Dialogue], encoder: &dyn ContextEncoder) -> RetrievalIndex {
    let mut entries = Vec::new();
    let mut width = 0;
    for dialogue in corpus {
        for (i, turn) in dialogue.turns.iter().enumerate() {
            let history = turn_history(dialogue, i);
            let vector = encoder.encode_context(&turn.belief, &history);
            width = vector.width();
            entries.push(IndexEntry {
                dialogue_id: dialogue.dialogue_id.clone(),
                turn_id: turn.turn_id,
                vector: vector.0,
                action: turn.action.clone(),
                db_class: turn.db_class,
            });
        }
    }
    entries.sort_by(|a, b| (&a.dialogue_id, a.turn_id).cmp(&(&b.dialogue_id, b.turn_id)));
    RetrievalIndex {
        width,
        encoder_fingerprint: encoder.fingerprint(),
        entries,
    }
}

/// A retrieved candidate with its provenance for cleaning and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub action: SystemAction,
    pub distance: f64,
    pub dialogue_id: String,
    pub turn_id: u32,
    pub db_class: DbResultClass,
}

/// Top-n nearest entries by L2 distance, ties broken by (dialogue_id,
/// turn_id); the excluded key never appears. Requests beyond the index size
/// return the full ranking.
pub fn retrieve(
    index: &RetrievalIndex,
    query: &ContextVector,
    n: usize,
    exclude: Option<(&str, u32)>,
) -> Result<Vec<RankedCandidate>, CarmError> {
    let mut ranked: Vec<RankedCandidate> = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        if let Some((d, t)) = exclude {
            if e.dialogue_id == d && e.turn_id == t {
                continue;
            }
        }
        let distance = l2_distance(query, &ContextVector(e.vector.clone()))?;
        ranked.push(RankedCandidate {
            action: e.action.clone(),
            distance,
            dialogue_id: e.dialogue_id.clone(),
            turn_id: e.turn_id,
            db_class: e.db_class,
        });
    }
    ranked.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then_with(|| (&a.dialogue_id, a.turn_id).cmp(&(&b.dialogue_id, b.turn_id)))
    });
    ranked.truncate(n);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Retrieved,
    Random,
    NullPad,
}

/// Exactly k candidate actions (padded with null slots) plus per-slot
/// provenance tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub actions: Vec<SystemAction>,
    pub provenance: Vec<Provenance>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.actions.len()
    }
}

/// Cleaning rules applied in order: duplicate actions merged keeping the
/// best rank, null actions removed, database-result mismatches filtered,
/// candidates requesting an already-filled belief slot filtered.
pub fn clean_candidates(
    raw: &[RankedCandidate],
    belief: &BeliefState,
    db: DbResultClass,
) -> Vec<RankedCandidate> {
    let mut seen: Vec<SystemAction> = Vec::new();
    let mut out = Vec::new();
    for cand in raw {
        let canon = cand.action.canonical();
        if seen.contains(&canon) {
            continue;
        }
        seen.push(canon);
        if cand.action.is_empty() {
            continue;
        }
        if cand.db_class != db {
            continue;
        }
        let conflicts = cand.action.entries.iter().any(|e| {
            e.function == "request" && e.slots.iter().any(|s| belief.get(&e.domain, s).is_some())
        });
        if conflicts {
            continue;
        }
        out.push(cand.clone());
    }
    out
}

/// Cleans and shapes the raw ranking into exactly k slots, padding with
/// null-memory slots when fewer than k candidates survive.
pub fn postprocess(
    raw: &[RankedCandidate],
    belief: &BeliefState,
    db: DbResultClass,
    k: usize,
) -> CandidateSet {
    let cleaned = clean_candidates(raw, belief, db);
    let mut actions = Vec::with_capacity(k);
    let mut provenance = Vec::with_capacity(k);
    for cand in cleaned.into_iter().take(k) {
        actions.push(cand.action);
        provenance.push(Provenance::Retrieved);
    }
    while actions.len() < k {
        actions.push(SystemAction::default());
        provenance.push(Provenance::NullPad);
    }
    CandidateSet {
        actions,
        provenance,
    }
}

const INDEX_MAGIC: &[u8; 8] = b"MAMDIDX1";

/// Binary index serialization: header (width, entry count, encoder
/// fingerprint) followed by per-entry records.
pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<(), CarmError> {
    let io_err = |source| CarmError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let inner = |w: &mut dyn Write| -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(index.width as u32).to_le_bytes())?;
        w.write_all(&(index.entries.len() as u32).to_le_bytes())?;
        let fp = index.encoder_fingerprint.as_bytes();
        w.write_all(&(fp.len() as u32).to_le_bytes())?;
        w.write_all(fp)?;
        for e in &index.entries {
            let id = e.dialogue_id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&e.turn_id.to_le_bytes())?;
            for x in &e.vector {
                w.write_all(&x.to_le_bytes())?;
            }
            let action = serde_json::to_vec(&e.action).expect("action serializes");
            w.write_all(&(action.len() as u32).to_le_bytes())?;
            w.write_all(&action)?;
            w.write_all(&[e.db_class.0])?;
        }
        Ok(())
    };
    inner(&mut w).map_err(|source| CarmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex, CarmError> {
    let io_err = |source| CarmError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let inner = |r: &mut dyn Read| -> Result<RetrievalIndex, CarmError> {
        let bad = |m: &str| CarmError::InvalidIndex(m.to_string());
        let read_n = |r: &mut dyn Read, n: usize| -> Result<Vec<u8>, CarmError> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| bad("truncated index file"))?;
            Ok(buf)
        };
        let magic = read_n(r, 8)?;
        if magic != INDEX_MAGIC {
            return Err(bad("bad index magic"));
        }
        let width = u32::from_le_bytes(read_n(r, 4)?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(read_n(r, 4)?.try_into().unwrap()) as usize;
        let fp_len = u32::from_le_bytes(read_n(r, 4)?.try_into().unwrap()) as usize;
        let encoder_fingerprint =
            String::from_utf8(read_n(r, fp_len)?).map_err(|_| bad("bad fingerprint"))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = u32::from_le_bytes(read_n(r, 4)?.try_into().unwrap()) as usize;
            let dialogue_id =
                String::from_utf8(read_n(r, id_len)?).map_err(|_| bad("bad dialogue id"))?;
            let turn_id = u32::from_le_bytes(read_n(r, 4)?.try_into().unwrap());
            let raw = read_n(r, width * 8)?;
            let vector = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let a_len = u32::from_le_bytes(read_n(r, 4)?.try_into().unwrap()) as usize;
            let action: SystemAction = serde_json::from_slice(&read_n(r, a_len)?)
                .map_err(|e| bad(&format!("bad action: {e}")))?;
            let db_class = DbResultClass(read_n(r, 1)?[0]);
            entries.push(IndexEntry {
                dialogue_id,
                turn_id,
                vector,
                action,
                db_class,
            });
        }
        Ok(RetrievalIndex {
            width,
            encoder_fingerprint,
            entries,
        })
    };
    inner(&mut r)
}

/// All (nonempty) actions of the training corpus; the pool random-sampling
/// draws from.
pub fn action_pool(corpus: &[Dialogue]) -> Vec<SystemAction> {
    let mut pool = Vec::new();
    for d in corpus {
        for t in &d.turns {
            if !t.action.is_empty() {
                pool.push(t.action.clone());
            }
        }
    }
    pool
}

/// Retrieval query for one turn of a dialogue, with self-exclusion of the
/// query's own sample key.
pub fn candidates_for_turn(
    index: &RetrievalIndex,
    encoder: &dyn ContextEncoder,
    dialogue: &Dialogue,
    turn_index: usize,
    n_raw: usize,
    k: usize,
    exclude_self: bool,
) -> Result<CandidateSet, CarmError> {
    let turn = &dialogue.turns[turn_index];
    let history = turn_history(dialogue, turn_index);
    let query = encoder.encode_context(&turn.belief, &history);
    let exclude = if exclude_self {
        Some((dialogue.dialogue_id.as_str(), turn.turn_id))
    } else {
        None
    };
    let raw = retrieve(index, &query, n_raw, exclude)?;
    Ok(postprocess(&raw, &turn.belief, turn.db_class, k))
}
