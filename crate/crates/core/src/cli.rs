//! Command-line pipeline: prepare -> pretrain-carm -> retrieve -> train ->
//! eval / generate / ablate. Every command writes a manifest next to its
//! outputs recording the config, seed and content hashes of its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carm::{
    action_pool, build_index, candidates_for_turn, load_index, pretrain_encoder, save_index,
    CandidateSet, CarmConfig, GruContextEncoder, Provenance, RetrievalIndex,
};
use crate::corpus::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use crate::corpus::{
    build_vocab, delinearize_action, load_corpus, parse_belief, save_corpus, Database, Dialogue,
    Ontology, SystemAction, Vocabulary,
};
use crate::decoding::{BeliefMode, GenerationContext, TurnOutput};
use crate::evaluation::{evaluate, format_report, EvalDialogue, EvalTurn, MetricsReport};
use crate::model::{MamdConfig, MamdModel, TurnSample};
use crate::training::{
    load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, ValidationSetup,
};

#[derive(Debug, Parser)]
#[command(
    name = "mamd",
    version,
    about = "Retrieve-and-memorize dialogue pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; missing sections fall back to defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the effective config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate (or synthesize) a corpus, split it and build artifacts.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Generate a synthetic corpus with this many dialogues instead of
        /// reading --corpus/--ontology.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, requires = "ontology")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        database: Option<PathBuf>,
    },
    /// Pretrain the retrieval context encoder on action prediction.
    PretrainCarm {
        #[command(flatten)]
        common: Common,
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Build the retrieval index and write per-turn candidate sets.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint written by `pretrain-carm`.
        #[arg(long)]
        encoder: PathBuf,
        /// Raw neighbors pulled before cleaning.
        #[arg(long)]
        n_raw: Option<usize>,
        /// Candidate slots per turn after cleaning and padding.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the memory-augmented multi-decoder network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Retrieval index written by `retrieve`.
        #[arg(long)]
        index: PathBuf,
        /// Skip per-epoch validation (final epoch is kept).
        #[arg(long)]
        no_validation: bool,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Condition downstream decoders on the gold belief state.
        #[arg(long)]
        oracle_belief: bool,
    },
    /// Generate every turn of a split as JSON lines.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        oracle_belief: bool,
    },
    /// Train and score the configured grid over memory, candidate source,
    /// random-sampling probability and bank size.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        index: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// config file

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FileConfig {
    pub model: MamdConfig,
    pub train: TrainConfig,
    pub carm: CarmConfig,
    pub prepare: PrepareConfig,
    pub retrieve: RetrieveConfig,
    pub ablate: AblateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PrepareConfig {
    pub synthetic_dialogues: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub min_freq: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            synthetic_dialogues: 30,
            seed: 0,
            val_fraction: 0.1,
            test_fraction: 0.1,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RetrieveConfig {
    pub n_raw: usize,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig { n_raw: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    Retrieved,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblateConfig {
    pub memory: Vec<bool>,
    pub candidate_source: Vec<CandidateSource>,
    pub p_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub split: String,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            memory: vec![true],
            candidate_source: vec![CandidateSource::Retrieved, CandidateSource::Random],
            p_grid: vec![0.0, 0.8],
            k_grid: vec![9],
            split: "test".into(),
        }
    }
}

fn load_config(common: &Common) -> Result<FileConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.model.seed = seed;
        config.train.seed = seed;
        config.carm.seed = seed;
        config.prepare.seed = seed;
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    /// input path -> sha256 of the file contents
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str, common: &Common) -> Self {
        RunManifest {
            command: command.to_string(),
            config: common.config.as_ref().map(|p| p.display().to_string()),
            seed: common.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.notes
            .insert(key.into(), serde_json::to_value(value).expect("json value"));
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(format!("{}-manifest.json", self.command));
        write_text(&path, &format!("{}\n", serde_json::to_string_pretty(self)?))
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).with_context(|| format!("hashing input file {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| {
        format!(
            "reading {}; run `mamd {producer}` first if it is missing",
            path.display()
        )
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------
// prepared-data directory

struct DataDir {
    ontology: Ontology,
    database: Database,
    vocab: Vocabulary,
    dir: PathBuf,
}

impl DataDir {
    fn load(dir: &Path) -> Result<Self> {
        let ontology: Ontology = load_json(&dir.join("ontology.json"), "prepare")?;
        let database: Database = load_json(&dir.join("database.json"), "prepare")?;
        let mut vocab: Vocabulary = load_json(&dir.join("vocab.json"), "prepare")?;
        vocab.reindex();
        Ok(DataDir {
            ontology,
            database,
            vocab,
            dir: dir.to_path_buf(),
        })
    }

    fn split(&self, name: &str) -> Result<Vec<Dialogue>> {
        let path = self.dir.join(format!("{name}.json"));
        load_corpus(&path, &self.ontology)
            .with_context(|| format!("loading split {}; run `mamd prepare` first", path.display()))
    }
}

fn load_encoder(path: &Path, data: &DataDir) -> Result<GruContextEncoder> {
    GruContextEncoder::load(path, data.vocab.clone(), &data.ontology).with_context(|| {
        format!(
            "loading encoder {}; run `mamd pretrain-carm` first if it is missing",
            path.display()
        )
    })
}

fn load_retrieval_index(path: &Path) -> Result<RetrievalIndex> {
    load_index(path).with_context(|| {
        format!(
            "loading index {}; run `mamd retrieve` first if it is missing",
            path.display()
        )
    })
}

fn load_model(path: &Path, data: &DataDir) -> Result<(Checkpoint, MamdModel)> {
    let ckpt = load_checkpoint(path).with_context(|| {
        format!(
            "loading checkpoint {}; run `mamd train` first if it is missing",
            path.display()
        )
    })?;
    let model = ckpt
        .build_model(data.vocab.clone())
        .with_context(|| format!("rebuilding model from {}", path.display()))?;
    Ok((ckpt, model))
}

// ---------------------------------------------------------------------------
// shared generation / scoring loop

fn random_bank(pool: &[SystemAction], k: usize, rng: &mut impl Rng) -> CandidateSet {
    let actions: Vec<SystemAction> = (0..k)
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect();
    CandidateSet {
        provenance: vec![Provenance::Random; actions.len()],
        actions,
    }
}

/// Generates every turn of `dialogues` and scores the result. With
/// `random_candidates` set, the memory bank holds seeded random draws from
/// the action pool instead of retrieved candidates.
#[allow(clippy::too_many_arguments)]
fn generate_and_score(
    model: &MamdModel,
    ctx: &GenerationContext,
    dialogues: &[Dialogue],
    mode: BeliefMode,
    random_candidates: Option<(&[SystemAction], u64)>,
) -> Result<(Vec<TurnOutput>, MetricsReport)> {
    let mut rng = random_candidates.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut outputs = Vec::new();
    let mut actions = Vec::new();
    let mut eval_dialogues = Vec::with_capacity(dialogues.len());
    for dialogue in dialogues {
        let mut turns = Vec::with_capacity(dialogue.turns.len());
        for (i, turn) in dialogue.turns.iter().enumerate() {
            let bank = match (random_candidates, &mut rng) {
                (Some((pool, _)), Some(rng)) if !pool.is_empty() => {
                    Some(random_bank(pool, model.config.k, rng))
                }
                _ => None,
            };
            let out = model.generate_turn_with(ctx, dialogue, i, mode, bank.as_ref())?;
            let (action, _) = delinearize_action(&out.action, ctx.ontology);
            actions.push(action);
            turns.push(EvalTurn {
                response: out.response.clone(),
                belief: parse_belief(&out.belief, ctx.ontology),
                reference: turn.response.clone(),
            });
            outputs.push(out);
        }
        eval_dialogues.push(EvalDialogue {
            dialogue_id: dialogue.dialogue_id.clone(),
            goal: dialogue.goal.clone(),
            turns,
        });
    }
    let report = evaluate(&eval_dialogues, ctx.database, &actions)?;
    Ok((outputs, report))
}

// ---------------------------------------------------------------------------
// commands

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            common,
            synthetic,
            corpus,
            ontology,
            database,
        } => cmd_prepare(common, synthetic, corpus, ontology, database),
        Command::PretrainCarm { common, data } => cmd_pretrain_carm(common, data),
        Command::Retrieve {
            common,
            data,
            encoder,
            n_raw,
            k,
        } => cmd_retrieve(common, data, encoder, n_raw, k),
        Command::Train {
            common,
            data,
            encoder,
            index,
            no_validation,
        } => cmd_train(common, data, encoder, index, no_validation),
        Command::Eval {
            common,
            data,
            encoder,
            index,
            checkpoint,
            split,
            oracle_belief,
        } => cmd_eval(
            common,
            data,
            encoder,
            index,
            checkpoint,
            split,
            oracle_belief,
        ),
        Command::Generate {
            common,
            data,
            encoder,
            index,
            checkpoint,
            split,
            oracle_belief,
        } => cmd_generate(
            common,
            data,
            encoder,
            index,
            checkpoint,
            split,
            oracle_belief,
        ),
        Command::Ablate {
            common,
            data,
            encoder,
            index,
        } => cmd_ablate(common, data, encoder, index),
    }
}

fn ensure_out(common: &Common) -> Result<()> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))
}

fn split_counts(n: usize, cfg: &PrepareConfig) -> (usize, usize) {
    let frac = |f: f64| ((n as f64 * f).round() as usize).min(n.saturating_sub(1));
    let mut val = frac(cfg.val_fraction);
    let mut test = frac(cfg.test_fraction);
    // keep at least one training dialogue
    while n - val - test < 1 && val + test > 0 {
        if val >= test {
            val -= 1;
        } else {
            test -= 1;
        }
    }
    (val, test)
}

fn cmd_prepare(
    common: Common,
    synthetic: Option<usize>,
    corpus: Option<PathBuf>,
    ontology: Option<PathBuf>,
    database: Option<PathBuf>,
) -> Result<()> {
    let mut config = load_config(&common)?;
    if let Some(n) = synthetic {
        config.prepare.synthetic_dialogues = n;
    }
    ensure_out(&common)?;
    let mut manifest = RunManifest::new("prepare", &common);

    let (ont, db, dialogues) = match &corpus {
        Some(corpus_path) => {
            let ontology_path = ontology.as_ref().expect("clap requires --ontology");
            let ont: Ontology = load_json(ontology_path, "prepare")?;
            ont.validate().context("validating ontology")?;
            let db: Database = match &database {
                Some(p) => load_json(p, "prepare")?,
                None => Database::default(),
            };
            let dialogues = load_corpus(corpus_path, &ont).context("validating corpus")?;
            manifest.input(corpus_path)?;
            manifest.input(ontology_path)?;
            if let Some(p) = &database {
                manifest.input(p)?;
            }
            (ont, db, dialogues)
        }
        None => {
            let world = generate_synthetic_corpus(&SyntheticSpec {
                num_dialogues: config.prepare.synthetic_dialogues,
                seed: config.prepare.seed,
                ..Default::default()
            })?;
            manifest.note("synthetic_dialogues", config.prepare.synthetic_dialogues);
            manifest.note("synthetic_seed", config.prepare.seed);
            (world.ontology, world.database, world.dialogues)
        }
    };
    if dialogues.is_empty() {
        bail!("corpus contains no dialogues");
    }

    let (n_val, n_test) = split_counts(dialogues.len(), &config.prepare);
    let n_train = dialogues.len() - n_val - n_test;
    let train_split = &dialogues[..n_train];
    let val_split = &dialogues[n_train..n_train + n_val];
    let test_split = &dialogues[n_train + n_val..];
    let vocab = build_vocab(train_split, &ont, config.prepare.min_freq)?;

    let out = &common.out;
    write_json(&out.join("ontology.json"), &ont)?;
    write_json(&out.join("database.json"), &db)?;
    write_json(&out.join("vocab.json"), &vocab)?;
    save_corpus(&out.join("train.json"), train_split)?;
    save_corpus(&out.join("val.json"), val_split)?;
    save_corpus(&out.join("test.json"), test_split)?;
    for name in [
        "ontology.json",
        "database.json",
        "vocab.json",
        "train.json",
        "val.json",
        "test.json",
    ] {
        manifest.output(&out.join(name));
    }
    manifest.note(
        "split_sizes",
        serde_json::json!({ "train": n_train, "val": n_val, "test": n_test }),
    );
    manifest.write(out)?;
    println!(
        "prepared {} dialogues (train {n_train} / val {n_val} / test {n_test}), vocab size {}",
        dialogues.len(),
        vocab.len()
    );
    Ok(())
}

fn cmd_pretrain_carm(common: Common, data_dir: PathBuf) -> Result<()> {
    let config = load_config(&common)?;
    ensure_out(&common)?;
    let data = DataDir::load(&data_dir)?;
    let train_split = data.split("train")?;

    let (encoder, log) = pretrain_encoder(&train_split, &data.ontology, &data.vocab, &config.carm)?;
    if log.iter().any(|e| !e.loss.is_finite()) {
        bail!("pretraining diverged: non-finite epoch loss");
    }

    let encoder_path = common.out.join("encoder.bin");
    let log_path = common.out.join("carm_log.json");
    encoder.save(&encoder_path)?;
    write_json(&log_path, &log)?;

    let mut manifest = RunManifest::new("pretrain-carm", &common);
    manifest.input(&data_dir.join("train.json"))?;
    manifest.input(&data_dir.join("vocab.json"))?;
    manifest.output(&encoder_path);
    manifest.output(&log_path);
    manifest.note("carm_config", &config.carm);
    if let Some(last) = log.last() {
        manifest.note("final_loss", last.loss);
        manifest.note("train_f1", last.train_f1);
    }
    manifest.write(&common.out)?;
    if let Some(last) = log.last() {
        println!(
            "pretrained encoder: {} epochs, final loss {:.4}, label F1 {:.4}",
            log.len(),
            last.loss,
            last.train_f1
        );
    }
    Ok(())
}

/// One line of candidates.jsonl.
#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub candidates: CandidateSet,
}

fn cmd_retrieve(
    common: Common,
    data_dir: PathBuf,
    encoder_path: PathBuf,
    n_raw: Option<usize>,
    k: Option<usize>,
) -> Result<()> {
    let config = load_config(&common)?;
    let n_raw = n_raw.unwrap_or(config.retrieve.n_raw);
    let k = k.unwrap_or(config.model.k);
    ensure_out(&common)?;
    let data = DataDir::load(&data_dir)?;
    let train_split = data.split("train")?;
    let encoder = load_encoder(&encoder_path, &data)?;

    let index = build_index(&train_split, &encoder);
    let index_path = common.out.join("index.bin");
    save_index(&index, &index_path)?;

    let mut lines = String::new();
    for dialogue in &train_split {
        for i in 0..dialogue.turns.len() {
            let candidates = candidates_for_turn(&index, &encoder, dialogue, i, n_raw, k, true)?;
            let record = CandidateRecord {
                dialogue_id: dialogue.dialogue_id.clone(),
                turn_id: dialogue.turns[i].turn_id,
                candidates,
            };
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
    }
    let candidates_path = common.out.join("candidates.jsonl");
    write_text(&candidates_path, &lines)?;

    let mut manifest = RunManifest::new("retrieve", &common);
    manifest.input(&data_dir.join("train.json"))?;
    manifest.input(&encoder_path)?;
    manifest.output(&index_path);
    manifest.output(&candidates_path);
    manifest.note("n_raw", n_raw);
    manifest.note("k", k);
    manifest.write(&common.out)?;
    println!(
        "indexed {} turns; wrote {k}-slot candidate sets (n_raw {n_raw})",
        index.entries.len()
    );
    Ok(())
}

fn build_samples(
    dialogues: &[Dialogue],
    index: &RetrievalIndex,
    encoder: &GruContextEncoder,
    vocab: &Vocabulary,
    n_raw: usize,
    k: usize,
) -> Result<Vec<TurnSample>> {
    let mut samples = Vec::new();
    for dialogue in dialogues {
        for (i, turn) in dialogue.turns.iter().enumerate() {
            let candidates = candidates_for_turn(index, encoder, dialogue, i, n_raw, k, true)?;
            samples.push(TurnSample::from_turn(
                &dialogue.dialogue_id,
                turn,
                vocab,
                &candidates,
            ));
        }
    }
    Ok(samples)
}

fn cmd_train(
    common: Common,
    data_dir: PathBuf,
    encoder_path: PathBuf,
    index_path: PathBuf,
    no_validation: bool,
) -> Result<()> {
    let mut config = load_config(&common)?;
    config.model.random_prob = config.train.random_prob;
    ensure_out(&common)?;
    let data = DataDir::load(&data_dir)?;
    let train_split = data.split("train")?;
    let val_split = data.split("val")?;
    let encoder = load_encoder(&encoder_path, &data)?;
    let index = load_retrieval_index(&index_path)?;

    let samples = build_samples(
        &train_split,
        &index,
        &encoder,
        &data.vocab,
        config.retrieve.n_raw,
        config.model.k,
    )?;
    let pool = action_pool(&train_split);
    let mut model = MamdModel::new(config.model.clone(), data.vocab.clone());

    let ctx = GenerationContext {
        index: &index,
        encoder: &encoder,
        database: &data.database,
        ontology: &data.ontology,
        n_raw: config.retrieve.n_raw,
    };
    let validation = (!no_validation && !val_split.is_empty()).then(|| ValidationSetup {
        dialogues: &val_split,
        ctx,
        mode: BeliefMode::Generated,
    });

    let (ckpt, logs) = train(
        &mut model,
        &samples,
        &pool,
        validation.as_ref(),
        &config.train,
    )?;
    let ckpt_path = common.out.join("checkpoint.bin");
    let log_path = common.out.join("train_log.json");
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_json(&log_path, &logs)?;

    let mut manifest = RunManifest::new("train", &common);
    manifest.input(&data_dir.join("train.json"))?;
    manifest.input(&data_dir.join("val.json"))?;
    manifest.input(&encoder_path)?;
    manifest.input(&index_path)?;
    manifest.output(&ckpt_path);
    manifest.output(&log_path);
    manifest.note("model_config", &config.model);
    manifest.note("train_config", &config.train);
    manifest.note("validated", validation.is_some());
    manifest.note("best_epoch", ckpt.epoch);
    manifest.note("val_score", ckpt.val_score);
    manifest.write(&common.out)?;
    println!(
        "trained {} epochs on {} turns; kept epoch {} (fingerprint {})",
        logs.len(),
        samples.len(),
        ckpt.epoch,
        &ckpt.fingerprint()[..12]
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: Common,
    data_dir: PathBuf,
    encoder_path: PathBuf,
    index_path: PathBuf,
    checkpoint_path: PathBuf,
    split: String,
    oracle_belief: bool,
) -> Result<()> {
    let config = load_config(&common)?;
    ensure_out(&common)?;
    let data = DataDir::load(&data_dir)?;
    let dialogues = data.split(&split)?;
    let encoder = load_encoder(&encoder_path, &data)?;
    let index = load_retrieval_index(&index_path)?;
    let (_, model) = load_model(&checkpoint_path, &data)?;

    let ctx = GenerationContext {
        index: &index,
        encoder: &encoder,
        database: &data.database,
        ontology: &data.ontology,
        n_raw: config.retrieve.n_raw,
    };
    let mode = if oracle_belief {
        BeliefMode::Oracle
    } else {
        BeliefMode::Generated
    };
    let (_, report) = generate_and_score(&model, &ctx, &dialogues, mode, None)?;

    let report_path = common.out.join("report.json");
    let table_path = common.out.join("report.txt");
    write_json(&report_path, &report)?;
    write_text(&table_path, &format_report(&report))?;

    let mut manifest = RunManifest::new("eval", &common);
    manifest.input(&data_dir.join(format!("{split}.json")))?;
    manifest.input(&encoder_path)?;
    manifest.input(&index_path)?;
    manifest.input(&checkpoint_path)?;
    manifest.output(&report_path);
    manifest.output(&table_path);
    manifest.note("split", &split);
    manifest.note("oracle_belief", oracle_belief);
    manifest.write(&common.out)?;
    print!("{}", format_report(&report));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    common: Common,
    data_dir: PathBuf,
    encoder_path: PathBuf,
    index_path: PathBuf,
    checkpoint_path: PathBuf,
    split: String,
    oracle_belief: bool,
) -> Result<()> {
    let config = load_config(&common)?;
    ensure_out(&common)?;
    let data = DataDir::load(&data_dir)?;
    let dialogues = data.split(&split)?;
    let encoder = load_encoder(&encoder_path, &data)?;
    let index = load_retrieval_index(&index_path)?;
    let (_, model) = load_model(&checkpoint_path, &data)?;

    let ctx = GenerationContext {
        index: &index,
        encoder: &encoder,
        database: &data.database,
        ontology: &data.ontology,
        n_raw: config.retrieve.n_raw,
    };
    let mode = if oracle_belief {
        BeliefMode::Oracle
    } else {
        BeliefMode::Generated
    };
    let (outputs, report) = generate_and_score(&model, &ctx, &dialogues, mode, None)?;

    let mut lines = String::new();
    for out in &outputs {
        lines.push_str(&serde_json::to_string(out)?);
        lines.push('\n');
    }
    let gen_path = common.out.join("generations.jsonl");
    write_text(&gen_path, &lines)?;

    let mut manifest = RunManifest::new("generate", &common);
    manifest.input(&data_dir.join(format!("{split}.json")))?;
    manifest.input(&encoder_path)?;
    manifest.input(&index_path)?;
    manifest.input(&checkpoint_path)?;
    manifest.output(&gen_path);
    manifest.note("split", &split);
    manifest.note("oracle_belief", oracle_belief);
    manifest.note("combined", report.combined);
    manifest.write(&common.out)?;
    println!(
        "generated {} turns (combined {:.2})",
        outputs.len(),
        report.combined
    );
    Ok(())
}

/// One row of the ablation grid with its scores.
#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub memory: bool,
    pub source: CandidateSource,
    pub random_prob: f64,
    pub k: usize,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
}

fn cmd_ablate(
    common: Common,
    data_dir: PathBuf,
    encoder_path: PathBuf,
    index_path: PathBuf,
) -> Result<()> {
    let config = load_config(&common)?;
    let grid = &config.ablate;
    if grid.memory.is_empty()
        || grid.candidate_source.is_empty()
        || grid.p_grid.is_empty()
        || grid.k_grid.is_empty()
    {
        bail!("ablation grid has an empty axis");
    }
    ensure_out(&common)?;
    let data = DataDir::load(&data_dir)?;
    let train_split = data.split("train")?;
    let eval_split = data.split(&grid.split)?;
    let encoder = load_encoder(&encoder_path, &data)?;
    let index = load_retrieval_index(&index_path)?;
    let pool = action_pool(&train_split);

    let mut rows: Vec<AblateRow> = Vec::new();
    let mut row_paths: Vec<PathBuf> = Vec::new();
    for &memory in &grid.memory {
        for &source in &grid.candidate_source {
            for &p in &grid.p_grid {
                for &k in &grid.k_grid {
                    let mut model_config = config.model.clone();
                    model_config.use_memory = memory;
                    model_config.k = k;
                    model_config.random_prob = p;
                    let mut train_config = config.train.clone();
                    train_config.random_prob = p;

                    let samples = build_samples(
                        &train_split,
                        &index,
                        &encoder,
                        &data.vocab,
                        config.retrieve.n_raw,
                        k,
                    )?;
                    let mut model = MamdModel::new(model_config, data.vocab.clone());
                    let (ckpt, _) = train(&mut model, &samples, &pool, None, &train_config)?;
                    let model = ckpt.build_model(data.vocab.clone())?;

                    let ctx = GenerationContext {
                        index: &index,
                        encoder: &encoder,
                        database: &data.database,
                        ontology: &data.ontology,
                        n_raw: config.retrieve.n_raw,
                    };
                    let random = (source == CandidateSource::Random)
                        .then_some((pool.as_slice(), train_config.seed));
                    let (_, report) = generate_and_score(
                        &model,
                        &ctx,
                        &eval_split,
                        BeliefMode::Generated,
                        random,
                    )?;
                    let row = AblateRow {
                        memory,
                        source,
                        random_prob: p,
                        k,
                        inform: report.inform,
                        success: report.success,
                        bleu: report.bleu,
                        combined: report.combined,
                    };
                    let row_path = common
                        .out
                        .join(format!("ablate-row-{:03}.json", rows.len()));
                    write_json(&row_path, &row)?;
                    row_paths.push(row_path);
                    rows.push(row);
                }
            }
        }
    }

    let csv = |rows: &[&AblateRow]| -> String {
        let mut s = String::from("memory,source,random_prob,k,inform,success,bleu,combined\n");
        for r in rows {
            let source = match r.source {
                CandidateSource::Retrieved => "retrieved",
                CandidateSource::Random => "random",
            };
            s.push_str(&format!(
                "{},{source},{},{},{:.4},{:.4},{:.4},{:.4}\n",
                r.memory, r.random_prob, r.k, r.inform, r.success, r.bleu, r.combined
            ));
        }
        s
    };
    let all: Vec<&AblateRow> = rows.iter().collect();
    let ablation_path = common.out.join("ablation.csv");
    write_text(&ablation_path, &csv(&all))?;
    // sweep over (p, source) at the first memory/k settings
    let sweep: Vec<&AblateRow> = rows
        .iter()
        .filter(|r| r.memory == grid.memory[0] && r.k == grid.k_grid[0])
        .collect();
    let sweep_path = common.out.join("sweep.csv");
    write_text(&sweep_path, &csv(&sweep))?;

    let mut manifest = RunManifest::new("ablate", &common);
    manifest.input(&data_dir.join("train.json"))?;
    manifest.input(&data_dir.join(format!("{}.json", grid.split)))?;
    manifest.input(&encoder_path)?;
    manifest.input(&index_path)?;
    manifest.output(&ablation_path);
    manifest.output(&sweep_path);
    for p in &row_paths {
        manifest.output(p);
    }
    manifest.note("grid", grid);
    manifest.write(&common.out)?;
    println!("ablation finished: {} rows", rows.len());
    Ok(())
}
