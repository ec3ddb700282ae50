//! End-to-end runs over a work directory.
//!
//! Every stage reads the previous stage's files and writes its own, plus a
//! `<file>.meta.json` recording the artifact format version and a key that
//! digests the stage's settings and inputs. A stage whose key matches the
//! existing meta file is skipped, so interrupted runs resume.
//!
//! Stage seeds derive from the master seed by fixed offsets:
//! synth +1, query hold-out +2, base model +3, fine-tune +4, attribution +5,
//! random partition +6, adaptations +7, sampler +8, evaluation prompts +9.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{config_digest, digest_bytes, train_adaptations, train_single, AdaptationSet};
use crate::attribution::{
    self, build_matrix, select_queries_by_variance, AttributionConfig, AttributionMatrix, Method,
};
use crate::corpus::{
    self, load_examples, planted_examples, synthesize_planted_corpus, synthesize_query_set,
    topic_tokens, Corpus, Example, PlantedSpec, Vocab,
};
use crate::error::{Error, Result};
use crate::metrics::{self, CorrectnessOracle, DiversityReport, EvalConfig, ExactMatch, TokenSet};
use crate::model::{self, BaseModel, LoraConfig, LowRankAdaptation, ModelKind, TrainConfig};
use crate::partition::{
    self, assign_argmax, normalize_matrix, partition_random, partition_stats, Partition,
};
use crate::sample::{self, PromptGenerations, SamplerConfig};

pub const ARTIFACT_VERSION: u32 = 1;

/// Damping used by the pipeline. The LoRA Hessian of the desk models is
/// indefinite with eigenvalues of order ±0.1, so a damping far below that
/// scale lets the near-singular directions dominate the inverse.
pub const DESK_DAMPING: f64 = 0.1;

/// Roughly one epoch over the default corpus at batch size 8. Longer
/// fine-tunes fit the topic-conditional distributions, after which the
/// per-example gradients no longer carry topic structure.
pub const FINETUNE_STEPS: usize = 50;

pub mod offsets {
    pub const SYNTH: u64 = 1;
    pub const QUERIES: u64 = 2;
    pub const BASE: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const ATTRIBUTION: u64 = 5;
    pub const RANDOM_PARTITION: u64 = 6;
    pub const ADAPT: u64 = 7;
    pub const SAMPLER: u64 = 8;
    pub const EVAL_PROMPTS: u64 = 9;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing data; all absent means a planted corpus is synthesized.
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Candidate queries; held out from the corpus when absent.
    pub queries: Option<PathBuf>,
    /// Evaluation prompts; planted prompts (synthetic data) or the
    /// candidate queries (external data) when absent.
    pub eval: Option<PathBuf>,
    pub n_topics: usize,
    pub n_per_topic: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub eval_per_topic: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab: None,
            corpus: None,
            queries: None,
            eval: None,
            n_topics: 4,
            n_per_topic: 100,
            seq_len: 8,
            vocab_size: 64,
            eval_per_topic: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Uniform initialization scale of the base weights.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::MlpLm,
            embed_dim: 16,
            hidden_dim: 32,
            feature_dim: 32,
            init_scale: 1.0,
        }
    }
}

/// Sign of the influence scores the argmax sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Negated, so the examples that most reduce a query's loss score highest.
    Helpful,
    /// The scores as defined, `-grad(z) (H + lambda I)^-1 grad(q)`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSettings {
    /// Method used for the influence variant of the pipeline.
    pub method: Method,
    pub orientation: Orientation,
    pub normalize: bool,
    pub candidates: usize,
    pub solver: AttributionConfig,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        AttributionSettings {
            method: Method::InfluenceExact,
            orientation: Orientation::Raw,
            normalize: true,
            candidates: 12,
            solver: AttributionConfig {
                damping: DESK_DAMPING,
                ..AttributionConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    None,
    /// Enough tokens from the prompt's planted topic.
    TokenSet,
    /// Equal to the prompt's reference output.
    ExactMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(flatten)]
    pub eval: EvalConfig,
    pub oracle: OracleKind,
    pub min_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            eval: EvalConfig::default(),
            oracle: OracleKind::TokenSet,
            min_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    /// Number of partitions; the top `k` candidate queries by variance are
    /// kept.
    pub k: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    /// Fine-tune producing the parameters that influence is measured at.
    pub finetune: TrainConfig,
    pub attribution: AttributionSettings,
    /// Training of each partition's adaptation.
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workdir: PathBuf::from("work"),
            k: 8,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            finetune: TrainConfig {
                steps: FINETUNE_STEPS,
                ..TrainConfig::default()
            },
            attribution: AttributionSettings::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML. Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.workdir);
        for p in [
            &mut cfg.data.vocab,
            &mut cfg.data.corpus,
            &mut cfg.data.queries,
            &mut cfg.data.eval,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, dir).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > self.attribution.candidates {
            return Err(Error::Config(format!(
                "k = {} exceeds the {} candidate queries",
                self.k, self.attribution.candidates
            )));
        }
        let external = [&self.data.vocab, &self.data.corpus]
            .iter()
            .filter(|p| p.is_some())
            .count();
        if external == 1 {
            return Err(Error::Config(
                "data.vocab and data.corpus must be given together".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.min_fraction) {
            return Err(Error::Config(format!(
                "eval.min_fraction must lie in [0, 1], got {}",
                self.eval.min_fraction
            )));
        }
        self.finetune.validate()?;
        self.train.validate()?;
        self.eval.eval.sampler.validate()?;
        self.attribution.solver.bm25.validate()?;
        if self.attribution.solver.damping.is_nan() || self.attribution.solver.damping <= 0.0 {
            return Err(Error::Config("attribution damping must be positive".into()));
        }
        Ok(())
    }

    fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }
}

/// Which partition the pipeline variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Attribution(Method),
    Random,
    Single,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Attribution(m) => m.as_str(),
            Variant::Random => "random",
            Variant::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Variant::Random),
            "single" => Ok(Variant::Single),
            other => other.parse().map(Variant::Attribution),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    stage: String,
    key: String,
}

fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

fn read_meta(artifact: &Path) -> Result<Option<Meta>> {
    let path = meta_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Version {
        path: path.clone(),
        message: format!("unreadable stage metadata: {e}"),
    })?;
    if meta.format_version != ARTIFACT_VERSION {
        return Err(Error::Version {
            path,
            message: format!(
                "written by artifact version {}, this build reads {ARTIFACT_VERSION}",
                meta.format_version
            ),
        });
    }
    Ok(Some(meta))
}

fn write_meta(artifact: &Path, stage: &str, key: &str) -> Result<()> {
    let path = meta_path(artifact);
    let meta = Meta {
        format_version: ARTIFACT_VERSION,
        stage: stage.into(),
        key: key.into(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// The key recorded when `artifact` was produced; an input that lacks one
/// was not written by this pipeline.
fn input_key(artifact: &Path) -> Result<String> {
    match read_meta(artifact)? {
        Some(m) => Ok(m.key),
        None => Err(Error::Input(format!(
            "{} is missing; run the earlier stage first",
            artifact.display()
        ))),
    }
}

fn is_fresh(artifact: &Path, key: &str) -> Result<bool> {
    Ok(artifact.exists() && read_meta(artifact)?.is_some_and(|m| m.key == key))
}

/// Exclusive use of a work directory for the lifetime of the guard.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "work directory {} is in use (remove {} if no other run is active)",
                workdir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Loaded synth-stage outputs.
pub struct Data {
    pub corpus: Corpus,
    pub candidates: Vec<Example>,
    pub eval_prompts: Vec<Example>,
    pub base: BaseModel,
}

/// Stage runner over one work directory.
pub struct Pipeline {
    config: PipelineConfig,
    workdir: PathBuf,
}

fn fmt_tau(tau: f64) -> String {
    format!("{tau}")
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let workdir = config.workdir.clone();
        fs::create_dir_all(&workdir).map_err(|e| Error::io(&workdir, e))?;
        Ok(Pipeline { config, workdir })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.path("vocab.txt")
    }
    pub fn corpus_path(&self) -> PathBuf {
        self.path("corpus.jsonl")
    }
    pub fn candidates_path(&self) -> PathBuf {
        self.path("queries.jsonl")
    }
    pub fn eval_path(&self) -> PathBuf {
        self.path("eval.jsonl")
    }
    pub fn base_path(&self) -> PathBuf {
        self.path("base.bin")
    }
    pub fn finetuned_path(&self) -> PathBuf {
        self.path("finetuned.bin")
    }
    pub fn matrix_path(&self, method: Method) -> PathBuf {
        self.path(&format!("attribution-{method}.csv"))
    }
    pub fn selection_path(&self, method: Method) -> PathBuf {
        self.path(&format!("selected-{method}.json"))
    }
    pub fn partition_path(&self, v: Variant) -> PathBuf {
        self.path(&format!("partition-{}.csv", v.tag()))
    }
    pub fn adapt_dir(&self, v: Variant) -> PathBuf {
        self.path(&format!("adapt-{}", v.tag()))
    }
    pub fn generations_path(&self, v: Variant, tau: f64) -> PathBuf {
        self.path(&format!(
            "generations-{}-tau{}.jsonl",
            v.tag(),
            fmt_tau(tau)
        ))
    }
    pub fn report_path(&self, v: Variant, tau: f64) -> PathBuf {
        self.path(&format!("report-{}-tau{}.txt", v.tag(), fmt_tau(tau)))
    }

    fn key<T: Serialize>(&self, stage: &str, settings: &T, inputs: &[&str]) -> String {
        #[derive(Serialize)]
        struct Key<'a, T> {
            stage: &'a str,
            version: u32,
            settings: &'a T,
            inputs: &'a [&'a str],
        }
        config_digest(&Key {
            stage,
            version: ARTIFACT_VERSION,
            settings,
            inputs,
        })
    }

    /// Writes vocab, corpus, candidate queries, evaluation prompts and the
    /// base model.
    fn synth_stage(&self) -> Result<()> {
        let c = &self.config;
        #[derive(Serialize)]
        struct S<'a> {
            data: &'a DataConfig,
            model: &'a ModelConfig,
            candidates: usize,
            seed: u64,
            external: Vec<String>,
        }
        let external = [&c.data.vocab, &c.data.corpus, &c.data.queries, &c.data.eval]
            .into_iter()
            .flatten()
            .map(|p| {
                fs::read(p)
                    .map(|b| digest_bytes(&b))
                    .map_err(|e| Error::io(p, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let settings = S {
            data: &c.data,
            model: &c.model,
            candidates: c.attribution.candidates,
            seed: c.seed,
            external,
        };
        let key = self.key("synth", &settings, &[]);
        let outputs = [
            self.vocab_path(),
            self.corpus_path(),
            self.candidates_path(),
            self.eval_path(),
            self.base_path(),
        ];
        if outputs
            .iter()
            .try_fold(true, |ok, p| Ok::<_, Error>(ok && is_fresh(p, &key)?))?
        {
            log::info!("synth: up to date");
            return Ok(());
        }
        let (corpus, candidates, eval) = match (&c.data.vocab, &c.data.corpus) {
            (Some(vp), Some(cp)) => {
                let vocab = Vocab::load(vp)?;
                let full = corpus::load_corpus(cp, &vocab)
                    .map_err(|e| e.context(cp.display().to_string()))?;
                let (train, candidates) = match &c.data.queries {
                    Some(qp) => (full, corpus::load_query_set(qp, &vocab)?.queries),
                    None => {
                        let (t, q) = synthesize_query_set(
                            &full,
                            c.attribution.candidates,
                            c.stage_seed(offsets::QUERIES),
                        )?;
                        (t, q.queries)
                    }
                };
                let eval = match &c.data.eval {
                    Some(ep) => load_examples(ep, &vocab)?,
                    None => candidates.clone(),
                };
                (train, candidates, eval)
            }
            _ => {
                let spec = PlantedSpec {
                    n_topics: c.data.n_topics,
                    n_per_topic: c.data.n_per_topic,
                    seq_len: c.data.seq_len,
                    vocab_size: c.data.vocab_size,
                    seed: c.stage_seed(offsets::SYNTH),
                };
                let full = synthesize_planted_corpus(&spec)?;
                let (train, q) = synthesize_query_set(
                    &full,
                    c.attribution.candidates,
                    c.stage_seed(offsets::QUERIES),
                )?;
                let eval_spec = PlantedSpec {
                    n_per_topic: c.data.eval_per_topic,
                    seed: c.stage_seed(offsets::EVAL_PROMPTS),
                    ..spec
                };
                let eval = match &c.data.eval {
                    Some(ep) => load_examples(ep, &train.vocab)?,
                    None => planted_examples(&eval_spec, train.len() + q.len())?,
                };
                (train, q.queries, eval)
            }
        };
        if candidates.len() < c.k {
            return Err(Error::Config(format!(
                "{} candidate queries, but k = {}",
                candidates.len(),
                c.k
            )));
        }
        let v = corpus.vocab.len();
        let base = match c.model.kind {
            ModelKind::MlpLm => BaseModel::mlp(v, c.model.embed_dim, c.model.hidden_dim)?,
            ModelKind::Convex => BaseModel::convex(v, c.model.feature_dim)?,
        }
        .randomized(c.stage_seed(offsets::BASE), c.model.init_scale);

        corpus.vocab.write(&self.vocab_path())?;
        corpus::write_corpus(&self.corpus_path(), &corpus)?;
        corpus::write_examples(&self.candidates_path(), &candidates, &corpus.vocab)?;
        corpus::write_examples(&self.eval_path(), &eval, &corpus.vocab)?;
        model::write_base_model(&self.base_path(), &base)?;
        for p in &outputs {
            write_meta(p, "synth", &key)?;
        }
        log::info!(
            "synth: {} training examples, {} candidates, {} eval prompts",
            corpus.len(),
            candidates.len(),
            eval.len()
        );
        Ok(())
    }

    pub fn load_data(&self) -> Result<Data> {
        for p in [
            self.vocab_path(),
            self.corpus_path(),
            self.candidates_path(),
            self.eval_path(),
            self.base_path(),
        ] {
            input_key(&p)?;
        }
        let vocab = Vocab::load(&self.vocab_path())?;
        let corpus = corpus::load_corpus(&self.corpus_path(), &vocab)?;
        let candidates = load_examples(&self.candidates_path(), &vocab)?;
        let eval_prompts = load_examples(&self.eval_path(), &vocab)?;
        let base = model::read_base_model(&self.base_path())?;
        Ok(Data {
            corpus,
            candidates,
            eval_prompts,
            base,
        })
    }

    /// Fine-tunes one adaptation on the whole corpus; influence is measured
    /// at its parameters.
    fn finetune_stage(&self) -> Result<LowRankAdaptation> {
        let c = &self.config;
        let synth = input_key(&self.base_path())?;
        let key = self.key("finetune", &(&c.lora, &c.finetune, c.seed), &[&synth]);
        let data = self.load_data()?;
        let path = self.finetuned_path();
        if is_fresh(&path, &key)? {
            return model::read_adaptation(&path, &data.base);
        }
        let init = LowRankAdaptation::init(&data.base, &c.lora, c.stage_seed(offsets::FINETUNE))?;
        let cfg = TrainConfig {
            seed: c.stage_seed(offsets::FINETUNE),
            ..c.finetune.clone()
        };
        let out = model::train_adaptation(&data.base, &init, &data.corpus.examples, &cfg)?;
        log::info!(
            "finetune: loss {:.4} -> {:.4}",
            out.initial_loss,
            out.final_loss
        );
        model::write_adaptation(&path, &out.trained)?;
        write_meta(&path, "finetune", &key)?;
        Ok(out.trained)
    }

    /// Scores every training example against every candidate query.
    fn attribute_stage(&self, method: Method) -> Result<AttributionMatrix> {
        let c = &self.config;
        let synth = input_key(&self.base_path())?;
        let upstream = if method.is_influence() {
            self.finetune()?;
            input_key(&self.finetuned_path())?
        } else {
            synth.clone()
        };
        let key = self.key(
            "attribute",
            &(method, &c.attribution.solver, c.seed),
            &[&synth, &upstream],
        );
        let path = self.matrix_path(method);
        if is_fresh(&path, &key)? {
            return AttributionMatrix::load(&path);
        }
        let data = self.load_data()?;
        let finetuned = if method.is_influence() {
            Some(model::read_adaptation(&self.finetuned_path(), &data.base)?)
        } else {
            None
        };
        let m = build_matrix(
            method,
            &c.attribution.solver,
            &data.base,
            finetuned.as_ref(),
            &data.corpus.vocab,
            &data.corpus.examples,
            &data.candidates,
            c.stage_seed(offsets::ATTRIBUTION),
        )?;
        m.write(&path)?;
        write_meta(&path, "attribute", &key)?;
        log::info!(
            "attribute: {method} matrix {}x{}",
            m.n_queries(),
            m.n_examples()
        );
        Ok(m)
    }

    /// Keeps the `k` candidate rows with the highest score variance.
    fn select_queries_stage(&self, method: Method) -> Result<Vec<usize>> {
        let m = self.attribute(method)?;
        let key = self.key(
            "select",
            &self.config.k,
            &[&input_key(&self.matrix_path(method))?],
        );
        let path = self.selection_path(method);
        if is_fresh(&path, &key)? {
            return read_selection(&path);
        }
        let rows = select_queries_by_variance(&m, self.config.k)?;
        let sel = Selection {
            rows: rows.clone(),
            query_ids: rows.iter().map(|&r| m.query_ids()[r]).collect(),
            variances: rows
                .iter()
                .map(|&r| attribution::population_variance(m.row(r)))
                .collect(),
        };
        let json = serde_json::to_string_pretty(&sel).expect("selection serializes") + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        write_meta(&path, "select", &key)?;
        Ok(rows)
    }

    /// The matrix argmax runs on: selected rows, oriented and normalized.
    pub fn scored_matrix(&self, method: Method) -> Result<AttributionMatrix> {
        let rows = self.select_queries(method)?;
        let m = AttributionMatrix::load(&self.matrix_path(method))?.select_rows(&rows)?;
        let m = if method.is_influence()
            && self.config.attribution.orientation == Orientation::Helpful
        {
            m.negated()
        } else {
            m
        };
        Ok(if self.config.attribution.normalize {
            normalize_matrix(&m).matrix
        } else {
            m
        })
    }

    fn partition_stage(&self, v: Variant) -> Result<Partition> {
        let c = &self.config;
        let synth = input_key(&self.base_path())?;
        let (upstream, settings) = match v {
            Variant::Attribution(m) => {
                self.select_queries(m)?;
                (
                    input_key(&self.selection_path(m))?,
                    format!(
                        "{:?}/{}",
                        c.attribution.orientation, c.attribution.normalize
                    ),
                )
            }
            Variant::Random => (synth.clone(), format!("{}/{}", c.k, c.seed)),
            Variant::Single => (synth.clone(), String::new()),
        };
        let key = self.key("partition", &(v.tag(), settings), &[&synth, &upstream]);
        let path = self.partition_path(v);
        if is_fresh(&path, &key)? {
            return Partition::load(&path);
        }
        let n = self.load_data()?.corpus.len();
        let p = match v {
            Variant::Attribution(m) => assign_argmax(&self.scored_matrix(m)?)?,
            Variant::Random => partition_random(n, c.k, c.stage_seed(offsets::RANDOM_PARTITION))?,
            Variant::Single => Partition::single(n),
        };
        if p.len() != n {
            return Err(Error::Size(format!(
                "partition covers {} examples, corpus has {n}",
                p.len()
            )));
        }
        p.write(&path)?;
        write_meta(&path, "partition", &key)?;
        log::info!("partition {}: sizes {:?}", v.tag(), p.sizes());
        Ok(p)
    }

    fn adapt_stage(&self, v: Variant) -> Result<AdaptationSet> {
        let c = &self.config;
        self.partition(v)?;
        let synth = input_key(&self.base_path())?;
        let part_key = input_key(&self.partition_path(v))?;
        let key = self.key("adapt", &(&c.lora, &c.train, c.seed), &[&synth, &part_key]);
        let dir = self.adapt_dir(v);
        let manifest = dir.join(crate::adapt::MANIFEST_FILE);
        let data = self.load_data()?;
        if is_fresh(&manifest, &key)? {
            return AdaptationSet::load_dir(&dir, data.base);
        }
        let p = Partition::load(&self.partition_path(v))?;
        let seed = c.stage_seed(offsets::ADAPT);
        let set = match v {
            Variant::Single => train_single(&data.base, &data.corpus, &c.train, &c.lora, seed)?,
            _ => train_adaptations(&data.base, &data.corpus, &p, &c.train, &c.lora, seed)?,
        };
        set.write_dir(&dir)?;
        write_meta(&manifest, "adapt", &key)?;
        Ok(set)
    }

    /// Evaluation settings at temperature `tau`. A single adaptation draws
    /// `k` samples per prompt so every variant produces the same count. The
    /// configured sampler seed is added to the stage seed, so it can vary
    /// the draws with everything upstream held fixed.
    pub fn eval_config(&self, tau: f64) -> EvalConfig {
        let c = &self.config;
        let seed = c
            .stage_seed(offsets::SAMPLER)
            .wrapping_add(c.eval.eval.sampler.seed);
        let sampler = SamplerConfig {
            temperature: tau,
            seed,
            ..c.eval.eval.sampler.clone()
        };
        EvalConfig {
            sampler,
            samples_per_prompt: c.k,
            ..c.eval.eval.clone()
        }
    }

    fn sample_stage(&self, v: Variant, tau: f64) -> Result<Vec<PromptGenerations>> {
        let set = self.adapt(v)?;
        let manifest = self.adapt_dir(v).join(crate::adapt::MANIFEST_FILE);
        let cfg = self.eval_config(tau);
        let key = self.key(
            "sample",
            &cfg,
            &[&input_key(&manifest)?, &input_key(&self.eval_path())?],
        );
        let path = self.generations_path(v, tau);
        let data = self.load_data()?;
        if is_fresh(&path, &key)? {
            return sample::read_generations(&path, &data.corpus.vocab, None);
        }
        let gens = metrics::generate_for_prompts(
            &set,
            &data.eval_prompts,
            Some(data.corpus.vocab.eos()),
            &cfg,
        )?;
        sample::write_generations(&path, &gens, &data.corpus.vocab, None)?;
        write_meta(&path, "sample", &key)?;
        Ok(gens)
    }

    /// Digest shared by every variant's report at this temperature.
    pub fn report_digest(&self, tau: f64) -> String {
        let mut c = self.config.clone();
        c.eval.eval.sampler.temperature = tau;
        c.workdir = PathBuf::new();
        config_digest(&c)
    }

    fn oracle(&self, data: &Data) -> Option<Box<dyn CorrectnessOracle>> {
        let c = &self.config;
        match c.eval.oracle {
            OracleKind::None => None,
            OracleKind::ExactMatch => Some(Box::new(ExactMatch {
                references: data
                    .eval_prompts
                    .iter()
                    .map(|p| (p.id, p.output.clone()))
                    .collect(),
                eos: Some(data.corpus.vocab.eos()),
            })),
            OracleKind::TokenSet => {
                let n_topics = data.corpus.examples.iter().filter_map(|e| e.topic).max()? + 1;
                let v = data.corpus.vocab.len();
                let allowed: BTreeMap<_, _> = data
                    .eval_prompts
                    .iter()
                    .filter_map(|p| p.topic.map(|t| (p.id, topic_tokens(n_topics, v, t))))
                    .collect();
                if allowed.is_empty() {
                    log::warn!("token-set oracle needs topic labels; pass@k is skipped");
                    return None;
                }
                Some(Box::new(TokenSet {
                    allowed,
                    min_fraction: c.eval.min_fraction,
                }))
            }
        }
    }

    fn evaluate_stage(&self, v: Variant, tau: f64) -> Result<DiversityReport> {
        let gens = self.sample(v, tau)?;
        let path = self.report_path(v, tau);
        let key = self.key(
            "evaluate",
            &(self.report_digest(tau), v.tag()),
            &[&input_key(&self.generations_path(v, tau))?],
        );
        if is_fresh(&path, &key)? {
            return DiversityReport::load(&path);
        }
        let data = self.load_data()?;
        let set = AdaptationSet::load_dir(&self.adapt_dir(v), data.base.clone())?;
        let oracle = self.oracle(&data);
        let cfg = self.eval_config(tau);
        let mut report = metrics::evaluate_generations(
            &set,
            &data.eval_prompts,
            &gens,
            &data.corpus.vocab,
            oracle.as_deref(),
            &cfg,
            &self.report_digest(tau),
        )?;
        let p = Partition::load(&self.partition_path(v))?;
        let m = match v {
            Variant::Attribution(method) => Some(self.scored_matrix(method)?),
            _ => None,
        };
        report.method = v.tag().to_string();
        report.partition = Some(partition_stats(&p, &data.corpus, m.as_ref())?);
        report.write(&path)?;
        write_meta(&path, "evaluate", &key)?;
        log::info!(
            "report {} tau={tau}: diversity {:.4}, avg_kl {}",
            v.tag(),
            report.sample_diversity,
            report.avg_kl.map_or("NA".into(), |x| format!("{x:.6}"))
        );
        Ok(report)
    }

    pub fn synth(&self) -> Result<()> {
        self.synth_stage()
            .map_err(|e| e.context(format!("stage synth ({})", self.base_path().display())))
    }

    pub fn finetune(&self) -> Result<LowRankAdaptation> {
        self.finetune_stage().map_err(|e| {
            e.context(format!(
                "stage finetune ({})",
                self.finetuned_path().display()
            ))
        })
    }

    pub fn attribute(&self, method: Method) -> Result<AttributionMatrix> {
        self.attribute_stage(method).map_err(|e| {
            e.context(format!(
                "stage attribute ({})",
                self.matrix_path(method).display()
            ))
        })
    }

    pub fn select_queries(&self, method: Method) -> Result<Vec<usize>> {
        self.select_queries_stage(method).map_err(|e| {
            e.context(format!(
                "stage select-queries ({})",
                self.selection_path(method).display()
            ))
        })
    }

    pub fn partition(&self, v: Variant) -> Result<Partition> {
        self.partition_stage(v).map_err(|e| {
            e.context(format!(
                "stage partition ({})",
                self.partition_path(v).display()
            ))
        })
    }

    pub fn adapt(&self, v: Variant) -> Result<AdaptationSet> {
        self.adapt_stage(v)
            .map_err(|e| e.context(format!("stage adapt ({})", self.adapt_dir(v).display())))
    }

    pub fn sample(&self, v: Variant, tau: f64) -> Result<Vec<PromptGenerations>> {
        self.sample_stage(v, tau).map_err(|e| {
            e.context(format!(
                "stage sample ({})",
                self.generations_path(v, tau).display()
            ))
        })
    }

    pub fn evaluate(&self, v: Variant, tau: f64) -> Result<DiversityReport> {
        self.evaluate_stage(v, tau).map_err(|e| {
            e.context(format!(
                "stage evaluate ({})",
                self.report_path(v, tau).display()
            ))
        })
    }

    /// The four variants: attribution method, bm25, random and single.
    pub fn variants(&self) -> Vec<Variant> {
        let mut v = vec![Variant::Attribution(self.config.attribution.method)];
        if self.config.attribution.method != Method::Bm25 {
            v.push(Variant::Attribution(Method::Bm25));
        }
        v.extend([Variant::Random, Variant::Single]);
        v
    }

    /// Every variant at every temperature; reports in variant-major order.
    pub fn run(&self, taus: &[f64]) -> Result<Vec<(Variant, f64, DiversityReport)>> {
        self.synth()?;
        let mut out = Vec::new();
        for v in self.variants() {
            for &tau in taus {
                let r = self
                    .evaluate(v, tau)
                    .map_err(|e| e.context(format!("variant {}", v.tag())))?;
                out.push((v, tau, r));
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct Selection {
    rows: Vec<usize>,
    query_ids: Vec<usize>,
    variances: Vec<f64>,
}

fn read_selection(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sel: Selection = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(sel.rows)
}

/// Runs the pipeline once per `k`, each in `<workdir>/k<k>`, or once in the
/// work directory itself when `ks` is empty.
pub fn run_sweep(
    config: &PipelineConfig,
    taus: &[f64],
    ks: &[usize],
) -> Result<Vec<(usize, Variant, f64, DiversityReport)>> {
    let taus = if taus.is_empty() {
        vec![config.eval.eval.sampler.temperature]
    } else {
        taus.to_vec()
    };
    let _lock = WorkdirLock::acquire(&config.workdir)?;
    let runs: Vec<PipelineConfig> = if ks.is_empty() {
        vec![config.clone()]
    } else {
        ks.iter()
            .map(|&k| PipelineConfig {
                k,
                workdir: config.workdir.join(format!("k{k}")),
                ..config.clone()
            })
            .collect()
    };
    let mut out = Vec::new();
    for cfg in runs {
        let k = cfg.k;
        let p = Pipeline::new(cfg)?;
        for (v, tau, r) in p.run(&taus)? {
            out.push((k, v, tau, r));
        }
    }
    Ok(out)
}

/// Reads a config file or falls back to defaults.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Mean negative log-likelihood of `examples` under the base model with an
/// optional adaptation.
pub fn mean_nll(
    base: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    examples: &[Example],
) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += model::loss(base, adaptation, ex)?;
    }
    Ok(total / examples.len().max(1) as f64)
}

pub use partition::PartitionStats;
