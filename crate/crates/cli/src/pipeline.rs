//! Pipeline stages. Each reads and writes fixed file names inside a run
//! directory and records a manifest sidecar for every artifact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use storyrank::corpus::{build_catalog_corpus, encode_story, read_corpus, write_corpus, MixtureSampler, TrainingExample};
use storyrank::datagen::{generate_world, world_report, WorldReport};
use storyrank::eval::{
    evaluate, format_table, metric_rows, split_users, write_metrics, Bm25Index, Bm25Ranker, MetricRow, ModelRanker,
    PopularityRanker, Ranker,
};
use storyrank::grammar::StoryTransform;
use storyrank::lm::{read_checkpoint_meta, CheckpointMeta, StepMetrics};
use storyrank::prompt::{rank, rank_batch, ScoringContext};
use storyrank::story::{read_stories, write_stories};
use storyrank::{serialize, CatalogIndex, Checkpoint, Dtype, Model, RankedList, Scalar, TaskKind, TaskPrompt, Trainer, UserStory, Vocabulary};

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(path.into())
    }

    pub fn stories(&self) -> PathBuf {
        self.0.join("stories.jsonl")
    }

    pub fn catalog(&self) -> PathBuf {
        self.0.join("catalog.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.0.join("vocab.tsv")
    }

    /// Corpus for one input transform, e.g. `corpus-full.bin`.
    pub fn corpus(&self, transform: &StoryTransform) -> PathBuf {
        self.0.join(format!("corpus-{}.bin", transform.label()))
    }

    pub fn checkpoint(&self, transform: &StoryTransform) -> PathBuf {
        self.0.join(format!("model-{}.ckpt", transform.label()))
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.jsonl")
    }

    /// Every `model-*.ckpt` in the directory, sorted by name.
    pub fn checkpoints(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.0).with_context(|| format!("listing {}", self.0.display()))? {
            let p = entry?.path();
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("model-") && name.ends_with(".ckpt") {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.0).with_context(|| format!("creating {}", self.0.display()))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_stories(path: &Path) -> Result<Vec<UserStory>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_stories(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn load_catalog(path: &Path) -> Result<CatalogIndex> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    CatalogIndex::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Vocabulary::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Generates the synthetic world: `stories.jsonl` and `catalog.jsonl`.
pub fn gen_data(cfg: &PipelineConfig, dir: &RunDir) -> Result<WorldReport> {
    let t = Instant::now();
    dir.ensure()?;
    let mut manifest = RunManifest::new("gen-data", cfg);
    let (catalog, stories) = generate_world(&cfg.world)?;
    let mut buf = Vec::new();
    write_stories(&mut buf, &stories)?;
    write_file(&dir.stories(), &buf)?;
    let mut cbuf = Vec::new();
    catalog.write_jsonl(&mut cbuf)?;
    write_file(&dir.catalog(), &cbuf)?;
    manifest.time("total", t);
    manifest.write_sidecar(&dir.stories())?;
    manifest.write_sidecar(&dir.catalog())?;
    Ok(world_report(&stories)?)
}

/// Splits stories into (train, eval) with the configured holdout.
pub fn split(cfg: &PipelineConfig, stories: &[UserStory]) -> Result<(Vec<UserStory>, Vec<UserStory>)> {
    Ok(split_users(stories, &cfg.eval.to_eval_config())?)
}

/// Learns the vocabulary from the catalog and the first training stories.
pub fn build_vocab(cfg: &PipelineConfig, dir: &RunDir) -> Result<Vocabulary> {
    let t = Instant::now();
    let mut manifest = RunManifest::new("build-vocab", cfg);
    manifest.input(&dir.stories())?;
    manifest.input(&dir.catalog())?;
    let catalog = load_catalog(&dir.catalog())?;
    let stories = load_stories(&dir.stories())?;
    let (train, _) = split(cfg, &stories)?;
    let texts = train
        .iter()
        .take(cfg.vocab.merge_sample)
        .map(|s| serialize(s).map(|t| t.into_string()))
        .collect::<storyrank::Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(&catalog, cfg.vocab.merges, &texts)?;
    write_file(&dir.vocab(), &vocab.to_file_bytes())?;
    manifest.time("total", t);
    manifest.write_sidecar(&dir.vocab())?;
    Ok(vocab)
}

/// Number of examples the training schedule consumes.
pub fn corpus_len(cfg: &PipelineConfig) -> u64 {
    cfg.train.macro_steps * cfg.train.batch_size as u64
}

/// Draws the training examples (story/catalog mixture over the training
/// split, under the configured transform) and writes them in order.
pub fn build_corpus(cfg: &PipelineConfig, dir: &RunDir) -> Result<PathBuf> {
    let t = Instant::now();
    let mut manifest = RunManifest::new("build-corpus", cfg);
    manifest.input(&dir.stories())?;
    manifest.input(&dir.catalog())?;
    manifest.input(&dir.vocab())?;
    let catalog = load_catalog(&dir.catalog())?;
    let stories = load_stories(&dir.stories())?;
    let vocab = load_vocab(&dir.vocab())?;
    let (train, _) = split(cfg, &stories)?;
    let encoded = train
        .iter()
        .map(|s| encode_story(s, &cfg.transform, &vocab))
        .collect::<storyrank::Result<Vec<_>>>()?;
    let catalog_corpus = build_catalog_corpus(&catalog, &vocab)?;
    let sampler = MixtureSampler::new(&encoded, &catalog_corpus, &vocab, cfg.corpus.mixture, cfg.corpus.masking)?;
    let examples: Vec<TrainingExample> = (0..corpus_len(cfg)).map(|i| sampler.draw(i)).collect();
    let path = dir.corpus(&cfg.transform);
    let mut buf = Vec::new();
    write_corpus(&mut buf, &examples)?;
    write_file(&path, &buf)?;
    manifest.time("total", t);
    manifest.write_sidecar(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Trains from the corpus for `train.macro_steps` steps and writes the
/// checkpoint (with optimizer state).
pub fn train(cfg: &PipelineConfig, dir: &RunDir, progress: &mut dyn FnMut(&StepMetrics)) -> Result<TrainSummary> {
    let t = Instant::now();
    let mut manifest = RunManifest::new("train", cfg);
    let corpus_path = dir.corpus(&cfg.transform);
    let corpus_bytes = manifest.input(&corpus_path)?;
    let vocab_bytes = manifest.input(&dir.vocab())?;
    let vocab = Vocabulary::read_from(&vocab_bytes[..])?;
    let examples = read_corpus(&corpus_bytes[..]).with_context(|| format!("reading {}", corpus_path.display()))?;
    if (examples.len() as u64) < corpus_len(cfg) {
        bail!(storyrank::Error::config(format!(
            "corpus has {} examples but {} steps of batch {} need {}",
            examples.len(),
            cfg.train.macro_steps,
            cfg.train.batch_size,
            corpus_len(cfg)
        )));
    }
    let manifest_hash = manifest.hash();
    let path = dir.checkpoint(&cfg.transform);
    let (bytes, first_loss, last_loss) = match cfg.dtype {
        Dtype::F32 => train_typed::<f32>(cfg, &vocab, &examples, &manifest_hash, progress)?,
        Dtype::F64 => train_typed::<f64>(cfg, &vocab, &examples, &manifest_hash, progress)?,
    };
    write_file(&path, &bytes)?;
    manifest.time("total", t);
    manifest.write_sidecar(&path)?;
    Ok(TrainSummary { checkpoint: path, steps: cfg.train.macro_steps, first_loss, last_loss })
}

fn train_typed<T: Scalar>(
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
    manifest_hash: &str,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<(Vec<u8>, f64, f64)> {
    let model = Model::<T>::init(cfg.model.to_model_config(vocab.len()), cfg.train.rng_seed)?;
    let mut trainer = Trainer::new(model, cfg.train)?;
    let batch = cfg.train.batch_size;
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..cfg.train.macro_steps {
        let start = step as usize * batch;
        let ids: Vec<&[storyrank::TokenId]> =
            examples[start..start + batch].iter().map(|e| e.token_ids.as_slice()).collect();
        let m = trainer.train_step(&ids, step)?;
        if step == 0 {
            first = m.loss;
        }
        last = m.loss;
        progress(&m);
    }
    let mut ck = Checkpoint::from_trainer(&trainer);
    ck.meta.vocab_hash = vocab.hash();
    ck.meta.manifest_hash = manifest_hash.to_string();
    ck.meta.transform = cfg.transform;
    Ok((ck.to_bytes(), first, last))
}

/// A checkpoint of either precision.
pub enum LoadedModel {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let meta = read_checkpoint_meta(bytes)?;
        Ok(match meta.dtype {
            Dtype::F32 => LoadedModel::F32(Checkpoint::read_from(bytes)?),
            Dtype::F64 => LoadedModel::F64(Checkpoint::read_from(bytes)?),
        })
    }

    pub fn meta(&self) -> &CheckpointMeta {
        match self {
            LoadedModel::F32(c) => &c.meta,
            LoadedModel::F64(c) => &c.meta,
        }
    }

    pub fn context_length(&self) -> usize {
        self.meta().model.context_length
    }

    /// Fails unless the checkpoint was trained with `vocab`.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let want = &self.meta().vocab_hash;
        if *want != vocab.hash() {
            bail!(storyrank::Error::config(format!(
                "vocabulary hash mismatch: checkpoint {} vs vocabulary {}",
                short(want),
                short(&vocab.hash())
            )));
        }
        Ok(())
    }

    pub fn rank(&self, prompt: &TaskPrompt, ctx: &ScoringContext) -> Result<RankedList> {
        Ok(match self {
            LoadedModel::F32(c) => rank(prompt, &c.model, ctx)?,
            LoadedModel::F64(c) => rank(prompt, &c.model, ctx)?,
        })
    }

    pub fn rank_batch(&self, prompts: &[TaskPrompt], ctx: &ScoringContext) -> Result<Vec<RankedList>> {
        Ok(match self {
            LoadedModel::F32(c) => rank_batch(prompts, &c.model, ctx)?,
            LoadedModel::F64(c) => rank_batch(prompts, &c.model, ctx)?,
        })
    }

    fn ranker<'a>(&'a self, vocab: &'a Vocabulary) -> Box<dyn Ranker + 'a> {
        match self {
            LoadedModel::F32(c) => Box::new(ModelRanker::new(&c.model, vocab, c.meta.transform)),
            LoadedModel::F64(c) => Box::new(ModelRanker::new(&c.model, vocab, c.meta.transform)),
        }
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub table: String,
}

/// Evaluates checkpoints (and optionally the baselines) on the held-out
/// users and writes `metrics.jsonl`.
pub fn eval(cfg: &PipelineConfig, dir: &RunDir, checkpoints: &[PathBuf]) -> Result<EvalOutcome> {
    let t = Instant::now();
    let mut manifest = RunManifest::new("eval", cfg);
    manifest.input(&dir.stories())?;
    manifest.input(&dir.catalog())?;
    let vocab_bytes = manifest.input(&dir.vocab())?;
    let vocab = Vocabulary::read_from(&vocab_bytes[..])?;
    let catalog = load_catalog(&dir.catalog())?;
    let stories = load_stories(&dir.stories())?;
    let (train, held_out) = split(cfg, &stories)?;
    let ecfg = cfg.eval.to_eval_config();
    let kinds = &cfg.eval.tasks;

    let mut models = Vec::new();
    for p in checkpoints {
        let bytes = manifest.input(p)?;
        let m = LoadedModel::from_bytes(&bytes).with_context(|| format!("loading {}", p.display()))?;
        m.check_vocab(&vocab).with_context(|| format!("checkpoint {}", p.display()))?;
        models.push(m);
    }
    if models.is_empty() && !cfg.eval.baselines {
        bail!(storyrank::Error::config("nothing to evaluate: no checkpoints and baselines disabled"));
    }

    let hash = cfg.hash();
    let mut rows = Vec::new();
    for m in &models {
        let mut ranker = m.ranker(&vocab);
        let (report, _) = evaluate(ranker.as_mut(), &held_out, kinds, &ecfg, &vocab)?;
        rows.extend(metric_rows(&report, &ecfg.k_cutoffs, &hash));
    }
    if cfg.eval.baselines {
        let mut pop = PopularityRanker::new(&train, &vocab);
        let (report, _) = evaluate(&mut pop, &held_out, kinds, &ecfg, &vocab)?;
        rows.extend(metric_rows(&report, &ecfg.k_cutoffs, &hash));
        if kinds.contains(&TaskKind::Search) {
            let index = Bm25Index::new(
                &catalog.items().iter().map(|i| (i.item_id.clone(), i.title.clone())).collect::<Vec<_>>(),
                cfg.eval.bm25_k1,
                cfg.eval.bm25_b,
            );
            let mut bm25 = Bm25Ranker { index, vocab: &vocab };
            let (report, _) = evaluate(&mut bm25, &held_out, &[TaskKind::Search], &ecfg, &vocab)?;
            rows.extend(metric_rows(&report, &ecfg.k_cutoffs, &hash));
        }
    }

    let path = dir.metrics();
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_metrics(&mut w, &rows)?;
    w.flush()?;
    manifest.time("total", t);
    manifest.write_sidecar(&path)?;
    Ok(EvalOutcome { table: format_table(&rows), rows })
}

/// Runs every stage in order for the configured transform.
pub fn run_all(cfg: &PipelineConfig, dir: &RunDir) -> Result<EvalOutcome> {
    gen_data(cfg, dir)?;
    build_vocab(cfg, dir)?;
    build_corpus(cfg, dir)?;
    let summary = train(cfg, dir, &mut |_| {})?;
    eval(cfg, dir, &[summary.checkpoint])
}

/// A copy of `cfg` with another input transform.
pub fn with_transform(cfg: &PipelineConfig, transform: StoryTransform) -> PipelineConfig {
    let mut c = cfg.clone();
    c.transform = transform;
    c
}
