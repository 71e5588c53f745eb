//! End-to-end pipeline stages shared by the command line and the tests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_sequences, drop_short_sequences, generate_synthetic, kcore_filter, leave_last_out_split, parse_metadata, parse_reviews,
    ItemMeta, SplitDataset, SynthConfig, SyntheticGroundTruth, UserSequence,
};
use crate::embed::{deep_item_embedding, shallow_item_embedding, Embedder, EmbeddingVector, LocalEmbedder, RemoteEmbedder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, interest_quality, user_interests, EvalCfg, MetricsReport};
use crate::genmodel::{
    encode_history, max_sequence_len, sft_train, vocab_for_table, GenModel, ModelConfig, SftCfg, SftOutcome, Vocab,
    DEFAULT_DISAMBIGUATORS,
};
use crate::io::content_hash;
use crate::mining::{mine_corpus, AggregatedInterests, HttpLlm, LlmClient, MockLlm, ProviderConfig, RldiClassifier, DEFAULT_MERGE_THRESHOLD};
use crate::rl::{grpo_train, GrpoOutcome, GrpoQuery, ItemLabels, RewardKind, RewardStrategy, RlConfig};
use crate::tokenizer::{assign_sids, train_codebooks, Codebooks, SidTable, SidTrie, TrainCfg};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsCfg {
    /// Line-delimited review records; when absent the synthetic corpus is used.
    pub reviews: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for PathsCfg {
    fn default() -> Self {
        PathsCfg {
            reviews: None,
            metadata: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusCfg {
    pub k_core: usize,
}

impl Default for CorpusCfg {
    fn default() -> Self {
        CorpusCfg { k_core: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RldiMode {
    #[default]
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningCfg {
    /// Live chat-completion providers.
    pub providers: Vec<ProviderConfig>,
    /// Number of offline mock providers used with `--providers mock`.
    pub mock_providers: usize,
    pub merge_threshold: f64,
    pub rldi: RldiMode,
}

impl Default for MiningCfg {
    fn default() -> Self {
        MiningCfg {
            providers: Vec::new(),
            mock_providers: 3,
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            rldi: RldiMode::Heuristic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedCfg {
    pub dim: usize,
    pub seed: u64,
    /// Remote embedding endpoint used with `--providers live`.
    pub remote: Option<ProviderConfig>,
}

impl Default for EmbedCfg {
    fn default() -> Self {
        EmbedCfg {
            dim: 64,
            seed: 0,
            remote: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerCfg {
    pub levels: usize,
    pub codebook_size: usize,
    pub max_iters: usize,
    pub disambiguators: usize,
    pub seed: u64,
}

impl Default for TokenizerCfg {
    fn default() -> Self {
        TokenizerCfg {
            levels: 4,
            codebook_size: 256,
            max_iters: 100,
            disambiguators: DEFAULT_DISAMBIGUATORS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RlStageCfg {
    #[serde(flatten)]
    pub grpo: RlConfig,
    /// Most recent training prefixes per user used as RL queries; every
    /// training prefix when unset.
    pub queries_per_user: Option<usize>,
}


/// Every knob of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: String,
    pub paths: PathsCfg,
    pub corpus: CorpusCfg,
    pub synth: SynthConfig,
    pub mining: MiningCfg,
    pub embed: EmbedCfg,
    pub tokenizer: TokenizerCfg,
    pub model: ModelConfig,
    pub sft: SftCfg,
    pub rl: RlStageCfg,
    pub eval: EvalCfg,
    /// Synthetic corpus evaluated by `transfer`.
    pub transfer: Option<SynthConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dataset: "synthetic".into(),
            paths: PathsCfg::default(),
            corpus: CorpusCfg::default(),
            synth: SynthConfig::default(),
            mining: MiningCfg::default(),
            embed: EmbedCfg::default(),
            tokenizer: TokenizerCfg::default(),
            model: ModelConfig::default(),
            sft: SftCfg::default(),
            rl: RlStageCfg::default(),
            eval: EvalCfg::default(),
            transfer: None,
        }
    }
}

impl PipelineConfig {
    /// Propagate the run seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.tokenizer.seed = seed;
        self.model.seed = seed;
        self.sft.seed = seed;
        self.rl.grpo.seed = seed;
        self
    }

    /// Every violated constraint, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.tokenizer.levels == 0 {
            p.push("tokenizer.levels must be >= 1".into());
        }
        if self.tokenizer.codebook_size < 2 {
            p.push("tokenizer.codebook_size must be >= 2".into());
        }
        if self.tokenizer.codebook_size > u16::MAX as usize {
            p.push("tokenizer.codebook_size must fit in 16 bits".into());
        }
        if self.tokenizer.max_iters == 0 {
            p.push("tokenizer.max_iters must be >= 1".into());
        }
        if self.corpus.k_core == 0 {
            p.push("corpus.k_core must be >= 1".into());
        }
        if self.embed.dim < 8 {
            p.push("embed.dim must be >= 8".into());
        }
        if !(0.0..=1.0).contains(&self.mining.merge_threshold) {
            p.push("mining.merge_threshold must lie in [0, 1]".into());
        }
        for (i, prov) in self.mining.providers.iter().enumerate() {
            p.extend(prov.validate().into_iter().map(|m| format!("mining.providers[{i}]: {m}")));
        }
        if let Some(remote) = &self.embed.remote {
            p.extend(remote.validate().into_iter().map(|m| format!("embed.remote: {m}")));
        }
        if self.paths.reviews.is_some() != self.paths.metadata.is_some() {
            p.push("paths.reviews and paths.metadata must be given together".into());
        }
        p.extend(self.model.validate().into_iter().map(|m| format!("model: {m}")));
        p.extend(self.sft.validate().into_iter().map(|m| format!("sft: {m}")));
        p.extend(self.rl.grpo.validate().into_iter().map(|m| format!("rl: {m}")));
        if self.rl.queries_per_user == Some(0) {
            p.push("rl.queries_per_user must be >= 1".into());
        }
        p.extend(self.eval.validate().into_iter().map(|m| format!("eval: {m}")));
        if self.eval.n_hist != self.sft.n_hist {
            p.push(format!(
                "eval.n_hist ({}) must equal sft.n_hist ({})",
                self.eval.n_hist, self.sft.n_hist
            ));
        }
        let need = max_sequence_len(self.tokenizer.levels, self.sft.n_hist, true);
        if need > self.model.context {
            p.push(format!(
                "model.context ({}) is shorter than the longest training sequence ({need})",
                self.model.context
            ));
        }
        p
    }

    pub fn check(&self) -> Result<()> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Hash of everything that affects results; the workdir is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.workdir = PathsCfg::default().workdir;
        content_hash(&serde_json::to_vec(&c).unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    #[default]
    Mock,
    Live,
}

/// Users' chronological sequences and the metadata of every item in them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusData {
    pub sequences: Vec<UserSequence>,
    pub items: Vec<ItemMeta>,
    pub truth: Option<SyntheticGroundTruth>,
}

impl CorpusData {
    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }
}

pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<CorpusData> {
    let c = generate_synthetic(cfg, seed)?;
    Ok(CorpusData {
        sequences: c.sequences,
        items: c.items,
        truth: Some(c.truth),
    })
}

/// Read review and metadata files, drop items without metadata, apply
/// k-core filtering and build sequences.
pub fn ingest(reviews: &std::path::Path, metadata: &std::path::Path, k_core: usize) -> Result<CorpusData> {
    let open = |p: &std::path::Path| {
        File::open(p)
            .map(BufReader::new)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", p.display())))
    };
    let parsed = parse_reviews(open(reviews)?)?;
    let metas = parse_metadata(open(metadata)?)?;
    let by_id: BTreeMap<String, ItemMeta> = metas.into_iter().map(|m| (m.item.clone(), m)).collect();
    let known: Vec<_> = parsed
        .interactions
        .into_iter()
        .filter(|r| by_id.contains_key(&r.item))
        .collect();
    let core = kcore_filter(&known, k_core);
    let (sequences, dropped) = drop_short_sequences(build_sequences(&core), 3);
    if dropped > 0 {
        log::warn!("dropped {dropped} sequences shorter than 3");
    }
    let used: std::collections::BTreeSet<&str> = sequences.iter().flat_map(|s| s.items.iter().map(String::as_str)).collect();
    let items = by_id.into_values().filter(|m| used.contains(m.item.as_str())).collect();
    Ok(CorpusData {
        sequences,
        items,
        truth: None,
    })
}

/// Load the configured corpus: files when given, else the synthetic generator.
pub fn load_corpus(cfg: &PipelineConfig) -> Result<CorpusData> {
    match (&cfg.paths.reviews, &cfg.paths.metadata) {
        (Some(r), Some(m)) => ingest(r, m, cfg.corpus.k_core),
        _ => synthesize(&cfg.synth, cfg.seed),
    }
}

pub fn build_clients(cfg: &PipelineConfig, mode: ProviderMode) -> Result<Vec<Box<dyn LlmClient>>> {
    match mode {
        ProviderMode::Mock => {
            if cfg.mining.mock_providers == 0 {
                return Err(Error::Config(vec!["mining.mock_providers must be >= 1".into()]));
            }
            Ok((0..cfg.mining.mock_providers)
                .map(|i| Box::new(MockLlm::new(format!("mock-{i}"), cfg.seed)) as Box<dyn LlmClient>)
                .collect())
        }
        ProviderMode::Live => {
            if cfg.mining.providers.is_empty() {
                return Err(Error::Config(vec!["mining.providers is empty but live providers were requested".into()]));
            }
            cfg.mining
                .providers
                .iter()
                .map(|p| Ok(Box::new(HttpLlm::new(p.clone())?) as Box<dyn LlmClient>))
                .collect()
        }
    }
}

pub fn build_embedder(cfg: &PipelineConfig, mode: ProviderMode) -> Result<Box<dyn Embedder>> {
    match (mode, &cfg.embed.remote) {
        (ProviderMode::Live, Some(remote)) => Ok(Box::new(RemoteEmbedder::new(remote.clone(), cfg.embed.dim)?)),
        _ => Ok(Box::new(LocalEmbedder::new(cfg.embed.dim, cfg.embed.seed)?)),
    }
}

/// Multi-provider interest mining with ensemble aggregation and RLDI labels.
pub fn mine(cfg: &PipelineConfig, clients: &[Box<dyn LlmClient>], items: &[ItemMeta], embedder: &dyn Embedder) -> Result<Vec<AggregatedInterests>> {
    let refs: Vec<&dyn LlmClient> = clients.iter().map(|c| c.as_ref()).collect();
    let classifier = match cfg.mining.rldi {
        RldiMode::Heuristic => RldiClassifier::Heuristic,
        RldiMode::Llm => RldiClassifier::Llm(refs[0]),
    };
    mine_corpus(&refs, items, embedder, cfg.mining.merge_threshold, classifier)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    /// From mined interest text.
    pub deep: BTreeMap<String, EmbeddingVector>,
    /// From title and description.
    pub shallow: BTreeMap<String, EmbeddingVector>,
}

pub fn embed_items(embedder: &dyn Embedder, items: &[ItemMeta], interests: &[AggregatedInterests]) -> Result<ItemEmbeddings> {
    use rayon::prelude::*;
    let deep: Vec<(String, EmbeddingVector)> = interests
        .par_iter()
        .map(|a| Ok((a.item.clone(), deep_item_embedding(embedder, a)?)))
        .collect::<Result<_>>()?;
    let shallow: Vec<(String, EmbeddingVector)> = items
        .par_iter()
        .map(|m| Ok((m.item.clone(), shallow_item_embedding(embedder, m)?)))
        .collect::<Result<_>>()?;
    Ok(ItemEmbeddings {
        deep: deep.into_iter().collect(),
        shallow: shallow.into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SidSource {
    Deep,
    Shallow,
}

impl SidSource {
    pub fn name(self) -> &'static str {
        match self {
            SidSource::Deep => "deep",
            SidSource::Shallow => "shallow",
        }
    }
}

/// Codebooks, SID table, trie and vocabulary for one embedding source.
#[derive(Debug, Clone)]
pub struct Tokenized {
    pub codebooks: Codebooks,
    pub table: SidTable,
    pub trie: SidTrie,
    pub vocab: Vocab,
}

impl Tokenized {
    pub fn from_parts(cfg: &PipelineConfig, codebooks: Codebooks, table: SidTable) -> Self {
        let trie = SidTrie::build(&table);
        let vocab = vocab_for_table(&table, cfg.tokenizer.codebook_size, cfg.tokenizer.disambiguators);
        Tokenized {
            codebooks,
            table,
            trie,
            vocab,
        }
    }
}

pub fn tokenize(cfg: &PipelineConfig, embeddings: &BTreeMap<String, EmbeddingVector>) -> Result<Tokenized> {
    let vectors: Vec<EmbeddingVector> = embeddings.values().cloned().collect();
    let codebooks = train_codebooks(
        &vectors,
        cfg.tokenizer.levels,
        cfg.tokenizer.codebook_size,
        &TrainCfg {
            max_iters: cfg.tokenizer.max_iters,
            seed: cfg.tokenizer.seed,
        },
    )?;
    let table = assign_sids(&codebooks, embeddings)?;
    Ok(Tokenized::from_parts(cfg, codebooks, table))
}

pub fn sft_stage(cfg: &PipelineConfig, tok: &Tokenized, split: &SplitDataset) -> Result<SftOutcome> {
    let model = GenModel::new(cfg.model, tok.vocab)?;
    let out = sft_train(model, &split.train, &tok.table, &cfg.sft)?;
    if let Some(last) = out.curve.last() {
        info!("sft finished after {} steps, final loss {:.4}", out.curve.len(), last.loss);
    }
    Ok(out)
}

/// The `per_user` longest training prefixes of each user, in user order.
pub fn rl_queries(split: &SplitDataset, tok: &Tokenized, n_hist: usize, per_user: Option<usize>) -> Result<Vec<GrpoQuery>> {
    let mut by_user: BTreeMap<&str, Vec<&crate::corpus::Example>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for ex in &split.train {
        if !by_user.contains_key(ex.user.as_str()) {
            order.push(&ex.user);
        }
        by_user.entry(&ex.user).or_default().push(ex);
    }
    let mut out = Vec::new();
    for user in order {
        let mut exs = by_user[user].clone();
        exs.sort_by_key(|e| e.history.len());
        for ex in exs.iter().rev().take(per_user.unwrap_or(usize::MAX)).rev() {
            out.push(GrpoQuery {
                x: encode_history(&tok.table, &tok.vocab, &ex.history, n_hist)?,
                target: ex.target.clone(),
            });
        }
    }
    Ok(out)
}

pub fn rl_stage(
    cfg: &PipelineConfig,
    tok: &Tokenized,
    split: &SplitDataset,
    sft_model: &GenModel,
    labels: &ItemLabels,
    reward: RewardStrategy,
) -> Result<GrpoOutcome> {
    let queries = rl_queries(split, tok, cfg.sft.n_hist, cfg.rl.queries_per_user)?;
    let grpo = RlConfig { reward, ..cfg.rl.grpo };
    let out = grpo_train(sft_model.clone(), sft_model, &queries, &tok.trie, &tok.table, labels, &grpo)?;
    info!("grpo epoch rewards: {:?}", out.epoch_rewards);
    Ok(out)
}

/// Interest quality of the test users: their history's item interests
/// against the shallow embedding of the held-out item.
pub fn test_interest_quality(
    split: &SplitDataset,
    interests: &[AggregatedInterests],
    embeddings: &ItemEmbeddings,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let by_item: BTreeMap<String, AggregatedInterests> = interests.iter().map(|a| (a.item.clone(), a.clone())).collect();
    let mut users = BTreeMap::new();
    let mut future = BTreeMap::new();
    for ex in &split.test {
        let ints = user_interests(&ex.history, &by_item);
        if ints.is_empty() {
            continue;
        }
        users.insert(ex.user.clone(), ints);
        future.insert(ex.user.clone(), vec![ex.target.clone()]);
    }
    interest_quality(&users, &future, &embeddings.shallow, embedder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoMlim,
    NoIeid,
    NoInterestReward,
    SftOnly,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoMlim, Arm::NoIeid, Arm::NoInterestReward, Arm::SftOnly];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoMlim => "no_mlim",
            Arm::NoIeid => "no_ieid",
            Arm::NoInterestReward => "no_interest_reward",
            Arm::SftOnly => "sft_only",
        }
    }

    pub fn parse(name: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn sid_source(self) -> SidSource {
        match self {
            Arm::NoMlim | Arm::NoIeid => SidSource::Shallow,
            _ => SidSource::Deep,
        }
    }

    pub fn runs_rl(self) -> bool {
        self != Arm::SftOnly
    }

    /// Whether mined interests are available to this arm at all.
    pub fn uses_interests(self) -> bool {
        self != Arm::NoMlim
    }

    pub fn reward(self, base: RewardStrategy) -> RewardStrategy {
        match self {
            Arm::NoInterestReward => RewardStrategy {
                kind: RewardKind::RuleBinary,
                ..base
            },
            _ => base,
        }
    }
}

/// Everything upstream of tokenization.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: CorpusData,
    pub split: SplitDataset,
    pub interests: Vec<AggregatedInterests>,
    pub embeddings: ItemEmbeddings,
}

pub fn prepare(cfg: &PipelineConfig, mode: ProviderMode) -> Result<Prepared> {
    cfg.check()?;
    let corpus = load_corpus(cfg)?;
    let split = leave_last_out_split(&corpus.sequences)?;
    let clients = build_clients(cfg, mode)?;
    let embedder = build_embedder(cfg, mode)?;
    let interests = mine(cfg, &clients, &corpus.items, embedder.as_ref())?;
    let embeddings = embed_items(embedder.as_ref(), &corpus.items, &interests)?;
    Ok(Prepared {
        corpus,
        split,
        interests,
        embeddings,
    })
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub report: MetricsReport,
    pub sft_curve: Vec<crate::genmodel::LossPoint>,
    pub sft_report: MetricsReport,
    pub grpo: Option<GrpoOutcome>,
    pub grpo_calls: usize,
}

/// Run the given ablation arms over prepared inputs. Tokenization and SFT
/// are shared between arms that use the same SID source.
pub fn run_ablation(cfg: &PipelineConfig, prepared: &Prepared, arms: &[Arm], embedder: &dyn Embedder) -> Result<Vec<ArmResult>> {
    cfg.check()?;
    let hash = cfg.hash();
    let mut stages: BTreeMap<&'static str, (Tokenized, SftOutcome, MetricsReport)> = BTreeMap::new();
    let labels = ItemLabels::from_interests(&prepared.interests);
    let no_labels = ItemLabels::default();
    let iq = test_interest_quality(&prepared.split, &prepared.interests, &prepared.embeddings, embedder).ok();
    let mut results = Vec::with_capacity(arms.len());
    for &arm in arms {
        let source = arm.sid_source();
        if !stages.contains_key(source.name()) {
            let emb = match source {
                SidSource::Deep => &prepared.embeddings.deep,
                SidSource::Shallow => &prepared.embeddings.shallow,
            };
            let tok = tokenize(cfg, emb)?;
            let sft = sft_stage(cfg, &tok, &prepared.split)?;
            let report = evaluate(&sft.model, &prepared.split.test, &tok.table, &tok.trie, &cfg.eval)?;
            stages.insert(source.name(), (tok, sft, report));
        }
        let (tok, sft, sft_report) = &stages[source.name()];
        let (model, grpo, calls) = if arm.runs_rl() {
            let l = if arm.uses_interests() { &labels } else { &no_labels };
            let out = rl_stage(cfg, tok, &prepared.split, &sft.model, l, arm.reward(cfg.rl.grpo.reward))?;
            (out.policy.clone(), Some(out), 1)
        } else {
            (sft.model.clone(), None, 0)
        };
        let mut report = if arm.runs_rl() {
            evaluate(&model, &prepared.split.test, &tok.table, &tok.trie, &cfg.eval)?
        } else {
            sft_report.clone()
        };
        report.arm = arm.name().into();
        report.dataset = cfg.dataset.clone();
        report.seed = cfg.seed;
        report.config_hash = hash.clone();
        report.iq = if arm.uses_interests() { iq } else { None };
        let mut sft_report = sft_report.clone();
        sft_report.arm = format!("{}_sft", source.name());
        sft_report.dataset = cfg.dataset.clone();
        sft_report.seed = cfg.seed;
        sft_report.config_hash = hash.clone();
        results.push(ArmResult {
            arm,
            report,
            sft_curve: sft.curve.clone(),
            sft_report,
            grpo,
            grpo_calls: calls,
        });
    }
    Ok(results)
}
