//! One function per CLI stage. Each reads its prerequisites from the
//! workdir, writes its artifacts and a manifest, and skips when nothing
//! it depends on has changed.

use std::collections::BTreeMap;

use igr_core::corpus::{leave_last_out_split, SyntheticGroundTruth};
use igr_core::eval::{format_table, transfer_eval};
use igr_core::genmodel::{load_checkpoint, save_checkpoint, LossPoint};
use igr_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use igr_core::pipeline::{
    build_clients, build_embedder, embed_items, ingest, mine, rl_stage, sft_stage, synthesize, test_interest_quality, tokenize,
    CorpusData, ItemEmbeddings, SidSource, Tokenized,
};
use igr_core::rl::RewardPoint;
use igr_core::tokenizer::SidRecord;
use igr_core::{
    AggregatedInterests, Arm, Codebooks, EmbeddingVector, GenModel, ItemLabels, ItemMeta, MetricsReport, PipelineConfig,
    ProviderMode, SidTable, SplitDataset, UserSequence,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::workdir::{hash_json, require, Stage, Workdir};

const SEQUENCES: &str = "corpus/sequences.jsonl";
const ITEMS: &str = "corpus/items.jsonl";
const TRUTH: &str = "corpus/truth.json";
const CORPUS_MANIFEST: &str = "corpus/manifest.json";
const INTERESTS: &str = "interests/interests.jsonl";
const INTERESTS_MANIFEST: &str = "interests/manifest.json";
const DEEP: &str = "embeddings/deep.jsonl";
const SHALLOW: &str = "embeddings/shallow.jsonl";
const EMBED_MANIFEST: &str = "embeddings/manifest.json";
const CODEBOOKS_MANIFEST: &str = "codebooks/manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingRecord {
    item: String,
    #[serde(flatten)]
    embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLog {
    pub epoch_rewards: Vec<f64>,
    pub reward_values: Vec<f64>,
    pub steps: usize,
    pub curve: Vec<RewardPoint>,
}

fn codebooks_path(s: SidSource) -> String {
    format!("codebooks/{}.codebooks.json", s.name())
}

fn sids_path(s: SidSource) -> String {
    format!("codebooks/{}.sids.jsonl", s.name())
}

fn sft_ckpt(s: SidSource) -> String {
    format!("checkpoints/sft_{}.ckpt", s.name())
}

fn sft_manifest(s: SidSource) -> String {
    format!("checkpoints/sft_{}.manifest.json", s.name())
}

fn rl_ckpt(arm: Arm) -> String {
    format!("checkpoints/rl_{}.ckpt", arm.name())
}

fn rl_manifest(arm: Arm) -> String {
    format!("checkpoints/rl_{}.manifest.json", arm.name())
}

fn metrics_path(arm: Arm) -> String {
    format!("reports/metrics_{}.json", arm.name())
}

/// Everything a stage needs besides its own arguments.
pub struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub wd: &'a Workdir,
    pub force: bool,
    pub mode: ProviderMode,
}

impl Ctx<'_> {
    fn uses_files(&self) -> bool {
        self.cfg.paths.reviews.is_some()
    }

    /// Command that produces the corpus under this configuration.
    pub fn corpus_producer(&self) -> &'static str {
        if self.uses_files() {
            "ingest"
        } else {
            "synth"
        }
    }

    fn corpus_hash(&self) -> String {
        let c = self.cfg;
        if self.uses_files() {
            hash_json(&("ingest", &c.paths.reviews, &c.paths.metadata, c.corpus.k_core))
        } else {
            hash_json(&("synth", c.seed, &c.synth))
        }
    }

    fn mine_hash(&self) -> String {
        hash_json(&("mine", self.cfg.seed, &self.cfg.mining, &self.cfg.embed, self.mode))
    }

    fn embed_hash(&self) -> String {
        hash_json(&("embed", &self.cfg.embed, self.mode))
    }

    fn tokenize_hash(&self) -> String {
        hash_json(&("tokenize", &self.cfg.tokenizer))
    }

    fn sft_hash(&self, s: SidSource) -> String {
        hash_json(&("sft", s, &self.cfg.model, &self.cfg.sft))
    }

    fn rl_hash(&self, arm: Arm) -> String {
        hash_json(&("rl", arm, &self.cfg.rl))
    }

    fn eval_hash(&self, arm: Arm) -> String {
        hash_json(&("eval", arm, &self.cfg.eval, &self.cfg.dataset))
    }

    fn require_corpus(&self) -> CliResult<()> {
        require(self.wd, CORPUS_MANIFEST, self.corpus_producer(), &self.corpus_hash(), self.force).map(drop)
    }

    fn require_interests(&self) -> CliResult<()> {
        require(self.wd, INTERESTS_MANIFEST, "mine", &self.mine_hash(), self.force).map(drop)
    }

    fn require_embeddings(&self) -> CliResult<()> {
        require(self.wd, EMBED_MANIFEST, "embed", &self.embed_hash(), self.force).map(drop)
    }

    fn require_codebooks(&self) -> CliResult<()> {
        require(self.wd, CODEBOOKS_MANIFEST, "tokenize", &self.tokenize_hash(), self.force).map(drop)
    }

    fn read_split(&self) -> CliResult<SplitDataset> {
        let seqs: Vec<UserSequence> = read_jsonl(&self.wd.path(SEQUENCES))?;
        Ok(leave_last_out_split(&seqs)?)
    }

    fn read_interests(&self) -> CliResult<Vec<AggregatedInterests>> {
        Ok(read_jsonl(&self.wd.path(INTERESTS))?)
    }

    fn read_embeddings(&self, rel: &str) -> CliResult<BTreeMap<String, EmbeddingVector>> {
        let recs: Vec<EmbeddingRecord> = read_jsonl(&self.wd.path(rel))?;
        Ok(recs.into_iter().map(|r| (r.item, r.embedding)).collect())
    }

    fn read_tokenized(&self, s: SidSource) -> CliResult<Tokenized> {
        let cb: Codebooks = read_json(&self.wd.path(&codebooks_path(s)))?;
        let recs: Vec<SidRecord> = read_jsonl(&self.wd.path(&sids_path(s)))?;
        Ok(Tokenized::from_parts(self.cfg, cb, SidTable::from_records(recs)?))
    }

    fn read_model(&self, rel: &str, tok: &Tokenized, producer: &str) -> CliResult<GenModel> {
        let ck = load_checkpoint(&self.wd.path(rel))?;
        if ck.model.vocab() != &tok.vocab {
            return Err(CliError::Stale {
                path: self.wd.path(rel),
                producer: producer.into(),
            });
        }
        Ok(ck.model)
    }

    fn labels_for(&self, arm: Arm) -> CliResult<ItemLabels> {
        if arm.uses_interests() {
            Ok(ItemLabels::from_interests(&self.read_interests()?))
        } else {
            Ok(ItemLabels::default())
        }
    }
}

fn write_corpus(ctx: &Ctx, data: &CorpusData) -> CliResult<()> {
    write_jsonl(&ctx.wd.path(SEQUENCES), &data.sequences)?;
    write_jsonl(&ctx.wd.path(ITEMS), &data.items)?;
    write_json::<Option<SyntheticGroundTruth>>(&ctx.wd.path(TRUTH), &data.truth)?;
    log::info!(
        "corpus: {} users, {} items, {} interactions",
        data.sequences.len(),
        data.items.len(),
        data.interaction_count()
    );
    Ok(())
}

fn corpus_stage(ctx: &Ctx, name: &'static str) -> Stage<'static> {
    Stage {
        name,
        manifest: CORPUS_MANIFEST.into(),
        config_hash: ctx.corpus_hash(),
        inputs: vec![],
        outputs: vec![SEQUENCES.into(), ITEMS.into(), TRUTH.into()],
    }
}

pub fn synth(ctx: &Ctx) -> CliResult<bool> {
    if ctx.uses_files() {
        return Err(CliError::Config(vec![
            "synth writes a synthetic corpus but paths.reviews is set; use `ingest` or remove the paths".into(),
        ]));
    }
    corpus_stage(ctx, "synth").run(ctx.wd, ctx.force, || write_corpus(ctx, &synthesize(&ctx.cfg.synth, ctx.cfg.seed)?))
}

pub fn ingest_files(ctx: &Ctx) -> CliResult<bool> {
    let (Some(reviews), Some(metadata)) = (&ctx.cfg.paths.reviews, &ctx.cfg.paths.metadata) else {
        return Err(CliError::Config(vec![
            "ingest needs paths.reviews and paths.metadata; use `synth` for the synthetic corpus".into(),
        ]));
    };
    // The source files are outside the workdir; their content is part of the config.
    let mut stage = corpus_stage(ctx, "ingest");
    stage.config_hash = hash_json(&(
        &stage.config_hash,
        crate::workdir::file_hash(reviews)?,
        crate::workdir::file_hash(metadata)?,
    ));
    stage.run(ctx.wd, ctx.force, || write_corpus(ctx, &ingest(reviews, metadata, ctx.cfg.corpus.k_core)?))
}

/// `synth` or `ingest`, whichever the configuration calls for.
pub fn corpus(ctx: &Ctx) -> CliResult<bool> {
    if ctx.uses_files() {
        ingest_files(ctx)
    } else {
        synth(ctx)
    }
}

pub fn mine_stage(ctx: &Ctx) -> CliResult<bool> {
    ctx.require_corpus()?;
    let stage = Stage {
        name: "mine",
        manifest: INTERESTS_MANIFEST.into(),
        config_hash: ctx.mine_hash(),
        inputs: vec![ITEMS.into()],
        outputs: vec![INTERESTS.into()],
    };
    stage.run(ctx.wd, ctx.force, || {
        let items: Vec<ItemMeta> = read_jsonl(&ctx.wd.path(ITEMS))?;
        let clients = build_clients(ctx.cfg, ctx.mode)?;
        let embedder = build_embedder(ctx.cfg, ctx.mode)?;
        let interests = mine(ctx.cfg, &clients, &items, embedder.as_ref())?;
        let labelled: usize = interests.iter().map(|a| a.interests.len()).sum();
        log::info!("mined {labelled} interests for {} items", interests.len());
        write_jsonl(&ctx.wd.path(INTERESTS), &interests)?;
        Ok(())
    })
}

pub fn embed_stage(ctx: &Ctx) -> CliResult<bool> {
    ctx.require_corpus()?;
    ctx.require_interests()?;
    let stage = Stage {
        name: "embed",
        manifest: EMBED_MANIFEST.into(),
        config_hash: ctx.embed_hash(),
        inputs: vec![ITEMS.into(), INTERESTS.into()],
        outputs: vec![DEEP.into(), SHALLOW.into()],
    };
    stage.run(ctx.wd, ctx.force, || {
        let items: Vec<ItemMeta> = read_jsonl(&ctx.wd.path(ITEMS))?;
        let interests = ctx.read_interests()?;
        let embedder = build_embedder(ctx.cfg, ctx.mode)?;
        let e = embed_items(embedder.as_ref(), &items, &interests)?;
        for (rel, map) in [(DEEP, &e.deep), (SHALLOW, &e.shallow)] {
            let recs: Vec<EmbeddingRecord> = map
                .iter()
                .map(|(item, v)| EmbeddingRecord {
                    item: item.clone(),
                    embedding: v.clone(),
                })
                .collect();
            write_jsonl(&ctx.wd.path(rel), &recs)?;
        }
        Ok(())
    })
}

pub fn tokenize_stage(ctx: &Ctx) -> CliResult<bool> {
    ctx.require_embeddings()?;
    let sources = [SidSource::Deep, SidSource::Shallow];
    let stage = Stage {
        name: "tokenize",
        manifest: CODEBOOKS_MANIFEST.into(),
        config_hash: ctx.tokenize_hash(),
        inputs: vec![DEEP.into(), SHALLOW.into()],
        outputs: sources.iter().flat_map(|&s| [codebooks_path(s), sids_path(s)]).collect(),
    };
    stage.run(ctx.wd, ctx.force, || {
        for s in sources {
            let emb = ctx.read_embeddings(if s == SidSource::Deep { DEEP } else { SHALLOW })?;
            let tok = tokenize(ctx.cfg, &emb)?;
            log::info!(
                "{} SIDs: {} items, {} disambiguators needed",
                s.name(),
                tok.table.len(),
                tok.table.disambiguator_count()
            );
            write_json(&ctx.wd.path(&codebooks_path(s)), &tok.codebooks)?;
            write_jsonl(&ctx.wd.path(&sids_path(s)), &tok.table.records())?;
        }
        Ok(())
    })
}

pub fn sft(ctx: &Ctx, source: SidSource) -> CliResult<bool> {
    ctx.require_corpus()?;
    ctx.require_codebooks()?;
    let ckpt = sft_ckpt(source);
    let curve = format!("checkpoints/sft_{}.loss.jsonl", source.name());
    let config_hash = ctx.sft_hash(source);
    let stage = Stage {
        name: "sft",
        manifest: sft_manifest(source),
        config_hash: config_hash.clone(),
        inputs: vec![SEQUENCES.into(), sids_path(source), codebooks_path(source)],
        outputs: vec![ckpt.clone(), curve.clone()],
    };
    stage.run(ctx.wd, ctx.force, || {
        let split = ctx.read_split()?;
        let tok = ctx.read_tokenized(source)?;
        let out = sft_stage(ctx.cfg, &tok, &split)?;
        write_jsonl::<LossPoint>(&ctx.wd.path(&curve), &out.curve)?;
        save_checkpoint(&ctx.wd.path(&ckpt), &out.model, out.curve.len() as u64, &config_hash)?;
        Ok(())
    })
}

/// GRPO fine-tuning of the arm's SFT checkpoint. `sft_only` has no RL stage.
pub fn rl(ctx: &Ctx, arm: Arm) -> CliResult<bool> {
    let source = arm.sid_source();
    // The SFT checkpoint is the direct prerequisite; check it first so the
    // error names `sft` even when nothing else has been produced either.
    require(ctx.wd, &sft_manifest(source), "sft", &ctx.sft_hash(source), ctx.force)?;
    ctx.require_corpus()?;
    ctx.require_codebooks()?;
    if !arm.runs_rl() {
        log::info!("arm {} has no RL stage", arm.name());
        return Ok(false);
    }
    let mut inputs = vec![sft_ckpt(source), SEQUENCES.to_string(), sids_path(source)];
    if arm.uses_interests() {
        ctx.require_interests()?;
        inputs.push(INTERESTS.into());
    }
    let ckpt = rl_ckpt(arm);
    let log_path = format!("checkpoints/rl_{}.rewards.json", arm.name());
    let config_hash = ctx.rl_hash(arm);
    let stage = Stage {
        name: "rl",
        manifest: rl_manifest(arm),
        config_hash: config_hash.clone(),
        inputs,
        outputs: vec![ckpt.clone(), log_path.clone()],
    };
    stage.run(ctx.wd, ctx.force, || {
        let split = ctx.read_split()?;
        let tok = ctx.read_tokenized(source)?;
        let model = ctx.read_model(&sft_ckpt(source), &tok, "sft")?;
        let labels = ctx.labels_for(arm)?;
        let out = rl_stage(ctx.cfg, &tok, &split, &model, &labels, arm.reward(ctx.cfg.rl.grpo.reward))?;
        let log = RewardLog {
            epoch_rewards: out.epoch_rewards.clone(),
            reward_values: out.reward_values.clone(),
            steps: out.steps,
            curve: out.curve.clone(),
        };
        write_json(&ctx.wd.path(&log_path), &log)?;
        save_checkpoint(&ctx.wd.path(&ckpt), &out.policy, out.steps as u64, &config_hash)?;
        Ok(())
    })
}

/// Test-split metrics for an arm's final model.
pub fn eval(ctx: &Ctx, arm: Arm) -> CliResult<MetricsReport> {
    let source = arm.sid_source();
    let (model_path, producer) = if arm.runs_rl() {
        require(ctx.wd, &rl_manifest(arm), "rl", &ctx.rl_hash(arm), ctx.force)?;
        (rl_ckpt(arm), "rl")
    } else {
        require(ctx.wd, &sft_manifest(source), "sft", &ctx.sft_hash(source), ctx.force)?;
        (sft_ckpt(source), "sft")
    };
    ctx.require_corpus()?;
    ctx.require_codebooks()?;
    let mut inputs = vec![model_path.clone(), SEQUENCES.to_string(), sids_path(source)];
    if arm.uses_interests() {
        ctx.require_interests()?;
        ctx.require_embeddings()?;
        inputs.extend([INTERESTS.to_string(), SHALLOW.to_string()]);
    }
    let out = metrics_path(arm);
    let stage = Stage {
        name: "eval",
        manifest: format!("reports/metrics_{}.manifest.json", arm.name()),
        config_hash: ctx.eval_hash(arm),
        inputs,
        outputs: vec![out.clone()],
    };
    stage.run(ctx.wd, ctx.force, || {
        let split = ctx.read_split()?;
        let tok = ctx.read_tokenized(source)?;
        let model = ctx.read_model(&model_path, &tok, producer)?;
        let mut report = igr_core::eval::evaluate(&model, &split.test, &tok.table, &tok.trie, &ctx.cfg.eval)?;
        report.arm = arm.name().into();
        report.dataset = ctx.cfg.dataset.clone();
        report.seed = ctx.cfg.seed;
        report.config_hash = ctx.cfg.hash();
        if arm.uses_interests() {
            let interests = ctx.read_interests()?;
            let embeddings = ItemEmbeddings {
                deep: BTreeMap::new(),
                shallow: ctx.read_embeddings(SHALLOW)?,
            };
            let embedder = build_embedder(ctx.cfg, ctx.mode)?;
            report.iq = test_interest_quality(&split, &interests, &embeddings, embedder.as_ref()).ok();
        }
        write_json(&ctx.wd.path(&out), &report)?;
        Ok(())
    })?;
    Ok(read_json(&ctx.wd.path(&out))?)
}

/// SFT, RL and evaluation for one arm, reusing whatever is up to date.
pub fn run_arm(ctx: &Ctx, arm: Arm) -> CliResult<MetricsReport> {
    sft(ctx, arm.sid_source())?;
    rl(ctx, arm)?;
    eval(ctx, arm)
}

pub fn ablate(ctx: &Ctx, arms: &[Arm]) -> CliResult<Vec<MetricsReport>> {
    let reports = arms.iter().map(|&a| run_arm(ctx, a)).collect::<CliResult<Vec<_>>>()?;
    write_json(&ctx.wd.path("reports/ablation.json"), &reports)?;
    println!("{}", format_table(&reports));
    Ok(reports)
}

/// Zero-shot evaluation of an arm's model on a second synthetic corpus,
/// quantized with this workdir's codebooks.
pub fn transfer(ctx: &Ctx, arm: Arm) -> CliResult<MetricsReport> {
    let source = arm.sid_source();
    let model_path = if arm.runs_rl() {
        require(ctx.wd, &rl_manifest(arm), "rl", &ctx.rl_hash(arm), ctx.force)?;
        rl_ckpt(arm)
    } else {
        require(ctx.wd, &sft_manifest(source), "sft", &ctx.sft_hash(source), ctx.force)?;
        sft_ckpt(source)
    };
    ctx.require_codebooks()?;
    let target_cfg = ctx.cfg.transfer.clone().unwrap_or_else(|| igr_core::corpus::SynthConfig {
        item_offset: ctx.cfg.synth.items,
        ..ctx.cfg.synth.clone()
    });
    let target_seed = ctx.cfg.seed.wrapping_add(1);
    let out = "reports/transfer.json".to_string();
    let stage = Stage {
        name: "transfer",
        manifest: "reports/transfer.manifest.json".into(),
        config_hash: hash_json(&(
            "transfer",
            arm,
            &target_cfg,
            target_seed,
            ctx.mine_hash(),
            ctx.embed_hash(),
            &ctx.cfg.eval,
        )),
        inputs: vec![model_path.clone(), codebooks_path(source), sids_path(source)],
        outputs: vec![out.clone()],
    };
    stage.run(ctx.wd, ctx.force, || {
        let tok = ctx.read_tokenized(source)?;
        let model = ctx.read_model(&model_path, &tok, if arm.runs_rl() { "rl" } else { "sft" })?;
        let data = synthesize(&target_cfg, target_seed)?;
        let split = leave_last_out_split(&data.sequences)?;
        let clients = build_clients(ctx.cfg, ctx.mode)?;
        let embedder = build_embedder(ctx.cfg, ctx.mode)?;
        let emb = match source {
            SidSource::Deep => {
                let interests = mine(ctx.cfg, &clients, &data.items, embedder.as_ref())?;
                embed_items(embedder.as_ref(), &data.items, &interests)?.deep
            }
            SidSource::Shallow => embed_items(embedder.as_ref(), &data.items, &[])?.shallow,
        };
        let mut report = transfer_eval(&tok.codebooks, &model, &emb, &split.test, &ctx.cfg.eval)?;
        report.arm = arm.name().into();
        report.dataset = "transfer".into();
        report.seed = ctx.cfg.seed;
        report.config_hash = ctx.cfg.hash();
        write_json(&ctx.wd.path(&out), &report)?;
        Ok(())
    })?;
    Ok(read_json(&ctx.wd.path(&out))?)
}

/// Every stage in order for one arm.
pub fn all(ctx: &Ctx, arm: Arm) -> CliResult<MetricsReport> {
    corpus(ctx)?;
    mine_stage(ctx)?;
    embed_stage(ctx)?;
    tokenize_stage(ctx)?;
    run_arm(ctx, arm)
}
