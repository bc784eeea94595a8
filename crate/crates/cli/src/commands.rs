use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Subcommand, ValueEnum};
use rahp_core::clustering::{build_super_map, PrePartition, SuperEntityMap};
use rahp_core::corpus::{infer_corpus, load_predictions, read_json, write_json, ProposalFile, ScoresFile};
use rahp_core::embedding::{load_embeddings, save_embeddings, EmbeddingFormat, EmbeddingMatrix};
use rahp_core::eval::{evaluate_corpus, sweep as run_sweep, EvalOptions, EvalReport, GroundTruthFile, Protocol, ScorerOverride};
use rahp_core::gradcheck::{run_all, GradCheckParams};
use rahp_core::inference::InferOptions;
use rahp_core::miner::{
    mine_region_descriptions, mine_super_names, HttpTransport, MiningRequest, MiningSource, ENDPOINT_ENV,
};
use rahp_core::prompts::{all_prompt_strings, index_hierarchy, PromptHierarchy, RegionDescriptionSet, RegionKey, Vocabulary};
use rahp_core::scorer::{score_batch, ProposalBatch};
use rahp_core::synth::{entity_embeddings, synthetic_corpus, synthetic_regions, CorpusParams, HashEncoder};
use rahp_core::{presets, EngineConfig};

use crate::{parse_k, protocol_parser, Failure};

type Outcome = Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> Outcome {
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => write_text(path, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_matrix(path: &Path) -> Result<EmbeddingMatrix, Failure> {
    Ok(load_embeddings(path, EmbeddingFormat::from_path(path))?)
}

fn save_matrix(m: &EmbeddingMatrix, path: &Path) -> Outcome {
    Ok(save_embeddings(m, path, EmbeddingFormat::from_path(path))?)
}

fn load_regions(path: Option<&Path>) -> Result<RegionDescriptionSet, Failure> {
    Ok(match path {
        Some(p) => RegionDescriptionSet::load(p)?,
        None => RegionDescriptionSet::default(),
    })
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NamePreset {
    Vg,
    Oiv6,
}

#[derive(Args)]
pub struct ClusterArgs {
    /// Entity embeddings, one row per entity labeled with its name.
    #[arg(long)]
    entities: PathBuf,
    /// JSON array of super-entity names in cluster order.
    #[arg(long, conflicts_with = "preset")]
    names: Option<PathBuf>,
    /// Built-in super-entity names.
    #[arg(long, value_enum)]
    preset: Option<NamePreset>,
    /// JSON `{"groups": [[...], ...]}`; clustering runs inside each group.
    #[arg(long)]
    pre_partition: Option<PathBuf>,
    /// Vocabulary whose entities must all be assigned.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn cluster(a: ClusterArgs, cfg: &EngineConfig) -> Outcome {
    let emb = load_matrix(&a.entities)?;
    let names: Vec<String> = match (&a.names, a.preset) {
        (Some(path), _) => read_json(path)?,
        (None, Some(NamePreset::Vg)) => presets::VG_SUPER_ENTITIES.iter().map(|s| s.to_string()).collect(),
        (None, Some(NamePreset::Oiv6)) => presets::OIV6_SUPER_ENTITIES.iter().map(|s| s.to_string()).collect(),
        (None, None) => (0..cfg.num_super).map(|i| format!("group {i}")).collect(),
    };
    let pp = a.pre_partition.as_deref().map(PrePartition::load).transpose()?;
    let map = build_super_map(&emb, cfg.num_super, &names, pp.as_ref(), cfg.seed, &cfg.kmeans())?;
    if let Some(v) = &a.vocab {
        map.covers(&Vocabulary::load(v)?.entities)?;
    }
    write_text(&a.out, &map.to_json())
}

#[derive(Args)]
pub struct PromptsArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
    /// JSON array of distinct prompt strings, entity prompts first.
    #[arg(long)]
    out: PathBuf,
}

pub fn prompts(a: PromptsArgs) -> Outcome {
    let vocab = Vocabulary::load(&a.vocab)?;
    let map = SuperEntityMap::load(&a.map)?;
    let regions = load_regions(a.regions.as_deref())?;
    regions.validate(&vocab, &map)?;
    Ok(write_json(&a.out, &all_prompt_strings(&vocab, &map, &regions))?)
}

#[derive(Args)]
pub struct MineArgs {
    #[command(subcommand)]
    what: MineWhat,
    /// Answer from fixture files in this directory; no network.
    #[arg(long, global = true, conflicts_with = "endpoint")]
    fixtures: Option<PathBuf>,
    /// LLM endpoint; defaults to $RAHP_LLM_ENDPOINT.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Where raw responses are archived and replayed from.
    #[arg(long, global = true)]
    archive: Option<PathBuf>,
    /// Per-request timeout in seconds.
    #[arg(long, global = true, default_value_t = 120)]
    timeout: u64,
}

#[derive(Subcommand)]
pub enum MineWhat {
    /// Region descriptions per (super, predicate, super) triplet.
    Regions {
        /// JSON array of `subject|predicate|object` strings.
        #[arg(long, conflicts_with_all = ["vocab", "map"])]
        triplets: Option<PathBuf>,
        /// With --map, mine every triplet of the hierarchy.
        #[arg(long, requires = "map")]
        vocab: Option<PathBuf>,
        #[arg(long, requires = "vocab")]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One name per cluster of a super-entity map.
    SuperNames {
        #[arg(long)]
        map: PathBuf,
        /// JSON `{"names": [...], "warnings": [...]}`.
        #[arg(long)]
        out: PathBuf,
        /// Copy of the map with the mined names.
        #[arg(long)]
        out_map: Option<PathBuf>,
    },
}

fn mining_source(a: &MineArgs) -> Result<MiningSource, Failure> {
    if let Some(dir) = &a.fixtures {
        return Ok(MiningSource::Fixtures(dir.clone()));
    }
    let endpoint = a
        .endpoint
        .clone()
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()))
        .ok_or_else(|| Failure::Usage(format!("pass --fixtures or --endpoint, or set {ENDPOINT_ENV}")))?;
    let archive_dir = a
        .archive
        .clone()
        .ok_or_else(|| Failure::Usage("online mining needs --archive".into()))?;
    Ok(MiningSource::Online { endpoint, archive_dir })
}

pub fn mine(a: MineArgs) -> Outcome {
    let source = mining_source(&a)?;
    let transport = HttpTransport::new(Duration::from_secs(a.timeout));
    match a.what {
        MineWhat::Regions { triplets, vocab, map, out } => {
            let keys: Vec<RegionKey> = match (triplets, vocab, map) {
                (Some(path), _, _) => {
                    let raw: Vec<String> = read_json(&path)?;
                    raw.iter()
                        .map(|s| RegionKey::parse(s).ok_or_else(|| Failure::Usage(format!("bad triplet {s:?}"))))
                        .collect::<Result<_, _>>()?
                }
                (None, Some(v), Some(m)) => {
                    let vocab = Vocabulary::load(&v)?;
                    let map = SuperEntityMap::load(&m)?;
                    let mut keys = Vec::new();
                    for s in &map.super_names {
                        for p in vocab.predicate_names() {
                            for o in &map.super_names {
                                keys.push(RegionKey::new(s.clone(), p.clone(), o.clone()));
                            }
                        }
                    }
                    keys
                }
                _ => return Err(Failure::Usage("pass --triplets, or --vocab with --map".into())),
            };
            let mut set = RegionDescriptionSet::default();
            for key in keys {
                let req = MiningRequest::region_descriptions(key, source.clone());
                set.merge(mine_region_descriptions(&req, &transport)?);
            }
            write_text(&out, &set.to_json())
        }
        MineWhat::SuperNames { map, out, out_map } => {
            let smap = SuperEntityMap::load(&map)?;
            let clusters: Vec<Vec<String>> = (0..smap.num_super())
                .map(|i| smap.members(i).into_iter().map(String::from).collect())
                .collect();
            let mined = mine_super_names(&MiningRequest::super_names(clusters, source), &transport)?;
            let body = serde_json::json!({ "names": mined.names, "warnings": mined.warnings });
            write_json(&out, &body)?;
            if let Some(path) = out_map {
                let renamed = SuperEntityMap {
                    super_names: mined.names,
                    assignment: smap.assignment,
                    centroids: Vec::new(),
                };
                renamed.validate()?;
                write_text(&path, &renamed.to_json())?;
            }
            Ok(())
        }
    }
}

#[derive(Args)]
pub struct ScoreInputs {
    #[arg(long)]
    proposals: PathBuf,
    /// Relation features, one row per `feature_row`.
    #[arg(long)]
    relation: PathBuf,
    /// Union-region features, row-aligned with --relation.
    #[arg(long)]
    union: PathBuf,
    /// Text embeddings labeled with their prompt strings.
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
}

struct Scoring {
    proposals: ProposalFile,
    batch: ProposalBatch,
    hier: PromptHierarchy,
    vocab: Vocabulary,
}

fn load_scoring(i: &ScoreInputs) -> Result<Scoring, Failure> {
    let vocab = Vocabulary::load(&i.vocab)?;
    let map = SuperEntityMap::load(&i.map)?;
    let regions = load_regions(i.regions.as_deref())?;
    let text = load_matrix(&i.text)?;
    let hier = index_hierarchy(&vocab, &map, &regions, Arc::new(text))?;
    let proposals: ProposalFile = read_json(&i.proposals)?;
    let batch = proposals.to_batch(load_matrix(&i.relation)?, load_matrix(&i.union)?)?;
    Ok(Scoring { proposals, batch, hier, vocab })
}

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    inputs: ScoreInputs,
    /// Predicate scores grouped by image.
    #[arg(long)]
    out: PathBuf,
    /// Per-proposal record of the pair and prompts behind each score.
    #[arg(long)]
    audit: Option<PathBuf>,
}

pub fn score(a: ScoreArgs, cfg: &EngineConfig) -> Outcome {
    let s = load_scoring(&a.inputs)?;
    let scored = score_batch(&s.batch, &s.hier, &cfg.scorer())?;
    let file = ScoresFile::from_tensor(&s.proposals, &scored.scores, s.vocab.predicate_names());
    write_json(&a.out, &file)?;
    if let Some(path) = &a.audit {
        write_text(path, &scored.to_json(&s.hier))?;
    }
    Ok(())
}

#[derive(Args)]
pub struct GraphFlags {
    /// Keep one predicate per ordered entity pair.
    #[arg(long)]
    graph_constraint: bool,
    /// Drop triplets whose subject and object share a label.
    #[arg(long)]
    drop_same_label: bool,
}

impl GraphFlags {
    fn options(&self, cfg: &EngineConfig) -> InferOptions {
        InferOptions {
            graph_constraint: self.graph_constraint,
            drop_same_label: self.drop_same_label,
            ..cfg.infer_options()
        }
    }
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    flags: GraphFlags,
    /// JSON array of scene graphs.
    #[arg(long)]
    out: PathBuf,
}

pub fn infer(a: InferArgs, cfg: &EngineConfig) -> Outcome {
    let proposals: ProposalFile = read_json(&a.proposals)?;
    let scores: ScoresFile = read_json(&a.scores)?;
    let graphs = infer_corpus(&proposals, &scores, &a.flags.options(cfg))?;
    Ok(write_json(&a.out, &graphs)?)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predicted graphs: a JSON file or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_parser = protocol_parser, default_value = "predcls")]
    protocol: Protocol,
    /// Vocabulary file carrying the base/novel predicate split.
    #[arg(long)]
    splits: PathBuf,
    /// Only the top predicate per entity pair counts.
    #[arg(long)]
    graph_constraint: bool,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs, cfg: &EngineConfig) -> Outcome {
    let vocab = Vocabulary::load(&a.splits)?;
    let gts = GroundTruthFile::load(&a.gt)?.resolve(&vocab)?;
    let preds = load_predictions(&a.pred)?;
    let opts = EvalOptions {
        protocol: a.protocol,
        iou_thresh: cfg.iou_thresh,
        graph_constraint: a.graph_constraint,
    };
    let report = evaluate_corpus(&preds, &gts, &vocab, &opts)?;
    emit(a.out.as_deref(), &report.to_json())
}

#[derive(Args)]
pub struct LossCheckArgs {
    /// Random points per loss.
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn loss_check(a: LossCheckArgs, cfg: &EngineConfig) -> Outcome {
    if a.points == 0 || a.h.is_nan() || a.h <= 0.0 || a.tolerance.is_nan() || a.tolerance <= 0.0 {
        return Err(Failure::Usage("--points, --h and --tolerance must be positive".into()));
    }
    let report = run_all(&GradCheckParams {
        h: a.h,
        points: a.points,
        tolerance: a.tolerance,
        seed: cfg.seed,
        focal_gamma: cfg.focal_gamma,
        focal_balance: cfg.focal_balance,
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    if report.passed() {
        Ok(())
    } else {
        let failing: Vec<&str> = report.losses.iter().filter(|(_, c)| !c.passed).map(|(k, _)| k.as_str()).collect();
        Err(Failure::Other {
            kind: "GradientMismatch",
            message: format!("analytic gradient disagrees for {}", failing.join(", ")),
        })
    }
}

#[derive(Args)]
pub struct SelftestArgs {
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn selftest(a: SelftestArgs) -> Outcome {
    let results = rahp_core::selftest::run_selftest();
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&results).expect("results serialize"))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Other {
            kind: "SelftestFailed",
            message: format!("{failed} of {} checks failed", results.len()),
        })
    }
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    inputs: ScoreInputs,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_parser = protocol_parser, default_value = "predcls")]
    protocol: Protocol,
    /// Comma-separated alpha values; the configured alpha when absent.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Comma-separated k values (`all` allowed); the configured k when absent.
    #[arg(long, value_delimiter = ',', value_parser = parse_k)]
    ks: Vec<usize>,
    #[command(flatten)]
    flags: GraphFlags,
    /// JSON array of reports, one per grid point.
    #[arg(long)]
    out: PathBuf,
}

pub fn sweep(a: SweepArgs, cfg: &EngineConfig) -> Outcome {
    let s = load_scoring(&a.inputs)?;
    let gts = GroundTruthFile::load(&a.gt)?.resolve(&s.vocab)?;
    let alphas: Vec<Option<f64>> = if a.alphas.is_empty() { vec![None] } else { a.alphas.iter().copied().map(Some).collect() };
    let ks: Vec<Option<usize>> = if a.ks.is_empty() { vec![None] } else { a.ks.iter().copied().map(Some).collect() };
    let grid: Vec<ScorerOverride> = alphas
        .iter()
        .flat_map(|&alpha| ks.iter().map(move |&k| ScorerOverride { alpha, k }))
        .collect();
    let infer_opts = a.flags.options(cfg);
    let eval_opts = EvalOptions {
        protocol: a.protocol,
        iou_thresh: cfg.iou_thresh,
        graph_constraint: a.flags.graph_constraint,
    };
    let reports: Vec<EvalReport> = run_sweep(&grid, |o| -> Result<EvalReport, Failure> {
        let mut scorer = cfg.scorer();
        scorer.alpha = o.alpha.unwrap_or(scorer.alpha);
        scorer.k = o.k.unwrap_or(scorer.k);
        let scored = score_batch(&s.batch, &s.hier, &scorer)?;
        let file = ScoresFile::from_tensor(&s.proposals, &scored.scores, s.vocab.predicate_names());
        let graphs = infer_corpus(&s.proposals, &file, &infer_opts)?;
        Ok(evaluate_corpus(&graphs, &gts, &s.vocab, &eval_opts)?)
    })?;
    Ok(write_json(&a.out, &reports)?)
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VocabPreset {
    VgPredcls,
    VgSgdet,
}

#[derive(Subcommand)]
pub enum SynthCommand {
    /// A canned vocabulary and hash-encoded entity embeddings.
    Vocab {
        #[arg(long, value_enum, default_value_t = VocabPreset::VgPredcls)]
        preset: VocabPreset,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        vocab_out: PathBuf,
        #[arg(long)]
        entities_out: PathBuf,
    },
    /// Region descriptions for every triplet of a super-entity map.
    Regions {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hash-encode a JSON array of strings into labeled unit vectors.
    Encode {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Proposals, features and ground truth with planted predicates.
    Corpus {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 12)]
        entities_per_image: usize,
        #[arg(long, default_value_t = 100)]
        proposals_per_image: usize,
        #[arg(long, default_value_t = 10)]
        gt_per_image: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Receives proposals.json, relation.bin, union.bin and gt.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn encoder(dim: usize, seed: u64) -> Result<HashEncoder, Failure> {
    if dim == 0 {
        return Err(Failure::Usage("--dim must be positive".into()));
    }
    Ok(HashEncoder::new(dim, seed))
}

pub fn synth(c: SynthCommand, cfg: &EngineConfig) -> Outcome {
    match c {
        SynthCommand::Vocab { preset, dim, vocab_out, entities_out } => {
            let vocab = match preset {
                VocabPreset::VgPredcls => presets::vg_predcls_vocabulary(),
                VocabPreset::VgSgdet => presets::vg_sgdet_vocabulary(),
            };
            write_text(&vocab_out, &vocab.to_json())?;
            save_matrix(&entity_embeddings(&vocab, &encoder(dim, cfg.seed)?)?, &entities_out)
        }
        SynthCommand::Regions { vocab, map, out } => {
            let vocab = Vocabulary::load(&vocab)?;
            let map = SuperEntityMap::load(&map)?;
            write_text(&out, &synthetic_regions(&map.super_names, &vocab, cfg.seed).to_json())
        }
        SynthCommand::Encode { prompts, dim, out } => {
            let texts: Vec<String> = read_json(&prompts)?;
            save_matrix(&encoder(dim, cfg.seed)?.encode_all(&texts)?, &out)
        }
        SynthCommand::Corpus {
            vocab,
            map,
            regions,
            text,
            images,
            entities_per_image,
            proposals_per_image,
            gt_per_image,
            noise,
            out_dir,
        } => {
            if proposals_per_image > entities_per_image * entities_per_image.saturating_sub(1)
                || gt_per_image > proposals_per_image
                || !(noise >= 0.0 && noise.is_finite())
            {
                return Err(Failure::Usage(
                    "need gt <= proposals <= entities * (entities - 1) and a finite, non-negative noise".into(),
                ));
            }
            let vocab = Vocabulary::load(&vocab)?;
            let map = SuperEntityMap::load(&map)?;
            let regions = load_regions(regions.as_deref())?;
            let hier = index_hierarchy(&vocab, &map, &regions, Arc::new(load_matrix(&text)?))?;
            let params = CorpusParams {
                images,
                entities_per_image,
                proposals_per_image,
                gt_per_image,
                noise,
            };
            let corpus = synthetic_corpus(&hier, &vocab, &params, cfg.seed);
            std::fs::create_dir_all(&out_dir).map_err(|e| Failure::io(&out_dir, e))?;
            write_json(&out_dir.join("proposals.json"), &corpus.proposals)?;
            save_matrix(&corpus.relation, &out_dir.join("relation.bin"))?;
            save_matrix(&corpus.union, &out_dir.join("union.bin"))?;
            write_json(&out_dir.join("gt.json"), &GroundTruthFile::from_scenes(&corpus.ground_truth, &vocab))?;
            Ok(())
        }
    }
}
