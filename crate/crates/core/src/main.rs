use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use plab::corpus::{load_questions, write_csv_dir, write_jsonl as write_corpus_jsonl, QuestionRecord};
use plab::experiment::{
    evaluate_flags, flags_by_question, metric_records_to_csv, partition_subsets, read_jsonl,
    run_attention_after_patching, run_attention_profiles, run_patching_sweep, run_persona_eval, sample_per_subject,
    summarize_sweep, write_json, write_jsonl, EvalConfig, EvalRecord, Harness, MetricRecord, PairPartition,
    PatchedAttentionRecord, ProbVariant, ProfileConfig, SweepConfig, Target, SCHEMA_VERSION,
};
use plab::figures::{attention_bars, head_grids, identity_bars, layer_heatmaps, write_figures, FigureKind};
use plab::lens::{Aggregation, HeadId, VwWeighting};
use plab::metrics::TestKind;
use plab::model::toy::ToySpec;
use plab::model::{load_model, save_model};
use plab::patch::PositionScope;
use plab::prompt::{IdentityPair, IdentityRegistry, Template};
use plab::tokenizer::{BpeTokenizer, Tokenizer, WordTokenizer};
use plab::{fixtures, Error, Model32, Result};

#[derive(Parser)]
#[command(name = "plab", version, about = "Persona activation-patching workbench")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Model container; a seeded toy model is generated when absent.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// tokenizer.json for models without an embedded vocabulary.
    #[arg(long, global = true)]
    tokenizer: Option<PathBuf>,
    /// Question file (JSONL or CSV) or directory of CSVs.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// JSON list of {surface, category}; the bundled list when absent.
    #[arg(long, global = true)]
    identities: Option<PathBuf>,
    /// JSON list of {id1, id2}.
    #[arg(long, global = true)]
    pairs: Option<PathBuf>,
    /// Prompt template with {helper}, {identity_1}, {identity_2}, {question}, {option_A}..{option_D}.
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded toy model to <out>/model.plab.
    MakeToyModel {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        kv_heads: usize,
        #[arg(long, default_value_t = 128)]
        d_ff: usize,
    },
    /// Unpatched evaluation of every identity on every question.
    Eval {
        /// Welch's test instead of the paired test.
        #[arg(long)]
        welch: bool,
        /// Renormalize answer probabilities over the four options.
        #[arg(long)]
        renormalized: bool,
    },
    /// Split questions into S1..S4 for each pair, from <out>/eval.jsonl.
    Partition {
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Patch clean activations into corrupt runs, per target and question.
    PatchSweep {
        /// ID1:ID2; repeatable. Defaults to every configured pair.
        #[arg(long = "pair", id = "pair", value_name = "ID1:ID2")]
        pairs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "mlp_layers,mha_layers")]
        targets: Vec<String>,
        /// Also record direct effects.
        #[arg(long)]
        direct: bool,
        #[arg(long, default_value = "s3")]
        subset: String,
    },
    /// Value-weighted attention to the identity token and head categories.
    AttnProfile {
        #[arg(long, default_value_t = 5)]
        per_subject: usize,
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        #[arg(long, value_enum, default_value_t = AggArg::Majority)]
        aggregation: AggArg,
        /// Weight by the output-projected value norm.
        #[arg(long)]
        projected: bool,
    },
    /// Attention at the identity position after patching each MLP layer.
    AttnPatched {
        #[arg(long = "pair", id = "pair", value_name = "ID1:ID2")]
        pairs: Vec<String>,
        #[arg(long, default_value = "s3")]
        subset: String,
        /// Patch only the differing (identity) positions.
        #[arg(long)]
        identity_only: bool,
        /// Restrict to these heads, e.g. H1^0.
        #[arg(long, value_delimiter = ',')]
        heads: Vec<String>,
        #[arg(long)]
        projected: bool,
    },
    /// Render SVG figures from result records.
    Figures {
        #[arg(long)]
        kind: String,
        /// Records file; defaults to the matching file in <out>.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Convert a corpus between CSV and JSONL. A `.jsonl` target writes
    /// JSONL; anything else is a directory of `<subject>_test.csv` files.
    ConvertCorpus {
        #[arg(long)]
        to: PathBuf,
    },
    /// Flatten sweep records to CSV.
    ExportCsv {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        to: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Majority,
    Mean,
}

/// Inputs shared by the experiment verbs.
struct Inputs {
    corpus: Vec<QuestionRecord>,
    template: Template,
    identities: IdentityRegistry,
    pairs: Vec<IdentityPair>,
    model: Model32,
    tokenizer: Box<dyn Tokenizer>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_texts(g: &Global) -> Result<(Vec<QuestionRecord>, Template, IdentityRegistry)> {
    let corpus = match &g.corpus {
        Some(p) => load_questions(p)?,
        None => fixtures::corpus(),
    };
    let template = match &g.template {
        Some(p) => Template::load(p)?,
        None => fixtures::template(),
    };
    let identities = IdentityRegistry::parse_unchecked(&match &g.identities {
        Some(p) => read(p)?,
        None => fixtures::IDENTITIES.to_string(),
    })?;
    Ok((corpus, template, identities))
}

fn load_pairs(g: &Global) -> Result<Vec<IdentityPair>> {
    IdentityPair::parse_list(&match &g.pairs {
        Some(p) => read(p)?,
        None => fixtures::PAIRS.to_string(),
    })
}

fn load_inputs(g: &Global) -> Result<Inputs> {
    let (corpus, template, identities) = load_texts(g)?;
    let pairs = load_pairs(g)?;
    let (model, tokenizer): (Model32, Box<dyn Tokenizer>) = match &g.model {
        Some(path) => {
            let model = load_model(path)?;
            let tok: Box<dyn Tokenizer> = match (&g.tokenizer, model.vocab()) {
                (Some(t), _) => Box::new(BpeTokenizer::from_file(t)?),
                (None, Some(v)) => Box::new(WordTokenizer::from_vocab(v.to_vec())?),
                (None, None) => {
                    return Err(Error::Usage("model has no vocabulary; pass --tokenizer".into()));
                }
            };
            (model, tok)
        }
        None => {
            let tok = fixtures::build_word_tokenizer(&corpus, &identities, &template);
            let vocab = tok.vocab().to_vec();
            let model = ToySpec::standard(g.seed, vocab.len()).build(Some(vocab))?;
            (model, Box::new(tok))
        }
    };
    for id in identities.all() {
        id.check_single_token(tokenizer.as_ref())?;
    }
    Ok(Inputs { corpus, template, identities, pairs, model, tokenizer })
}

fn parse_pairs(raw: &[String], default: &[IdentityPair]) -> Result<Vec<IdentityPair>> {
    if raw.is_empty() {
        return Ok(default.to_vec());
    }
    raw.iter()
        .map(|s| {
            s.split_once(':')
                .map(|(a, b)| IdentityPair::new(a, b))
                .ok_or_else(|| Error::Usage(format!("bad pair `{s}`, expected ID1:ID2")))
        })
        .collect()
}

/// Questions of the named subset for one pair.
fn subset(h: &Harness<'_, f32>, inputs: &Inputs, pair: &IdentityPair, name: &str) -> Result<Vec<QuestionRecord>> {
    if name == "all" {
        return Ok(inputs.corpus.clone());
    }
    let id1 = inputs.identities.get(&pair.id1)?;
    let id2 = inputs.identities.get(&pair.id2)?;
    let p = partition_subsets(&evaluate_flags(h, id1, &inputs.corpus)?, &evaluate_flags(h, id2, &inputs.corpus)?)?;
    let keep = p.get(name)?;
    Ok(inputs.corpus.iter().filter(|q| keep.contains(&q.id)).cloned().collect())
}

enum Outcome {
    Done,
    Empty,
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = &cli.global;
    match cli.command {
        Command::MakeToyModel { layers, d_model, heads, kv_heads, d_ff } => {
            let (corpus, template, identities) = load_texts(g)?;
            let tok = fixtures::build_word_tokenizer(&corpus, &identities, &template);
            let mut spec = ToySpec::standard(g.seed, tok.vocab().len());
            spec.n_layers = layers;
            spec.d_model = d_model;
            spec.n_heads = heads;
            spec.n_kv_heads = kv_heads;
            spec.d_ff = d_ff;
            let model = spec.build(Some(tok.vocab().to_vec()))?;
            std::fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
            let path = g.out.join("model.plab");
            save_model(&model, &path)?;
            info!("wrote {} ({})", path.display(), model.fingerprint());
        }
        Command::Eval { welch, renormalized } => {
            let inputs = load_inputs(g)?;
            let h = Harness::new(&inputs.model, inputs.tokenizer.as_ref(), &inputs.template)?;
            let config = EvalConfig {
                test: if welch { TestKind::Welch } else { TestKind::Paired },
                prob: if renormalized { ProbVariant::Renormalized } else { ProbVariant::FullVocab },
                ..EvalConfig::default()
            };
            let out = run_persona_eval(&h, &inputs.corpus, &inputs.identities, &config)?;
            write_jsonl(&g.out.join("eval.jsonl"), &out.records)?;
            write_json(&g.out.join("eval_summary.json"), &out.summary)?;
            info!("evaluated {} records", out.records.len());
        }
        Command::Partition { eval } => {
            let records: Vec<EvalRecord> = read_jsonl(&eval.unwrap_or_else(|| g.out.join("eval.jsonl")))?;
            let parts = load_pairs(g)?
                .iter()
                .map(|p| {
                    Ok(PairPartition {
                        schema_version: SCHEMA_VERSION,
                        id1: p.id1.clone(),
                        id2: p.id2.clone(),
                        subsets: partition_subsets(
                            &flags_by_question(&records, &p.id1),
                            &flags_by_question(&records, &p.id2),
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_json(&g.out.join("partitions.json"), &parts)?;
        }
        Command::PatchSweep { pairs, targets, direct, subset: which } => {
            let inputs = load_inputs(g)?;
            let h = Harness::new(&inputs.model, inputs.tokenizer.as_ref(), &inputs.template)?;
            let targets = targets.iter().map(|t| t.parse()).collect::<Result<Vec<Target>>>()?;
            let config = SweepConfig { targets, direct };
            let path = g.out.join("sweep.jsonl");
            let mut records: Vec<MetricRecord> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
            let mut total_questions = 0;
            for pair in parse_pairs(&pairs, &inputs.pairs)? {
                let questions = subset(&h, &inputs, &pair, &which)?;
                total_questions += questions.len();
                if questions.is_empty() {
                    warn!("{} is empty for {}", which, pair.label());
                    continue;
                }
                let id1 = inputs.identities.get(&pair.id1)?;
                let id2 = inputs.identities.get(&pair.id2)?;
                let out = run_patching_sweep(&h, id1, id2, &questions, &config, records)?;
                info!("{}: {} cells computed, {} reused", pair.label(), out.computed, out.skipped);
                records = out.records;
            }
            write_jsonl(&path, &records)?;
            write_json(&g.out.join("summary.json"), &summarize_sweep(&records))?;
            if total_questions == 0 {
                warn!("no questions to patch; outputs are empty");
                return Ok(Outcome::Empty);
            }
        }
        Command::AttnProfile { per_subject, margin, aggregation, projected } => {
            let inputs = load_inputs(g)?;
            let h = Harness::new(&inputs.model, inputs.tokenizer.as_ref(), &inputs.template)?;
            let config = ProfileConfig {
                margin,
                aggregation: match aggregation {
                    AggArg::Majority => Aggregation::Majority,
                    AggArg::Mean => Aggregation::Mean,
                },
                weighting: weighting(projected),
                heads: None,
            };
            let sample = sample_per_subject(&inputs.corpus, per_subject);
            let out = run_attention_profiles(&h, &sample, &inputs.identities, &config)?;
            write_jsonl(&g.out.join("profiles.jsonl"), &out.profiles)?;
            let cats: BTreeMap<String, Vec<&str>> =
                out.categories.iter().map(|(h, c)| (h.to_string(), c.iter().map(|c| c.name()).collect())).collect();
            write_json(
                &g.out.join("head_categories.json"),
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "config": config,
                    "questions": sample.len(),
                    "categories": cats,
                }),
            )?;
        }
        Command::AttnPatched { pairs, subset: which, identity_only, heads, projected } => {
            let inputs = load_inputs(g)?;
            let h = Harness::new(&inputs.model, inputs.tokenizer.as_ref(), &inputs.template)?;
            let heads = heads.iter().map(|s| s.parse()).collect::<Result<Vec<HeadId>>>()?;
            let positions = if identity_only { PositionScope::IdentityOnly } else { PositionScope::All };
            let mut records: Vec<PatchedAttentionRecord> = Vec::new();
            for pair in parse_pairs(&pairs, &inputs.pairs)? {
                let questions = subset(&h, &inputs, &pair, &which)?;
                let id1 = inputs.identities.get(&pair.id1)?;
                let id2 = inputs.identities.get(&pair.id2)?;
                records.extend(run_attention_after_patching(
                    &h,
                    id1,
                    id2,
                    &questions,
                    positions.clone(),
                    (!heads.is_empty()).then_some(heads.as_slice()),
                    weighting(projected),
                )?);
            }
            write_jsonl(&g.out.join("attn_patched.jsonl"), &records)?;
            if records.is_empty() {
                warn!("no attention records produced");
                return Ok(Outcome::Empty);
            }
        }
        Command::Figures { kind, input } => {
            let kind: FigureKind = kind.parse()?;
            let default = match kind {
                FigureKind::LayerHeatmap | FigureKind::HeadGrid => "sweep.jsonl",
                FigureKind::IdentityBars => "eval.jsonl",
                FigureKind::AttentionBars => "attn_patched.jsonl",
            };
            let input = input.unwrap_or_else(|| g.out.join(default));
            let figs = match kind {
                FigureKind::LayerHeatmap => layer_heatmaps(&read_jsonl(&input)?),
                FigureKind::HeadGrid => head_grids(&read_jsonl(&input)?),
                FigureKind::IdentityBars => identity_bars(&read_jsonl(&input)?, plab::prompt::BASE_SURFACE),
                FigureKind::AttentionBars => attention_bars(&read_jsonl(&input)?),
            };
            for p in write_figures(&figs, &g.out.join("figures"))? {
                info!("wrote {}", p.display());
            }
        }
        Command::ConvertCorpus { to } => {
            let src = g.corpus.as_ref().ok_or_else(|| Error::Usage("convert-corpus needs --corpus".into()))?;
            let records = load_questions(src)?;
            if to.extension().is_some_and(|e| e == "jsonl") {
                write_corpus_jsonl(&records, &to)?;
            } else {
                write_csv_dir(&records, &to)?;
            }
        }
        Command::ExportCsv { input, to } => {
            let records: Vec<MetricRecord> = read_jsonl(&input.unwrap_or_else(|| g.out.join("sweep.jsonl")))?;
            metric_records_to_csv(&records, &to)?;
        }
    }
    Ok(Outcome::Done)
}

fn weighting(projected: bool) -> VwWeighting {
    if projected {
        VwWeighting::ProjectedNorm
    } else {
        VwWeighting::ValueNorm
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Empty) => ExitCode::from(5),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
