//! `dualhead`: corpus generation, training, retrieval, generation and the
//! experiment protocols from one binary.
//!
//! Exit codes: 0 success, 1 protocol failure or runtime error, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualhead_core::harness::{
    ablate, contamination, efficiency_suite, equivalence_suite, eval_retrieval, load_checkpoint, save_checkpoint,
    ExperimentReport, RunConfig, DEFAULT_CONTAMINATION_INPUTS,
};
use dualhead_core::model::{Backbone, ModelInput};
use dualhead_core::tokens::detokenize;
use dualhead_core::training::{train, train_joint, Corpus, EvalSet, TrainMode, TrainReport};
use dualhead_core::{embed, generate, DecodeParams, Index};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dualhead", version, about = "Dual-head toy transformer: multi-vector retrieval and generation on one backbone")]
struct Cli {
    /// Seed for model initialization and experiment sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML run configuration. Defaults to the built-in toy configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path: a file for corpora, indexes and reports, a directory for checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic training corpus.
    GenCorpus {
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train adapters from a freshly initialized model and save a checkpoint.
    Train {
        /// Corpus file; synthesized from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Interleave LoRA-on causal generation batches.
        #[arg(long)]
        joint: bool,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print the multi-vector embedding of one input.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Embed as a query rather than a document.
        #[arg(long)]
        query: bool,
    },
    /// Embed every document of a corpus into an index file.
    Index {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Rank indexed documents against a query.
    Search {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Decode from a prompt in generation mode.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long, default_value_t = 1.0)]
        top_p: f32,
    },
    /// Generation after random mode-switch histories vs a pristine copy.
    Equivalence {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Alternating embed/generate cycles checking for leaked state.
    Contamination {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_CONTAMINATION_INPUTS)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Parameter bytes, switch latency and cached decode speedup.
    Efficiency,
    /// Compare a retrieval-only and a joint checkpoint.
    Ablate {
        #[arg(long)]
        retrieval: PathBuf,
        #[arg(long)]
        joint: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_gen: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Held-out nDCG@5.
    EvalRetrieval {
        #[command(flatten)]
        model: ModelArgs,
        /// Override the number of held-out pairs.
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory; a fresh seeded model is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InputArgs {
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "corpus")]
    tokens: Option<Vec<u32>>,
    /// Take the input from this corpus file (see --pair).
    #[arg(long, requires = "pair")]
    corpus: Option<PathBuf>,
    /// Pair index within --corpus.
    #[arg(long)]
    pair: Option<usize>,
}

enum Role {
    Query,
    Document,
    Prompt,
}

impl InputArgs {
    fn resolve(&self, role: Role) -> Result<ModelInput> {
        if let Some(t) = &self.tokens {
            return Ok(ModelInput::tokens(t.clone()));
        }
        let (Some(path), Some(i)) = (&self.corpus, self.pair) else {
            bail!("give either --tokens or --corpus with --pair");
        };
        let corpus = Corpus::load(path).with_context(|| format!("reading corpus {}", path.display()))?;
        let pair = corpus
            .pairs
            .get(i)
            .with_context(|| format!("pair {i} out of range (corpus has {})", corpus.len()))?;
        Ok(match role {
            Role::Query => pair.query_input(),
            Role::Document => pair.document_input(),
            Role::Prompt => pair.prompt(),
        })
    }
}

struct Ctx {
    seed: u64,
    config: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn model(&self, args: &ModelArgs) -> Result<Backbone> {
        match &args.checkpoint {
            Some(dir) => Ok(load_checkpoint(dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?
                .0),
            None => Ok(Backbone::new(self.config.model.clone(), self.seed)?),
        }
    }

    fn require_out(&self, what: &str) -> Result<&Path> {
        self.out.as_deref().with_context(|| format!("--out is required for {what}"))
    }

    fn emit(&self, value: &serde_json::Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        match &self.out {
            Some(path) => std::fs::write(path, text + "\n")?,
            None => writeln!(std::io::stdout().lock(), "{text}")?,
        }
        Ok(())
    }

    /// Prints the summary table, writes JSONL to `--out`, and maps failed
    /// checks to exit code 1.
    fn report(&self, report: &ExperimentReport) -> Result<ExitCode> {
        print!("{}", report.summary_table());
        if let Some(path) = &self.out {
            std::fs::write(path, report.to_jsonl())?;
        }
        Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
    }
}

fn print_train_report(r: &TrainReport) {
    println!("steps                {}", r.steps.len());
    println!("generation steps     {}", r.generation_steps);
    println!("final loss           {:.4}", r.final_loss().unwrap_or(f32::NAN));
    println!("trainable params     {}", r.trainable_params);
    println!("base max abs delta   {}", r.base_max_abs_delta);
    println!("lm_head digest valid {}", r.lm_head_digest_match);
    println!("elapsed              {:.1}s", r.elapsed_secs);
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::toy(),
    };
    let ctx = Ctx { seed: cli.seed, config, out: cli.out };
    match cli.command {
        Command::GenCorpus { pairs } => {
            let out = ctx.require_out("gen-corpus")?;
            let corpus = Corpus::synthetic(ctx.seed, pairs.unwrap_or(ctx.config.data.corpus_pairs));
            corpus.save(out)?;
            println!("wrote {} pairs to {}", corpus.len(), out.display());
        }
        Command::Train { corpus, joint, steps } => {
            let out = ctx.require_out("train")?;
            let corpus = match corpus {
                Some(p) => Corpus::load(&p).with_context(|| format!("reading corpus {}", p.display()))?,
                None => Corpus::synthetic(ctx.config.data.corpus_seed, ctx.config.data.corpus_pairs),
            };
            let mut tc = ctx.config.train.clone();
            if steps.is_some() {
                tc.max_steps = steps;
            }
            if joint {
                tc.mode = TrainMode::Joint;
            }
            let mut model = Backbone::new(ctx.config.model.clone(), ctx.seed)?;
            let report = match tc.mode {
                TrainMode::RetrievalOnly => train(&mut model, &corpus.pairs, &tc)?,
                TrainMode::Joint => train_joint(&mut model, &corpus.pairs, &corpus.pairs, &tc)?,
            };
            let bundle = save_checkpoint(&model, out)?;
            std::fs::write(out.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
            print_train_report(&report);
            println!("lm_head digest       {}", bundle.digests.lm_head);
            println!("checkpoint           {}", out.display());
            if !(report.base_checksum_unchanged && report.lm_head_digest_match) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Embed { model, input, query } => {
            let mut m = ctx.model(&model)?;
            let role = if query { Role::Query } else { Role::Document };
            let e = embed(&mut m, &input.resolve(role)?, query)?;
            let rows: Vec<&[f32]> = (0..e.num_tokens()).map(|r| e.vectors.row(r)).collect();
            ctx.emit(&json!({"num_tokens": e.num_tokens(), "dim": e.dim(), "vectors": rows}))?;
        }
        Command::Index { model, corpus } => {
            let out = ctx.require_out("index")?;
            let mut m = ctx.model(&model)?;
            let corpus = Corpus::load(&corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
            let mut index = Index::new(m.config().proj_dim);
            for (i, p) in corpus.pairs.iter().enumerate() {
                let id = EvalSet::doc_id(i);
                index.add(id.clone(), embed(&mut m, &p.document_input(), false)?.with_source(id))?;
            }
            index.save(out)?;
            println!("indexed {} documents into {}", index.len(), out.display());
        }
        Command::Search { model, index, input, k } => {
            let mut m = ctx.model(&model)?;
            let index = Index::load(&index).with_context(|| format!("reading index {}", index.display()))?;
            let q = embed(&mut m, &input.resolve(Role::Query)?, true)?;
            ctx.emit(&serde_json::to_value(index.search(&q, k)?)?)?;
        }
        Command::Generate { model, input, max_new, temperature, top_p } => {
            let mut m = ctx.model(&model)?;
            let params = match temperature {
                Some(t) => DecodeParams::sample(max_new, t, top_p, ctx.seed),
                None => DecodeParams::greedy(max_new),
            };
            let tokens = generate(&mut m, &input.resolve(Role::Prompt)?, &params)?;
            ctx.emit(&json!({"tokens": tokens, "text": detokenize(&tokens)}))?;
        }
        Command::Equivalence { model, n, max_new } => {
            let mut m = ctx.model(&model)?;
            return ctx.report(&equivalence_suite(&mut m, n, max_new, ctx.seed)?);
        }
        Command::Contamination { model, n, max_new } => {
            let mut m = ctx.model(&model)?;
            return ctx.report(&contamination(&mut m, n, max_new, ctx.seed)?);
        }
        Command::Efficiency => {
            return ctx.report(&efficiency_suite(&ctx.config.model, ctx.seed)?);
        }
        Command::Ablate { retrieval, joint, n_gen, max_new } => {
            let load = |p: &Path| {
                load_checkpoint(p)
                    .map(|(m, _)| m)
                    .with_context(|| format!("loading checkpoint {}", p.display()))
            };
            let (r, j) = (load(&retrieval)?, load(&joint)?);
            let eval = EvalSet::held_out(ctx.config.data.eval_seed, ctx.config.data.eval_pairs);
            return ctx.report(&ablate(&r, &j, &eval, n_gen, max_new, ctx.seed)?);
        }
        Command::EvalRetrieval { model, n } => {
            let mut m = ctx.model(&model)?;
            let eval = EvalSet::held_out(ctx.config.data.eval_seed, n.unwrap_or(ctx.config.data.eval_pairs));
            return ctx.report(&eval_retrieval(&mut m, &eval, ctx.seed)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
