mod config;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use sar_core::corpus::{generate_synthetic, SplitName, SyntheticSpec};
use sar_core::distill::{apply_configuration, configuration_name, infer_rank, stage2_train, KdMode, Schedule};
use sar_core::encoder::{stage1_train, DenseIndex};
use sar_core::eval::{compare_reports, evaluate};
use sar_core::graph::GraphMode;
use sar_core::par::Exec;
use sar_core::sparse::InvertedIndex;
use sar_core::ErrorKind;

use config::ExperimentConfig;
use run::{Manifest, Run, RunKind};

/// A command-line mistake; exits with code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A NaN in a report; exits with code 3.
#[derive(Debug)]
pub struct Numerical(pub String);

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<Numerical>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<sar_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            };
        }
    }
    2
}

#[derive(Parser)]
#[command(name = "sar", version, about = "Statutory article retrieval experiments")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set stage1.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, default_value_t = 4)]
        topics: usize,
        #[arg(long, default_value_t = 50)]
        articles_per_topic: usize,
        /// Training plus test queries.
        #[arg(long, default_value_t = 130)]
        queries: usize,
        #[arg(long, default_value_t = 30)]
        test_queries: usize,
        /// Validation queries, generated in addition to `--queries`.
        #[arg(long, default_value_t = 20)]
        validation_queries: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a BM25 run directory.
    Index {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train stage 1 (bi-encoder) or stage 2 (graph encoder and distillation).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Dataset directory (stage 1; stage 2 defaults to its parent's).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 run directory to start stage 2 from.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Chunk-free article encoder (stage 1).
        #[arg(long)]
        flat: bool,
        #[arg(long)]
        kd_mode: Option<KdMode>,
        #[arg(long)]
        graph: Option<GraphMode>,
        #[arg(long)]
        schedule: Option<Schedule>,
        /// Named configuration; sets graph, KD mode and schedule.
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate run directories and print a comparison table.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        split: Option<SplitName>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Directory for the comparison files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank articles for free text with a trained run.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match dispatch(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(args: &ConfigArgs, base: Option<&Path>, data: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(args.config.as_deref().or(base), &args.set)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(d) = data {
        config.data = d.clone();
    }
    Ok(config)
}

fn dispatch(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Generate {
            topics,
            articles_per_topic,
            queries,
            test_queries,
            validation_queries,
            noise,
            vocab_size,
            seed,
            out,
        } => {
            if test_queries > queries {
                bail!(Usage(format!("--test-queries {test_queries} exceeds --queries {queries}")));
            }
            let defaults = SyntheticSpec::default();
            let spec = SyntheticSpec {
                topics,
                articles_per_topic,
                train_queries: queries - test_queries,
                validation_queries,
                test_queries,
                noise_rate: noise.unwrap_or(defaults.noise_rate),
                vocab_size: vocab_size.unwrap_or(defaults.vocab_size),
                ..defaults
            };
            let (ds, _) = generate_synthetic(&spec, seed)?;
            ds.write_dir(&out)?;
            println!(
                "wrote {} articles, {} structural units, {} queries ({} train / {} validation / {} test) to {}",
                ds.corpus.len(),
                ds.corpus.units.len(),
                ds.queries.len(),
                ds.split.train.len(),
                ds.split.validation.len(),
                ds.split.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Index { data, out, cfg } => {
            let config = load_config(&cfg, None, data.as_ref())?;
            let ds = run::load_dataset(&config.data)?;
            let index = InvertedIndex::build(&ds.corpus, config.bm25)?;
            run::create(&out, &config)?;
            index.save(&out.join(run::BM25_FILE))?;
            run::write_manifest(
                &out,
                &Manifest {
                    kind: RunKind::Bm25,
                    configuration: "bm25".into(),
                    seed: config.seed,
                    encoder: None,
                    parent: None,
                    best_epoch: None,
                    validation_recall: vec![],
                    truncated_articles: 0,
                    clamped_probabilities: 0,
                    files: vec![run::BM25_FILE.into()],
                },
            )?;
            println!("indexed {} articles into {}", ds.corpus.len(), out.display());
            Ok(())
        }
        Command::Train {
            stage: 1,
            data,
            from,
            out,
            flat,
            kd_mode,
            graph,
            schedule,
            name,
            cfg,
        } => {
            if from.is_some() || kd_mode.is_some() || graph.is_some() || schedule.is_some() || name.is_some() {
                bail!(Usage("--from, --kd-mode, --graph, --schedule and --name apply to stage 2".into()));
            }
            let mut config = load_config(&cfg, None, data.as_ref())?;
            if flat {
                config.encoder.hierarchical = false;
            }
            train_stage1(config, &out, exec)
        }
        Command::Train {
            data,
            from,
            out,
            flat,
            kd_mode,
            graph,
            schedule,
            name,
            cfg,
            ..
        } => {
            if flat {
                bail!(Usage("--flat applies to stage 1".into()));
            }
            let from = from.ok_or_else(|| Usage("stage 2 needs --from <stage-1 run directory>".into()))?;
            let parent = Run::open(&from)?;
            if parent.manifest.kind != RunKind::Stage1 {
                bail!(sar_core::Error::InvalidData(format!("{} is not a stage-1 run", from.display())));
            }
            let mut config = load_config(&cfg, Some(&from.join(run::CONFIG_FILE)), data.as_ref())?;
            if let Some(n) = &name {
                apply_configuration(n, &mut config.stage2)?;
            }
            if let Some(k) = kd_mode {
                config.stage2.kd_mode = k;
            }
            if let Some(g) = graph {
                config.stage2.graph = g;
            }
            if let Some(s) = schedule {
                config.stage2.schedule = s;
            }
            config.validate()?;
            let label = match name {
                Some(n) => {
                    let mut check = config.stage2.clone();
                    apply_configuration(&n, &mut check)?;
                    if check != config.stage2 {
                        bail!(Usage(format!("flags contradict configuration `{n}`")));
                    }
                    n
                }
                None => configuration_name(&config.stage2)
                    .ok_or_else(|| {
                        Usage(format!(
                            "graph `{}`, kd mode `{}` and schedule `{}` form no named configuration",
                            config.stage2.graph, config.stage2.kd_mode, config.stage2.schedule
                        ))
                    })?
                    .to_string(),
            };
            train_stage2(config, &parent, label, &out, exec)
        }
        Command::Eval { runs, split, k, out } => {
            let mut reports = Vec::new();
            for dir in &runs {
                let r = Run::open(dir)?;
                let ds = r.dataset()?;
                let split = split.unwrap_or(r.config.eval.split);
                let ks = k.clone().unwrap_or_else(|| r.config.eval.ks.clone());
                let retriever = r.retriever(&ds)?;
                let report = evaluate(&r.manifest.configuration, retriever.as_ref(), &ds, split, &ks, exec)?;
                std::fs::write(dir.join(format!("report_{split}.jsonl")), report.to_jsonl())?;
                std::fs::write(dir.join(format!("report_{split}.txt")), report.to_text())?;
                reports.push(report);
            }
            let table = compare_reports(&reports)?;
            print!("{}", table.to_text());
            if let Some(o) = out {
                std::fs::create_dir_all(&o)?;
                std::fs::write(o.join("comparison.txt"), table.to_text())?;
                std::fs::write(o.join("comparison.jsonl"), table.to_jsonl())?;
            }
            if let Some(r) = reports.iter().find(|r| r.has_nan()) {
                bail!(Numerical(format!("report for `{}` contains NaN", r.config)));
            }
            Ok(())
        }
        Command::Infer { run, query, k } => {
            let r = Run::open(&run)?;
            if r.manifest.kind == RunKind::Bm25 {
                bail!(Usage("infer needs a trained run".into()));
            }
            let ds = r.dataset()?;
            let retriever = r.dense(&ds)?;
            for (rank, (id, score)) in infer_rank(&retriever, &ds.corpus.vocab, &query, k)?.into_iter().enumerate() {
                println!("{}\t{id}\t{score:.6}", rank + 1);
            }
            Ok(())
        }
    }
}

fn train_stage1(config: ExperimentConfig, out: &Path, exec: Exec) -> Result<()> {
    let ds = run::load_dataset(&config.data)?;
    let bm25 = InvertedIndex::build(&ds.corpus, config.bm25)?;
    let output = stage1_train(&config.encoder, &config.stage1, &ds, &bm25, config.seed, exec)?;
    run::create(out, &config)?;
    output.encoder.params.save(&out.join(run::ENCODER_FILE))?;
    DenseIndex::build(&output.encoder, &ds.corpus, exec)?.save(&out.join(run::EMBEDDINGS_FILE))?;
    run::write_jsonl(&out.join(run::CURVE_FILE), &output.curve)?;
    let name = if output.encoder.config.hierarchical { "be" } else { "be-flat" };
    run::write_manifest(
        out,
        &Manifest {
            kind: RunKind::Stage1,
            configuration: name.into(),
            seed: config.seed,
            encoder: Some(output.encoder.config.clone()),
            parent: None,
            best_epoch: Some(output.best_epoch),
            validation_recall: output.validation_recall.clone(),
            truncated_articles: output.truncated_articles,
            clamped_probabilities: 0,
            files: [run::ENCODER_FILE, run::EMBEDDINGS_FILE, run::CURVE_FILE].map(String::from).to_vec(),
        },
    )?;
    println!(
        "stage 1 ({name}): {} epochs, kept epoch {}, final loss {:.4}; wrote {}",
        output.epoch_losses.len(),
        output.best_epoch,
        output.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn train_stage2(config: ExperimentConfig, parent: &Run, name: String, out: &Path, exec: Exec) -> Result<()> {
    let ds = run::load_dataset(&config.data)?;
    let bm25 = InvertedIndex::build(&ds.corpus, config.bm25)?;
    let encoder = parent.encoder()?;
    let output = stage2_train(&config.stage2, &ds, &bm25, encoder, config.seed, exec)?;
    run::create(out, &config)?;
    let mut files = vec![run::ENCODER_FILE, run::EMBEDDINGS_FILE, run::CURVE_FILE, run::EPOCHS_FILE];
    output.model.encoder.params.save(&out.join(run::ENCODER_FILE))?;
    output.index.save(&out.join(run::EMBEDDINGS_FILE))?;
    run::write_jsonl(&out.join(run::CURVE_FILE), &output.curve)?;
    run::write_jsonl(&out.join(run::EPOCHS_FILE), &output.epochs)?;
    if let (Some(gat), Some(graph)) = (&output.model.gat, &output.model.graph) {
        gat.params.save(&out.join(run::GAT_FILE))?;
        graph.export(&out.join(run::NODES_FILE), &out.join(run::EDGES_FILE))?;
        files.extend([run::GAT_FILE, run::NODES_FILE, run::EDGES_FILE]);
    }
    run::write_manifest(
        out,
        &Manifest {
            kind: RunKind::Stage2,
            configuration: name.clone(),
            seed: config.seed,
            encoder: Some(output.model.encoder.config.clone()),
            parent: Some(parent.dir.clone()),
            best_epoch: Some(output.best_epoch),
            validation_recall: output.validation_recall.clone(),
            truncated_articles: 0,
            clamped_probabilities: output.clamped,
            files: files.into_iter().map(String::from).collect(),
        },
    )?;
    println!(
        "stage 2 ({name}): {} epochs, kept epoch {}; wrote {}",
        output.epochs.len(),
        output.best_epoch,
        out.display()
    );
    Ok(())
}
