use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semclip_core::backends::{
    serve_lines, Answerer, Endpoint, ExternalAnswerer, ExternalEncoder, RetryPolicy, SceneRegistry, ToyOracle,
};
use semclip_core::config::{load_config, EventLog, GlobalConfig, CONFIG_ENV};
use semclip_core::dataset::{read_jsonl, read_manifest, write_jsonl, ManifestEntry, VqaInstance};
use semclip_core::harness::{
    evaluate, read_metrics, report, run_majority, run_random_repeats, scatter_svg, write_outputs, GroundTruthScorer,
    InstanceScorer, Metrics, QuestionScorer, RunConfig,
};
use semclip_core::imaging::{partition, GridSpec, RasterImage};
use semclip_core::scoring::{tiny_scorer, CosineScorer, ScorerKind};
use semclip_core::selection::SelectionStrategy;
use semclip_core::synthbench::{generate, SynthInstance};
use semclip_core::training::{assemble_pairs, build_supervision, train_scorer, SavedEncoder, SupervisionExample};

#[derive(Parser)]
#[command(name = "semclip", version, about = "Question-guided sub-image selection for VQA")]
struct Cli {
    /// JSON config file. Falls back to $SEMCLIP_CONFIG, then to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write line-delimited JSON events here.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split one image into an n x n grid of PNG crops.
    Partition {
        image: PathBuf,
        #[arg(long)]
        grid_n: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic benchmark: images/, manifest.jsonl, scenes.jsonl.
    GenSynth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fraction_overview_solvable: Option<f64>,
        #[arg(long)]
        grid_n: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label positive and negative cells for each instance with the answerer.
    BuildSupervision {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        answerer: Option<String>,
        #[arg(long)]
        grid_n: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the tiny bi-encoder on supervision labels.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        supervision: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one selection strategy over a dataset.
    Evaluate(EvalArgs),
    /// Combine metrics.json files into one comparison table.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy oracle on stdin/stdout, for use as an external answerer.
    #[command(hide = true)]
    ServeToy {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        grid_n: Option<u32>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// scenes.jsonl from gen-synth; required by the toy answerer.
    #[arg(long)]
    scenes: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// topk | random | optimal | majority | none
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    grid_n: Option<u32>,
    /// tiny | external:<endpoint> | feature:<endpoint> | gt
    #[arg(long)]
    scorer: Option<String>,
    /// Saved tiny encoder, for `--scorer tiny`.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// toy | external:<endpoint>
    #[arg(long)]
    answerer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<u32>,
    /// Send only the selected sub-images.
    #[arg(long)]
    no_overview: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match cli.config.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
        Some(path) => load_config(&path).with_context(|| format!("loading {}", path.display()))?,
        None => GlobalConfig::default(),
    };
    let log = match &cli.log {
        Some(path) => EventLog::to_file(path, format!("semclip-{}", config.seed))?,
        None => EventLog::disabled(),
    };
    match cli.command {
        Command::Partition { image, grid_n, out } => {
            set(&mut config.grid_n, grid_n);
            config.validate()?;
            cmd_partition(&image, config.grid_n, &out)
        }
        Command::GenSynth {
            count,
            seed,
            fraction_overview_solvable,
            grid_n,
            out,
        } => {
            let mut synth = config.synth.clone().unwrap_or_default();
            synth.oracle = config.oracle;
            synth.grid_n = grid_n.unwrap_or(config.grid_n);
            synth.seed = seed.unwrap_or(config.seed);
            set(&mut synth.count, count);
            set(&mut synth.fraction_overview_solvable, fraction_overview_solvable);
            config.grid_n = synth.grid_n;
            config.seed = synth.seed;
            config.synth = Some(synth);
            config.validate()?;
            cmd_gen_synth(&config, &out)
        }
        Command::BuildSupervision {
            data,
            answerer,
            grid_n,
            out,
        } => {
            set(&mut config.grid_n, grid_n);
            set(&mut config.answerer, answerer);
            config.validate()?;
            let data = load_data(&config, &data)?;
            let answerer = make_answerer(&config, &data)?;
            let grid = GridSpec::new(config.grid_n)?;
            let report = build_supervision(&data.instances, answerer.as_ref(), &grid, config.parallelism, &log);
            std::fs::create_dir_all(&out)?;
            write_jsonl(&out.join("supervision.jsonl"), &report.examples)?;
            write_jsonl(&out.join("skipped.jsonl"), &report.skipped)?;
            println!(
                "{} labeled, {} usable, {} skipped",
                report.examples.len(),
                report.usable().count(),
                report.skipped.len()
            );
            Ok(())
        }
        Command::Train {
            data,
            supervision,
            seed,
            out,
        } => {
            set(&mut config.seed, seed);
            config.validate()?;
            let supervision = supervision
                .or_else(|| config.paths.supervision.clone())
                .ok_or_else(|| anyhow!("--supervision is required"))?;
            cmd_train(&config, &load_data(&config, &data)?, &supervision, &out, &log)
        }
        Command::Evaluate(args) => {
            set(&mut config.strategy, args.strategy.clone());
            set(&mut config.k, args.k);
            set(&mut config.grid_n, args.grid_n);
            set(&mut config.scorer, args.scorer.clone());
            set(&mut config.answerer, args.answerer.clone());
            set(&mut config.seed, args.seed);
            set(&mut config.repeats, args.repeats);
            if args.no_overview {
                config.include_overview = false;
            }
            if args.encoder.is_some() {
                config.paths.encoder = args.encoder.clone();
            }
            config.validate()?;
            cmd_evaluate(&config, &args, &log)
        }
        Command::Report { metrics, out } => {
            let mut all: Vec<Metrics> = Vec::new();
            for path in &metrics {
                all.extend(read_metrics(path)?);
            }
            if all.is_empty() {
                bail!("no metrics found");
            }
            let r = report(&all);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.csv"), &r.csv)?;
            std::fs::write(out.join("report.md"), &r.markdown)?;
            std::fs::write(out.join("scatter.svg"), scatter_svg(&all))?;
            print!("{}", r.markdown);
            Ok(())
        }
        Command::ServeToy { scenes, grid_n } => {
            set(&mut config.grid_n, grid_n);
            let synth: Vec<SynthInstance> = read_jsonl(&scenes)?;
            let mut registry = SceneRegistry::new();
            registry.register_instances(&synth);
            let grid = GridSpec::new(config.grid_n)?;
            for inst in &synth {
                registry.register_renders(&inst.instance_id, &grid)?;
            }
            let oracle = ToyOracle::new(config.oracle, registry);
            let stdin = std::io::stdin();
            serve_lines(stdin.lock(), std::io::stdout().lock(), |line| oracle.handle_line(line))?;
            Ok(())
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn cmd_partition(image: &Path, grid_n: u32, out: &Path) -> Result<()> {
    let img = RasterImage::load_png(image).with_context(|| format!("reading {}", image.display()))?;
    let subs = partition(&img, &GridSpec::new(grid_n)?)?;
    std::fs::create_dir_all(out)?;
    for s in &subs {
        s.image
            .save_png(out.join(format!("cell_{}.png", s.region.linear_index)))?;
    }
    let regions: Vec<_> = subs.iter().map(|s| s.region).collect();
    std::fs::write(out.join("regions.json"), serde_json::to_string_pretty(&regions)?)?;
    println!("{} cells written to {}", subs.len(), out.display());
    Ok(())
}

fn cmd_gen_synth(config: &GlobalConfig, out: &Path) -> Result<()> {
    let synth = config.synth.as_ref().expect("set by caller");
    let instances = generate(synth)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images)?;
    let mut manifest = Vec::with_capacity(instances.len());
    for inst in &instances {
        let rel = PathBuf::from("images").join(format!("{}.png", inst.instance_id));
        inst.render().save_png(out.join(&rel))?;
        manifest.push(ManifestEntry {
            instance_id: inst.instance_id.clone(),
            image_path: rel,
            question: inst.question.clone(),
            answer: inst.answer.clone(),
            options: None,
            gt_cell: inst.gt_cell,
            grid_n: Some(inst.scene.grid_n),
        });
    }
    write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
    write_jsonl(&out.join("scenes.jsonl"), &instances)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;
    println!("{} instances written to {}", instances.len(), out.display());
    Ok(())
}

struct Data {
    instances: Vec<VqaInstance>,
    scenes: Option<Vec<SynthInstance>>,
}

fn load_data(config: &GlobalConfig, args: &DataArgs) -> Result<Data> {
    let manifest = args
        .dataset
        .clone()
        .or_else(|| config.paths.dataset.clone())
        .ok_or_else(|| anyhow!("--dataset is required"))?;
    let instances = read_manifest(&manifest)?;
    let scenes_path = args.scenes.clone().or_else(|| config.paths.scenes.clone()).or_else(|| {
        let sibling = manifest.with_file_name("scenes.jsonl");
        sibling.exists().then_some(sibling)
    });
    let scenes = scenes_path.map(|p| read_jsonl::<SynthInstance>(&p)).transpose()?;
    Ok(Data { instances, scenes })
}

fn make_answerer(config: &GlobalConfig, data: &Data) -> Result<Box<dyn Answerer>> {
    let spec = config.answerer.as_str();
    if spec == "toy" {
        let scenes = data
            .scenes
            .as_ref()
            .ok_or_else(|| anyhow!("the toy answerer needs --scenes (scenes.jsonl from gen-synth)"))?;
        let known: HashSet<&str> = scenes.iter().map(|s| s.instance_id.as_str()).collect();
        if let Some(missing) = data.instances.iter().find(|i| !known.contains(i.instance_id.as_str())) {
            bail!("no scene for instance {}", missing.instance_id);
        }
        let mut registry = SceneRegistry::new();
        registry.register_instances(scenes);
        return Ok(Box::new(ToyOracle::new(config.oracle, registry)));
    }
    let endpoint = spec
        .strip_prefix("external:")
        .ok_or_else(|| anyhow!("unknown answerer {spec:?}; expected toy or external:<endpoint>"))?;
    Ok(Box::new(ExternalAnswerer::connect(
        &Endpoint::parse(endpoint)?,
        RetryPolicy::default(),
    )?))
}

fn make_scorer(config: &GlobalConfig) -> Result<(ScorerKind, Arc<dyn InstanceScorer>)> {
    let spec = config.scorer.as_str();
    if spec == "tiny" {
        let path = config
            .paths
            .encoder
            .as_ref()
            .ok_or_else(|| anyhow!("--scorer tiny needs --encoder"))?;
        let encoder = SavedEncoder::load(path)?.encoder()?;
        return Ok((
            ScorerKind::TrainedBiencoder,
            Arc::new(QuestionScorer(tiny_scorer(encoder))),
        ));
    }
    if spec == "gt" {
        return Ok((ScorerKind::GroundTruth, Arc::new(GroundTruthScorer)));
    }
    let (kind, endpoint) = if let Some(ep) = spec.strip_prefix("external:") {
        (ScorerKind::PretrainedCosine, ep)
    } else if let Some(ep) = spec.strip_prefix("feature:") {
        (ScorerKind::FeatureCosine, ep)
    } else {
        bail!("unknown scorer {spec:?}; expected tiny, gt, external:<endpoint> or feature:<endpoint>");
    };
    let encoder = ExternalEncoder::connect(&Endpoint::parse(endpoint)?, RetryPolicy::default())?;
    Ok((kind, Arc::new(QuestionScorer(CosineScorer::new(kind, encoder, None)))))
}

fn cmd_train(config: &GlobalConfig, data: &Data, supervision: &Path, out: &Path, log: &EventLog) -> Result<()> {
    let examples: Vec<SupervisionExample> = read_jsonl(supervision)?;
    let train = config.train_config();
    let (set, pairs) = assemble_pairs(&data.instances, &examples, train.pair_cap_per_instance, train.seed)?;
    log.emit("train_start", serde_json::json!({ "pairs": pairs.len() }));
    let trained = train_scorer(&set, &train)?;
    log.emit(
        "train_done",
        serde_json::json!({ "selected_epoch": trained.log.selected_epoch, "loss": trained.log.selected_loss }),
    );
    std::fs::create_dir_all(out)?;
    SavedEncoder::new(&trained.encoder, Some(train), Some(trained.log.clone())).save(&out.join("encoder.json"))?;
    std::fs::write(
        out.join("training_log.json"),
        serde_json::to_string_pretty(&trained.log)?,
    )?;
    write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
    println!(
        "{} pairs, loss {:.4} -> {:.4} (epoch {})",
        pairs.len(),
        trained.log.initial_loss,
        trained.log.selected_loss,
        trained.log.selected_epoch
    );
    Ok(())
}

fn strategy(config: &GlobalConfig, scorer: Option<ScorerKind>) -> Result<SelectionStrategy> {
    Ok(match config.strategy.as_str() {
        "topk" => SelectionStrategy::TopK {
            k: config.k,
            scorer: scorer.ok_or_else(|| anyhow!("topk needs a scorer"))?,
        },
        "random" => SelectionStrategy::Random { k: config.k },
        "optimal" => SelectionStrategy::Optimal,
        "majority" => SelectionStrategy::MajorityVote,
        "none" => SelectionStrategy::NoSelection,
        other => bail!("unknown strategy {other:?}; expected topk, random, optimal, majority or none"),
    })
}

fn cmd_evaluate(config: &GlobalConfig, args: &EvalArgs, log: &EventLog) -> Result<()> {
    let data = load_data(config, &args.data)?;
    let answerer = make_answerer(&config, &data)?;
    let scorer = if config.strategy == "topk" {
        Some(make_scorer(config)?)
    } else {
        None
    };
    let strategy = strategy(config, scorer.as_ref().map(|s| s.0))?;
    let run = RunConfig {
        strategy,
        grid_n: config.grid_n,
        include_overview: config.include_overview,
        seed: config.seed,
        repeats: config.repeats,
        parallelism: config.parallelism,
        tokens_per_image: config.tokens_per_image,
        temperature: config.temperature,
    };
    log.emit(
        "evaluate_start",
        serde_json::json!({ "strategy": strategy.to_string(), "instances": data.instances.len() }),
    );
    let (records, metrics) = match strategy {
        SelectionStrategy::Random { .. } => {
            let out = run_random_repeats(&data.instances, answerer.as_ref(), &run)?;
            let metrics = out.summary();
            (out.runs.into_iter().flat_map(|r| r.records).collect(), metrics)
        }
        SelectionStrategy::MajorityVote => {
            let out = run_majority(&data.instances, answerer.as_ref(), &run)?;
            (out.records, out.metrics)
        }
        _ => {
            let out = evaluate(
                &data.instances,
                answerer.as_ref(),
                scorer.as_ref().map(|s| s.1.as_ref()),
                &run,
            )?;
            (out.records, out.metrics)
        }
    };
    log.emit("evaluate_done", serde_json::to_value(&metrics)?);
    write_outputs(
        &args.out,
        &records,
        std::slice::from_ref(&metrics),
        &serde_json::to_value(config)?,
    )?;
    print!("{}", report(std::slice::from_ref(&metrics)).markdown);
    Ok(())
}
