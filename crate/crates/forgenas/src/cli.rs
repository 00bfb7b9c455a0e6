//! Subcommands. Every artifact lands under `--out`; every completed command
//! appends one record to `<out>/manifests.jsonl`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use forgenas_core::c2pn::{self, DetectionNet, TrainConfig};
use forgenas_core::data::{generate_synthetic, Dataset, Domain, SynthConfig};
use forgenas_core::metrics::EpochMetrics;
use forgenas_core::search::{CrossSearcher, Phase, SearchEvent, Searcher};
use forgenas_core::Genotype;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DataSection, Preset};
use crate::formats::{self, write_checkpoint, write_curves_csv, write_events, write_genotype, write_report};
use crate::images::{self, load_image};
use crate::manifest::RunManifest;

pub const SEARCH_CHECKPOINT: &str = "search.ckpt.json";
pub const CROSS_CHECKPOINT: &str = "cross_search.ckpt.json";
pub const MODEL_CHECKPOINT: &str = "model.ckpt.json";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

/// Bad invocation; reported together with the usage text and exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "forgenas", version, about = "Architecture search and training of forgery detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search a cell architecture on one dataset.
    Search(SearchArgs),
    /// Search a cell architecture across several datasets.
    CrossSearch(CrossArgs),
    /// Train a detection network from a genotype.
    Train(TrainArgs),
    /// Evaluate a trained network and write a metrics report.
    Eval(EvalArgs),
    /// Extract the genotype or curves from a checkpoint or report.
    Export(ExportArgs),
    /// Write activation heatmaps of a trained network.
    Cam(CamArgs),
    /// Write a synthetic dataset as an image directory.
    SynthGen(SynthArgs),
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for data, search and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker cap; the numeric kernels run on one thread.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Synthetic domain: splice, blur_patch or noise_patch.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<String>,
    /// Directory with `real/` and `fake/` subdirectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic sample count.
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Continue from a search checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CrossArgs {
    #[command(flatten)]
    pub common: Common,
    /// Synthetic domains, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    /// Image directories, one per dataset.
    #[arg(long = "data")]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub genotype: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test part of the configured split, or every sample.
    #[arg(long, value_enum, default_value = "test")]
    pub split: EvalSplit,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Search or model checkpoint, or a metrics report.
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Args, Debug)]
pub struct CamArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files; the dataset split is used when none are given.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: EvalSplit,
    /// Only the first N inputs.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "splice")]
    pub domain: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

/// Trained network with everything `eval` and `cam` need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub net: DetectionNet,
    pub train: TrainConfig,
    pub data: DataSection,
    pub curves: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub config_fingerprint: u64,
    pub train_data_fingerprint: u64,
}

/// One line of `cam.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamRecord {
    pub input: String,
    /// Relative to the output directory.
    pub heatmap: PathBuf,
    pub predicted: usize,
    pub degenerate: bool,
    pub quadrant: Option<usize>,
    pub region_quadrant: Option<usize>,
}

/// Defaults, file, preset, environment, then flags.
pub fn resolve(common: &Common, data: &DataArgs) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) if !path.is_file() => return Err(usage(format!("config file {} not found", path.display()))),
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(p) = common.preset {
        config.apply_preset(p);
    }
    config.apply_env(std::env::vars())?;
    if let Some(domain) = &data.synthetic {
        config.data.synthetic = Some(domain.clone());
        config.data.root = None;
    }
    if let Some(root) = &data.data {
        config.data.root = Some(root.clone());
        config.data.synthetic = None;
    }
    if let Some(n) = data.n {
        config.data.n = n;
    }
    if let Some(size) = data.size {
        config.data.size = size;
    }
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if common.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    config.registry.to_core()?;
    config.data.domain()?;
    Ok(config)
}

pub fn load_data(data: &DataSection) -> Result<Dataset> {
    match (data.domain()?, &data.root) {
        (Some(_), Some(_)) => Err(usage("data.synthetic and data.root are both set")),
        (Some(domain), None) => Ok(generate_synthetic(data.seed, data.n, domain, data.size, &SynthConfig::default())?),
        (None, Some(root)) => images::load_directory(root, data.size),
        (None, None) => Err(usage("no data source; pass --synthetic <domain> or --data <dir>")),
    }
}

/// Train, validation and test parts of the configured split.
pub fn split_data(data: &Dataset, section: &DataSection) -> Result<[Dataset; 3]> {
    let parts = section.split_spec()?.assign(&data.labels(), section.seed)?;
    Ok([data.subset(&parts[0]), data.subset(&parts[1]), data.subset(&parts[2])])
}

fn dry_run(config: &Config) -> Result<()> {
    print!("{}", config.to_toml());
    Ok(())
}

fn finish(mut manifest: RunManifest, started: Instant, out: &Path) -> Result<()> {
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.append(out)
}

fn last_validation(events: &[SearchEvent], epoch: usize) -> String {
    events
        .iter()
        .rev()
        .find(|e| e.epoch == epoch && e.phase == Phase::Validate)
        .map(|e| format!("loss {:.4} acc {:.3}", e.loss.unwrap_or(f64::NAN), e.acc.unwrap_or(f64::NAN)))
        .unwrap_or_default()
}

pub fn cmd_search(args: &SearchArgs) -> Result<()> {
    let config = resolve(&args.common, &args.data)?;
    config.search.to_core().validate()?;
    if args.common.dry_run {
        return dry_run(&config);
    }
    let started = Instant::now();
    let out = &args.common.out;
    let data = load_data(&config.data)?;
    let mut manifest = RunManifest::new("search", &config, args.common.threads);
    manifest.input("data", data.fingerprint());
    let mut searcher = match &args.resume {
        Some(path) => formats::read_checkpoint::<Searcher>("search", path)?,
        None => Searcher::new(config.search.to_core(), config.registry.to_core()?, &data)?,
    };
    let ckpt = out.join(SEARCH_CHECKPOINT);
    while !searcher.is_done() {
        let t = Instant::now();
        searcher.run_epoch(&data)?;
        write_checkpoint("search", &searcher, &ckpt)?;
        eprintln!("epoch {}/{} {:.1}s {}", searcher.epoch, searcher.config.epochs, t.elapsed().as_secs_f64(), last_validation(&searcher.events, searcher.epoch));
    }
    let genotype = searcher.genotype()?;
    write_search_outputs(&genotype, &searcher.events, out, &mut manifest)?;
    manifest.artifact(&ckpt);
    finish(manifest, started, out)
}

fn write_search_outputs(genotype: &Genotype, events: &[SearchEvent], out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let g = out.join(GENOTYPE_FILE);
    write_genotype(genotype, &g)?;
    formats::read_genotype(&g)?;
    let e = out.join(EVENTS_FILE);
    write_events(events, &e)?;
    manifest.artifact(&g);
    manifest.artifact(&e);
    println!("{}", formats::genotype_to_string(genotype)?);
    Ok(())
}

pub fn cmd_cross_search(args: &CrossArgs) -> Result<()> {
    let k = args.domains.len() + args.dirs.len();
    if k < 2 && args.resume.is_none() {
        return Err(usage(format!("cross-search needs at least 2 datasets, got {k}")));
    }
    if !args.domains.is_empty() && !args.dirs.is_empty() {
        return Err(usage("pass either --domains or --data, not both"));
    }
    let base = DataArgs { n: args.n, size: args.size, ..DataArgs::default() };
    let config = resolve(&args.common, &base)?;
    config.search.to_core().validate()?;
    if args.common.dry_run {
        return dry_run(&config);
    }
    let started = Instant::now();
    let out = &args.common.out;
    let mut datasets = Vec::new();
    for d in &args.domains {
        let domain: Domain = d.parse()?;
        datasets.push(generate_synthetic(config.data.seed, config.data.n, domain, config.data.size, &SynthConfig::default())?);
    }
    for dir in &args.dirs {
        datasets.push(images::load_directory(dir, config.data.size)?);
    }
    let mut manifest = RunManifest::new("cross-search", &config, args.common.threads);
    for (i, d) in datasets.iter().enumerate() {
        manifest.input(format!("dataset{i}"), d.fingerprint());
    }
    let mut searcher = match &args.resume {
        Some(path) => formats::read_checkpoint::<CrossSearcher>("cross_search", path)?,
        None => CrossSearcher::new(config.search.to_core(), config.registry.to_core()?, &datasets)?,
    };
    let ckpt = out.join(CROSS_CHECKPOINT);
    while !searcher.is_done() {
        let t = Instant::now();
        searcher.run_epoch(&datasets)?;
        write_checkpoint("cross_search", &searcher, &ckpt)?;
        eprintln!("epoch {}/{} {:.1}s", searcher.epoch, searcher.config.epochs, t.elapsed().as_secs_f64());
    }
    let genotype = searcher.genotype()?;
    write_search_outputs(&genotype, &searcher.events, out, &mut manifest)?;
    manifest.artifact(&ckpt);
    finish(manifest, started, out)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = resolve(&args.common, &args.data)?;
    let (net_config, train_config) = config.train.to_core();
    train_config.validate()?;
    if args.common.dry_run {
        return dry_run(&config);
    }
    let started = Instant::now();
    let out = &args.common.out;
    let genotype = formats::read_genotype(&args.genotype)?;
    let data = load_data(&config.data)?;
    let [train, val, _] = split_data(&data, &config.data)?;
    let mut manifest = RunManifest::new("train", &config, args.common.threads);
    manifest.input("genotype", config_hash(&formats::genotype_to_string(&genotype)?));
    manifest.input("data", data.fingerprint());
    let mut net = DetectionNet::build(&genotype, net_config, train_config.seed)?;
    eprintln!("training {} parameters on {} images for {} epochs", net.num_params(), train.len(), train_config.epochs);
    let outcome = c2pn::train(&mut net, &train, &val, &train_config)?;
    if let Some(best) = outcome.curves.get(outcome.best_epoch - 1) {
        eprintln!("best epoch {} val auc {:.4}", best.epoch, best.val_auc);
    }
    let ckpt = ModelCheckpoint {
        net,
        train: train_config,
        data: config.data.clone(),
        curves: outcome.curves,
        best_epoch: outcome.best_epoch,
        config_fingerprint: config.fingerprint(),
        train_data_fingerprint: train.fingerprint(),
    };
    let path = out.join(MODEL_CHECKPOINT);
    write_checkpoint("model", &ckpt, &path)?;
    let curves = out.join(CURVES_FILE);
    write_curves_csv(&ckpt.curves, &curves)?;
    manifest.artifact(&path);
    manifest.artifact(&curves);
    finish(manifest, started, out)
}

fn config_hash(text: &str) -> u64 {
    let mut h = forgenas_core::data::Fnv::new();
    h.write(text.as_bytes());
    h.finish()
}

fn read_model(path: &Path) -> Result<ModelCheckpoint> {
    formats::read_checkpoint("model", path)
}

/// Resolved config whose data section falls back to the checkpoint's.
fn resolve_with_model(common: &Common, data: &DataArgs, ckpt: &ModelCheckpoint) -> Result<Config> {
    let mut config = resolve(common, data)?;
    if config.data.synthetic.is_none() && config.data.root.is_none() {
        let mut section = ckpt.data.clone();
        section.n = data.n.unwrap_or(section.n);
        section.size = data.size.unwrap_or(section.size);
        if let Some(seed) = common.seed {
            section.seed = seed;
        }
        config.data = section;
    }
    Ok(config)
}

fn pick_split(data: Dataset, section: &DataSection, split: EvalSplit) -> Result<Dataset> {
    match split {
        EvalSplit::All => Ok(data),
        EvalSplit::Test => Ok(split_data(&data, section)?.into_iter().nth(2).expect("three parts")),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut ckpt = read_model(&args.checkpoint)?;
    let config = resolve_with_model(&args.common, &args.data, &ckpt)?;
    if args.common.dry_run {
        return dry_run(&config);
    }
    let started = Instant::now();
    let out = &args.common.out;
    let data = pick_split(load_data(&config.data)?, &config.data, args.split)?;
    let mut manifest = RunManifest::new("eval", &config, args.common.threads);
    manifest.input("checkpoint", ckpt.net.weights_fingerprint());
    manifest.input("data", data.fingerprint());
    let report = c2pn::evaluate(&mut ckpt.net, &data, ckpt.curves.clone(), ckpt.config_fingerprint, ckpt.train.seed)
        .with_context(|| format!("evaluating {} images", data.len()))?;
    let path = out.join(REPORT_FILE);
    write_report(&report, &path)?;
    formats::read_report(&path)?;
    manifest.artifact(&path);
    println!("acc {:.4} auc {:.4} n {}", report.acc, report.auc, report.n_samples);
    finish(manifest, started, out)
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let started = Instant::now();
    let out = &args.common.out;
    let config = Config::default();
    let mut manifest = RunManifest::new("export", &config, args.common.threads);
    if args.common.dry_run {
        return dry_run(&config);
    }
    let (genotype, curves) = match formats::checkpoint_kind(&args.from) {
        Ok(kind) => match kind.as_str() {
            "search" => (Some(formats::read_checkpoint::<Searcher>("search", &args.from)?.genotype()?), None),
            "cross_search" => (Some(formats::read_checkpoint::<CrossSearcher>("cross_search", &args.from)?.genotype()?), None),
            "model" => {
                let m = read_model(&args.from)?;
                (Some(m.net.genotype.clone()), Some(m.curves))
            }
            other => bail!("{}: unknown checkpoint kind `{other}`", args.from.display()),
        },
        Err(_) => {
            let report = formats::read_report(&args.from).with_context(|| format!("{} is neither a checkpoint nor a report", args.from.display()))?;
            (None, Some(report.curves))
        }
    };
    if let Some(g) = genotype {
        let path = out.join(GENOTYPE_FILE);
        write_genotype(&g, &path)?;
        manifest.artifact(&path);
    }
    if let Some(c) = curves {
        let path = out.join(CURVES_FILE);
        write_curves_csv(&c, &path)?;
        manifest.artifact(&path);
    }
    finish(manifest, started, out)
}

pub fn cmd_cam(args: &CamArgs) -> Result<()> {
    let mut ckpt = read_model(&args.checkpoint)?;
    let config = resolve_with_model(&args.common, &args.data, &ckpt)?;
    if args.common.dry_run {
        return dry_run(&config);
    }
    let started = Instant::now();
    let out = &args.common.out;
    let mut manifest = RunManifest::new("cam", &config, args.common.threads);
    // (name, image, region quadrant)
    let mut inputs = Vec::new();
    if args.images.is_empty() {
        let data = pick_split(load_data(&config.data)?, &config.data, args.split)?;
        manifest.input("data", data.fingerprint());
        for (i, s) in data.samples.into_iter().enumerate() {
            let q = s.region.map(|r| r.quadrant(s.height(), s.width()));
            inputs.push((format!("{i:05}_{}", if s.label == 1 { "fake" } else { "real" }), s.image, q));
        }
    } else {
        for (i, path) in args.images.iter().enumerate() {
            let (image, _, _) = load_image(path, config.data.size)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            inputs.push((format!("{i:05}_{stem}"), image, None));
        }
    }
    if let Some(limit) = args.limit {
        inputs.truncate(limit);
    }
    let dir = out.join("cam");
    let mut records = Vec::new();
    let (mut hits, mut scored) = (0, 0);
    for (name, image, region_quadrant) in &inputs {
        let map = c2pn::activation_map(&mut ckpt.net, image)?;
        let heatmap = Path::new("cam").join(format!("{name}.pgm"));
        formats::write_pgm(&map, &out.join(&heatmap))?;
        let quadrant = map.quadrant();
        if let Some(rq) = region_quadrant {
            scored += 1;
            hits += usize::from(quadrant == Some(*rq));
        }
        records.push(CamRecord { input: name.clone(), heatmap, predicted: map.predicted, degenerate: map.degenerate, quadrant, region_quadrant: *region_quadrant });
    }
    let index = out.join("cam.jsonl");
    formats::write_jsonl(&records, &index)?;
    manifest.artifact(&dir);
    manifest.artifact(&index);
    println!("{} heatmaps", records.len());
    if scored > 0 {
        println!("center of gravity in the manipulated quadrant: {hits}/{scored}");
    }
    finish(manifest, started, out)
}

pub fn cmd_synth_gen(args: &SynthArgs) -> Result<()> {
    let data_args = DataArgs { synthetic: Some(args.domain.clone()), n: args.n, size: args.size, ..DataArgs::default() };
    let config = resolve(&args.common, &data_args)?;
    if args.common.dry_run {
        return dry_run(&config);
    }
    let started = Instant::now();
    let out = &args.common.out;
    let data = load_data(&config.data)?;
    let mut manifest = RunManifest::new("synth-gen", &config, args.common.threads);
    manifest.input("data", data.fingerprint());
    let records = images::save_directory(&data, out)?;
    manifest.artifact(&out.join("real"));
    manifest.artifact(&out.join("fake"));
    manifest.artifact(&out.join(images::REGIONS_FILE));
    println!("{} images", records.len());
    finish(manifest, started, out)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Search(a) => cmd_search(a),
        Command::CrossSearch(a) => cmd_cross_search(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Cam(a) => cmd_cam(a),
        Command::SynthGen(a) => cmd_synth_gen(a),
    }
}

/// Parse arguments, run, and map the outcome to an exit code: 0 on success,
/// 2 on usage errors, 1 otherwise.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}\n");
            eprintln!("{}", Cli::command().render_usage());
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
