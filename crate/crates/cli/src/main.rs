use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blindspot_core::attack::{attack_suite, AttackMethod, CwOptions, PgdSearchOptions};
use blindspot_core::blindspot::{param_grid, TransformParams};
use blindspot_core::config::KeyValues;
use blindspot_core::data::{synthetic_blobs, Dataset, Split, NUM_CLASSES};
use blindspot_core::geometry::{per_class_kl, Extractor, GridOptions, Norm, Projection, ProjectionOptions, TsneOptions};
use blindspot_core::harness::{
    blindspot_grid, distance_binned_success, distance_shift_histograms, emit_report, DistanceOptions, FeatureSource, Report,
};
use blindspot_core::nn::{Init, Model, SmallCnnConfig, TrainingMode};
use blindspot_core::train::{evaluate_accuracy, train_adversarial, train_natural, TrainConfig};
use blindspot_core::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "blindspot", version, about = "Adversarial training, attacks and blind-spot analysis on MNIST-style data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for initialisation, batch order and attack noise.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of test images used, taken as the first N/10 of each class in file order.
    #[arg(long, global = true)]
    subset_size: Option<usize>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// mnist, fashion or blobs (a synthetic fixture).
    #[arg(long, global = true, default_value = "mnist")]
    dataset: String,
    /// Directory holding the IDX files; defaults to `data/<dataset>`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model naturally or adversarially and save a checkpoint.
    Train(TrainArgs),
    /// Attack every correctly classified test image.
    Attack(AttackArgs),
    /// Attack success binned by k-NN distance to the training set.
    Distance(DistanceArgs),
    /// Per-class K-L divergence between train and test embeddings.
    Divergence(DivergenceArgs),
    /// Accuracy and attack success over scale-and-shift parameters.
    Blindspot(BlindspotArgs),
    /// Re-render the SVG figure of a report CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    adversarial: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Ramp the PGD radius from 0 over this many epochs.
    #[arg(long)]
    epsilon_warmup_epochs: Option<usize>,
    /// Number of training images, taken as the first N/10 of each class in file order.
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Arch::Desk)]
    arch: Arch,
    /// Checkpoint path; defaults to `<out>/model.bslb`.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Method {
    Cw,
    Pgd,
}

#[derive(Args, Debug, Clone)]
struct AttackOpts {
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Gradient steps per C&W (τ, c) pair.
    #[arg(long)]
    cw_iterations: Option<usize>,
    #[arg(long)]
    cw_tau_decay: Option<f64>,
    /// Bracket width at which the PGD binary search stops.
    #[arg(long)]
    pgd_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Success thresholds; defaults to the dataset's ε.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    #[command(flatten)]
    attack: AttackOpts,
}

#[derive(Args, Debug)]
struct FeatureArgs {
    /// Feature extractor checkpoint; defaults to the attacked model.
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long, default_value = "fc1")]
    tap: String,
    /// Use raw pixels instead of deep features.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    train_size: Option<usize>,
}

#[derive(Args, Debug)]
struct DistanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    k: Option<usize>,
    /// 1, 2 or inf.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    min_bin_count: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    attack: AttackOpts,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProjectionKind {
    Pca,
    Tsne,
}

#[derive(Args, Debug)]
struct DivergenceArgs {
    /// Feature extractor checkpoint.
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long, default_value = "fc1")]
    tap: String,
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long, value_enum)]
    projection: Option<ProjectionKind>,
    #[arg(long)]
    perplexity: Option<f64>,
    /// Grid cells per axis for the K-L integral.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct BlindspotArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Also emit k-NN distance histograms before and after this `α,β`.
    #[arg(long, value_delimiter = ',')]
    shift: Option<Vec<f64>>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    attack: AttackOpts,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// CSV written by another subcommand.
    input: PathBuf,
}

const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "adversarial",
    "epsilon",
    "pgd_steps",
    "pgd_step_size",
    "random_start",
    "epsilon_warmup_epochs",
    "train_size",
    "subset_size",
    "method",
    "cw_iterations",
    "cw_tau_decay",
    "pgd_tol",
    "k",
    "p",
    "bins",
    "min_bin_count",
    "projection",
    "perplexity",
    "resolution",
];

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "adversarial",
    "epsilon",
    "pgd_steps",
    "pgd_step_size",
    "random_start",
    "epsilon_warmup_epochs",
];

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

struct Ctx {
    g: Global,
    kv: KeyValues,
}

impl Ctx {
    fn pick<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Error> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.kv.value(key)?.unwrap_or(default)),
        }
    }

    fn default_epsilon(&self) -> f64 {
        if self.g.dataset == "fashion" {
            0.1
        } else {
            0.3
        }
    }

    fn data_dir(&self) -> PathBuf {
        self.g.data_dir.clone().unwrap_or_else(|| Path::new("data").join(&self.g.dataset))
    }

    fn load(&self, split: Split, limit: Option<usize>) -> Result<Dataset, Error> {
        let data = match self.g.dataset.as_str() {
            "blobs" => {
                let d = synthetic_blobs(100, 10, self.g.seed.wrapping_add(split as u64))?;
                Dataset::new(d.images().clone(), d.labels().to_vec(), split)?
            }
            "mnist" | "fashion" => Dataset::load_dir(&self.data_dir(), split)?,
            other => return Err(Error::Usage(format!("unknown dataset '{}' (mnist, fashion or blobs)", other))),
        };
        match limit {
            Some(n) if n < data.len() => data.first_per_class(n.div_ceil(NUM_CLASSES))?.take(n),
            _ => Ok(data),
        }
    }

    fn test_subset(&self) -> Result<Dataset, Error> {
        let n = self.pick(self.g.subset_size, "subset_size", 1000)?;
        if n == 0 {
            return Err(Error::Validation("--subset-size must be at least 1".into()));
        }
        self.load(Split::Test, Some(n))
    }

    fn method(&self, o: &AttackOpts) -> Result<AttackMethod, Error> {
        let method = match o.method {
            Some(m) => m,
            None => match self.kv.get("method") {
                None | Some("cw") => Method::Cw,
                Some("pgd") => Method::Pgd,
                Some(other) => return Err(Error::Validation(format!("unknown attack method '{}'", other))),
            },
        };
        Ok(match method {
            Method::Cw => {
                let d = CwOptions::default();
                AttackMethod::CarliniWagner(CwOptions {
                    max_iterations: self.pick(o.cw_iterations, "cw_iterations", d.max_iterations)?,
                    tau_decay: self.pick(o.cw_tau_decay, "cw_tau_decay", d.tau_decay)?,
                    seed: self.g.seed,
                    ..d
                })
            }
            Method::Pgd => {
                let d = PgdSearchOptions::default();
                AttackMethod::PgdSearch(PgdSearchOptions {
                    tol: self.pick(o.pgd_tol, "pgd_tol", d.tol)?,
                    seed: self.g.seed,
                    ..d
                })
            }
        })
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.g.out.join(name)
    }
}

fn load_model(path: &Path) -> Result<Model, Error> {
    Model::load_checkpoint(path)
}

fn extractor_tag(model: &Model) -> Extractor {
    match model.mode {
        TrainingMode::Adversarial { .. } => Extractor::Adversarial,
        _ => Extractor::Natural,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    let kv = match &cli.global.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.check_known(CONFIG_KEYS)?;
    let ctx = Ctx { g: cli.global, kv };
    std::fs::create_dir_all(&ctx.g.out).map_err(|e| Error::Io { path: ctx.g.out.clone(), source: e })?;
    match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Distance(a) => distance(&ctx, a),
        Command::Divergence(a) => divergence(&ctx, a),
        Command::Blindspot(a) => blindspot(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<(), Error> {
    let mut kv = ctx.kv.subset(TRAIN_KEYS);
    kv.set("seed", ctx.g.seed);
    if a.adversarial {
        kv.set("adversarial", true);
    }
    if kv.get("epsilon").is_none() {
        kv.set("epsilon", ctx.default_epsilon());
    }
    if let Some(v) = a.epsilon {
        kv.set("epsilon", v);
    }
    if let Some(v) = a.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = a.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = a.learning_rate {
        kv.set("learning_rate", v);
    }
    if let Some(v) = a.epsilon_warmup_epochs {
        kv.set("epsilon_warmup_epochs", v);
    }
    let cfg = TrainConfig::from_key_values(&kv)?;
    let train_size = ctx.pick(a.train_size, "train_size", usize::MAX)?;
    let train_set = ctx.load(Split::Train, Some(train_size))?;
    let arch = match a.arch {
        Arch::Desk => SmallCnnConfig::desk(),
        Arch::Full => SmallCnnConfig::mnist(),
    };
    let model = Model::small_cnn(&arch, Init::seeded(ctx.g.seed))?;
    let (model, log) = if cfg.adversarial.is_some() {
        train_adversarial(model, &train_set, &cfg)?
    } else {
        train_natural(model, &train_set, &cfg)?
    };
    let path = a.model_out.unwrap_or_else(|| ctx.out_file("model.bslb"));
    model.save_checkpoint(&path)?;
    let mut csv = String::from("epoch,mean_loss,batch_accuracy\n");
    for e in &log.epochs {
        csv += &format!("{},{},{}\n", e.epoch, e.mean_loss, e.batch_accuracy);
    }
    let log_path = ctx.out_file("train_log.csv");
    std::fs::write(&log_path, csv).map_err(|e| Error::Io { path: log_path, source: e })?;
    let test = ctx.test_subset()?;
    println!("train accuracy {:.4}", log.final_train_accuracy);
    println!("test accuracy {:.4} on {} images", evaluate_accuracy(&model, &test)?, test.len());
    println!("checkpoint {}", path.display());
    Ok(())
}

fn attack(ctx: &Ctx, a: AttackArgs) -> Result<(), Error> {
    let model = load_model(&a.model)?;
    let test = ctx.test_subset()?;
    let thresholds = if a.thresholds.is_empty() { vec![ctx.default_epsilon()] } else { a.thresholds };
    let suite = attack_suite(&model, &test, &thresholds, &ctx.method(&a.attack)?)?;
    let path = ctx.out_file("attack.csv");
    suite.write_csv(&path)?;
    println!("attacked {} of {} (rest misclassified)", suite.attacked(), suite.evaluated);
    for (t, r) in suite.thresholds.iter().zip(&suite.success_rates) {
        match r {
            Some(r) => println!("success below {}: {:.4}", t, r),
            None => println!("success below {}: undefined", t),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn feature_source<'a>(f: &'a FeatureArgs, fallback: &'a Model, extractor: &'a Option<Model>) -> FeatureSource<'a> {
    if f.raw {
        return FeatureSource::Raw;
    }
    let model = extractor.as_ref().unwrap_or(fallback);
    FeatureSource::Tap { model, tap: &f.tap, extractor: extractor_tag(model) }
}

fn distance(ctx: &Ctx, a: DistanceArgs) -> Result<(), Error> {
    let model = load_model(&a.model)?;
    let extractor = a.features.extractor.as_deref().map(load_model).transpose()?;
    let source = feature_source(&a.features, &model, &extractor);
    let d = DistanceOptions::default();
    let p = match &a.p {
        Some(p) => p.clone(),
        None => ctx.kv.get("p").unwrap_or("2").to_string(),
    };
    let opts = DistanceOptions {
        k: ctx.pick(a.k, "k", d.k)?,
        norm: Norm::parse(&p)?,
        bins: ctx.pick(a.bins, "bins", d.bins)?,
        min_bin_count: ctx.pick(a.min_bin_count, "min_bin_count", d.min_bin_count)?,
        epsilon: ctx.pick(a.epsilon, "epsilon", ctx.default_epsilon())?,
    };
    let train_set = ctx.load(Split::Train, Some(ctx.pick(a.features.train_size, "train_size", usize::MAX)?))?;
    let test = ctx.test_subset()?;
    let r = distance_binned_success(&model, &source, &train_set, &test, &opts, &ctx.method(&a.attack)?)?;
    let name = format!("distance_{}_k{}_p{}", source.extractor().as_str(), opts.k, p);
    let trend = r.trend();
    let (csv, svg) = emit_report(&Report::Binned(r), &name, &ctx.g.out)?;
    match trend {
        Some(t) => println!("spearman(bin, success) {:.4}", t),
        None => println!("spearman(bin, success) undefined"),
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn divergence(ctx: &Ctx, a: DivergenceArgs) -> Result<(), Error> {
    let extractor = a.extractor.as_deref().map(load_model).transpose()?;
    let source = match (&extractor, a.raw) {
        (_, true) => FeatureSource::Raw,
        (Some(m), false) => FeatureSource::Tap { model: m, tap: &a.tap, extractor: extractor_tag(m) },
        (None, false) => return Err(Error::Usage("divergence needs --extractor or --raw".into())),
    };
    let kind = match a.projection {
        Some(k) => k,
        None => match ctx.kv.get("projection") {
            None | Some("pca") => ProjectionKind::Pca,
            Some("tsne") => ProjectionKind::Tsne,
            Some(other) => return Err(Error::Validation(format!("unknown projection '{}'", other))),
        },
    };
    let projection = match kind {
        ProjectionKind::Pca => Projection::Pca,
        ProjectionKind::Tsne => {
            let d = TsneOptions::default();
            Projection::Tsne(TsneOptions {
                perplexity: ctx.pick(a.perplexity, "perplexity", d.perplexity)?,
                seed: ctx.g.seed,
                ..d
            })
        }
    };
    let opts = ProjectionOptions {
        projection,
        grid: GridOptions {
            resolution: ctx.pick(a.resolution, "resolution", GridOptions::default().resolution)?,
            ..GridOptions::default()
        },
    };
    let train_set = ctx.load(Split::Train, Some(ctx.pick(a.train_size, "train_size", 5000)?))?;
    let test = ctx.test_subset()?;
    let tf = source.features(train_set.images(), Split::Train)?;
    let sf = source.features(test.images(), Split::Test)?;
    let r = per_class_kl(&tf, train_set.labels(), &sf, test.labels(), &opts)?;
    for c in &r.classes {
        match &c.kl {
            Ok(v) => println!("class {}: KL {:.4}", c.class, v),
            Err(e) => println!("class {}: {}", c.class, e),
        }
    }
    if let Some(m) = r.mean {
        println!("mean KL {:.4}", m);
    }
    let name = format!("divergence_{}_{:?}", source.extractor().as_str(), kind).to_lowercase();
    let (csv, svg) = emit_report(&Report::Divergence(r), &name, &ctx.g.out)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn blindspot(ctx: &Ctx, a: BlindspotArgs) -> Result<(), Error> {
    let model = load_model(&a.model)?;
    let test = ctx.test_subset()?;
    let epsilon = ctx.pick(a.epsilon, "epsilon", ctx.default_epsilon())?;
    let grid_tag = if ctx.g.dataset == "fashion" { "fashion" } else { "mnist" };
    let g = blindspot_grid(&model, &test, &param_grid(grid_tag)?, epsilon, &ctx.method(&a.attack)?);
    for r in &g.rows {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        println!(
            "alpha {:<5} beta {:<6} acc {:>8} success@eps {:>8} success@alpha*eps {:>8}{}",
            r.params.alpha(),
            r.params.beta(),
            pct(r.accuracy),
            pct(r.success_eps),
            pct(r.success_strict),
            r.error.as_ref().map_or(String::new(), |e| format!("  error: {}", e))
        );
    }
    let (csv, svg) = emit_report(&Report::Grid(g), &format!("blindspot_{}", ctx.g.dataset), &ctx.g.out)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    if let Some(ab) = a.shift {
        if ab.len() != 2 {
            return Err(Error::Usage("--shift takes alpha,beta".into()));
        }
        let params = TransformParams::new(ab[0], ab[1])?;
        let extractor = a.features.extractor.as_deref().map(load_model).transpose()?;
        let source = feature_source(&a.features, &model, &extractor);
        let train_set = ctx.load(Split::Train, Some(ctx.pick(a.features.train_size, "train_size", usize::MAX)?))?;
        let train_feats = source.features(train_set.images(), Split::Train)?;
        let k = ctx.pick(None, "k", 5)?;
        let bins = ctx.pick(None, "bins", 20)?;
        let h = distance_shift_histograms(&source, &train_feats, &test, &params, k, Norm::L2, bins)?;
        println!("histogram overlap {:.4}", h.overlap());
        let (csv, svg) = emit_report(&Report::Shift(h), &format!("shift_{}", ctx.g.dataset), &ctx.g.out)?;
        println!("wrote {} and {}", csv.display(), svg.display());
    }
    Ok(())
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::Io { path: a.input.clone(), source: e })?;
    let r = Report::from_csv(&text)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let path = ctx.out_file(&format!("{}.svg", stem));
    std::fs::write(&path, r.to_svg()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!("{} report, wrote {}", r.kind(), path.display());
    Ok(())
}
