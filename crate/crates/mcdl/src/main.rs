//! Command-line front end: dataset synthesis, training, annotation,
//! evaluation, timing benchmarks, and model inspection. Diagnostics go to
//! stderr; machine-readable results go to files or stdout.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mcdl::annotator::score_matrix;
use mcdl::data::{
    load_matrix, load_model, save_matrix, save_model, FeatureMatrix, LabelMatrix, Model,
};
use mcdl::eval::{bench_annotation, per_label_prf, pr_curve, top_n_indices, CurveMode, KnnConfig};
use mcdl::synth::{generate_synthetic, SynthSpec};
use mcdl::trainer::{train_method, Method, TrainConfig};
use mcdl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mcdl",
    version,
    about = "Coupled dictionary learning for multi-label annotation",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads; overrides the MCDL_THREADS variable and the config.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a planted coupled model.
    Synth {
        /// Directory receiving features.mat, labels.mat, the planted
        /// dictionaries, and spec.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prototypes: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        label_count: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Prototypes mixed into each sample.
        #[arg(long)]
        sparsity: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Probability that a planted semantic entry is nonzero.
        #[arg(long)]
        label_density: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        score_cap: Option<f64>,
        /// Mixture score above which a label is set.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Learn a coupled dictionary model from feature and label matrices.
    Train {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output directory for the trained model.
        #[arg(long)]
        model_dir: PathBuf,
        /// JSON training configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// mcdl (default), udl, or cdl.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dictionary size.
        #[arg(long)]
        prototypes: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Run the validation grid search before the final fit.
        #[arg(long)]
        grid_search: bool,
    },
    /// Score and label queries with a trained model.
    Annotate {
        #[arg(long)]
        model_dir: PathBuf,
        /// Query matrix, one column per query.
        #[arg(long)]
        features: PathBuf,
        /// Directory receiving scores.mat and predicted.txt.
        #[arg(long)]
        out: PathBuf,
        /// Emit the n best labels per query instead of thresholding.
        #[arg(long)]
        topn: Option<usize>,
    },
    /// Report precision, recall, and F1 of a model on labeled data.
    Eval {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Write the precision-recall curve here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// threshold (default) or topn.
        #[arg(long)]
        curve_mode: Option<String>,
    },
    /// Time model annotation against the nearest-neighbor baseline.
    Bench {
        #[arg(long)]
        model_dir: PathBuf,
        /// Training features the baseline searches.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Query matrix to annotate.
        #[arg(long)]
        queries: PathBuf,
        /// Only "knn" is available.
        #[arg(long, default_value = "knn")]
        baseline: String,
        /// Neighbor count of the baseline.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Print a stored model's dimensions and hyperparameters.
    Inspect {
        #[arg(long)]
        model_dir: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            prototypes,
            feature_dim,
            label_count,
            samples,
            sparsity,
            noise_sigma,
            label_density,
            seed,
            score_cap,
            threshold,
        } => {
            let mut spec = SynthSpec::default();
            set(&mut spec.prototypes, prototypes);
            set(&mut spec.feature_dim, feature_dim);
            set(&mut spec.label_count, label_count);
            set(&mut spec.samples, samples);
            set(&mut spec.sparsity, sparsity);
            set(&mut spec.noise_sigma, noise_sigma);
            set(&mut spec.label_density, label_density);
            set(&mut spec.seed, seed);
            set(&mut spec.score_cap, score_cap);
            set(&mut spec.threshold, threshold);
            cmd_synth(&out, &spec)
        }
        Command::Train {
            features,
            labels,
            model_dir,
            config,
            method,
            seed,
            prototypes,
            rounds,
            grid_search,
        } => {
            let mut cfg = match &config {
                Some(path) => read_config(path)?,
                None => TrainConfig::default(),
            };
            if features.is_some() {
                cfg.features = features;
            }
            if labels.is_some() {
                cfg.labels = labels;
            }
            set(&mut cfg.seed, seed);
            set(&mut cfg.num_prototypes, prototypes);
            set(&mut cfg.rounds, rounds);
            if grid_search {
                cfg.grid_search = true;
            }
            let method = Method::from_str(method.as_deref().unwrap_or("mcdl"))?;
            init_threads(resolve_threads(cli.threads, cfg.threads)?)?;
            cmd_train(&cfg, method, &model_dir)
        }
        Command::Annotate { model_dir, features, out, topn } => {
            init_threads(resolve_threads(cli.threads, None)?)?;
            cmd_annotate(&model_dir, &features, &out, topn)
        }
        Command::Eval { model_dir, features, labels, out, curve_mode } => {
            let mode = CurveMode::from_str(curve_mode.as_deref().unwrap_or("threshold"))?;
            init_threads(resolve_threads(cli.threads, None)?)?;
            cmd_eval(&model_dir, &features, &labels, out.as_deref(), mode)
        }
        Command::Bench {
            model_dir,
            features,
            labels,
            queries,
            baseline,
            k,
            repeats,
        } => {
            if baseline != "knn" {
                return Err(Error::InvalidParam(format!(
                    "unknown baseline '{baseline}', expected 'knn'"
                )));
            }
            init_threads(resolve_threads(cli.threads, None)?)?;
            cmd_bench(&model_dir, &features, &labels, &queries, k, repeats)
        }
        Command::Inspect { model_dir } => cmd_inspect(&model_dir),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Thread-count precedence: --threads, then MCDL_THREADS, then config.
fn resolve_threads(flag: Option<usize>, config: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MCDL_THREADS") {
        Ok(raw) => {
            let n = raw.trim().parse::<usize>().map_err(|_| {
                Error::InvalidParam(format!(
                    "MCDL_THREADS must be a positive integer, got '{raw}'"
                ))
            })?;
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(config),
        Err(std::env::VarError::NotUnicode(_)) => Err(Error::InvalidParam(
            "MCDL_THREADS is not valid unicode".into(),
        )),
    }
}

fn init_threads(count: Option<usize>) -> Result<()> {
    let Some(n) = count else { return Ok(()) };
    if n == 0 {
        return Err(Error::InvalidParam("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParam(format!("thread pool setup failed: {e}")))
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::new(load_matrix(path)?)
}

fn load_labels(path: &Path) -> Result<LabelMatrix> {
    LabelMatrix::new(load_matrix(path)?)
}

fn cmd_synth(out: &Path, spec: &SynthSpec) -> Result<()> {
    let (x, y, truth) = generate_synthetic(spec)?;
    create_dir(out)?;
    save_matrix(&out.join("features.mat"), x.values())?;
    save_matrix(&out.join("labels.mat"), y.values())?;
    save_matrix(&out.join("truth_visual.mat"), &truth.visual)?;
    save_matrix(&out.join("truth_semantic.mat"), &truth.semantic)?;
    let json = serde_json::to_string_pretty(spec).map_err(|source| Error::Json {
        path: out.join("spec.json").display().to_string(),
        source,
    })?;
    write_text(&out.join("spec.json"), &json)?;
    eprintln!(
        "wrote {} samples ({} features, {} labels) to {}",
        spec.samples,
        spec.feature_dim,
        spec.label_count,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &TrainConfig, method: Method, model_dir: &Path) -> Result<()> {
    let features = config.features.clone().ok_or_else(|| {
        Error::InvalidParam("no feature file; pass --features or set it in the config".into())
    })?;
    let labels = config.labels.clone().ok_or_else(|| {
        Error::InvalidParam("no label file; pass --labels or set it in the config".into())
    })?;
    let x = load_features(&features)?;
    let y = load_labels(&labels)?;
    eprintln!(
        "training {method} on {} samples ({} features, {} labels)",
        x.len(),
        x.dim(),
        y.label_count()
    );
    let (model, report) = train_method(&x, &y, config, method)?;
    save_model(model_dir, &model)?;
    match serde_json::to_string_pretty(&report) {
        Ok(json) => eprintln!("{json}"),
        Err(e) => eprintln!("report serialization failed: {e}"),
    }
    eprintln!("model saved to {}", model_dir.display());
    Ok(())
}

fn cmd_annotate(model_dir: &Path, features: &Path, out: &Path, topn: Option<usize>) -> Result<()> {
    let model = load_model(model_dir)?;
    let x = load_features(features)?;
    if let Some(n) = topn {
        let t = model.label_count();
        if n == 0 || n > t {
            return Err(Error::InvalidParam(format!(
                "top-n count {n} must be in 1..={t}"
            )));
        }
    }
    let scores = score_matrix(&model, &x)?;
    create_dir(out)?;
    save_matrix(&out.join("scores.mat"), &scores)?;

    let mut lines = String::new();
    for i in 0..x.len() {
        let indices: Vec<usize> = match topn {
            Some(n) => top_n_indices(scores.column(i), n),
            None => (0..model.label_count())
                .filter(|&t| scores[[t, i]] > model.tau_optimal())
                .collect(),
        };
        let line: Vec<String> = indices.iter().map(|t| t.to_string()).collect();
        lines.push_str(&line.join(" "));
        lines.push('\n');
    }
    write_text(&out.join("predicted.txt"), &lines)?;
    eprintln!("annotated {} queries into {}", x.len(), out.display());
    Ok(())
}

fn cmd_eval(
    model_dir: &Path,
    features: &Path,
    labels: &Path,
    curve_out: Option<&Path>,
    mode: CurveMode,
) -> Result<()> {
    let model = load_model(model_dir)?;
    let x = load_features(features)?;
    let truth = load_labels(labels)?;
    let scores = score_matrix(&model, &x)?;
    let tau = model.tau_optimal();
    let pred = LabelMatrix::new(scores.mapv(|s| if s > tau { 1.0 } else { 0.0 }))?;
    let prf = per_label_prf(&pred, &truth)?;
    println!("P {:.1}", prf.precision * 100.0);
    println!("R {:.1}", prf.recall * 100.0);
    println!("F1 {:.1}", prf.f1 * 100.0);

    if let Some(path) = curve_out {
        let curve = pr_curve(&scores, &truth, mode)?;
        let mut csv = String::from(match mode {
            CurveMode::Threshold => "threshold,precision,recall\n",
            CurveMode::TopN => "topn,precision,recall\n",
        });
        for p in &curve.points {
            csv.push_str(&format!("{},{},{}\n", p.operating, p.precision, p.recall));
        }
        write_text(path, &csv)?;
        eprintln!("wrote {} curve points to {}", curve.points.len(), path.display());
    }
    Ok(())
}

fn cmd_bench(
    model_dir: &Path,
    features: &Path,
    labels: &Path,
    queries: &Path,
    k: usize,
    repeats: usize,
) -> Result<()> {
    let model = load_model(model_dir)?;
    let train_x = load_features(features)?;
    let train_y = load_labels(labels)?;
    let q = load_features(queries)?;
    let knn = KnnConfig { features: &train_x, labels: &train_y, k };
    let report = bench_annotation(&model, &q, &knn, repeats)?;
    let json = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
        path: "<bench report>".into(),
        source,
    })?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct InspectReport<'a> {
    raw_dim: usize,
    feature_dim: usize,
    label_count: usize,
    num_prototypes: usize,
    tau_optimal: f64,
    has_pca: bool,
    hyperparams: &'a mcdl::trainer::Hyperparams,
}

fn cmd_inspect(model_dir: &Path) -> Result<()> {
    let model: Model = load_model(model_dir)?;
    let report = InspectReport {
        raw_dim: model.raw_dim(),
        feature_dim: model.feature_dim(),
        label_count: model.label_count(),
        num_prototypes: model.num_prototypes(),
        tau_optimal: model.tau_optimal(),
        has_pca: model.pca().is_some(),
        hyperparams: model.hyperparams(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
        path: "<inspect report>".into(),
        source,
    })?;
    println!("{json}");
    Ok(())
}
