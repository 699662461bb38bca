//! `dcf`: basis generation, filter decomposition, training, evaluation and
//! stability checks from the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use dcf_core::bases::{sample_delta_basis, sample_fb_basis, sample_pca_basis, sample_random_basis};
use dcf_core::config::ExperimentConfig;
use dcf_core::data::{images_to_tensor, load_idx, Dataset, Split};
use dcf_core::dcf::{decompose_network, network_conv_shapes};
use dcf_core::model_io::{load_model, save_model};
use dcf_core::stability::{battery_csv, field_battery, fmt12, rescale_to_admissible, run_battery, ConvStack};
use dcf_core::train::{conv_filters, evaluate, metrics_csv, train};
use dcf_core::{BasisKind, BasisSet, DcfError, Network, Tensor};

#[derive(Parser, Debug)]
#[command(name = "dcf", version, about, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a filter basis and write it with its eigenvalue table.
    Basis(BasisArgs),
    /// Project a model's conv filters onto a basis and report the savings.
    Decompose(DecomposeArgs),
    /// Train Conv-2 from a key = value config file.
    Train(TrainArgs),
    /// Loss and error of a model on an IDX dataset.
    Eval(EvalArgs),
    /// Run the deformation-stability battery on a model.
    Stability(StabilityArgs),
    /// Summarise metrics, stability and decomposition CSVs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BasisArgs {
    #[arg(long)]
    kind: String,
    #[arg(long = "K")]
    k: usize,
    #[arg(long = "L")]
    l: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model whose filters feed PCA.
    #[arg(long)]
    source: Option<PathBuf>,
    /// 1-based conv layer of `--source` used for PCA.
    #[arg(long, default_value_t = 1)]
    layer: usize,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long = "K")]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the decomposed model here.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Input image side used for flop accounting.
    #[arg(long, default_value_t = 28)]
    input_size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// IDX image file.
    #[arg(long)]
    data: PathBuf,
    /// IDX label file; defaults to the image file's `labels-idx1` sibling.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[arg(long)]
    model: PathBuf,
    /// `|∇τ|_∞` of every field.
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    fields: usize,
    #[arg(long)]
    inputs: usize,
    #[arg(long)]
    out: PathBuf,
    /// IDX image file supplying the inputs; defaults to the MNIST test images.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the model as is instead of rescaling FB layers to A <= 1.
    #[arg(long)]
    no_rescale: bool,
    /// Drop the pooling layers (the setting the theory covers).
    #[arg(long)]
    no_pool: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    stability: Option<PathBuf>,
    #[arg(long)]
    decompose: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl From<DcfError> for Failure {
    fn from(e: DcfError) -> Self {
        match e {
            DcfError::Io(_) | DcfError::Format { .. } => Failure::Io(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Prefixes an error with the file it concerns.
fn at(path: &Path) -> impl Fn(DcfError) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Validation(m) => Failure::Validation(format!("{}: {m}", path.display())),
        Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Validation(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(m) | Failure::Io(m)) = &f;
            eprintln!("dcf: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Outcome<()> {
    let threads = threads()?;
    match cmd {
        Command::Basis(a) => basis(a),
        Command::Decompose(a) => decompose(a),
        Command::Train(a) => train_cmd(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Stability(a) => stability(a, threads),
        Command::Report(a) => report(a),
    }
}

/// Worker cap from `DCF_THREADS`, default 1.
fn threads() -> Outcome<usize> {
    match std::env::var("DCF_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => invalid(format!("DCF_THREADS must be a positive integer, got '{v}'")),
        },
    }
}

fn parse_kind(s: &str) -> Outcome<BasisKind> {
    BasisKind::parse(s).ok_or_else(|| Failure::Validation(format!("unknown basis kind '{s}' (fb, random, pca, delta)")))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes `<primary>.manifest` listing the command, version, seed, the hash
/// of the canonical configuration, and a hash of every output.
fn manifest(command: &str, seed: u64, config: &str, outputs: &[&Path]) -> Outcome<()> {
    let mut m = String::new();
    let _ = writeln!(m, "command = {command}");
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "config_sha256 = {}", sha256(config.as_bytes()));
    for line in config.lines() {
        let _ = writeln!(m, "config: {line}");
    }
    for out in outputs {
        let _ = writeln!(m, "output = {} sha256:{}", out.display(), sha256(&fs::read(out)?));
    }
    let mut path = outputs[0].as_os_str().to_owned();
    path.push(".manifest");
    write(Path::new(&path), m)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn make_basis(kind: BasisKind, k: usize, l: usize, seed: u64, pca_filters: Option<&[f64]>) -> Outcome<BasisSet> {
    if k == 0 || k > l * l {
        return invalid(format!("K = {k} must be in 1..={}", l * l));
    }
    Ok(match kind {
        BasisKind::FourierBessel => sample_fb_basis(k, l)?,
        BasisKind::Random => sample_random_basis(k, l, seed)?,
        BasisKind::Delta => {
            if k != l * l {
                return invalid(format!("the delta basis needs K = L^2 = {}", l * l));
            }
            sample_delta_basis(l)?
        }
        BasisKind::Pca => match pca_filters {
            Some(f) => sample_pca_basis(f, l, k)?,
            None => return invalid("PCA bases need --source <model.dcfn>"),
        },
    })
}

fn basis(a: BasisArgs) -> Outcome<()> {
    let kind = parse_kind(&a.kind)?;
    let filters = match (&a.source, kind) {
        (Some(src), BasisKind::Pca) => {
            let all = conv_filters(&load_model(src).map_err(at(src))?);
            match all.get(a.layer.wrapping_sub(1)) {
                Some(f) => Some(f.clone()),
                None => return invalid(format!("--layer {} but the model has {} conv layers", a.layer, all.len())),
            }
        }
        _ => None,
    };
    let b = make_basis(kind, a.k, a.l, a.seed, filters.as_deref())?;
    write(&a.out, b.to_bytes())?;

    let mut csv = String::new();
    if kind == BasisKind::FourierBessel {
        csv.push_str("k,m,q,parity,mu,root\n");
        for m in b.modes() {
            let p = match m.parity {
                dcf_core::Parity::Cosine => "cos",
                dcf_core::Parity::Sine => "sin",
            };
            let _ = writeln!(csv, "{},{},{},{p},{},{}", m.k, m.m, m.q, fmt12(m.mu), fmt12(m.root));
        }
    } else {
        csv.push_str("k,norm_sq\n");
        for k in 0..b.count() {
            let _ = writeln!(csv, "{},{}", k + 1, fmt12(b.gram()[k * b.count() + k]));
        }
    }
    let table = sibling(&a.out, "_eigenvalues.csv");
    write(&table, csv)?;
    let config = format!(
        "kind = {}\nK = {}\nL = {}\nseed = {}\nsource = {}\nlayer = {}\n",
        kind.name(),
        a.k,
        a.l,
        a.seed,
        a.source.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        a.layer
    );
    manifest("basis", a.seed, &config, &[&a.out, &table])
}

fn decompose(a: DecomposeArgs) -> Outcome<()> {
    let kind = parse_kind(&a.kind)?;
    let net = load_model(&a.model).map_err(at(&a.model))?;
    let shapes = network_conv_shapes(&net, a.input_size, a.input_size)?;
    if shapes.is_empty() {
        return invalid("model has no convolutional layers");
    }
    let filters = conv_filters(&net);
    let bases = shapes
        .iter()
        .enumerate()
        .map(|(l, s)| {
            make_basis(kind, a.k, s.kernel, a.seed.wrapping_add(l as u64), Some(&filters[l])).map(Arc::new)
        })
        .collect::<Outcome<Vec<_>>>()?;
    // FB and delta bases depend only on (K, L): share one instance.
    let bases: Vec<Arc<BasisSet>> = match kind {
        BasisKind::FourierBessel | BasisKind::Delta => bases
            .iter()
            .map(|b| bases.iter().find(|c| c.size() == b.size()).unwrap().clone())
            .collect(),
        _ => bases,
    };
    let (decomposed, fits) = decompose_network(&net, &bases)?;

    let mut csv = String::from(
        "layer,in_channels,out_channels,kernel,spatial,K,K_over_L2,dense_params,dcf_params,param_ratio,dense_flops,dcf_flops,flop_ratio,mean_residual,max_residual\n",
    );
    let (mut dp, mut cp, mut df, mut cf) = (0u64, 0u64, 0u64, 0u64);
    let mut all_res = Vec::new();
    for (l, (s, fit)) in shapes.iter().zip(&fits).enumerate() {
        let row = (
            s.dense_params(),
            s.dcf_params(a.k),
            s.dense_flops() + s.relu_flops(),
            s.dcf_flops(a.k) + s.relu_flops(),
        );
        dp += row.0;
        cp += row.1;
        df += row.2;
        cf += row.3;
        all_res.extend_from_slice(&fit.residuals);
        let max = fit.residuals.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l + 1,
            s.in_channels,
            s.out_channels,
            s.kernel,
            s.spatial,
            a.k,
            fmt12(a.k as f64 / (s.kernel * s.kernel) as f64),
            row.0,
            row.1,
            fmt12(row.1 as f64 / row.0 as f64),
            row.2,
            row.3,
            fmt12(row.3 as f64 / row.2 as f64),
            fmt12(fit.mean_residual()),
            fmt12(max)
        );
    }
    let mean = all_res.iter().sum::<f64>() / all_res.len().max(1) as f64;
    let max = all_res.iter().cloned().fold(0.0, f64::max);
    let kern = shapes[0].kernel;
    let _ = writeln!(
        csv,
        "total,,,,,{},{},{dp},{cp},{},{df},{cf},{},{},{}",
        a.k,
        fmt12(a.k as f64 / (kern * kern) as f64),
        fmt12(cp as f64 / dp as f64),
        fmt12(cf as f64 / df as f64),
        fmt12(mean),
        fmt12(max)
    );
    write(&a.out, csv)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.save {
        save_model(p, &decomposed)?;
        outputs.push(p);
    }
    let config = format!(
        "model_sha256 = {}\nkind = {}\nK = {}\nseed = {}\ninput_size = {}\n",
        sha256(&fs::read(&a.model)?),
        kind.name(),
        a.k,
        a.seed,
        a.input_size
    );
    manifest("decompose", a.seed, &config, &outputs)
}

fn mnist_dir(configured: Option<&Path>) -> Outcome<PathBuf> {
    if let Some(d) = configured {
        return Ok(d.to_path_buf());
    }
    match std::env::var_os("DCF_MNIST_DIR") {
        Some(d) => Ok(PathBuf::from(d)),
        None => invalid("no MNIST directory: set data_dir in the config or DCF_MNIST_DIR"),
    }
}

fn train_cmd(a: TrainArgs, threads: usize) -> Outcome<()> {
    let cfg = ExperimentConfig::load(&a.config).map_err(at(&a.config))?;
    let dir = mnist_dir(cfg.data_dir.as_deref())?;
    let train_set = Dataset::load_mnist(&dir, Split::Train).map_err(at(&dir))?;
    let test_set = Dataset::load_mnist(&dir, Split::Test).map_err(at(&dir))?;
    let (net, rows) = train(&cfg, &train_set, &test_set, threads, |m| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train loss {:.4} err {:.4}  test loss {:.4} err {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_err, m.test_loss, m.test_err
        )
    })?;
    let model = cfg.output_dir.join("model.dcfn");
    let metrics = cfg.output_dir.join("metrics.csv");
    fs::create_dir_all(&cfg.output_dir)?;
    save_model(&model, &net)?;
    write(&metrics, metrics_csv(&rows))?;
    manifest("train", cfg.train.seed, &cfg.to_text(), &[&metrics, &model])
}

fn default_labels(images: &Path) -> Outcome<PathBuf> {
    let name = images.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if name.contains("images-idx3") {
        Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
    } else {
        invalid(format!("cannot infer the label file for {}; pass --labels", images.display()))
    }
}

fn eval(a: EvalArgs, threads: usize) -> Outcome<()> {
    let net = load_model(&a.model).map_err(at(&a.model))?;
    let labels = match a.labels {
        Some(l) => l,
        None => default_labels(&a.data)?,
    };
    let data = Dataset::load(&a.data, &labels, Split::Test).map_err(at(&a.data))?;
    let (loss, err) = evaluate(&net, &data, threads)?;
    let csv = format!(
        "samples,loss,error,accuracy\n{},{},{},{}\n",
        data.len(),
        fmt12(loss),
        fmt12(err),
        fmt12(1.0 - err)
    );
    match &a.out {
        Some(out) => {
            write(out, &csv)?;
            let config = format!(
                "model_sha256 = {}\ndata_sha256 = {}\nlabels_sha256 = {}\n",
                sha256(&fs::read(&a.model)?),
                sha256(&fs::read(&a.data)?),
                sha256(&fs::read(&labels)?)
            );
            manifest("eval", 0, &config, &[out])
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn stability(a: StabilityArgs, threads: usize) -> Outcome<()> {
    if !(a.eps > 0.0 && a.eps < 0.19) {
        return invalid(format!("--eps {} must lie in (0, 0.19)", a.eps));
    }
    if a.fields == 0 || a.inputs == 0 {
        return invalid("--fields and --inputs must be positive");
    }
    let net: Network = load_model(&a.model).map_err(at(&a.model))?;
    let mut stack = ConvStack::from_network(&net)?;
    if !a.no_rescale {
        stack = rescale_to_admissible(&stack)
            .map_err(|e| Failure::Validation(format!("{e}; pass --no-rescale for models without FB layers")))?
            .0;
    }
    if a.no_pool {
        stack = stack.without_pools();
    }
    let images_path = match a.data {
        Some(p) => p,
        None => mnist_dir(None)?.join(Split::Test.mnist_files().0),
    };
    let images = images_to_tensor(&load_idx(&images_path).map_err(at(&images_path))?)?;
    if images.batch() < a.inputs {
        return invalid(format!("--inputs {} but the data holds {} images", a.inputs, images.batch()));
    }
    let inputs: Vec<Tensor> = (0..a.inputs).map(|i| images.select(&[i])).collect();
    let fields = field_battery(a.fields, a.eps, a.eps, a.seed);
    let rows = run_battery(&stack, &inputs, &fields, threads)?;
    write(&a.out, battery_csv(&rows))?;
    let violations = rows.iter().filter(|r| !r.2.satisfied()).count();
    eprintln!("{} items, {violations} with a violated bound", rows.len());
    let config = format!(
        "model_sha256 = {}\ndata_sha256 = {}\neps = {}\nfields = {}\ninputs = {}\nrescale = {}\npool = {}\n",
        sha256(&fs::read(&a.model)?),
        sha256(&fs::read(&images_path)?),
        fmt12(a.eps),
        a.fields,
        a.inputs,
        !a.no_rescale,
        !a.no_pool
    );
    manifest("stability", a.seed, &config, &[&a.out])
}

/// Rows of a CSV file keyed by header name.
fn read_table(path: &Path) -> Outcome<Vec<std::collections::HashMap<String, String>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?
        .clone();
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            Ok(headers.iter().map(String::from).zip(r.iter().map(String::from)).collect())
        })
        .collect()
}

fn field(row: &std::collections::HashMap<String, String>, key: &str, path: &Path) -> Outcome<f64> {
    row.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Failure::Validation(format!("{}: missing or non-numeric column '{key}'", path.display())))
}

fn report(a: ReportArgs) -> Outcome<()> {
    if a.metrics.is_none() && a.stability.is_none() && a.decompose.is_none() {
        return invalid("report needs at least one of --metrics, --stability, --decompose");
    }
    let mut csv = String::from("key,value\n");
    let mut config = String::new();
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(p) = &a.metrics {
        let rows = read_table(p)?;
        let Some(last) = rows.last() else {
            return invalid(format!("{}: no epochs", p.display()));
        };
        let mut best = (f64::INFINITY, 0.0);
        for r in &rows {
            let e = field(r, "test_err", p)?;
            if e < best.0 {
                best = (e, field(r, "epoch", p)?);
            }
        }
        let _ = writeln!(csv, "epochs,{}", rows.len());
        let _ = writeln!(csv, "final_train_loss,{}", fmt12(field(last, "train_loss", p)?));
        let _ = writeln!(csv, "final_test_loss,{}", fmt12(field(last, "test_loss", p)?));
        let _ = writeln!(csv, "final_test_err,{}", fmt12(field(last, "test_err", p)?));
        let _ = writeln!(csv, "final_test_accuracy,{}", fmt12(1.0 - field(last, "test_err", p)?));
        let _ = writeln!(csv, "best_test_err,{}", fmt12(best.0));
        let _ = writeln!(csv, "best_epoch,{}", best.1);
        inputs.push(p);
    }
    if let Some(p) = &a.stability {
        let rows = read_table(p)?;
        let violated = rows.iter().filter(|r| r.get("satisfied").map(String::as_str) != Some("true")).count();
        let mut worst = (0.0f64, 0.0f64);
        for r in &rows {
            worst.0 = worst.0.max(field(r, "ratio_commutator", p)?);
            worst.1 = worst.1.max(field(r, "ratio_total", p)?);
        }
        let _ = writeln!(csv, "stability_items,{}", rows.len());
        let _ = writeln!(csv, "stability_violations,{violated}");
        let _ = writeln!(csv, "max_ratio_commutator,{}", fmt12(worst.0));
        let _ = writeln!(csv, "max_ratio_total,{}", fmt12(worst.1));
        inputs.push(p);
    }
    if let Some(p) = &a.decompose {
        let rows = read_table(p)?;
        let Some(total) = rows.iter().find(|r| r.get("layer").map(String::as_str) == Some("total")) else {
            return invalid(format!("{}: no total row", p.display()));
        };
        let _ = writeln!(csv, "dense_params,{}", field(total, "dense_params", p)?);
        let _ = writeln!(csv, "dcf_params,{}", field(total, "dcf_params", p)?);
        let _ = writeln!(csv, "param_ratio,{}", fmt12(field(total, "param_ratio", p)?));
        let _ = writeln!(csv, "flop_ratio,{}", fmt12(field(total, "flop_ratio", p)?));
        let _ = writeln!(csv, "mean_residual,{}", fmt12(field(total, "mean_residual", p)?));
        inputs.push(p);
    }
    for p in inputs {
        let _ = writeln!(config, "{} sha256:{}", p.display(), sha256(&fs::read(p)?));
    }
    write(&a.out, csv)?;
    manifest("report", 0, &config, &[&a.out])
}
