//! `doconv` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime and numeric failures. Failures also print one JSON line to stderr:
//! `{"error": "<kind>", "message": "..."}`.

pub mod checks;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use doconv_core::doconv::{conv_macc, kernel_delta_h, macc_estimate};
use doconv_core::io::{load_model, save_model, Dataset, DatasetPaths};
use doconv_core::train::{evaluate, train_run, AnyNetwork, Layer, Network, NetworkSpec, TrainConfig, TrainReport, Variant};
use doconv_core::{ComposeMode, ConvGeometry, Error, Scalar};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "doconv", version, about = "Train, fold and inspect over-parameterized convolution models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the network described by a config file
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// train only this seed instead of every seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// print the report as JSON
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a saved model on an IDX dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// IDX image and label files
        #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Kernel)]
        mode: ModeArg,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Fold every over-parameterized layer into a plain convolution
    Fold {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare the cost of the two composition modes
    Macc {
        /// "M,N,C_in,C_out,D_mul,H,W"
        #[arg(long)]
        geom: String,
        #[arg(long, default_value_t = 1)]
        groups: usize,
        #[arg(long)]
        json: bool,
    },
    /// Per-position |W′ − W| of one over-parameterized layer
    Delta {
        #[arg(long)]
        model: PathBuf,
        /// layer index, counting every layer from 0
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run the built-in invariant suite
    Check {
        /// random seeds for the gradient check
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Doconv,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Doconv => Variant::DoConv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Kernel,
    Feature,
}

impl From<ModeArg> for ComposeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Kernel => ComposeMode::Kernel,
            ModeArg::Feature => ComposeMode::Feature,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Contents of a `train` config file. Relative paths are taken relative to
/// the file's own directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default = "NetworkSpec::reference")]
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DatasetPaths,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = doconv_core::io::read_file(path)?;
        let mut cfg: CliConfig =
            serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.data.resolve_against(&base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if cfg.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
    /// the check suite ran but something did not hold
    Checks(Vec<&'static str>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::fmt::Error> for Failure {
    fn from(e: std::fmt::Error) -> Self {
        Failure::Runtime(Error::Numeric(e.to_string()))
    }
}

type Outcome = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let _ = write!(err, "{e}");
            let _ = writeln!(err, "{}", error_line("usage", &e.kind().to_string()));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "{}", error_line("usage", &msg));
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            EXIT_RUNTIME
        }
        Err(Failure::Checks(failed)) => {
            let _ = writeln!(err, "{}", error_line("check_failed", &failed.join("; ")));
            EXIT_RUNTIME
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

fn emit_json(out: &mut dyn Write, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Train {
            config,
            variant,
            seed,
            json,
        } => cmd_train(&config, variant.into(), seed, json, out, err),
        Command::Eval {
            model,
            data,
            mode,
            batch_size,
            json,
        } => cmd_eval(&model, &data, mode.into(), batch_size, json, out),
        Command::Fold { input, output, json } => cmd_fold(&input, &output, json, out),
        Command::Macc { geom, groups, json } => cmd_macc(&geom, groups, json, out),
        Command::Delta { model, layer, json } => cmd_delta(&model, layer, json, out),
        Command::Check { seeds, json } => cmd_check(seeds, json, out),
    }
}

#[derive(Serialize)]
struct TrainOutput {
    #[serde(flatten)]
    report: TrainReport,
    model: PathBuf,
}

fn cmd_train(
    config: &Path,
    variant: Variant,
    seed: Option<u64>,
    json: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let cfg = CliConfig::load(config)?;
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
    let (train, test) = cfg.data.load()?;
    fs::create_dir_all(&cfg.output_dir)?;

    let mut outputs = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let (report, net) = train_run(&cfg.network, variant, &train, Some(&test), &cfg.train, seed, |e| {
            let _ = writeln!(
                err,
                "[{variant} seed {seed}] epoch {:>3}  loss {:.5}  train {:.4}  test {:.4}  {:.1}s",
                e.epoch,
                e.train_loss,
                e.train_accuracy,
                e.test_accuracy.unwrap_or(f64::NAN),
                e.seconds
            );
        })?;
        let stem = format!("{variant}-seed{seed}");
        let model = cfg.output_dir.join(format!("{stem}.docv"));
        save_model(&net, &model)?;
        let output = TrainOutput { report, model };
        fs::write(
            cfg.output_dir.join(format!("{stem}.report.json")),
            serde_json::to_string_pretty(&output).map_err(Error::from)? + "\n",
        )?;
        outputs.push(output);
    }

    if json {
        if outputs.len() == 1 {
            emit_json(out, &outputs[0])
        } else {
            emit_json(out, &outputs)
        }
    } else {
        writeln!(out, "{:<10} {:>6} {:>12} {:>10}  model", "variant", "seed", "train loss", "test acc")?;
        for o in &outputs {
            writeln!(
                out,
                "{:<10} {:>6} {:>12.5} {:>10.4}  {}",
                variant.to_string(),
                o.report.seed,
                o.report.final_train_loss().unwrap_or(f64::NAN),
                o.report.final_test_accuracy().unwrap_or(f64::NAN),
                o.model.display()
            )?;
        }
        Ok(())
    }
}

fn cmd_eval(model: &Path, data: &[PathBuf], mode: ComposeMode, batch_size: usize, json: bool, out: &mut dyn Write) -> Outcome {
    let [images, labels] = data else {
        return Err(Failure::Usage("--data takes an image file and a label file".into()));
    };
    let net = load_model(model)?;
    let dataset = Dataset::load(images, labels)?;
    let (stats, folded) = match &net {
        AnyNetwork::F32(n) => (evaluate(n, &dataset, batch_size, mode)?, n.is_folded()),
        AnyNetwork::F64(n) => (evaluate(n, &dataset, batch_size, mode)?, n.is_folded()),
    };
    if json {
        emit_json(
            out,
            &json!({
                "model": model,
                "dtype": net.dtype(),
                "folded": folded,
                "mode": mode,
                "samples": stats.samples,
                "loss": stats.loss,
                "accuracy": stats.accuracy,
            }),
        )
    } else {
        writeln!(
            out,
            "{}: accuracy {:.4} ({} samples), loss {:.5}",
            model.display(),
            stats.accuracy,
            stats.samples,
            stats.loss
        )?;
        Ok(())
    }
}

#[derive(Serialize)]
struct FoldedLayer {
    layer: usize,
    kind: doconv_core::DoKind,
    /// `None` when `D_mul ≠ M×N`, where `W` and `W′` have different shapes
    max_abs_change: Option<f64>,
}

fn fold_network<T: Scalar>(net: &Network<T>) -> Result<(Network<T>, Vec<FoldedLayer>), Error> {
    let mut layers = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        if let Layer::DoConv(p) = layer {
            let folded = p.fold()?.into_weights();
            let change = (folded.dims() == p.weight.dims())
                .then(|| folded.max_abs_diff(&p.weight))
                .transpose()?;
            layers.push(FoldedLayer {
                layer: i,
                kind: p.kind,
                max_abs_change: change,
            });
        }
    }
    Ok((net.folded()?, layers))
}

fn cmd_fold(input: &Path, output: &Path, json: bool, out: &mut dyn Write) -> Outcome {
    let net = load_model(input)?;
    let (folded, layers) = match &net {
        AnyNetwork::F32(n) => {
            let (f, l) = fold_network(n)?;
            (AnyNetwork::F32(f), l)
        }
        AnyNetwork::F64(n) => {
            let (f, l) = fold_network(n)?;
            (AnyNetwork::F64(f), l)
        }
    };
    save_model(&folded, output)?;
    let max_change = layers.iter().filter_map(|l| l.max_abs_change).fold(0.0, f64::max);
    if json {
        emit_json(
            out,
            &json!({
                "input": input,
                "output": output,
                "layers_folded": layers.len(),
                "max_abs_change": max_change,
                "layers": layers,
            }),
        )
    } else {
        writeln!(out, "folded {} layer(s) into {}", layers.len(), output.display())?;
        for l in &layers {
            match l.max_abs_change {
                Some(c) => writeln!(out, "  layer {:>2} {:<9} max |W' - W| = {c:.6e}", l.layer, l.kind.to_string())?,
                None => writeln!(out, "  layer {:>2} {:<9} (W' and W differ in shape)", l.layer, l.kind.to_string())?,
            }
        }
        writeln!(out, "max |W' - W| = {max_change:.6e}")?;
        Ok(())
    }
}

fn parse_geom(text: &str, groups: usize) -> Result<(ConvGeometry, usize, usize), Failure> {
    let values: Vec<usize> = text
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--geom: {e}")))?;
    let &[m, n, c_in, c_out, dm, h, w] = values.as_slice() else {
        return Err(Failure::Usage(format!(
            "--geom needs 7 comma-separated integers M,N,C_in,C_out,D_mul,H,W; got {}",
            values.len()
        )));
    };
    let geom = ConvGeometry::conv(m, n, c_in, c_out)
        .map_err(|e| Failure::Usage(e.to_string()))?
        .with_groups(groups)
        .with_depth_multiplier(dm);
    geom.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if h == 0 || w == 0 {
        return Err(Failure::Usage("H and W must be positive".into()));
    }
    Ok((geom, h, w))
}

fn cmd_macc(text: &str, groups: usize, json: bool, out: &mut dyn Write) -> Outcome {
    let (geom, h, w) = parse_geom(text, groups)?;
    let feature = macc_estimate(&geom, ComposeMode::Feature, h, w)?;
    let kernel = macc_estimate(&geom, ComposeMode::Kernel, h, w)?;
    let plain = conv_macc(&geom, h, w);
    let cheaper = if kernel.total <= feature.total {
        ComposeMode::Kernel
    } else {
        ComposeMode::Feature
    };
    if json {
        return emit_json(
            out,
            &json!({
                "geometry": geom,
                "height": h,
                "width": w,
                "feature": feature,
                "kernel": kernel,
                "folded_inference": plain,
                "cheaper": cheaper,
            }),
        );
    }
    let mut table = String::new();
    writeln!(table, "{:<8} {:<14} {:>14}", "mode", "step", "MACC")?;
    for r in [&feature, &kernel] {
        for s in &r.steps {
            writeln!(table, "{:<8} {:<14} {:>14}", r.mode.to_string(), s.description, s.macc)?;
        }
        writeln!(table, "{:<8} {:<14} {:>14}", r.mode.to_string(), "total", r.total)?;
    }
    writeln!(table, "{:<8} {:<14} {:>14}", "folded", "inference", plain)?;
    writeln!(table, "cheaper for training: {cheaper} composition")?;
    out.write_all(table.as_bytes())?;
    Ok(())
}

const SHADES: &[u8] = b" .:-=+*#%@";

fn delta_of<T: Scalar>(net: &Network<T>, layer: usize) -> Result<(Vec<Vec<f64>>, [usize; 2]), Failure> {
    let Some(l) = net.layers().get(layer) else {
        return Err(Failure::Usage(format!("layer {layer} out of range ({} layers)", net.layers().len())));
    };
    let Layer::DoConv(p) = l else {
        return Err(Failure::Usage(format!(
            "layer {layer} is '{}', not an over-parameterized layer",
            l.name()
        )));
    };
    let h = kernel_delta_h(p)?;
    let (rows, cols) = (h.dims()[0], h.dims()[1]);
    let grid = (0..rows)
        .map(|r| (0..cols).map(|c| h.get(&[r, c]).as_f64()).collect())
        .collect();
    Ok((grid, [rows, cols]))
}

fn cmd_delta(model: &Path, layer: usize, json: bool, out: &mut dyn Write) -> Outcome {
    let (raw, kernel) = match load_model(model)? {
        AnyNetwork::F32(n) => delta_of(&n, layer)?,
        AnyNetwork::F64(n) => delta_of(&n, layer)?,
    };
    let max = raw.iter().flatten().copied().fold(0.0, f64::max);
    let normalized: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| row.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect())
        .collect();
    if json {
        return emit_json(
            out,
            &json!({ "layer": layer, "kernel": kernel, "h": raw, "normalized": normalized }),
        );
    }
    writeln!(out, "layer {layer}: |W' - W| per kernel position, normalized (max = {max:.6e})")?;
    for row in &normalized {
        let cells: Vec<String> = row
            .iter()
            .map(|&v| {
                let shade = SHADES[((v * (SHADES.len() - 1) as f64).round() as usize).min(SHADES.len() - 1)] as char;
                format!("{v:.3}{shade}")
            })
            .collect();
        writeln!(out, "  {}", cells.join("  "))?;
    }
    Ok(())
}

fn cmd_check(seeds: usize, json: bool, out: &mut dyn Write) -> Outcome {
    let results = checks::run_all(seeds.max(1))?;
    if json {
        emit_json(out, &results)?;
    } else {
        for r in &results {
            writeln!(
                out,
                "{} {:<48} worst {:.3e} (limit {:.0e}, {} cases)",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.worst,
                r.threshold,
                r.cases
            )?;
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(failed))
    }
}
