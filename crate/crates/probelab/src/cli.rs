//! The `probelab` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error. Data
//! goes to stdout (or `--out`), diagnostics to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use probelab_core::analysis::{Decoding, FailureThresholds, WeightSlice};
use probelab_core::category::CategoryId;
use probelab_core::sparse::SparseFitConfig;
use probelab_core::steering::{Targets, DEFAULT_ALPHA_GRID};
use probelab_core::types::{Pooling, Split, Stage};
use serde::Serialize;
use serde_json::Value;

use crate::analyze::{self, CosineSelection};
use crate::error::{write_atomic, Error, Result};
use crate::manifest::{validate_counts, CategoryBank, CountExpectation, Manifest};
use crate::report;
use crate::steer::{self, ComposeRequest, SteeringFile};
use crate::store::{self, RecordFilter};
use crate::sweep::{self, ProbeArtifact, SweepConfig, SweepOptions};
use crate::toy;

#[derive(Debug, Parser)]
#[command(name = "probelab", version, about = "Linear probing of layerwise VLM activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset manifests.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Activation shard stores.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Probing sweeps.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Tables derived from sweep ledgers.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Post-sweep analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Steering vectors and the α search.
    #[command(subcommand)]
    Steer(SteerCmd),
    /// Sparse probes over output logits.
    #[command(subcommand)]
    Logit(LogitCmd),
    /// Synthetic fixtures.
    #[command(subcommand)]
    Toy(ToyCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Jsonl,
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct Output {
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BankArg {
    /// Category bank JSON; defaults to categories.json next to the manifest,
    /// then the built-in bank.
    #[arg(long)]
    categories: Option<PathBuf>,
}

impl BankArg {
    fn manifest(&self, path: &Path) -> Result<Manifest> {
        match &self.categories {
            Some(bank) => Manifest::load_with_bank(path, CategoryBank::load(bank)?),
            None => Manifest::load(path),
        }
    }

    fn bank(&self) -> Result<CategoryBank> {
        self.categories.as_deref().map_or_else(|| Ok(CategoryBank::default()), CategoryBank::load)
    }
}

#[derive(Debug, Subcommand)]
enum ManifestCmd {
    /// Parse a manifest and check per-cell sample counts.
    Validate {
        manifest: PathBuf,
        #[command(flatten)]
        bank: BankArg,
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        /// Print every cell, not just deviations.
        #[arg(long)]
        all_cells: bool,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Subcommand)]
enum StoreCmd {
    /// Read every shard in full and check it.
    Validate {
        #[arg(env = "PROBELAB_STORE")]
        root: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Stream matching records.
    Query {
        #[arg(long, env = "PROBELAB_STORE")]
        store: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        bank: BankArg,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        stage: Option<Stage>,
        #[arg(long)]
        layer: Option<u32>,
        #[arg(long)]
        pooling: Option<Pooling>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        distance: Option<u32>,
        #[arg(long)]
        split: Option<Split>,
        /// Leave activation values out of the output.
        #[arg(long)]
        no_values: bool,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Subcommand)]
enum SweepCmd {
    /// Run (or resume) a sweep.
    Run {
        #[arg(long, env = "PROBELAB_STORE")]
        store: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        bank: BankArg,
        /// Ledger file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// TOML sweep config; protocol defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop after this many new rows, leaving the ledger uncompacted.
        #[arg(long)]
        max_tasks: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Layer × distance matrices of mean chance-corrected accuracy.
    Heatmap {
        #[arg(long)]
        ledger: PathBuf,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SliceArg {
    Full,
    VisualHalf,
    LastTokenHalf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecodingArg {
    Greedy,
    Constrained,
}

impl From<DecodingArg> for Decoding {
    fn from(d: DecodingArg) -> Self {
        match d {
            DecodingArg::Greedy => Decoding::Greedy,
            DecodingArg::Constrained => Decoding::Constrained,
        }
    }
}

#[derive(Debug, Args)]
struct GapArgs {
    #[arg(long)]
    ledger: PathBuf,
    /// Model-evaluation rows (JSON lines).
    #[arg(long)]
    model_accuracy: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    decoding: DecodingArg,
    #[command(flatten)]
    bank: BankArg,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCmd {
    /// Cosine similarity of per-category representative probe directions.
    Cosine {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "post_layernorm")]
        stage: Stage,
        #[arg(long, default_value_t = 0)]
        layer: u32,
        #[arg(long, default_value = "llm_concat")]
        pooling: Pooling,
        #[arg(long)]
        distance: u32,
        /// Comma-separated category ids, in matrix order.
        #[arg(long, value_delimiter = ',')]
        category: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "full")]
        slice: SliceArg,
        #[command(flatten)]
        bank: BankArg,
        #[command(flatten)]
        output: Output,
    },
    /// Chance-corrected probe-minus-model accuracy gaps.
    Gap(GapArgs),
    /// Perceptual / cognitive failure verdicts.
    Failures {
        #[command(flatten)]
        gap: GapArgs,
        #[arg(long, default_value_t = 0.5)]
        tau_hi: f64,
        #[arg(long, default_value_t = 0.3)]
        tau_lo: f64,
        #[arg(long, default_value_t = 0.2)]
        tau_gap: f64,
    },
    /// Evaluate stored probes on another shard without retraining.
    Ood {
        /// Probe artifact written by a sweep.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        bank: BankArg,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Visual,
    Last,
    Both,
}

#[derive(Debug, Subcommand)]
enum SteerCmd {
    /// Compose a steering file from a ledger's llm_concat probes.
    Compose {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        category: String,
        #[arg(long)]
        distance: u32,
        /// Defaults to the earliest llm layer with mean a' >= 0.9.
        #[arg(long)]
        layer: Option<u32>,
        #[arg(long, value_enum)]
        targets: Option<TargetArg>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHA_GRID)]
        alpha_grid: Vec<f64>,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        sign: f64,
        #[command(flatten)]
        bank: BankArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smallest-|α| spec judged to change the output.
    Select {
        #[arg(long)]
        spec: PathBuf,
        /// Protocol log (JSON lines).
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum LogitCmd {
    /// Fit an L1 logistic probe on pooled logit shards.
    Fit {
        #[arg(long, required = true, num_args = 1..)]
        logits: Vec<PathBuf>,
        /// Manifest holding the sample labels.
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        bank: BankArg,
        #[arg(long = "C", default_value_t = 0.3)]
        c: f64,
        #[arg(long, default_value_t = 24)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
        /// Token strings: JSON object or one token per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ToyCmd {
    /// Planted-direction shards.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy-VLM activations, model accuracy and optional steering replay.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        intervention: Option<PathBuf>,
    },
}

/// Parse `argv` (program name first) and run. Returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(stdout, "{}", e.render());
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let text = e.render().to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            let _ = writeln!(stderr, "{line}");
            return 2;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Manifest(ManifestCmd::Validate { manifest, bank, train, val, test, all_cells, output }) => {
            let m = bank.manifest(&manifest)?;
            let report = validate_counts(&m, &CountExpectation { train, val, test });
            let cells: Vec<_> = report.cells.iter().filter(|c| all_cells || c.deviation != 0).collect();
            emit(&output, &cells, stdout)?;
            for g in &report.group_issues {
                let _ = writeln!(stderr, "group {}: {}", g.group_id, g.problem);
            }
            let _ = writeln!(stderr, "{} records; counts {}", m.records.len(), if report.ok { "ok" } else { "deviate" });
            Ok(if report.ok { 0 } else { 1 })
        }
        Command::Store(StoreCmd::Validate { root, output }) => {
            let report = store::validate_store(&root)?;
            emit(&output, &report.shards, stdout)?;
            for s in report.shards.iter().filter(|s| s.error.is_some()) {
                let _ = writeln!(stderr, "{}: {}", s.path.display(), s.error.as_deref().unwrap_or_default());
            }
            Ok(if report.ok { 0 } else { 1 })
        }
        Command::Store(StoreCmd::Query { store, manifest, bank, model, stage, layer, pooling, category, distance, split, no_values, output }) => {
            let manifest = manifest.map(|p| bank.manifest(&p)).transpose()?;
            if split.is_some() && manifest.is_none() {
                return Err(Error::Invalid("--split needs --manifest".into()));
            }
            let filter = RecordFilter {
                model_id: model,
                stage,
                layer_index: layer,
                pooling,
                category: category.as_deref().map(CategoryId::parse),
                distance,
                split,
            };
            let mut records = store::query(&store, &filter, manifest.as_ref())?;
            if no_values {
                records.iter_mut().for_each(|r| r.values.clear());
            }
            emit(&output, &records, stdout)?;
            Ok(0)
        }
        Command::Sweep(SweepCmd::Run { store, manifest, bank, out, parallelism, config, max_tasks }) => {
            let m = bank.manifest(&manifest)?;
            let cfg = config.as_deref().map_or_else(|| Ok(SweepConfig::default()), SweepConfig::load)?;
            let tasks = sweep::enumerate_tasks(&store, &cfg)?;
            let options = SweepOptions { parallelism, stop_after: max_tasks };
            let summary = sweep::run_sweep(&tasks, &m, &cfg, &out, &options)?;
            let _ = writeln!(
                stderr,
                "{} tasks: {} already done, {} ran ({} failed){}",
                summary.tasks,
                summary.skipped,
                summary.ran,
                summary.failed,
                if summary.complete { "" } else { "; stopped early, rerun to resume" }
            );
            Ok(0)
        }
        Command::Report(ReportCmd::Heatmap { ledger, output }) => {
            let rows = sweep::read_ledger(&ledger)?;
            if rows.is_empty() {
                return Err(Error::Invalid(format!("{} holds no rows", ledger.display())));
            }
            let maps = report::heatmaps(&rows);
            if output.format == Format::Csv {
                write_text(&output, &report::to_csv(&maps), stdout)?;
            } else {
                emit(&output, &maps, stdout)?;
            }
            Ok(0)
        }
        Command::Analyze(AnalyzeCmd::Cosine { ledger, model, stage, layer, pooling, distance, category, slice, bank, output }) => {
            let rows = sweep::read_ledger(&ledger)?;
            let sel = CosineSelection {
                model_id: model,
                stage,
                layer_index: layer,
                pooling,
                distance_m: distance,
                categories: category.map(|c| c.iter().map(|s| CategoryId::parse(s)).collect()),
            };
            let slice = match slice {
                SliceArg::Full => WeightSlice::Full,
                SliceArg::VisualHalf => WeightSlice::VisualHalf,
                SliceArg::LastTokenHalf => WeightSlice::LastTokenHalf,
            };
            let table = analyze::cosine(&ledger, &rows, &sel, slice, &bank.bank()?)?;
            match output.format {
                Format::Csv => {
                    let mut text = String::from("category_id");
                    for l in &table.labels {
                        text.push(',');
                        text.push_str(&report::csv_field(l.as_str()));
                    }
                    text.push('\n');
                    for (l, row) in table.labels.iter().zip(&table.matrix) {
                        text.push_str(&report::csv_field(l.as_str()));
                        for v in row {
                            text.push_str(&format!(",{v}"));
                        }
                        text.push('\n');
                    }
                    write_text(&output, &text, stdout)?;
                }
                _ => emit(&output, std::slice::from_ref(&table), stdout)?,
            }
            Ok(0)
        }
        Command::Analyze(AnalyzeCmd::Gap(args)) => {
            let rows = gap_rows(&args, None)?;
            emit(&args.output, &rows, stdout)?;
            Ok(0)
        }
        Command::Analyze(AnalyzeCmd::Failures { gap, tau_hi, tau_lo, tau_gap }) => {
            let t = FailureThresholds { high: tau_hi, low: tau_lo, gap: tau_gap };
            let rows = gap_rows(&gap, Some(&t))?;
            emit(&gap.output, &rows, stdout)?;
            Ok(0)
        }
        Command::Analyze(AnalyzeCmd::Ood { probe, shard, manifest, bank, output }) => {
            let artifact = ProbeArtifact::load(&probe)?;
            let data = analyze::shard_dataset(&shard, &bank.manifest(&manifest)?)?;
            let report = analyze::ood(&artifact, &data)?;
            emit(&output, std::slice::from_ref(&report), stdout)?;
            Ok(0)
        }
        Command::Steer(SteerCmd::Compose { ledger, model, category, distance, layer, targets, alpha_grid, sign, bank, out }) => {
            let rows = sweep::read_ledger(&ledger)?;
            let req = ComposeRequest {
                model_id: model,
                category_id: CategoryId::parse(&category),
                distance_m: distance,
                layer_index: layer,
                targets: targets.map(|t| match t {
                    TargetArg::Visual => Targets::VISUAL,
                    TargetArg::Last => Targets::LAST,
                    TargetArg::Both => Targets::BOTH,
                }),
            };
            let file = steer::compose_from_ledger(&ledger, &rows, &req, &bank.bank()?, &alpha_grid, sign)?;
            if file.vector.degenerate {
                let _ = writeln!(stderr, "warning: the composed direction is numerically zero");
            }
            file.write(&out)?;
            let plan = file.plan()?;
            let mut text = String::new();
            for spec in &plan {
                text.push_str(&serde_json::to_string(spec).expect("spec serialises"));
                text.push('\n');
            }
            let _ = stdout.write_all(text.as_bytes());
            Ok(0)
        }
        Command::Steer(SteerCmd::Select { spec, log }) => {
            let file = SteeringFile::read(&spec)?;
            let chosen = steer::select(&file, &steer::read_protocol_log(&log)?)?;
            let _ = writeln!(stdout, "{}", serde_json::json!({ "selected": chosen }));
            Ok(0)
        }
        Command::Logit(LogitCmd::Fit { logits, labels, bank, c, per_class, seed, top_k, vocab, out }) => {
            if !(c > 0.0) {
                return Err(Error::Invalid(format!("C must be positive, got {c}")));
            }
            let manifest = bank.manifest(&labels)?;
            let vocab = vocab.as_deref().map(crate::logit::load_vocab).transpose()?.unwrap_or_default();
            let cfg = SparseFitConfig { c, ..Default::default() };
            let report = crate::logit::fit(&logits, &manifest, &cfg, per_class, seed, top_k, &vocab)?;
            if report.report.gives_up {
                let _ = writeln!(stderr, "the fit gives up: every weight is zero at C = {c}");
            }
            let mut text = serde_json::to_string_pretty(&report).expect("report serialises");
            text.push('\n');
            match out {
                Some(path) => write_atomic(&path, text.as_bytes())?,
                None => {
                    let _ = stdout.write_all(text.as_bytes());
                }
            }
            Ok(0)
        }
        Command::Toy(ToyCmd::Synth { spec, seed, out }) => {
            let spec = spec.as_deref().map_or_else(|| Ok(toy::SynthSpec::default()), toy::load_toml)?;
            let summary = toy::synth(&spec, seed, &out)?;
            let _ = writeln!(stdout, "{}", serde_json::to_string(&summary).expect("summary serialises"));
            Ok(0)
        }
        Command::Toy(ToyCmd::Generate { spec, seed, out, intervention }) => {
            let spec = spec.as_deref().map_or_else(|| Ok(toy::GenerateSpec::default()), toy::load_toml)?;
            let summary = toy::generate(&spec, seed, &out, intervention.as_deref())?;
            let _ = writeln!(stdout, "{}", serde_json::to_string(&summary).expect("summary serialises"));
            Ok(0)
        }
    }
}

fn gap_rows(args: &GapArgs, thresholds: Option<&FailureThresholds>) -> Result<Vec<analyze::GapRow>> {
    let rows = sweep::read_ledger(&args.ledger)?;
    let model = analyze::read_model_accuracy(&args.model_accuracy)?;
    analyze::gaps(&rows, &model, args.decoding.into(), &args.bank.bank()?, thresholds)
}

fn write_text(output: &Output, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match &output.out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn emit<T: Serialize>(output: &Output, rows: &[T], stdout: &mut dyn Write) -> Result<()> {
    let text = match output.format {
        Format::Jsonl => {
            let mut s = String::new();
            for r in rows {
                s.push_str(&serde_json::to_string(r).expect("row serialises"));
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialise");
            s.push('\n');
            s
        }
        Format::Csv => csv_table(rows),
    };
    write_text(output, &text, stdout)
}

/// Objects become lines; array cells are space-separated, nested objects
/// JSON-encoded.
fn csv_table<T: Serialize>(rows: &[T]) -> String {
    let values: Vec<Value> = rows.iter().map(|r| serde_json::to_value(r).expect("row serialises")).collect();
    let mut columns: Vec<String> = Vec::new();
    for v in &values {
        if let Value::Object(map) = v {
            for k in map.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    let cell = |v: Option<&Value>| -> String {
        match v {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => report::csv_field(s),
            Some(Value::Array(items)) => report::csv_field(
                &items.iter().map(|i| i.as_str().map_or_else(|| i.to_string(), str::to_string)).collect::<Vec<_>>().join(" "),
            ),
            Some(other) => report::csv_field(&other.to_string()),
        }
    };
    let mut out = columns.iter().map(|c| report::csv_field(c)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for v in &values {
        let line: Vec<String> = columns.iter().map(|c| cell(v.get(c))).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
