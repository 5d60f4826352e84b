//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::arch_map::{load_config, resolve_layers_with, ProjectionKind, RuleSet};
use crate::compare::{compare_fingerprints, pairwise_matrix, Thresholds, DEFAULT_T_HIGH, DEFAULT_T_LOW};
use crate::error::{Error, Result};
use crate::fingerprint::{extract_from_map, read_fingerprint, serialize_fingerprint, Fingerprint, MoeMode};
use crate::manifest::{manifest_path, write_atomic, ManifestBuilder};
use crate::registry::{Registry, INDEX_FILE};
use crate::report;
use crate::synth::{synthesize, SynthSpec};
use crate::tensor_store::open_checkpoint;

/// Comma-separated projection kinds (`q,k,v,o`, `gate,up,down`, `attn`,
/// `ffn`, `all`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KindList(pub Vec<ProjectionKind>);

impl FromStr for KindList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ProjectionKind::parse_list(s).map(KindList)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tpfp",
    version,
    about = "Weight-statistics lineage fingerprints for transformer checkpoints"
)]
struct Cli {
    /// Worker threads for tensor reductions (default: all cores).
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,

    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract a fingerprint from a checkpoint directory.
    Fingerprint(FingerprintArgs),
    /// Compare two fingerprint files.
    Compare(CompareArgs),
    /// Pairwise correlation grids over many fingerprints.
    Matrix(MatrixArgs),
    /// Per-layer curves as long-format CSV.
    Curves(CurvesArgs),
    /// Manage a fingerprint registry directory.
    Registry(RegistryArgs),
    /// Generate a synthetic checkpoint from a JSON spec.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct FingerprintArgs {
    ckpt_dir: PathBuf,
    #[arg(long, default_value = "q,k,v,o")]
    kinds: KindList,
    /// pooled or per-expert-mean.
    #[arg(long, default_value = "pooled")]
    moe_mode: MoeMode,
    /// JSON rule table replacing the built-in tensor-name rules.
    #[arg(long, value_name = "FILE")]
    map_file: Option<PathBuf>,
    /// Defaults to the checkpoint directory name.
    #[arg(long)]
    model_id: Option<String>,
    /// Output file, or a directory to place `<model_id>.tpfp.json` in.
    #[arg(long, conflicts_with = "registry")]
    out: Option<PathBuf>,
    /// Store in a registry instead (default location from $TPFP_REGISTRY).
    #[arg(long, value_name = "DIR", num_args = 0..=1)]
    registry: Option<Option<PathBuf>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct CompareArgs {
    fp_a: PathBuf,
    fp_b: PathBuf,
    #[arg(long, default_value = "q,k,v,o")]
    kinds: KindList,
    #[arg(long, default_value_t = DEFAULT_T_HIGH)]
    t_high: f64,
    #[arg(long, default_value_t = DEFAULT_T_LOW)]
    t_low: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatrixArgs {
    /// Fingerprint files, compared together with any registry entries.
    files: Vec<PathBuf>,
    #[arg(long, value_name = "DIR", num_args = 0..=1)]
    registry: Option<Option<PathBuf>>,
    #[arg(long, default_value = "q,k,v,o")]
    kinds: KindList,
    #[arg(long)]
    out_dir: PathBuf,
    /// Leave failed cells empty instead of failing the run.
    #[arg(long)]
    skip_errors: bool,
}

#[derive(Debug, Args)]
struct CurvesArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Defaults to every kind in each fingerprint.
    #[arg(long)]
    kinds: Option<KindList>,
    /// Apply zero-mean, unit-std normalization per curve.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegistryArgs {
    /// Registry directory (default: $TPFP_REGISTRY, else ~/.tpfp/registry).
    #[arg(long, value_name = "DIR", global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    action: RegistryAction,
}

#[derive(Debug, Subcommand)]
enum RegistryAction {
    /// Copy fingerprint files into the registry.
    Add {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print model_id, layer count, kinds and hash of every entry.
    List,
    /// Recompute every content hash.
    Verify,
}

#[derive(Debug, Args)]
struct SynthArgs {
    spec: PathBuf,
    out_dir: PathBuf,
}

fn registry_root(choice: Option<PathBuf>) -> PathBuf {
    choice.unwrap_or_else(Registry::default_root)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("TPFP_LOG")
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
        {
            log::warn!("--workers ignored: {e}");
        }
    }
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match dispatch(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Fingerprint(a) => cmd_fingerprint(a, argv, quiet),
        Command::Compare(a) => cmd_compare(a, argv),
        Command::Matrix(a) => cmd_matrix(a, argv, quiet),
        Command::Curves(a) => cmd_curves(a, argv),
        Command::Registry(a) => cmd_registry(a, argv, quiet),
        Command::Synth(a) => cmd_synth(a, argv, quiet),
    }
}

fn note(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn cmd_fingerprint(a: FingerprintArgs, argv: Vec<String>, quiet: bool) -> Result<()> {
    let mut manifest = ManifestBuilder::start("fingerprint", argv);
    let ckpt = open_checkpoint(&a.ckpt_dir)?;
    let mut cfg = load_config(&a.ckpt_dir)?;
    if let Some(id) = a.model_id {
        cfg.model_id = id;
    }
    let rules = match &a.map_file {
        Some(p) => {
            manifest.input(p);
            RuleSet::from_file(p)?
        }
        None => RuleSet::builtin(),
    };
    let map = resolve_layers_with(&ckpt, &cfg, &a.kinds.0, &rules)?;
    let fp = extract_from_map(&ckpt, &cfg.model_id, &map, a.moe_mode)?;

    let config_path = a.ckpt_dir.join("config.json");
    manifest.input(&config_path);
    for f in ckpt.files() {
        manifest.input(f);
    }
    let index = ckpt.root().join("model.safetensors.index.json");
    if ckpt.shards().len() > 1 && index.is_file() {
        manifest.input(index);
    }

    let target = match (a.out, a.registry) {
        (_, Some(root)) => Registry::open(registry_root(root))?.add(&fp)?,
        (out, None) => {
            let target = match out {
                Some(dir) if dir.is_dir() => dir.join(fp.file_name()),
                Some(file) => file,
                None => PathBuf::from(fp.file_name()),
            };
            write_atomic(&target, &serialize_fingerprint(&fp))?;
            target
        }
    };
    manifest.output(&target);
    manifest.finish(&manifest_path(&target))?;
    note(quiet, format!("wrote {}", target.display()));
    Ok(())
}

fn emit(out: Option<&Path>, text: &str, manifest: ManifestBuilder) -> Result<()> {
    match out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            let mut manifest = manifest;
            manifest.output(path);
            manifest.finish(&manifest_path(path))?;
            Ok(())
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_compare(a: CompareArgs, argv: Vec<String>) -> Result<()> {
    let thresholds = Thresholds::new(a.t_high, a.t_low)?;
    let mut manifest = ManifestBuilder::start("compare", argv);
    let fa = read_fingerprint(&a.fp_a)?;
    let fb = read_fingerprint(&a.fp_b)?;
    manifest.input(&a.fp_a);
    manifest.input(&a.fp_b);
    let rep = compare_fingerprints(&fa, &fb, &a.kinds.0, thresholds)?;
    let text = match a.format {
        Format::Text => report::compare_text(&rep),
        Format::Json => report::compare_json(&rep),
        Format::Csv => report::compare_csv(&rep),
    };
    emit(a.out.as_deref(), &text, manifest)
}

fn cmd_matrix(a: MatrixArgs, argv: Vec<String>, quiet: bool) -> Result<()> {
    let mut manifest = ManifestBuilder::start("matrix", argv);
    let mut fps: Vec<Fingerprint> = Vec::new();
    if let Some(root) = a.registry {
        for (path, fp) in Registry::open(registry_root(root))?.load_entries()? {
            manifest.input(path);
            fps.push(fp);
        }
    }
    for f in &a.files {
        fps.push(read_fingerprint(f)?);
        manifest.input(f);
    }
    let m = pairwise_matrix(&fps, &a.kinds.0, a.skip_errors)?;
    for e in &m.errors {
        log::warn!("{} vs {}: {}", e.model_a, e.model_b, e.message);
    }

    let mut files: Vec<(PathBuf, String)> = m
        .per_kind
        .iter()
        .map(|(kind, grid)| {
            (
                a.out_dir.join(format!("matrix_{kind}.csv")),
                report::grid_csv(&m.model_ids, grid),
            )
        })
        .collect();
    files.push((
        a.out_dir.join("matrix_overall.csv"),
        report::grid_csv(&m.model_ids, &m.overall),
    ));
    files.push((a.out_dir.join("matrix.json"), report::matrix_json(&m)));
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
        manifest.output(path);
    }
    manifest.finish(&manifest_path(&a.out_dir))?;
    note(
        quiet,
        format!("wrote {} files to {}", files.len(), a.out_dir.display()),
    );
    Ok(())
}

fn cmd_curves(a: CurvesArgs, argv: Vec<String>) -> Result<()> {
    let mut manifest = ManifestBuilder::start("curves", argv);
    let mut fps = Vec::new();
    for f in &a.files {
        fps.push(read_fingerprint(f)?);
        manifest.input(f);
    }
    let text = report::curves_csv(&fps, a.kinds.as_ref().map(|k| k.0.as_slice()), a.normalize)?;
    emit(a.out.as_deref(), &text, manifest)
}

fn cmd_registry(a: RegistryArgs, argv: Vec<String>, quiet: bool) -> Result<()> {
    let reg = Registry::open(registry_root(a.root))?;
    match a.action {
        RegistryAction::Add { files } => {
            // One manifest per run, in the registry root.
            let mut manifest = ManifestBuilder::start("registry add", argv);
            let mut added = 0;
            let mut result = Ok(());
            for f in &files {
                let stored = read_fingerprint(f).and_then(|fp| Ok((reg.add(&fp)?, fp)));
                match stored {
                    Ok((target, fp)) => {
                        manifest.input(f);
                        manifest.output(&target);
                        added += 1;
                        note(quiet, format!("added {} as {}", fp.model_id, target.display()));
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                }
            }
            if added > 0 {
                manifest.output(reg.root().join(INDEX_FILE));
                manifest.finish(&manifest_path(reg.root()))?;
            }
            result
        }
        RegistryAction::List => {
            let mut out = String::new();
            for e in reg.list()? {
                let kinds: Vec<&str> = e.kinds.iter().map(|k| k.as_str()).collect();
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    e.model_id,
                    e.num_layers,
                    kinds.join(","),
                    e.content_hash
                ));
            }
            print!("{out}");
            Ok(())
        }
        RegistryAction::Verify => {
            let entries = reg.verify()?;
            note(
                quiet,
                format!("{} entries verified in {}", entries.len(), reg.root().display()),
            );
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs, argv: Vec<String>, quiet: bool) -> Result<()> {
    let mut manifest = ManifestBuilder::start("synth", argv);
    let spec = SynthSpec::from_file(&a.spec)?;
    manifest.input(&a.spec);
    let out = synthesize(&spec, &a.out_dir)?;
    for f in &out.files {
        manifest.output(f);
    }
    manifest.finish(&manifest_path(&a.out_dir))?;
    note(
        quiet,
        format!("wrote {} tensors to {}", out.tensors.len(), a.out_dir.display()),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["tpfp", "nonsense"]), 1);
        assert_eq!(run(["tpfp", "compare", "a.json"]), 1);
        assert_eq!(run(["tpfp", "fingerprint", "x", "--kinds", "bias"]), 1);
        assert_eq!(run(["tpfp", "--workers", "0", "curves", "x"]), 1);
    }

    #[test]
    fn invalid_thresholds_are_usage_errors() {
        assert_eq!(
            run(["tpfp", "compare", "a", "b", "--t-high", "0.5", "--t-low", "0.8"]),
            1
        );
    }

    #[test]
    fn kind_list_parses() {
        assert_eq!("attn".parse::<KindList>().unwrap().0, ProjectionKind::ATTENTION);
    }
}
