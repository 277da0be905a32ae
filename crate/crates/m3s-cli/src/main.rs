//! Batch front door for the m3s sampling stack: single synthesis, parameter
//! sweeps, reference preparation, metric reports, and cache inspection, all
//! driven by JSON run-spec files.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, unparseable
//! or invalid run specs, unknown override keys), 2 on runtime failures
//! (I/O, synthesis errors, corrupt caches). Validation runs before any
//! output is created and every file is written atomically, so a failed
//! invocation never leaves partial outputs behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use m3s::backend::toy::ToyDenoiser;
use m3s::cache::FeatureCache;
use m3s::evaluate::{
    embedding_similarity, gram_distance, render_csv, text_alignment, MetricRow,
    SeededConvExtractor,
};
use m3s::image_io::{contact_sheet, read_png, write_png};
use m3s::pipeline::{prepare, sweep, sweep_configs, synthesize, RunConfig, SweepAxis};
use m3s::reference::save_trajectories;

#[derive(Parser)]
#[command(name = "m3s", version, about = "Training-free multi-style sketch synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// JSON run-spec file. Relative reference paths inside it resolve
    /// against the spec's directory.
    #[arg(long)]
    spec: PathBuf,
    /// Override a run-spec field at a dotted path before validation,
    /// e.g. --set guidance.omega1=7.5 or --set injection.mode=concat.
    /// Values parse as JSON where possible and fall back to strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Directory the outputs are written into (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Denoiser backend: "toy" or "adapter:<name>".
    #[arg(long, default_value = "toy")]
    backend: String,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one image from a run spec.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the per-step trace as trace.json.
        #[arg(long)]
        trace: bool,
    },
    /// Synthesize one panel per value of a swept parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Swept parameter: lambda, eta, omega1, omega2, or gamma.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis, e.g. --values 0,0.05,0.1.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Worker threads for sweep cells (default: one per CPU core).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Invert the spec's references and serialize their feature cache.
    PrepareRefs {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score an image against the spec's references and prompt.
    Evaluate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Image to score, e.g. the output.png of an earlier generate.
        #[arg(long)]
        image: PathBuf,
        /// Directory the report is written into (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print a human-readable summary of a serialized feature cache.
    InspectCache {
        /// A features.bin written by prepare-refs.
        cache: PathBuf,
    },
}

/// Failures split by exit code: validation problems are the caller's to
/// fix, runtime problems are the environment's.
enum Failure {
    Validation(String),
    Runtime(String),
}

fn validation<E: std::fmt::Display>(err: E) -> Failure {
    Failure::Validation(err.to_string())
}

fn runtime<E: std::fmt::Display>(err: E) -> Failure {
    Failure::Runtime(err.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { run, trace } => cmd_generate(&run, trace),
        Command::Sweep {
            run,
            axis,
            values,
            jobs,
        } => cmd_sweep(&run, &axis, &values, jobs),
        Command::PrepareRefs { run } => cmd_prepare_refs(&run),
        Command::Evaluate { spec, image, out } => cmd_evaluate(&spec, &image, &out),
        Command::InspectCache { cache } => cmd_inspect_cache(&cache),
    }
}

/// Parse the run spec, apply `--set` overrides, resolve reference paths
/// against the spec's directory, and validate. Everything in here is a
/// validation failure: nothing has been written yet.
fn load_config(args: &SpecArgs) -> Result<RunConfig, Failure> {
    let raw = fs::read_to_string(&args.spec)
        .map_err(|e| Failure::Validation(format!("spec '{}': {e}", args.spec.display())))?;
    let mut tree: Value = serde_json::from_str(&raw)
        .map_err(|e| Failure::Validation(format!("spec '{}': {e}", args.spec.display())))?;
    for entry in &args.set {
        apply_override(&mut tree, entry)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "spec".to_string() } else { path };
        Failure::Validation(format!("{field}: {}", e.inner()))
    })?;
    let base = args.spec.parent().unwrap_or_else(|| Path::new("."));
    for reference in &mut cfg.references {
        if reference.is_relative() {
            *reference = base.join(&*reference);
        }
        if !reference.exists() {
            return Err(Failure::Validation(format!(
                "references: '{}' does not exist",
                reference.display()
            )));
        }
    }
    cfg.validate().map_err(validation)?;
    Ok(cfg)
}

/// Insert `key=value` into the spec tree at a dotted path, creating
/// intermediate objects as needed. Unknown keys survive to the typed
/// deserialize, which rejects them by field name.
fn apply_override(tree: &mut Value, entry: &str) -> Result<(), Failure> {
    let (key, raw_value) = entry.split_once('=').ok_or_else(|| {
        Failure::Validation(format!("override '{entry}' is not of the form key=value"))
    })?;
    let value: Value =
        serde_json::from_str(raw_value).unwrap_or_else(|_| Value::String(raw_value.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, segment) in segments.iter().enumerate() {
        if segment.is_empty() {
            return Err(Failure::Validation(format!(
                "override key '{key}' has an empty path segment"
            )));
        }
        let map = node.as_object_mut().ok_or_else(|| {
            let parent = if i == 0 {
                "the spec root".to_string()
            } else {
                format!("'{}'", segments[..i].join("."))
            };
            Failure::Validation(format!("override key '{key}': {parent} is not an object"))
        })?;
        if i + 1 == segments.len() {
            map.insert((*segment).to_string(), value);
            return Ok(());
        }
        node = map
            .entry(*segment)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

fn build_backend(name: &str) -> Result<ToyDenoiser, Failure> {
    match name {
        "toy" => Ok(ToyDenoiser::default()),
        other if other.starts_with("adapter:") => Err(Failure::Validation(format!(
            "backend '{other}': no adapter backends are registered in this build; use --backend toy"
        ))),
        other => Err(Failure::Validation(format!(
            "backend '{other}' is not recognized; expected 'toy' or 'adapter:<name>'"
        ))),
    }
}

/// Write bytes through a hidden sibling temp file and rename, so the
/// target path either keeps its old content or holds the new bytes.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("output");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let result = fs::write(&tmp, bytes)
        .and_then(|()| fs::rename(&tmp, path))
        .map_err(|e| Failure::Runtime(format!("writing '{}': {e}", path.display())));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn cmd_generate(run: &RunArgs, trace: bool) -> Result<(), Failure> {
    let cfg = load_config(&run.spec)?;
    let backend = build_backend(&run.backend)?;
    fs::create_dir_all(&run.out).map_err(runtime)?;
    let result = synthesize(&cfg, &backend).map_err(runtime)?;
    let image_path = run.out.join("output.png");
    write_png(&image_path, &result.image).map_err(runtime)?;
    let echo = serde_json::to_value(&result.config_echo).map_err(runtime)?;
    write_json(&run.out.join("config.json"), &echo)?;
    if trace {
        let steps = serde_json::to_value(&result.trace).map_err(runtime)?;
        write_json(&run.out.join("trace.json"), &steps)?;
    }
    println!("wrote {}", image_path.display());
    Ok(())
}

fn cmd_sweep(
    run: &RunArgs,
    axis: &str,
    values: &[f64],
    jobs: Option<usize>,
) -> Result<(), Failure> {
    let cfg = load_config(&run.spec)?;
    let backend = build_backend(&run.backend)?;
    let axis = SweepAxis::from_str(axis).map_err(|e| Failure::Validation(format!("axis: {e}")))?;
    if jobs == Some(0) {
        return Err(Failure::Validation("jobs must be at least 1".into()));
    }
    // resolve and validate every cell before anything heavy or visible runs
    sweep_configs(&cfg, axis, values).map_err(validation)?;
    if let Some(jobs) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(runtime)?;
    }
    fs::create_dir_all(&run.out).map_err(runtime)?;
    let prepared = prepare(&cfg, &backend).map_err(runtime)?;
    let panels = sweep(&cfg, axis, values, &backend, &prepared).map_err(runtime)?;
    let mut sidecar = Vec::with_capacity(panels.len());
    let mut images = Vec::with_capacity(panels.len());
    for (index, panel) in panels.iter().enumerate() {
        let file = format!("panel_{index:02}_{}_{}.png", axis.name(), panel.value);
        write_png(&run.out.join(&file), &panel.result.image).map_err(runtime)?;
        sidecar.push(json!({
            "index": index,
            "value": panel.value,
            "image": file,
            "config": serde_json::to_value(&panel.result.config_echo).map_err(runtime)?,
        }));
        images.push(panel.result.image.clone());
    }
    let sheet = contact_sheet(&images, 2, 1.0).map_err(runtime)?;
    let sheet_path = run.out.join("contact_sheet.png");
    write_png(&sheet_path, &sheet).map_err(runtime)?;
    write_json(
        &run.out.join("sweep.json"),
        &json!({ "axis": axis.name(), "panels": sidecar }),
    )?;
    println!("wrote {} panels and {}", panels.len(), sheet_path.display());
    Ok(())
}

fn cmd_prepare_refs(run: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&run.spec)?;
    let backend = build_backend(&run.backend)?;
    if cfg.references.is_empty() {
        return Err(Failure::Validation(
            "references: the spec lists no reference images to prepare".into(),
        ));
    }
    fs::create_dir_all(&run.out).map_err(runtime)?;
    let prepared = prepare(&cfg, &backend).map_err(runtime)?;
    let features = run.out.join("features.bin");
    let trajectories = run.out.join("trajectories.bin");
    prepared.cache.save(&features).map_err(runtime)?;
    save_trajectories(&trajectories, &prepared.bundles).map_err(runtime)?;
    println!(
        "cached {} feature entries for {} reference(s); wrote {} and {}",
        prepared.cache.len(),
        prepared.bundles.len(),
        features.display(),
        trajectories.display()
    );
    Ok(())
}

fn cmd_evaluate(spec: &SpecArgs, image_path: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(spec)?;
    if !image_path.exists() {
        return Err(Failure::Validation(format!(
            "image: '{}' does not exist",
            image_path.display()
        )));
    }
    fs::create_dir_all(out).map_err(runtime)?;
    let image = read_png(image_path).map_err(runtime)?;
    let extractor = SeededConvExtractor::default();
    let run_id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    let mut rows = Vec::new();
    for (k, reference) in cfg.references.iter().enumerate() {
        let style = read_png(reference).map_err(runtime)?;
        rows.push(MetricRow {
            run_id: run_id.clone(),
            metric: format!("gram_distance_ref{k}"),
            value: gram_distance(&image, &style, &extractor).map_err(runtime)?,
        });
        rows.push(MetricRow {
            run_id: run_id.clone(),
            metric: format!("embedding_similarity_ref{k}"),
            value: embedding_similarity(&image, &style, &extractor).map_err(runtime)?,
        });
    }
    rows.push(MetricRow {
        run_id: run_id.clone(),
        metric: "text_alignment".to_string(),
        value: text_alignment(&image, &cfg.prompt, &extractor).map_err(runtime)?,
    });
    let csv_path = out.join("report.csv");
    write_atomic(&csv_path, render_csv(&rows).as_bytes())?;
    let json_rows: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "metric": r.metric, "value": r.value }))
        .collect();
    write_json(
        &out.join("report.json"),
        &json!({
            "run_id": run_id,
            "image": image_path.display().to_string(),
            // generate's output.png has the brightening step applied, so
            // scores describe the image as shipped, not the raw decode
            "image_stage": "post_brighten",
            "rows": json_rows,
        }),
    )?;
    println!("wrote {} metric rows to {}", rows.len(), csv_path.display());
    Ok(())
}

fn cmd_inspect_cache(path: &Path) -> Result<(), Failure> {
    if !path.exists() {
        return Err(Failure::Validation(format!(
            "cache: '{}' does not exist",
            path.display()
        )));
    }
    let bytes = fs::read(path).map_err(runtime)?;
    let cache = FeatureCache::from_bytes(&bytes).map_err(runtime)?;
    println!("feature cache {}", path.display());
    println!("  entries:    {}", cache.len());
    let layers = cache.layer_ids();
    let layer_list: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
    println!("  layers:     [{}]", layer_list.join(", "));
    let timesteps = cache.timesteps();
    match (timesteps.first(), timesteps.last()) {
        (Some(lo), Some(hi)) => {
            println!("  timesteps:  {} distinct ({lo}..={hi})", timesteps.len())
        }
        _ => println!("  timesteps:  none"),
    }
    println!("  references: {}", cache.ref_count());
    for layer in &layers {
        let count = cache.iter().filter(|(key, _)| key.0 == *layer).count();
        println!("  layer {layer}:    {count} entries");
    }
    if let Some((_, features)) = cache.iter().next() {
        println!(
            "  k shape:    {} x {} (f32)",
            features.k.nrows(),
            features.k.ncols()
        );
        println!(
            "  v shape:    {} x {} (f32)",
            features.v.nrows(),
            features.v.ncols()
        );
        println!(
            "  queries:    {}",
            if features.q.is_some() { "present" } else { "absent" }
        );
    }
    Ok(())
}
