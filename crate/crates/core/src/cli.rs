//! The `granatt` batch command line.
//!
//! Exit codes: 0 success, 1 usage or fatal error, 2 partial success (some
//! inputs skipped), 3 gradient-check failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::granularity::{masks_for_depth, DepthMap, MAX_THRESHOLDS};
use crate::imageio::{
    add_depth_noise, load_gray, load_image, noise_preset, noise_stats, save_depth, save_gray_bytes, save_map,
    NoiseSpec, DELTA_GUARD, DELTA_RATIO, NOISE_PRESETS,
};
use crate::metrics::{self, list_images, Skipped, CSV_COLUMNS};
use crate::network::{load_checkpoint, Network, NetworkConfig, BRANCH_NAMES, SHARED};
use crate::tensor::Tensor;
use crate::verify;

pub const TOOL: &str = "granatt";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Version of the report layouts (JSON keys and CSV columns).
pub const REPORT_SCHEMA: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Parser, Debug, Serialize)]
#[command(name = "granatt", version, about = "Depth-granularity attention toolkit for RGB-D saliency")]
pub struct Cli {
    /// Worker threads for per-image work (0 = one per core).
    #[arg(long, global = true, env = "GRANATT_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Multi-threshold Otsu masks for every depth image in a directory.
    Masks(MasksArgs),
    /// Saliency maps from paired RGB and depth images.
    Forward(ForwardArgs),
    /// Metrics of predictions against ground truth.
    Eval(EvalArgs),
    /// Run the registered gradient checks.
    Gradcheck(GradcheckArgs),
    /// Calibrated Gaussian noise on depth images.
    Noise(NoiseArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct MasksArgs {
    pub depth_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Number of thresholds (1 to 3).
    #[arg(short = 'T', long = "T", default_value_t = 2)]
    pub t: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct ForwardArgs {
    pub rgb_dir: PathBuf,
    pub depth_dir: PathBuf,
    pub out_dir: PathBuf,
    /// GRANATT1 parameter file; without it parameters come from --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the 15 maps of all branches and levels.
    #[arg(long)]
    pub all_levels: bool,
    /// Network input size when no checkpoint is given.
    #[arg(long, default_value_t = 352)]
    pub input_size: usize,
    #[arg(short = 'T', long = "T", default_value_t = 2)]
    pub t: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    /// Report path; defaults to eval_report.<format> in the current directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for per-image and mean PR-curve CSVs.
    #[arg(long)]
    pub pr: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    /// `all` or one of tensor, gba, fusion, objective, network.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Doubles every analytic gradient; the run must then fail.
    #[arg(long, hide = true)]
    pub plant_fault: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct NoiseArgs {
    pub depth_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Target RMSE in depth units, in (0, 1).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub rmse: Option<f64>,
    /// Named target: des (0.261), nlpr (0.259) or nju2k (0.236).
    #[arg(long)]
    pub preset: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FATAL } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_FATAL;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            EXIT_FATAL
        }
    }
}

/// The error chain joined with `: `, dropping causes whose text the
/// previous message already contains.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn dispatch(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Masks(a) => cmd_masks(cli, a),
        Command::Forward(a) => cmd_forward(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Noise(a) => cmd_noise(cli, a),
    }
}

/// Header shared by every report: tool, version, seed and the parsed
/// command line.
fn header(cli: &Cli) -> Value {
    json!({
        "tool": TOOL,
        "version": VERSION,
        "schema": REPORT_SCHEMA,
        "seed": cli.seed,
        "config": cli,
    })
}

fn csv_header(cli: &Cli) -> String {
    format!(
        "# {TOOL} {VERSION} schema={REPORT_SCHEMA} seed={}\n# config={}\n",
        cli.seed,
        serde_json::to_string(cli).expect("config serializes")
    )
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    write_file(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn report_skips(skipped: &[Skipped]) {
    for s in skipped {
        warn!("skipped {}: {}", s.file, s.reason);
    }
}

fn exit_for(skipped: usize) -> i32 {
    if skipped == 0 {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn cmd_masks(cli: &Cli, a: &MasksArgs) -> anyhow::Result<i32> {
    if !(1..=MAX_THRESHOLDS).contains(&a.t) {
        bail!("--T must be between 1 and {MAX_THRESHOLDS}, got {}", a.t);
    }
    let (files, mut skipped) = list_images(&a.depth_dir)?;
    create_out(&a.out_dir)?;
    if files.is_empty() {
        warn!("no depth images found in {}", a.depth_dir.display());
    }
    let items: Vec<(&String, &PathBuf)> = files.iter().collect();
    let results: Vec<Result<Value, Skipped>> = items
        .par_iter()
        .map(|(stem, path)| {
            let work = || -> crate::Result<Value> {
                let depth = DepthMap::from_tensor(&load_gray(path)?)?;
                let (set, masks) = masks_for_depth(&depth, a.t)?;
                let mut names = Vec::new();
                for i in 0..masks.regions() {
                    let name = format!("{stem}_mask{i}.png");
                    save_gray_bytes(&masks.mask_bytes(i), masks.height(), masks.width(), &a.out_dir.join(&name))?;
                    names.push(name);
                }
                Ok(json!({
                    "image": path.file_name().map(|f| f.to_string_lossy().into_owned()),
                    "requested_t": set.requested,
                    "effective_t": set.effective(),
                    "thresholds": set.thresholds,
                    "objective": set.objective,
                    "masks": names,
                    "pixel_counts": masks.pixel_counts(),
                }))
            };
            work().map_err(|e| Skipped {
                file: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect();
    let mut rows = Vec::new();
    for (r, (stem, _)) in results.into_iter().zip(&items) {
        match r {
            Ok(v) => {
                let mut side = header(cli);
                side["objective_units"] = json!("between-class variance, squared 8-bit bin units");
                side["result"] = v.clone();
                write_json(&a.out_dir.join(format!("{stem}.json")), &side)?;
                rows.push((stem.to_string(), v));
            }
            Err(s) => skipped.push(s),
        }
    }
    report_skips(&skipped);
    let report = a.out_dir.join(format!("masks_report.{}", cli.format.ext()));
    match cli.format {
        Format::Json => {
            let mut v = header(cli);
            v["images"] = Value::Array(rows.iter().map(|(_, r)| r.clone()).collect());
            v["skipped"] = serde_json::to_value(&skipped)?;
            write_json(&report, &v)?;
        }
        Format::Csv => {
            let mut s = csv_header(cli);
            s.push_str("image,requested_t,effective_t,thresholds,objective\n");
            for (stem, r) in &rows {
                let th: Vec<String> = r["thresholds"]
                    .as_array()
                    .map(|a| a.iter().map(|v| v.to_string()).collect())
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{stem},{},{},{},{}",
                    r["requested_t"], r["effective_t"], th.join(" "), r["objective"]
                );
            }
            write_file(&report, &s)?;
        }
    }
    println!("masks: {} images written, {} skipped", rows.len(), skipped.len());
    Ok(exit_for(skipped.len()))
}

/// Pairs files present in both listings; the rest are reported.
fn pair_by_stem<'a>(
    a: &'a BTreeMap<String, PathBuf>,
    b: &'a BTreeMap<String, PathBuf>,
    skipped: &mut Vec<Skipped>,
) -> Vec<(&'a String, &'a PathBuf, &'a PathBuf)> {
    for (map, other, what) in [(a, b, "no depth image"), (b, a, "no RGB image")] {
        for (stem, p) in map {
            if !other.contains_key(stem) {
                skipped.push(Skipped {
                    file: p.display().to_string(),
                    reason: format!("{what} with this stem"),
                });
            }
        }
    }
    a.iter()
        .filter_map(|(s, p)| b.get(s).map(|q| (s, p, q)))
        .collect()
}

fn cmd_forward(cli: &Cli, a: &ForwardArgs) -> anyhow::Result<i32> {
    let net = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => Network::new(NetworkConfig {
            input_size: a.input_size,
            thresholds: a.t,
            seed: cli.seed,
            ..NetworkConfig::default()
        })?,
    };
    let (rgbs, mut skipped) = list_images(&a.rgb_dir)?;
    let (depths, s2) = list_images(&a.depth_dir)?;
    skipped.extend(s2);
    let pairs = pair_by_stem(&rgbs, &depths, &mut skipped);
    create_out(&a.out_dir)?;
    let size = net.config().input_size;
    let results: Vec<Result<Vec<String>, Skipped>> = pairs
        .par_iter()
        .map(|(stem, rp, dp)| {
            let work = || -> crate::Result<Vec<String>> {
                let mut rgb = load_image(rp)?;
                if rgb.shape()[0] == 1 {
                    let d = rgb.data();
                    rgb = Tensor::new(&[3, rgb.shape()[1], rgb.shape()[2]], [d, d, d].concat())?;
                }
                let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
                let rgb = rgb.resize_bilinear(size, size)?;
                let depth = load_gray(dp)?.resize_bilinear(size, size)?;
                let maps = net.predict(&rgb, &depth, None)?;
                let mut written = Vec::new();
                let mut save = |m: &Tensor, name: String| -> crate::Result<()> {
                    let m = m.resize_bilinear(h, w)?.map(|v| v.clamp(0.0, 1.0));
                    save_map(&m, &a.out_dir.join(&name))?;
                    written.push(name);
                    Ok(())
                };
                save(&maps[SHARED][0], format!("{stem}.png"))?;
                if a.all_levels {
                    for (b, branch) in maps.iter().enumerate() {
                        for (l, m) in branch.iter().enumerate() {
                            save(m, format!("{stem}_{}_l{}.png", BRANCH_NAMES[b], l + 1))?;
                        }
                    }
                }
                Ok(written)
            };
            work().map_err(|e| Skipped {
                file: rp.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect();
    let mut outputs = Vec::new();
    for r in results {
        match r {
            Ok(w) => outputs.push(w),
            Err(s) => skipped.push(s),
        }
    }
    report_skips(&skipped);
    let mut v = header(cli);
    v["network"] = json!({
        "config": net.config(),
        "parameters": net.parameter_count(),
        "checkpoint": a.checkpoint,
    });
    v["outputs"] = json!(outputs);
    v["skipped"] = serde_json::to_value(&skipped)?;
    write_json(&a.out_dir.join("forward_report.json"), &v)?;
    println!(
        "forward: {} images, {} parameters, {} skipped",
        outputs.len(),
        net.parameter_count(),
        skipped.len()
    );
    Ok(exit_for(skipped.len()))
}

fn metric_settings() -> Value {
    json!({
        "beta_sq": metrics::BETA_SQ,
        "alpha": metrics::ALPHA,
        "thresholds": metrics::THRESHOLDS,
        "binarization": "gt > 0.5; pred > k/255",
        "e_measure_variant": metrics::E_MEASURE_VARIANT,
    })
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<i32> {
    let report = metrics::evaluate_dataset(&a.pred_dir, &a.gt_dir)?;
    report_skips(&report.skipped);
    if report.images.is_empty() {
        bail!(
            "no matched prediction/ground-truth pairs between {} and {}",
            a.pred_dir.display(),
            a.gt_dir.display()
        );
    }
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("eval_report.{}", cli.format.ext())));
    match cli.format {
        Format::Json => {
            let mut v = header(cli);
            v["metrics"] = metric_settings();
            v["images"] = serde_json::to_value(&report.images)?;
            v["mean"] = serde_json::to_value(&report.mean)?;
            v["skipped"] = serde_json::to_value(&report.skipped)?;
            write_json(&path, &v)?;
        }
        Format::Csv => {
            let mut s = csv_header(cli);
            let _ = writeln!(s, "# e_measure={}", metrics::E_MEASURE_VARIANT);
            s.push_str(&report.to_csv());
            write_file(&path, &s)?;
        }
    }
    if let Some(dir) = &a.pr {
        create_out(dir)?;
        for m in &report.images {
            write_file(&dir.join(format!("{}_pr.csv", m.name)), &m.pr.to_csv())?;
        }
        if let Some(c) = &report.mean_pr {
            write_file(&dir.join("mean_pr.csv"), &c.to_csv())?;
        }
    }
    let m = report.mean.as_ref().expect("non-empty report has means");
    println!("{CSV_COLUMNS}");
    println!("mean,{},{},{},{}", m.mae, m.max_f, m.s_measure, m.e_measure);
    println!("eval: {} images, {} skipped, report {}", report.images.len(), report.warnings(), path.display());
    Ok(exit_for(report.warnings()))
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> anyhow::Result<i32> {
    let scopes = verify::parse_scopes(&a.scope)?;
    let mut outcomes = Vec::new();
    for case in verify::registry(&scopes)? {
        let o = case.run(a.plant_fault);
        let status = if o.passed { "ok" } else { "FAIL" };
        match &o.error {
            Some(e) => println!("{:<10} {:<28} error: {e}  {status}", o.scope, o.name),
            None => println!(
                "{:<10} {:<28} max_rel_error={:.3e} tol={:.0e} n={}  {status}",
                o.scope, o.name, o.max_rel_error, o.tolerance, o.checked
            ),
        }
        outcomes.push(o);
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}/{}", o.scope, o.name))
        .collect();
    if let Some(path) = &a.report {
        match cli.format {
            Format::Json => {
                let mut v = header(cli);
                v["checks"] = serde_json::to_value(&outcomes)?;
                v["failed"] = json!(failed);
                write_json(path, &v)?;
            }
            Format::Csv => {
                let mut s = csv_header(cli);
                s.push_str("scope,operation,max_rel_error,tolerance,checked,passed\n");
                for o in &outcomes {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        o.scope, o.name, o.max_rel_error, o.tolerance, o.checked, o.passed
                    );
                }
                write_file(path, &s)?;
            }
        }
    }
    if failed.is_empty() {
        println!("gradcheck: {} checks passed", outcomes.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("gradcheck: failed: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

/// Per-image seed: the run seed mixed with an FNV-1a hash of the file stem,
/// so results do not depend on which other files are present.
pub fn image_seed(seed: u64, stem: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stem.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

fn cmd_noise(cli: &Cli, a: &NoiseArgs) -> anyhow::Result<i32> {
    let target = match (&a.rmse, &a.preset) {
        (Some(r), _) => *r,
        (None, Some(p)) => noise_preset(p).with_context(|| {
            let names: Vec<&str> = NOISE_PRESETS.iter().map(|(n, _)| *n).collect();
            format!("unknown preset {p:?} (known: {})", names.join(", "))
        })?,
        (None, None) => bail!("one of --rmse or --preset is required"),
    };
    if !(target > 0.0 && target < 1.0) {
        bail!("--rmse must lie in (0, 1), got {target}");
    }
    let (files, mut skipped) = list_images(&a.depth_dir)?;
    create_out(&a.out_dir)?;
    eprintln!(
        "note: delta1 is the FAILING fraction: pixels with both depths > {DELTA_GUARD} whose ratio max(a/b, b/a) exceeds {DELTA_RATIO}"
    );
    let items: Vec<(&String, &PathBuf)> = files.iter().collect();
    let results: Vec<Result<Value, Skipped>> = items
        .par_iter()
        .map(|(stem, path)| {
            let work = || -> crate::Result<Value> {
                let clean = DepthMap::from_tensor(&load_gray(path)?)?;
                let (noisy, spec): (DepthMap, NoiseSpec) =
                    add_depth_noise(&clean, target, image_seed(cli.seed, stem))?;
                let ext = match path.extension().and_then(|e| e.to_str()) {
                    Some(e) if e.eq_ignore_ascii_case("pgm") => "pgm",
                    _ => "png",
                };
                let name = format!("{stem}.{ext}");
                let out = a.out_dir.join(&name);
                save_depth(&noisy, &out)?;
                let written = DepthMap::from_tensor(&load_gray(&out)?)?;
                let (rmse8, delta8) = noise_stats(&clean, &written)?;
                Ok(json!({
                    "image": name,
                    "noise": spec,
                    "written_rmse": rmse8,
                    "written_delta1": delta8,
                }))
            };
            work().map_err(|e| Skipped {
                file: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect();
    let mut rows = Vec::new();
    for (r, (stem, _)) in results.into_iter().zip(&items) {
        match r {
            Ok(v) => {
                let mut side = header(cli);
                side["delta1_definition"] = json!(format!(
                    "fraction of pixels with both values > {DELTA_GUARD} where max(a/b, b/a) > {DELTA_RATIO}"
                ));
                side["result"] = v.clone();
                write_json(&a.out_dir.join(format!("{stem}.noise.json")), &side)?;
                rows.push(v);
            }
            Err(s) => skipped.push(s),
        }
    }
    report_skips(&skipped);
    let n = rows.len().max(1) as f64;
    let mean = |k: &str| rows.iter().map(|r| r["noise"][k].as_f64().unwrap_or(f64::NAN)).sum::<f64>() / n;
    let (mean_rmse, mean_delta) = (mean("achieved_rmse"), mean("achieved_delta1"));
    let report = a.out_dir.join(format!("noise_report.{}", cli.format.ext()));
    match cli.format {
        Format::Json => {
            let mut v = header(cli);
            v["target_rmse"] = json!(target);
            v["images"] = json!(rows);
            v["mean_rmse"] = json!(mean_rmse);
            v["mean_delta1"] = json!(mean_delta);
            v["skipped"] = serde_json::to_value(&skipped)?;
            write_json(&report, &v)?;
        }
        Format::Csv => {
            let mut s = csv_header(cli);
            s.push_str("image,target_rmse,sigma,achieved_rmse,achieved_delta1,written_rmse,written_delta1\n");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r["image"].as_str().unwrap_or(""),
                    r["noise"]["target_rmse"],
                    r["noise"]["sigma"],
                    r["noise"]["achieved_rmse"],
                    r["noise"]["achieved_delta1"],
                    r["written_rmse"],
                    r["written_delta1"]
                );
            }
            write_file(&report, &s)?;
        }
    }
    println!(
        "noise: target rmse {target}, {} images, mean rmse {mean_rmse:.4}, mean delta1 {mean_delta:.4}, {} skipped",
        rows.len(),
        skipped.len()
    );
    Ok(exit_for(skipped.len()))
}
