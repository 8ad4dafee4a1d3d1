//! Command-line front end: inversion runs, forward/zoom rendering,
//! suite generation, suite evaluation, and gradient checking.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, missing
//! or malformed inputs), 2 on runtime failures (divergence, exhausted
//! rejection loops, output I/O).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ifs_core::canvas::{load_png, save_png, Canvas, ViewWindow};
use ifs_core::chaos::ChaosParams;
use ifs_core::codec::{read_code_file, write_code_file, DocumentMeta};
use ifs_core::config::{load_config, resolved_snapshot, Settings};
use ifs_core::grad::{evaluate_pipeline, evaluate_pipeline_value, EvalSettings};
use ifs_core::ifs::{init_params, FractalCode};
use ifs_core::optim::{history_to_csv, run_inversion, Ablations, Objective};
use ifs_core::render::{render_eval, EvalRender, EvalRenderSettings};
use ifs_core::splat::SplatConfig;
use ifs_core::suite::{evaluate_suite, gen_random_suite};

#[derive(Parser)]
#[command(
    name = "ifs-invert",
    version,
    about = "Recover IFS fractal codes from grayscale images and re-render them at arbitrary zoom"
)]
struct Cli {
    /// Worker threads (default: logical cores; IFS_INVERT_THREADS as
    /// fallback). Use 1 for bit-exact splat accumulation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover a fractal code from a grayscale image.
    Invert(InvertArgs),
    /// Render the full view of a stored fractal code.
    Render(ViewArgs),
    /// Render a zoomed window of a stored fractal code.
    Zoom(ZoomArgs),
    /// Score recovered codes against ground-truth codes.
    Eval(EvalArgs),
    /// Generate a random test suite of fractal codes.
    GenSuite(GenSuiteArgs),
    /// Compare analytic parameter gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct InvertArgs {
    /// Input grayscale PNG (square, power-of-two side; dark foreground
    /// on light background unless --light-foreground).
    #[arg(long)]
    input: PathBuf,
    /// Output path for the recovered code (best-loss iterate); the final
    /// iterate, history CSV, render PNG, and run.toml land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Config file (key = value lines, run.* / loss.* keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override run.total_iters.
    #[arg(long)]
    iters: Option<usize>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.map_count (affine maps to fit).
    #[arg(long)]
    maps: Option<usize>,
    /// Start from this code file instead of a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Input has a bright foreground on dark background.
    #[arg(long)]
    light_foreground: bool,
    /// Disable simulated-annealing phases (pure gradient descent).
    #[arg(long)]
    no_sa: bool,
    /// Disable gradient steps (simulated annealing only, full-loss energy).
    #[arg(long)]
    no_gradients: bool,
    /// Add zero-mean Gaussian noise with this standard deviation to every
    /// gradient coordinate.
    #[arg(long, value_name = "SIGMA")]
    noisy_gradients: Option<f64>,
    /// Optimize raw matrix entries directly (6 scalars per map).
    #[arg(long)]
    naive_param: bool,
    /// Render without supersampling.
    #[arg(long)]
    no_multisample: bool,
    /// Drop parameter gradients from warm-up trajectory steps.
    #[arg(long)]
    truncate_warmup: bool,
    /// Replace the image terms with moment matching up to this order.
    #[arg(long, value_name = "ORDER")]
    moments: Option<usize>,
    /// Zero the multi-scale MSE weight.
    #[arg(long)]
    loss_mse_off: bool,
    /// Zero the D-SSIM weight.
    #[arg(long)]
    loss_ssim_off: bool,
    /// Zero the perceptual-plugin weight.
    #[arg(long)]
    loss_lpips_off: bool,
    /// Zero the regularizer weight.
    #[arg(long)]
    loss_reg_off: bool,
}

#[derive(Args)]
struct ViewArgs {
    /// Fractal code file to render.
    #[arg(long)]
    code: PathBuf,
    /// Output PNG path; a .meta sidecar records the render accounting.
    #[arg(long)]
    out: PathBuf,
    /// Output side in pixels.
    #[arg(long, default_value_t = 1024)]
    size: usize,
    /// In-view point budget.
    #[arg(long, default_value_t = 5_000_000)]
    points: usize,
    /// Supersampling factor.
    #[arg(long, default_value_t = 8)]
    supersample: usize,
    /// Wall-clock cap in seconds; expiring first marks the output ▲.
    #[arg(long, default_value_t = 60.0)]
    time_cap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write bright foreground on dark background.
    #[arg(long)]
    light_foreground: bool,
}

#[derive(Args)]
struct ZoomArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Zoom factor; the window half-extent is 0.5/factor.
    #[arg(long)]
    factor: f64,
    /// Window center as "x,y" in the normalized [0,1]² frame.
    #[arg(long, default_value = "0.5,0.5")]
    center: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of ground-truth code files (*.json).
    #[arg(long)]
    gt: PathBuf,
    /// Directory of recovered code files with matching names.
    #[arg(long)]
    recovered: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    points: usize,
    #[arg(long, default_value_t = 30.0)]
    time_cap: f64,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    supersample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenSuiteArgs {
    /// Number of fractals to generate.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing): fractal_NNN.json + .png.
    #[arg(long)]
    out: PathBuf,
    /// Reference render side.
    #[arg(long, default_value_t = 1024)]
    size: usize,
    #[arg(long, default_value_t = 2_000_000)]
    points: usize,
    #[arg(long, default_value_t = 4)]
    supersample: usize,
    #[arg(long, default_value_t = 60.0)]
    time_cap: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of affine maps in the probe code.
    #[arg(long, default_value_t = 3)]
    maps: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Canvas side for the probe render.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    supersample: usize,
    #[arg(long, default_value_t = 8)]
    trajectories: usize,
    #[arg(long, default_value_t = 20)]
    length: usize,
    #[arg(long, default_value_t = 4)]
    warmup: usize,
    /// Central-difference step on the raw parameters.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Relative tolerance per coordinate.
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    /// Required fraction of in-tolerance coordinates.
    #[arg(long, default_value_t = 0.95)]
    pass_rate: f64,
}

/// A failure bound to its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Marks errors from the input-validation phase (exit 1).
fn validation<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(|error| Failure { code: 1, error })
}

/// Marks errors from the execution phase (exit 2).
fn runtime<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| Failure {
        code: 2,
        error: e.into(),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    validation(init_threads(cli.threads))?;
    match cli.command {
        Command::Invert(args) => cmd_invert(args),
        Command::Render(args) => cmd_render(args),
        Command::Zoom(args) => cmd_zoom(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GenSuite(args) => cmd_gen_suite(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("IFS_INVERT_THREADS") {
            Ok(raw) => Some(
                raw.trim()
                    .parse::<usize>()
                    .with_context(|| format!("IFS_INVERT_THREADS=`{raw}` is not an integer"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("worker pool already initialized")?;
    }
    Ok(())
}

/// Foreground values below this are treated as background when checking
/// the input padding assumption.
const PADDING_TAU: f64 = 0.1;

/// The method assumes the shape sits inside the central half of the
/// canvas (a quarter of padding per side). Inputs that violate this are
/// re-padded: the foreground bounding box is rescaled into the central
/// half, preserving aspect ratio.
fn ensure_padding(canvas: Canvas) -> (Canvas, bool) {
    let side = canvas.width();
    let Some((x0, y0, x1, y1)) = canvas.foreground_bbox(PADDING_TAU) else {
        return (canvas, false);
    };
    // The normalized frame spans world [0.25, 0.75], whose outermost
    // points land exactly on pixel 3·side/4 — keep that bound inclusive.
    let lo = side / 4;
    let hi = side - side / 4;
    if x0 >= lo && y0 >= lo && x1 <= hi && y1 <= hi {
        return (canvas, false);
    }
    let bw = (x1 - x0 + 1) as f64;
    let bh = (y1 - y0 + 1) as f64;
    let span = side as f64 / 2.0;
    let scale = (span / bw).min(span / bh);
    let (out_w, out_h) = (bw * scale, bh * scale);
    let (off_x, off_y) = ((side as f64 - out_w) / 2.0, (side as f64 - out_h) / 2.0);
    let mut out = Canvas::zeros(side, side, 1);
    for y in 0..side {
        for x in 0..side {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            if fx >= off_x && fx < off_x + out_w && fy >= off_y && fy < off_y + out_h {
                let sx = x0 as f64 + (fx - off_x) / scale;
                let sy = y0 as f64 + (fy - off_y) / scale;
                out.set(x, y, canvas.sample_bilinear(sx, sy).clamp(0.0, 1.0));
            }
        }
    }
    (out, true)
}

fn cmd_invert(args: InvertArgs) -> CliResult<()> {
    // Validation phase: settings, flags, input image, optional init code.
    let mut settings = validation(match &args.config {
        Some(path) => load_config(path)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("reading config {}", path.display())),
        None => Ok(Settings::default()),
    })?;
    if let Some(iters) = args.iters {
        settings.run.total_iters = iters;
    }
    if let Some(seed) = args.seed {
        settings.run.seed = seed;
    }
    if let Some(maps) = args.maps {
        settings.run.map_count = maps;
    }
    if args.no_multisample {
        settings.run.supersample = 1;
    }
    if args.loss_mse_off {
        settings.loss.mse = 0.0;
    }
    if args.loss_ssim_off {
        settings.loss.ssim = 0.0;
    }
    if args.loss_lpips_off {
        settings.loss.lpips = 0.0;
    }
    if args.loss_reg_off {
        settings.loss.reg = 0.0;
    }
    if args.no_sa && args.no_gradients {
        return validation(Err(anyhow!(
            "--no-sa and --no-gradients together leave no optimizer"
        )));
    }
    let ablations = Ablations {
        no_sa: args.no_sa,
        sa_only: args.no_gradients,
        gradient_noise: args.noisy_gradients.unwrap_or(0.0),
        naive_params: args.naive_param,
        truncate_warmup: args.truncate_warmup,
        objective: match args.moments {
            Some(order) => Objective::Moments { order },
            None => Objective::Standard,
        },
    };

    let target = validation(
        load_png(&args.input, !args.light_foreground)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("loading {}", args.input.display())),
    )?;
    let side = target.width();
    if target.height() != side || !side.is_power_of_two() {
        return validation(Err(anyhow!(
            "input must be square with a power-of-two side, got {}×{}",
            target.width(),
            target.height()
        )));
    }
    settings.run.canvas_side = side;
    let (target, repadded) = ensure_padding(target);
    if repadded {
        eprintln!(
            "note: input re-padded — foreground moved into the central half of the canvas"
        );
    }
    let init = match &args.init {
        Some(path) => Some(
            validation(
                read_code_file(path)
                    .map_err(anyhow::Error::from)
                    .with_context(|| format!("reading init code {}", path.display())),
            )?
            .0,
        ),
        None => None,
    };

    // Execution phase.
    let result = runtime(run_inversion(
        &target,
        &settings.run,
        &settings.loss,
        &ablations,
        None,
        init,
    ))?;

    let meta = DocumentMeta {
        seed: Some(settings.run.seed),
        iterations: Some(settings.run.total_iters as u64),
        extra: serde_json::Map::new(),
    };
    runtime(write_code_file(&args.out, &result.best_code, Some(&meta)))?;
    let stem = args
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let final_path = dir.join(format!("{stem}_final.json"));
    runtime(write_code_file(&final_path, &result.final_code, Some(&meta)))?;
    let history_path = dir.join(format!("{stem}_history.csv"));
    runtime(std::fs::write(&history_path, history_to_csv(&result.history)))?;

    let render_path = dir.join(format!("{stem}_render.png"));
    let render = runtime(render_eval(
        &result.best_code,
        &ViewWindow::FULL,
        &EvalRenderSettings {
            side,
            supersample: 4,
            point_budget: 1_000_000,
            time_cap_seconds: 30.0,
            seed: settings.run.seed,
        },
    ))?;
    runtime(save_png(&render_path, &render.canvas, !args.light_foreground))?;

    let mut snapshot = String::new();
    let _ = writeln!(snapshot, "# resolved by: ifs-invert invert");
    let _ = writeln!(
        snapshot,
        "# ablations: no_sa={} no_gradients={} noisy_gradients={} naive_param={} \
         no_multisample={} truncate_warmup={} moments={:?}",
        args.no_sa,
        args.no_gradients,
        args.noisy_gradients.unwrap_or(0.0),
        args.naive_param,
        args.no_multisample,
        args.truncate_warmup,
        args.moments
    );
    snapshot.push_str(&resolved_snapshot(&settings));
    runtime(std::fs::write(dir.join("run.toml"), snapshot))?;

    println!(
        "inverted {} in {} iterations: best loss {:.6}, final loss {:.6}",
        args.input.display(),
        result.history.len(),
        result.best_loss,
        result.final_loss
    );
    if result.degenerate_batches > 0 {
        println!(
            "warning: {} batches collapsed to a point during optimization",
            result.degenerate_batches
        );
    }
    println!(
        "wrote {}, {}, {}, {}",
        args.out.display(),
        final_path.display(),
        history_path.display(),
        render_path.display()
    );
    Ok(())
}

fn load_view_code(path: &Path) -> CliResult<FractalCode> {
    Ok(validation(
        read_code_file(path)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("reading code {}", path.display())),
    )?
    .0)
}

fn run_view(args: &ViewArgs, view: ViewWindow, label: &str) -> CliResult<()> {
    let code = load_view_code(&args.code)?;
    if args.size == 0 || args.supersample == 0 {
        return validation(Err(anyhow!("--size and --supersample must be positive")));
    }
    if !(args.time_cap >= 0.0) {
        return validation(Err(anyhow!("--time-cap must be non-negative")));
    }
    let settings = EvalRenderSettings {
        side: args.size,
        supersample: args.supersample,
        point_budget: args.points,
        time_cap_seconds: args.time_cap,
        seed: args.seed,
    };
    let render = runtime(render_eval(&code, &view, &settings))?;
    runtime(save_png(&args.out, &render.canvas, !args.light_foreground))?;
    let meta_path = meta_path_for(&args.out);
    runtime(std::fs::write(
        &meta_path,
        render_meta(&args.code, &view, &settings, &render, label),
    ))?;
    println!(
        "rendered {} → {} ({} in-view points, {:.2}s{})",
        args.code.display(),
        args.out.display(),
        render.in_view_points,
        render.elapsed_seconds,
        if render.under_budget {
            " ▲ under budget"
        } else {
            ""
        }
    );
    Ok(())
}

fn meta_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_owned()).unwrap_or_default();
    name.push(".meta");
    out.with_file_name(name)
}

fn render_meta(
    code: &Path,
    view: &ViewWindow,
    settings: &EvalRenderSettings,
    render: &EvalRender,
    label: &str,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "command = {label}");
    let _ = writeln!(out, "code = {}", code.display());
    let _ = writeln!(out, "view.center = {}, {}", view.center[0], view.center[1]);
    let _ = writeln!(out, "view.half_extent = {}", view.half_extent);
    let _ = writeln!(out, "view.zoom = {}", view.zoom_factor());
    let _ = writeln!(out, "size = {}", settings.side);
    let _ = writeln!(out, "supersample = {}", settings.supersample);
    let _ = writeln!(out, "point_budget = {}", settings.point_budget);
    let _ = writeln!(out, "time_cap_seconds = {}", settings.time_cap_seconds);
    let _ = writeln!(out, "seed = {}", settings.seed);
    let _ = writeln!(out, "in_view_points = {}", render.in_view_points);
    let _ = writeln!(out, "generated_points = {}", render.generated_points);
    let _ = writeln!(out, "elapsed_seconds = {}", render.elapsed_seconds);
    let _ = writeln!(out, "under_budget = {}", render.under_budget);
    if render.under_budget {
        let _ = writeln!(
            out,
            "note = ▲ time cap expired before the point budget was met"
        );
    }
    out
}

fn cmd_render(args: ViewArgs) -> CliResult<()> {
    run_view(&args, ViewWindow::FULL, "render")
}

fn cmd_zoom(args: ZoomArgs) -> CliResult<()> {
    if !(args.factor > 0.0 && args.factor.is_finite()) {
        return validation(Err(anyhow!("--factor must be a positive number")));
    }
    let center = validation(parse_center(&args.center))?;
    run_view(
        &args.view,
        ViewWindow::zoomed(center, args.factor),
        "zoom",
    )
}

fn parse_center(raw: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("--center expects `x,y`, got `{raw}`");
    }
    let x: f64 = parts[0]
        .parse()
        .with_context(|| format!("bad center x `{}`", parts[0]))?;
    let y: f64 = parts[1]
        .parse()
        .with_context(|| format!("bad center y `{}`", parts[1]))?;
    Ok([x, y])
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let mut names: Vec<String> = Vec::new();
    let entries = validation(
        std::fs::read_dir(&args.gt)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("listing {}", args.gt.display())),
    )?;
    for entry in entries {
        let entry = validation(entry.map_err(anyhow::Error::from))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "json") {
            names.push(
                path.file_name()
                    .expect("file entries have names")
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    names.sort();
    if names.is_empty() {
        return validation(Err(anyhow!(
            "no .json code files in {}",
            args.gt.display()
        )));
    }
    let mut gt_codes = Vec::with_capacity(names.len());
    let mut rec_codes = Vec::with_capacity(names.len());
    for name in &names {
        gt_codes.push(load_view_code(&args.gt.join(name))?);
        let rec_path = args.recovered.join(name);
        if !rec_path.exists() {
            return validation(Err(anyhow!(
                "recovered code missing for {name}: {}",
                rec_path.display()
            )));
        }
        rec_codes.push(load_view_code(&rec_path)?);
    }

    let settings = EvalRenderSettings {
        side: args.size,
        supersample: args.supersample,
        point_budget: args.points,
        time_cap_seconds: args.time_cap,
        seed: args.seed,
    };
    let report = runtime(evaluate_suite(&gt_codes, &rec_codes, &settings))?;
    runtime(std::fs::write(&args.out, report.to_csv()))?;
    println!(
        "evaluated {} fractals × 7 views → {}",
        names.len(),
        args.out.display()
    );
    println!(
        "means: F1 {:.4}, IoU {:.4}, PSNR {:.2} dB, SSIM {:.4}",
        report.mean_f1, report.mean_iou, report.mean_psnr, report.mean_ssim
    );
    Ok(())
}

fn cmd_gen_suite(args: GenSuiteArgs) -> CliResult<()> {
    if args.n == 0 {
        return validation(Err(anyhow!("--n must be at least 1")));
    }
    runtime(std::fs::create_dir_all(&args.out))?;
    let codes = runtime(gen_random_suite(args.n, args.seed))?;
    for (i, code) in codes.iter().enumerate() {
        let meta = DocumentMeta {
            seed: Some(args.seed),
            iterations: None,
            extra: {
                let mut m = serde_json::Map::new();
                m.insert("suite_index".into(), serde_json::json!(i));
                m
            },
        };
        let code_path = args.out.join(format!("fractal_{i:03}.json"));
        runtime(write_code_file(&code_path, code, Some(&meta)))?;
        let render = runtime(render_eval(
            code,
            &ViewWindow::FULL,
            &EvalRenderSettings {
                side: args.size,
                supersample: args.supersample,
                point_budget: args.points,
                time_cap_seconds: args.time_cap,
                seed: args.seed,
            },
        ))?;
        let png_path = args.out.join(format!("fractal_{i:03}.png"));
        runtime(save_png(&png_path, &render.canvas, true))?;
    }
    println!(
        "wrote {} fractals (code + reference render) to {}",
        codes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    if args.maps == 0
        || args.size == 0
        || args.supersample == 0
        || args.trajectories == 0
        || args.warmup >= args.length
    {
        return validation(Err(anyhow!("degenerate gradcheck geometry")));
    }
    if !(args.step > 0.0) || !(args.tolerance > 0.0) || !(0.0..=1.0).contains(&args.pass_rate) {
        return validation(Err(anyhow!(
            "--step and --tolerance must be positive, --pass-rate in [0,1]"
        )));
    }

    let base_settings = EvalSettings {
        chaos: ChaosParams {
            trajectories: args.trajectories,
            trajectory_len: args.length,
            warmup: args.warmup,
            seed: args.seed ^ 0x9e37_79b9,
        },
        splat: SplatConfig::default(),
        target_side: args.size,
        supersample: args.supersample,
        weights: Default::default(),
        truncate_warmup: false,
        freeze_transform: None,
        plugin: None,
    };

    // Target: the render of a different random code at the same settings.
    let target_code = init_params(args.maps, args.seed.wrapping_mul(2).wrapping_add(1));
    let zeros = Canvas::zeros(args.size, args.size, 1);
    let target = runtime(evaluate_pipeline(&target_code, &zeros, &base_settings))?.render;

    let code = init_params(args.maps, args.seed);
    let base = runtime(evaluate_pipeline(&code, &target, &base_settings))?;
    let frozen = EvalSettings {
        freeze_transform: Some(base.transform),
        ..base_settings
    };
    let theta = code.to_theta();
    let mut failures = Vec::new();
    println!("coordinate  analytic        finite-diff     rel-error  verdict");
    let mut passed = 0usize;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += args.step;
        let mut minus = theta.clone();
        minus[i] -= args.step;
        let up = runtime(evaluate_pipeline_value(
            &FractalCode::from_theta(&plus).expect("layout preserved"),
            &target,
            &frozen,
        ))?;
        let down = runtime(evaluate_pipeline_value(
            &FractalCode::from_theta(&minus).expect("layout preserved"),
            &target,
            &frozen,
        ))?;
        let fd = (up - down) / (2.0 * args.step);
        let analytic = base.gradient[i];
        let scale = analytic.abs().max(fd.abs()).max(1e-8);
        let rel = (analytic - fd).abs() / scale;
        let ok = rel <= args.tolerance;
        if ok {
            passed += 1;
        } else {
            failures.push(i);
        }
        println!(
            "{i:>10}  {analytic:>14.8}  {fd:>14.8}  {rel:>9.2e}  {}",
            if ok { "pass" } else { "FAIL" }
        );
    }
    let rate = passed as f64 / theta.len() as f64;
    println!(
        "gradcheck: {passed}/{} coordinates within {:.0e} relative tolerance (pass rate {:.1}%)",
        theta.len(),
        args.tolerance,
        rate * 100.0
    );
    if rate < args.pass_rate {
        return runtime(Err(anyhow!(
            "pass rate {:.3} below required {:.3}; failing coordinates: {failures:?}",
            rate,
            args.pass_rate
        )));
    }
    Ok(())
}
