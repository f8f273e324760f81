use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use georefine::checkpoint::{Checkpoint, Stage};
use georefine::config::RunConfig;
use georefine::eval::{self, evaluate_iterations, metrics_csv, summary_table, sweep_csv, MetricsReport};
use georefine::experiment::{ablation_table, method_name, scene_hashes, split_holdout, ABLATION_ROWS};
use georefine::grid::emit_grid;
use georefine::image::RgbImage;
use georefine::mesh;
use georefine::metrics::encode_normals;
use georefine::model::{self, Ablation, Model};
use georefine::scenekit::{build_dataset, render_ground_truth, CameraPose, Dataset, ObjectViews};
use georefine::selftest;
use georefine::train::{train_baseline, train_refiner, StepLog};

const OUT_ENV: &str = "GEOREFINE_OUT";
const SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];
/// Reference compute ratio of a two-pass over a one-pass reconstruction at full scale.
const REFERENCE_RATIO: (f64, f64) = (8.687, 3.878);

#[derive(Parser)]
#[command(
    name = "georefine",
    version,
    about = "Self-corrective triplane reconstruction on procedural scenes",
    after_help = "Any config value can be overridden with a dotted flag, e.g. `--train.lr 1e-3` or `--model.dim=48`."
)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for default input and output paths.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset.
    GenData(GenData),
    /// Train the one-pass reconstruction backbone.
    TrainBase(TrainBase),
    /// Train a refiner on top of a frozen backbone.
    TrainRefine(TrainRefine),
    /// Reconstruct one object and write renders, a comparison grid or a mesh.
    Infer(Infer),
    /// Evaluate a checkpoint on the held-out objects.
    Eval(Eval),
    /// Evaluate every iteration count up to a maximum.
    Sweep(Sweep),
    /// Report operation counts and wall time per iteration count.
    Cost(Cost),
    /// Train and compare the refiner variants.
    Ablate(Ablate),
    /// Run the invariant suite.
    Selftest,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    cond_views: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory [default: <root>/data].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory [default: <root>/data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Accept a checkpoint trained on a different dataset.
    #[arg(long)]
    allow_hash_mismatch: bool,
}

#[derive(Args)]
struct TrainBase {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint path [default: <root>/base.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainRefine {
    #[command(flatten)]
    data: DataArg,
    /// Baseline checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Refiner variant: random-init, token-concat, normal-only or depth-only.
    #[arg(long)]
    ablation: Option<String>,
    /// Passes unrolled per training step.
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint path [default: <root>/refiner.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CkptArgs {
    /// Checkpoint [default: <root>/refiner.ckpt].
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Output directory [default: <root>/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    common: CkptArgs,
    #[arg(long)]
    iterations: Option<usize>,
    /// Object id [default: first held-out object].
    #[arg(long)]
    object: Option<String>,
    /// Write a comparison grid of every pass.
    #[arg(long)]
    grid: bool,
    /// Write the final surface as an OBJ file.
    #[arg(long)]
    export_mesh: Option<PathBuf>,
    /// Density level of the exported surface.
    #[arg(long, default_value_t = 5.0)]
    level: f64,
    /// Samples per axis of the meshing grid.
    #[arg(long, default_value_t = 48)]
    mesh_res: usize,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: CkptArgs,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: CkptArgs,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct Cost {
    /// Checkpoint; a freshly initialized model is used when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated iteration counts.
    #[arg(long, default_value = "1,2")]
    iterations: String,
    /// Timed runs per iteration count (median reported).
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    data: DataArg,
    /// Baseline checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Run every variant.
    #[arg(long)]
    all: bool,
    /// Variants to run (repeatable); `proposed` names the full refiner.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Refiner steps per variant.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Input that fails validation; maps to exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` and `--section.key=value` out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|k| k.split_once('.').is_some_and(|(s, _)| SECTIONS.contains(&s)))
            .map(str::to_string);
        match dotted {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| invalid(format!("--{k} needs a value")))?;
                    overrides.push((k, v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    root: PathBuf,
}

impl Ctx {
    fn data_dir(&self, d: &DataArg) -> PathBuf {
        d.data.clone().unwrap_or_else(|| self.root.join("data"))
    }

    fn out_dir(&self, out: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let dir = out.clone().unwrap_or_else(|| self.root.join(name));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Resolved config and a provenance record written next to outputs.
    fn stamp(&self, dir: &Path, command: &str, extra: serde_json::Value) -> Result<()> {
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml())?;
        let record = serde_json::json!({
            "command": command,
            "config_hash": self.hash,
            "data_seed": self.cfg.data.seed,
            "train_seed": self.cfg.train.seed,
            "inputs": extra,
        });
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
        Ok(())
    }

    fn load_dataset(&self, d: &DataArg) -> Result<Dataset> {
        let dir = self.data_dir(d);
        let ds = Dataset::load(&dir)?;
        if ds.manifest.config.res != self.cfg.model.image_res {
            return Err(invalid(format!(
                "dataset resolution {} does not match model.image_res {}",
                ds.manifest.config.res, self.cfg.model.image_res
            )));
        }
        Ok(ds)
    }

    fn load_ckpt(&self, path: &Option<PathBuf>) -> Result<(PathBuf, Checkpoint)> {
        let p = path.clone().unwrap_or_else(|| self.root.join("refiner.ckpt"));
        let ck = Checkpoint::load(&p)?;
        Ok((p, ck))
    }
}

fn check_dataset_hash(ck: &Checkpoint, ds: &Dataset, allow: bool) -> Result<()> {
    if ck.header.dataset_hash != ds.manifest.content_hash {
        let msg = format!(
            "checkpoint was trained on dataset {} but {} has hash {}",
            short(&ck.header.dataset_hash),
            ds.root.display(),
            short(&ds.manifest.content_hash)
        );
        if !allow {
            return Err(invalid(format!("{msg} (pass --allow-hash-mismatch to continue)")));
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

fn short(h: &str) -> &str {
    &h[..h.len().min(16)]
}

fn log_step(stage: &str, every: usize, total: usize) -> impl FnMut(&StepLog) + '_ {
    move |s: &StepLog| {
        if every > 0 && (s.step.is_multiple_of(every) || s.step + 1 == total) {
            let parts: Vec<String> = s.passes.iter().map(|p| format!("{:.4}", p.total)).collect();
            let last = s.passes.last().expect("at least one pass");
            println!(
                "{stage} step {:>5}/{total} lr {:.2e} loss [{}] rgb {:.4} mask {:.4} depth {:.4} normal {:.4}",
                s.step + 1,
                s.lr,
                parts.join(", "),
                last.rgb,
                last.mask,
                last.depth,
                last.normal
            );
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let validation = e.downcast_ref::<Invalid>().is_some()
                || e.downcast_ref::<georefine::error::Error>().is_some_and(|e| e.is_validation());
            eprintln!("error: {e:#}");
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run() -> Result<()> {
    let (argv, mut overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let name = command_name(&cli.command);
    flag_overrides(&cli.command, &mut overrides);
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    let ctx = Ctx { hash: cfg.hash(), cfg, root: cli.root };
    eprintln!("georefine {name}");
    eprintln!("config hash {} | data seed {} | train seed {}", ctx.hash, ctx.cfg.data.seed, ctx.cfg.train.seed);
    eprintln!("--- resolved config ---\n{}-----------------------", ctx.cfg.to_toml());
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::TrainBase(a) => train_base(&ctx, a),
        Command::TrainRefine(a) => train_refine(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Cost(a) => cost(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Selftest => run_selftest(),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::TrainBase(_) => "train-base",
        Command::TrainRefine(_) => "train-refine",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::Cost(_) => "cost",
        Command::Ablate(_) => "ablate",
        Command::Selftest => "selftest",
    }
}

/// Subcommand flags that mirror config keys; they take precedence over dotted flags.
fn flag_overrides(c: &Command, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let s = |v: Option<usize>| v.map(|x| x.to_string());
    match c {
        Command::GenData(a) => {
            put("data.objects", s(a.objects));
            put("data.views", s(a.views));
            put("data.cond_views", s(a.cond_views));
            put("data.res", s(a.res));
            put("model.image_res", s(a.res));
            put("data.seed", a.seed.map(|x| x.to_string()));
        }
        Command::TrainBase(a) => put("train.base_steps", s(a.steps)),
        Command::TrainRefine(a) => {
            put("train.refine_steps", s(a.steps));
            put("train.unroll", s(a.unroll));
        }
        Command::Infer(a) => put("eval.iterations", s(a.iterations)),
        Command::Eval(a) => put("eval.iterations", s(a.iterations)),
        Command::Sweep(a) => put("eval.max_iterations", s(a.max_iterations)),
        Command::Cost(a) => put("eval.timing_runs", s(a.runs)),
        Command::Ablate(a) => put("train.refine_steps", s(a.steps)),
        Command::Selftest => {}
    }
}

fn gen_data(ctx: &Ctx, a: &GenData) -> Result<()> {
    let dir = a.out.clone().unwrap_or_else(|| ctx.root.join("data"));
    let m = build_dataset(&ctx.cfg.data, &dir, a.force)?;
    ctx.stamp(&dir, "gen-data", serde_json::json!({}))?;
    println!(
        "wrote {} objects x {} views to {} (content hash {})",
        m.objects.len(),
        ctx.cfg.data.views + ctx.cfg.data.cond_views,
        dir.display(),
        short(&m.content_hash)
    );
    Ok(())
}

fn train_base(ctx: &Ctx, a: &TrainBase) -> Result<()> {
    let ds = ctx.load_dataset(&a.data)?;
    let (train, held) = split_holdout(&ds.objects, ctx.cfg.eval.holdout)?;
    println!("training on {} objects, {} held out", train.len(), held.len());
    let mut model = Model::new(ctx.cfg.model.clone(), ctx.cfg.train.seed)?;
    let tc = &ctx.cfg.train;
    train_baseline(&mut model, train, tc, log_step("base", tc.log_every, tc.base_steps))?;
    let out = a.out.clone().unwrap_or_else(|| ctx.root.join("base.ckpt"));
    let ck = Checkpoint::from_model(&model, Stage::Baseline, tc.base_steps, tc, &ctx.hash, &ds.manifest.content_hash, scene_hashes(train));
    ck.save(&out)?;
    println!("saved {} (backbone {})", out.display(), short(&ck.header.backbone_hash));
    Ok(())
}

fn train_refine(ctx: &Ctx, a: &TrainRefine) -> Result<()> {
    let ds = ctx.load_dataset(&a.data)?;
    let base = Checkpoint::load(&a.base)?;
    check_dataset_hash(&base, &ds, a.data.allow_hash_mismatch)?;
    let ablation = match a.ablation.as_deref() {
        None | Some("proposed") => Ablation::None,
        Some(s) => Ablation::parse(s)?,
    };
    let (train, _) = split_holdout(&ds.objects, ctx.cfg.eval.holdout)?;
    let mut model = base.model();
    model.detach_refiner();
    let backbone = model.backbone_hash();
    model.attach_refiner(ablation, ctx.cfg.train.seed)?;
    let tc = &ctx.cfg.train;
    println!("refiner {} with {} unrolled passes on {} objects", method_name(ablation), tc.unroll, train.len());
    train_refiner(&mut model, train, tc, log_step("refine", tc.log_every, tc.refine_steps))?;
    if model.backbone_hash() != backbone {
        bail!("backbone parameters changed during refiner training");
    }
    let default = match ablation {
        Ablation::None => "refiner.ckpt".to_string(),
        other => format!("refiner-{}.ckpt", other.name()),
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.root.join(default));
    let ck = Checkpoint::from_model(&model, Stage::Refiner, tc.refine_steps, tc, &ctx.hash, &ds.manifest.content_hash, scene_hashes(train));
    ck.save(&out)?;
    println!("saved {} (backbone {} unchanged)", out.display(), short(&ck.header.backbone_hash));
    Ok(())
}

fn pick_object<'a>(ds: &'a Dataset, held: &'a [ObjectViews], id: Option<&str>) -> Result<&'a ObjectViews> {
    match id {
        None => held.first().ok_or_else(|| invalid("no held-out objects")),
        Some(id) => ds.objects.iter().find(|o| o.id == id).ok_or_else(|| invalid(format!("no object {id:?} in dataset"))),
    }
}

fn infer(ctx: &Ctx, a: &Infer) -> Result<()> {
    let ds = ctx.load_dataset(&a.common.data)?;
    let (ck_path, ck) = ctx.load_ckpt(&a.common.ckpt)?;
    check_dataset_hash(&ck, &ds, a.common.data.allow_hash_mismatch)?;
    let (_, held) = split_holdout(&ds.objects, ctx.cfg.eval.holdout)?;
    let obj = pick_object(&ds, held, a.object.as_deref())?;
    let model = ck.model();
    let k = ctx.cfg.eval.iterations;
    if k > 1 && model.refiner.is_none() {
        return Err(invalid("more than one iteration needs a refiner checkpoint"));
    }
    let dir = ctx.out_dir(&a.common.out, "infer")?;
    let states = model::infer(&model, &obj.cond, k)?;
    let res = ctx.cfg.eval.res;
    let cams: Vec<CameraPose> = [0.0, 120.0, 240.0]
        .iter()
        .map(|&az| CameraPose::orbit(az, 10.0, ctx.cfg.eval.radius, ctx.cfg.eval.fov_deg))
        .collect::<georefine::error::Result<_>>()?;
    let gts = cams.iter().map(|c| render_ground_truth(&obj.scene, c, res)).collect::<georefine::error::Result<Vec<_>>>()?;
    for state in &states {
        let mut strip = RgbImage::new(res * cams.len(), 2 * res, [255, 255, 255]);
        for (i, gt) in gts.iter().enumerate() {
            let img = model::render_planes(&model, &state.planes, &gt.camera, res)?;
            strip.blit(&RgbImage::from_f64(res, res, &img.rgb), i * res, 0);
            strip.blit(&RgbImage::from_f64(res, res, &encode_normals(&img.normal, &img.mask())), i * res, res);
        }
        let p = dir.join(format!("{}_iter{}.png", obj.id, state.step + 1));
        strip.write_png(&p)?;
        println!("wrote {}", p.display());
    }
    if a.grid {
        let p = dir.join(format!("{}_grid.png", obj.id));
        emit_grid(&model, &states, &gts, &p)?;
        println!("wrote {}", p.display());
    }
    if let Some(path) = &a.export_mesh {
        let last = states.last().expect("at least one pass");
        let m = mesh::extract_planes(&last.planes, &model.params, a.mesh_res, a.level)?;
        let residual = mesh::field_density(&last.planes, &model.params, &m.vertices)
            .iter()
            .map(|d| (d - a.level).abs() / a.level)
            .fold(0.0, f64::max);
        m.write_obj(path)?;
        println!(
            "wrote {} ({} vertices, {} triangles, max relative level error {:.2e})",
            path.display(),
            m.vertices.len(),
            m.triangles.len(),
            residual
        );
    }
    ctx.stamp(&dir, "infer", serde_json::json!({ "checkpoint": ck_path, "checkpoint_config_hash": ck.header.config_hash, "object": obj.id }))?;
    Ok(())
}

fn evaluate(ctx: &Ctx, common: &CkptArgs, max_iterations: usize, name: &str) -> Result<(PathBuf, Vec<MetricsReport>)> {
    let ds = ctx.load_dataset(&common.data)?;
    let (ck_path, ck) = ctx.load_ckpt(&common.ckpt)?;
    check_dataset_hash(&ck, &ds, common.data.allow_hash_mismatch)?;
    let model = ck.model();
    if max_iterations > 1 && model.refiner.is_none() {
        return Err(invalid("more than one iteration needs a refiner checkpoint"));
    }
    let (_, held) = split_holdout(&ds.objects, ctx.cfg.eval.holdout)?;
    let method = match (ck.header.stage, model.refiner) {
        (Stage::Refiner, Some(a)) => method_name(a),
        _ => "baseline",
    };
    let reports = evaluate_iterations(&model, method, held, &ck.header.train_scenes, &ctx.cfg.eval, max_iterations)?;
    let dir = ctx.out_dir(&common.out, name)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&reports))?;
    std::fs::write(dir.join("summary.txt"), summary_table(&reports))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    ctx.stamp(
        &dir,
        name,
        serde_json::json!({
            "checkpoint": ck_path,
            "checkpoint_config_hash": ck.header.config_hash,
            "dataset_hash": ds.manifest.content_hash,
        }),
    )?;
    print!("{}", summary_table(&reports));
    println!("{} held-out objects, {}", held.len(), ctx.cfg.eval.grid_description());
    Ok((dir, reports))
}

fn eval_cmd(ctx: &Ctx, a: &Eval) -> Result<()> {
    let (dir, _) = evaluate(ctx, &a.common, ctx.cfg.eval.iterations, "eval")?;
    println!("wrote {}", dir.join("metrics.csv").display());
    Ok(())
}

fn sweep(ctx: &Ctx, a: &Sweep) -> Result<()> {
    let t = ctx.cfg.eval.max_iterations;
    if t < 2 {
        return Err(invalid("a sweep needs --max-iterations of at least 2"));
    }
    let (dir, reports) = evaluate(ctx, &a.common, t, "sweep")?;
    std::fs::write(dir.join("sweep.csv"), sweep_csv(&reports))?;
    eval::sweep_plot(&reports).write_png(&dir.join("sweep.png"))?;
    for w in reports.windows(2) {
        println!(
            "iterations {} -> {}: rgb psnr {:+.3} dB, normal psnr {:+.3} dB",
            w[0].iterations,
            w[1].iterations,
            w[1].rgb.psnr - w[0].rgb.psnr,
            w[1].normal.psnr - w[0].normal.psnr
        );
    }
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn cost(ctx: &Ctx, a: &Cost) -> Result<()> {
    let iterations: Vec<usize> = a
        .iterations
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| invalid(format!("bad iteration count {s:?}"))))
        .collect::<Result<_>>()?;
    if iterations.contains(&0) {
        return Err(invalid("iteration counts must be positive"));
    }
    let model = match &a.ckpt {
        Some(p) => Checkpoint::load(p)?.model(),
        None => {
            let mut m = Model::new(ctx.cfg.model.clone(), ctx.cfg.train.seed)?;
            m.attach_refiner(Ablation::None, ctx.cfg.train.seed)?;
            m
        }
    };
    if model.refiner.is_none() && iterations.iter().any(|&k| k > 1) {
        return Err(invalid("more than one iteration needs a refiner checkpoint"));
    }
    let cond = selftest::object_views(ctx.cfg.data.seed, ctx.cfg.data.cond_views, model.config.image_res)?;
    let report = eval::cost_report(&model, &cond, &iterations, ctx.cfg.eval.timing_runs)?;
    let dir = ctx.out_dir(&a.out, "cost")?;
    let mut text = report.table();
    if let Some(r) = report.ratio(2, 1) {
        text += &format!(
            "analytic ratio iterations 2/1: {r:.3} (full-scale reference {:.3} / {:.3} = {:.3})\n",
            REFERENCE_RATIO.0,
            REFERENCE_RATIO.1,
            REFERENCE_RATIO.0 / REFERENCE_RATIO.1
        );
    }
    print!("{text}");
    std::fs::write(dir.join("cost.txt"), &text)?;
    std::fs::write(dir.join("cost.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    ctx.stamp(&dir, "cost", serde_json::json!({ "checkpoint": a.ckpt }))?;
    Ok(())
}

fn ablate(ctx: &Ctx, a: &Ablate) -> Result<()> {
    let variants: Vec<Ablation> = if a.all {
        ABLATION_ROWS.to_vec()
    } else if a.variants.is_empty() {
        return Err(invalid("pass --all or at least one --variant"));
    } else {
        a.variants
            .iter()
            .map(|v| if v == "proposed" { Ok(Ablation::None) } else { Ablation::parse(v) })
            .collect::<georefine::error::Result<_>>()?
    };
    let ds = ctx.load_dataset(&a.data)?;
    let base = Checkpoint::load(&a.base)?;
    check_dataset_hash(&base, &ds, a.data.allow_hash_mismatch)?;
    let (train, held) = split_holdout(&ds.objects, ctx.cfg.eval.holdout)?;
    let tc = &ctx.cfg.train;
    let every = tc.log_every;
    let rows = ablation_table(&base.model(), train, held, &variants, tc, &ctx.cfg.eval, |v, s| {
        if every > 0 && s.step % every == 0 {
            let last = s.passes.last().expect("at least one pass");
            println!("{} step {}/{} loss {:.4}", method_name(v), s.step + 1, tc.refine_steps, last.total);
        }
    })?;
    let dir = ctx.out_dir(&a.out, "ablate")?;
    let table = summary_table(&rows);
    let mut csv = String::from("method,iterations,rgb_psnr,rgb_ssim,rgb_perceptual,normal_psnr,normal_ssim,normal_perceptual\n");
    for r in &rows {
        csv += &format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.method, r.iterations, r.rgb.psnr, r.rgb.ssim, r.rgb.perceptual, r.normal.psnr, r.normal.ssim, r.normal.perceptual
        );
    }
    std::fs::write(dir.join("ablation.csv"), csv)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
    std::fs::write(dir.join("summary.txt"), &table)?;
    ctx.stamp(&dir, "ablate", serde_json::json!({ "base": a.base, "base_config_hash": base.header.config_hash }))?;
    print!("{table}");
    if let Some(p) = rows.iter().find(|r| r.method == "proposed") {
        for r in rows.iter().filter(|r| r.method != "proposed" && r.method != "baseline") {
            let holds = p.normal.perceptual <= r.normal.perceptual;
            println!(
                "normal perceptual: proposed {:.4} vs {} {:.4} ({})",
                p.normal.perceptual,
                r.method,
                r.normal.perceptual,
                if holds { "proposed not worse" } else { "ordering inverted" }
            );
        }
    }
    Ok(())
}

fn run_selftest() -> Result<()> {
    let results = selftest::run_all();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let (rest, ov) = split_overrides(v(&["georefine", "eval", "--train.lr", "1e-3", "--model.dim=48", "--ckpt", "x"])).unwrap();
        assert_eq!(rest, v(&["georefine", "eval", "--ckpt", "x"]));
        assert_eq!(ov, vec![("train.lr".into(), "1e-3".into()), ("model.dim".into(), "48".into())]);
        assert!(split_overrides(v(&["georefine", "--train.lr"])).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
