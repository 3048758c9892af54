//! Command-line front end: `gen`, `train`, `eval`, `bench`, `gradcheck`.
//!
//! Every command writes `manifest.json` (seed, config hash, versions) next to
//! its CSV outputs. CSV files are byte-identical across runs with the same
//! inputs; wall-clock timings go to their own file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{read_scene, write_scene, PointCloud};
use crate::harness::bench::{pair_sweep, pair_sweep_csv, time_attention, timing_csv};
use crate::harness::{gen_scene, miou, run_suite, SceneRecipe, SuiteOptions};
use crate::model::{fit, final_epoch_loss, predict, ModelConfig, Network, Sample, TrainConfig, Variant};
use crate::nn::{checkpoint, ParamStore};
use crate::scalar::Scalar;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const SCENE_EXTENSION: &str = "scene";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "condaformer", version, about = "Sparse-voxel point-cloud transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic labeled scenes.
    Gen(GenArgs),
    /// Train on a scene directory; writes a checkpoint and the loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a scene directory.
    Eval(EvalArgs),
    /// Attention pair-count sweep over dense grids, plus timings.
    Bench(BenchArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub count: u64,
    /// TOML with an optional `[scene]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `variant` in the model config.
    #[arg(long, value_parser = parse_variant)]
    pub mode: Option<Variant>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// TOML with optional `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_variant)]
    pub mode: Option<Variant>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Defaults to the `config.toml` written next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dense grid extents in voxels.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16])]
    pub extents: Vec<i32>,
    /// Window extents `W` in voxels; only those dividing the grid extent are swept.
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16])]
    pub windows: Vec<u32>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Skip the wall-clock measurements.
    #[arg(long)]
    pub no_timing: bool,
    /// Time with all cores instead of one.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = SuiteOptions::default().seed)]
    pub seed: u64,
    /// Only 64-bit is supported.
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// Contents of a `--config` file. Absent tables take their defaults; an
/// absent `[model]` means the toy model sized to the scenes' class count.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scene: SceneRecipe,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = &cfg.model {
            m.validate()?;
        }
        cfg.train.validate()?;
        cfg.scene.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills in the model for `num_classes` and applies the `--mode` override.
    fn resolve(mut self, num_classes: usize, mode: Option<Variant>) -> Result<Self> {
        let mut model = self.model.unwrap_or_else(|| ModelConfig::toy(num_classes, mode.unwrap_or(Variant::ConDaFormer)));
        if let Some(v) = mode {
            model.variant = v;
        }
        if model.num_classes != num_classes {
            return Err(Error::Config(format!("model predicts {} classes, scenes declare {num_classes}", model.num_classes)));
        }
        model.validate()?;
        self.model = Some(model);
        Ok(self)
    }

    fn model(&self) -> &ModelConfig {
        self.model.as_ref().expect("resolved")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    precision: Option<&'a str>,
    mode: Option<&'a str>,
    config_sha256: String,
    inputs: Vec<String>,
    crate_version: &'a str,
    checkpoint_format: u8,
}

fn write_manifest(out: &Path, m: &Manifest<'_>) -> Result<()> {
    let json = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(out.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn manifest<'a>(command: &'a str, seed: u64, config: &str) -> Manifest<'a> {
    Manifest {
        command,
        seed,
        precision: None,
        mode: None,
        config_sha256: sha256_hex(config.as_bytes()),
        inputs: Vec::new(),
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: checkpoint::VERSION,
    }
}

/// Left-aligned first column, right-aligned others.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(header.to_vec());
    s += &line(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        s += &line(r.iter().map(String::as_str).collect());
    }
    s
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == SCENE_EXTENSION))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .{SCENE_EXTENSION} files in {}", dir.display())));
    }
    Ok(files)
}

fn load_scenes<T: Scalar>(dir: &Path) -> Result<(Vec<PointCloud<T>>, usize, Vec<String>)> {
    let files = scene_files(dir)?;
    let mut clouds = Vec::with_capacity(files.len());
    let mut classes = None;
    for f in &files {
        let (cloud, k) = read_scene::<T>(f)?;
        if *classes.get_or_insert(k) != k {
            return Err(Error::Config(format!("{} declares {k} classes, earlier scenes {}", f.display(), classes.unwrap())));
        }
        clouds.push(cloud);
    }
    let names = files.iter().map(|f| f.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    Ok((clouds, classes.expect("non-empty"), names))
}

fn gen(args: &GenArgs) -> Result<i32> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    std::fs::create_dir_all(&args.out)?;
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for i in 0..args.count {
        let recipe = cfg.scene.with_seed(args.seed + i);
        let cloud = gen_scene(&recipe)?;
        let name = format!("scene_{i:03}.{SCENE_EXTENSION}");
        write_scene(&args.out.join(&name), &cloud, recipe.num_classes())?;
        rows.push(vec![name.clone(), recipe.seed.to_string(), cloud.len().to_string()]);
        names.push(name);
    }
    print!("{}", format_table(&["scene", "seed", "points"], &rows));
    let mut m = manifest("gen", args.seed, &cfg.to_toml());
    m.inputs = names;
    write_manifest(&args.out, &m)?;
    Ok(EXIT_OK)
}

fn train(args: &TrainArgs) -> Result<i32> {
    match args.precision {
        Precision::F32 => train_as::<f32>(args),
        Precision::F64 => train_as::<f64>(args),
    }
}

fn train_as<T: Scalar>(args: &TrainArgs) -> Result<i32> {
    let (clouds, k, names) = load_scenes::<T>(&args.scenes)?;
    let cfg = RunConfig::load(args.config.as_deref())?.resolve(k, args.mode)?;
    let model = cfg.model();
    let samples = clouds.iter().map(|c| Sample::prepare(c, model)).collect::<Result<Vec<_>>>()?;
    let (net, mut store) = Network::build::<T>(model, args.seed)?;
    let losses = fit(&net, &mut store, &samples, &cfg.train, args.seed, |_, _| {})?;

    std::fs::create_dir_all(&args.out)?;
    checkpoint::save(&store, &args.out.join(CHECKPOINT_FILE))?;
    let text = cfg.to_toml();
    std::fs::write(args.out.join(CONFIG_FILE), &text)?;
    let mut csv = String::from("step,lr,loss\n");
    for (s, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", s + 1, cfg.train.lr_at(s), l);
    }
    std::fs::write(args.out.join("loss.csv"), csv)?;

    let epoch = samples.len().div_ceil(cfg.train.batch_size.max(1));
    let final_loss = final_epoch_loss(&losses, epoch);
    let rows = vec![
        vec!["variant".into(), model.variant.name().into()],
        vec!["scenes".into(), samples.len().to_string()],
        vec!["parameters".into(), net.param_count().to_string()],
        vec!["steps".into(), losses.len().to_string()],
        vec!["first loss".into(), losses.first().map_or("-".into(), |l| format!("{l:.6}"))],
        vec!["final-epoch loss".into(), final_loss.map_or("-".into(), |l| format!("{l:.6e}"))],
    ];
    print!("{}", format_table(&["train", "value"], &rows));
    let mut m = manifest("train", args.seed, &text);
    m.precision = Some(args.precision.name());
    m.mode = Some(model.variant.name());
    m.inputs = names;
    write_manifest(&args.out, &m)?;
    Ok(EXIT_OK)
}

fn eval(args: &EvalArgs) -> Result<i32> {
    match args.precision {
        Precision::F32 => eval_as::<f32>(args),
        Precision::F64 => eval_as::<f64>(args),
    }
}

fn eval_as<T: Scalar>(args: &EvalArgs) -> Result<i32> {
    let (clouds, k, names) = load_scenes::<T>(&args.scenes)?;
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None => args.checkpoint.with_file_name(CONFIG_FILE),
    };
    let cfg = RunConfig::load(Some(&config_path))?.resolve(k, args.mode)?;
    let model = cfg.model();
    let mut store = ParamStore::<T>::new(args.seed);
    let net = Network::new(&mut store, model)?;
    checkpoint::load(&args.checkpoint, &mut store)?;

    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for cloud in &clouds {
        let s = Sample::prepare(cloud, model)?;
        pred.extend(predict(&net, &store, &s)?);
        gt.extend(s.point_labels.unwrap_or_else(|| vec![crate::geometry::IGNORE_LABEL; s.point_to_voxel.len()]));
    }
    let m = miou(&pred, &gt, k)?;

    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "miou,{}", m.miou);
    let _ = writeln!(csv, "overall_accuracy,{}", m.overall_accuracy);
    let _ = writeln!(csv, "mean_accuracy,{}", m.mean_accuracy);
    for (c, iou) in m.per_class_iou.iter().enumerate() {
        let _ = writeln!(csv, "iou_class_{c},{}", iou.map_or("nan".into(), |v| v.to_string()));
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("metrics.csv"), csv)?;

    let mut rows: Vec<Vec<String>> = m
        .per_class_iou
        .iter()
        .enumerate()
        .map(|(c, iou)| vec![format!("class {c} IoU"), iou.map_or("-".into(), |v| format!("{v:.4}"))])
        .collect();
    rows.push(vec!["mIoU".into(), format!("{:.4}", m.miou)]);
    rows.push(vec!["OA".into(), format!("{:.4}", m.overall_accuracy)]);
    rows.push(vec!["mAcc".into(), format!("{:.4}", m.mean_accuracy)]);
    print!("{}", format_table(&["eval", "value"], &rows));

    let text = cfg.to_toml();
    let mut man = manifest("eval", args.seed, &text);
    man.precision = Some(args.precision.name());
    man.mode = Some(model.variant.name());
    man.inputs = names;
    write_manifest(&args.out, &man)?;
    Ok(EXIT_OK)
}

fn bench(args: &BenchArgs) -> Result<i32> {
    let mut rows = Vec::new();
    for &e in &args.extents {
        let ws: Vec<u32> = args.windows.iter().copied().filter(|&w| w > 0 && e > 0 && e as u32 % w == 0).collect();
        rows.extend(pair_sweep(&[e], &ws)?);
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("pairs.csv"), pair_sweep_csv(&rows))?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}^3", r.extent),
                r.window.to_string(),
                r.cubic_pairs.to_string(),
                r.disassembled_pairs.to_string(),
                format!("{:.4}", r.ratio),
                format!("{:.4}", r.predicted),
                r.brute_force_match.to_string(),
            ]
        })
        .collect();
    print!("{}", format_table(&["grid", "W", "cubic", "disassembled", "ratio", "3/W", "brute force"], &table));

    if !args.no_timing {
        let threads = if args.parallel { 0 } else { 1 };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut timings = Vec::new();
        for r in &rows {
            timings.extend(pool.install(|| time_attention(r.extent, r.window, args.repeats, args.seed))?);
        }
        std::fs::write(args.out.join("timings.csv"), timing_csv(&timings))?;
        let t: Vec<Vec<String>> = timings
            .iter()
            .map(|r| {
                vec![format!("{}^3", r.extent), r.window.to_string(), r.layout.into(), r.pairs.to_string(), format!("{:.4}", r.seconds)]
            })
            .collect();
        println!();
        print!("{}", format_table(&["grid", "W", "layout", "pairs", "seconds"], &t));
    }
    let config = format!("extents = {:?}\nwindows = {:?}\n", args.extents, args.windows);
    write_manifest(&args.out, &manifest("bench", args.seed, &config))?;
    Ok(if rows.iter().all(|r| r.brute_force_match) { EXIT_OK } else { EXIT_FAILURE })
}

fn gradcheck(args: &GradcheckArgs) -> Result<i32> {
    if args.precision != Precision::F64 {
        return Err(Error::Config("gradcheck runs in 64-bit only".into()));
    }
    let opts = SuiteOptions { seed: args.seed, ..SuiteOptions::default() };
    let reports = run_suite(&opts)?;
    let mut csv = String::from("case,tolerance,checked,max_rel_err,worst_block,uncovered,passed\n");
    let mut rows = Vec::new();
    for r in &reports {
        let worst = r.worst().map_or(String::new(), |b| b.name.clone());
        let _ = writeln!(
            csv,
            "{},{},{},{:e},{},{},{}",
            r.case,
            r.tolerance,
            r.checked(),
            r.max_rel_err(),
            worst,
            r.uncovered.len(),
            r.passed()
        );
        rows.push(vec![
            r.case.clone(),
            format!("{:.0e}", r.tolerance),
            r.checked().to_string(),
            format!("{:.2e}", r.max_rel_err()),
            worst,
            if r.passed() { "PASS".into() } else { "FAIL".into() },
        ]);
    }
    print!("{}", format_table(&["case", "tol", "checked", "max rel err", "worst block", "result"], &rows));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.csv"), csv)?;
        write_manifest(out, &manifest("gradcheck", args.seed, &format!("{opts:?}")))?;
    }
    Ok(if reports.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_FAILURE })
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e @ (Error::Config(_) | Error::Parse { .. })) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
