//! `hwnas` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime abort.

mod render;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use hwnas::cost_model::{
    arithmetic_intensity, build_mac_table, load_latency_table, network_breakdown, network_latency_ms, synth_latency_table, CostTable,
    RooflineModel,
};
use hwnas::gumbel::derive_rng;
use hwnas::pareto::{pareto_frontier, sample_paths, score_paths, select, DEFAULT_SAMPLES};
use hwnas::search_space::{builtin_path, builtin_path_space, builtin_space, export_search_space, load_search_space, ArchPath, MacroArch};
use hwnas::supernet::{search, SearchConfig, SearchResult, Supernet};
use hwnas::toy::{self, Split, ToyDataset};

/// Stream tag for the RNG that draws architectures in `sample`/`pareto`.
const SAMPLE_STREAM: u64 = 0x5a3d;

#[derive(Parser)]
#[command(name = "hwnas", version, about = "Hardware-aware supernetwork architecture search")]
struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage and total cost of one path.
    Cost(CostArgs),
    /// Build, synthesize or check a per-candidate cost table.
    Table {
        #[command(subcommand)]
        action: TableAction,
    },
    /// Run a differentiable search on the toy segmentation task.
    Search(SearchArgs),
    /// Draw architectures from a search result's distribution.
    Sample(SampleArgs),
    /// Score sampled architectures and pick one from the cost/quality frontier.
    Pareto(ParetoArgs),
    /// Block diagram of a path.
    Visualize(VisualizeArgs),
    /// Generate the synthetic segmentation dataset.
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct SpaceArg {
    /// Built-in space (small, large, xlarge, toy) or a space JSON file.
    #[arg(long)]
    space: Option<String>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    space: SpaceArg,
    /// Built-in path name, a path JSON file, or `m1|m2|...`.
    #[arg(long)]
    path: String,
    /// Input resolution as HxW.
    #[arg(long, default_value = "1024x2048", value_parser = parse_res)]
    res: (usize, usize),
    /// Roofline constants (JSON) for the synthetic latency line.
    #[arg(long)]
    roofline: Option<PathBuf>,
    /// Machine-readable rows instead of the report.
    #[arg(long)]
    csv: bool,
}

#[derive(Subcommand)]
enum TableAction {
    /// MAC table at a resolution.
    Build(TableArgs),
    /// Roofline latency table at a resolution.
    Synth(TableArgs),
    /// Validate a latency CSV against a space and echo it.
    Load {
        #[command(flatten)]
        space: SpaceArg,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    space: SpaceArg,
    #[arg(long, default_value = "1024x2048", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long)]
    roofline: Option<PathBuf>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    /// MAC table at the cost-table resolution.
    Macs,
    /// Measured latency CSV given by `--latency-table`.
    Latency,
    /// Roofline latency model.
    Synthetic,
}

#[derive(Args)]
struct SearchArgs {
    /// JSON search configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Space to search; must use the standard stem. Defaults to `toy`.
    #[command(flatten)]
    space: SpaceArg,
    /// Cost used by the resource loss.
    #[arg(long, value_enum, default_value = "macs")]
    objective: Objective,
    /// Measured latency CSV for `--objective latency`.
    #[arg(long)]
    latency_table: Option<PathBuf>,
    /// Roofline constants (JSON) for `--objective synthetic`.
    #[arg(long)]
    roofline: Option<PathBuf>,
    /// Resolution of the cost table; the training resolution by default.
    #[arg(long, value_parser = parse_res)]
    res: Option<(usize, usize)>,
    /// Weight of the resource loss.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    /// Training container from `synth-data`; regenerated from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = toy::DEFAULT_TRAIN_SIZE)]
    train_size: usize,
    /// Receives search_result.json, weights.bin, trajectory.csv and selected_path.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// search_result.json written by `search`.
    #[arg(long)]
    result: PathBuf,
    /// Number of architectures to draw.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    n: usize,
}

#[derive(Args)]
struct ParetoArgs {
    /// search_result.json written by `search`.
    #[arg(long)]
    result: PathBuf,
    /// weights.bin written by the same search.
    #[arg(long)]
    weights: PathBuf,
    /// Number of architectures to draw and score.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    n: usize,
    /// Cost budget for the selection, in the result's cost unit.
    #[arg(long)]
    target: Option<f64>,
    /// Validation container; regenerated from the search seed when absent.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = toy::DEFAULT_VAL_SIZE)]
    val_size: usize,
    /// Receives points.csv, frontier.csv, frontier.json, frontier.svg and selected_path.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Svg,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    space: SpaceArg,
    /// Built-in path name, a path JSON file, or `m1|m2|...`.
    #[arg(long)]
    path: String,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Training images.
    #[arg(long, default_value_t = toy::DEFAULT_TRAIN_SIZE)]
    size: usize,
    #[arg(long, default_value_t = toy::DEFAULT_VAL_SIZE)]
    val_size: usize,
    /// Background noise level in [0, 1].
    #[arg(long, default_value_t = toy::DEFAULT_DIFFICULTY)]
    difficulty: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Argument combinations clap cannot express.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad resolution `{s}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<hwnas::Error>() {
        Some(hwnas::Error::NonFiniteLoss { .. }) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Cost(a) => cmd_cost(a),
        Command::Table { action } => cmd_table(action),
        Command::Search(a) => cmd_search(a, seed),
        Command::Sample(a) => cmd_sample(a, seed.unwrap_or(0)),
        Command::Pareto(a) => cmd_pareto(a, seed.unwrap_or(0)),
        Command::Visualize(a) => cmd_visualize(a),
        Command::SynthData(a) => cmd_synth_data(a, seed.unwrap_or(0)),
    }
}

// ---------------------------------------------------------------------------
// Input resolution

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn resolve_space(name: &str) -> anyhow::Result<MacroArch> {
    if name == "toy" {
        return Ok(toy::toy_space());
    }
    let file = Path::new(name);
    if file.is_file() {
        return Ok(load_search_space(&read_text(file)?)?);
    }
    Ok(builtin_space(name)?)
}

/// Space from `--space`, falling back to the space of a built-in path.
fn space_for(space: &SpaceArg, path: Option<&str>) -> anyhow::Result<MacroArch> {
    match (&space.space, path) {
        (Some(s), _) => resolve_space(s),
        (None, Some(p)) => match builtin_path_space(p) {
            Ok(s) => resolve_space(s),
            Err(_) => Err(UsageError(format!("--space is required for path `{p}`")).into()),
        },
        (None, None) => Err(UsageError("--space is required".into()).into()),
    }
}

fn resolve_path(spec: &str, arch: &MacroArch) -> anyhow::Result<ArchPath> {
    let file = Path::new(spec);
    let path = if file.is_file() {
        ArchPath::from_json(&read_text(file)?)?
    } else if spec.contains('|') {
        ArchPath::from_compact(spec)?
    } else {
        builtin_path(spec)?
    };
    arch.validate_path(&path)?;
    Ok(path)
}

fn roofline(file: Option<&Path>) -> anyhow::Result<RooflineModel> {
    let model = match file {
        Some(f) => serde_json::from_str(&read_text(f)?).with_context(|| format!("parsing {}", f.display()))?,
        None => RooflineModel::default(),
    };
    model.validate()?;
    Ok(model)
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| anyhow!("writing {}: {}", path.display(), e.error))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_cost(a: CostArgs) -> anyhow::Result<()> {
    let arch = space_for(&a.space, Some(&a.path))?;
    let path = resolve_path(&a.path, &arch)?;
    let model = roofline(a.roofline.as_deref())?;
    let stages = network_breakdown(&path, &arch, a.res)?;
    let macs: u64 = stages.iter().map(|s| s.macs).sum();
    let params: u64 = stages.iter().map(|s| s.params).sum();
    let traffic: u64 = stages.iter().map(|s| s.traffic).sum();
    let intensity = arithmetic_intensity(&path, &arch, a.res, model.bytes_per_element)?;
    let latency = network_latency_ms(&path, &arch, &model, a.res)?;
    let mut out = String::new();
    if a.csv {
        out.push_str("stage,macs,params,traffic\n");
        for s in &stages {
            out.push_str(&format!("{},{},{},{}\n", s.stage, s.macs, s.params, s.traffic));
        }
        out.push_str(&format!("total,{macs},{params},{traffic}\n"));
    } else {
        let (h, w) = a.res;
        out.push_str(&format!("space {}  path {}  input {h}x{w}\n", arch.name, a.path));
        out.push_str(&format!("{:<22} {:>16} {:>12} {:>14}\n", "stage", "macs", "params", "traffic"));
        for s in &stages {
            out.push_str(&format!("{:<22} {:>16} {:>12} {:>14}\n", s.stage, s.macs, s.params, s.traffic));
        }
        out.push_str(&format!("{:<22} {:>16} {:>12} {:>14}\n", "total", macs, params, traffic));
        out.push_str(&format!("GMACs                  {:.3}\n", macs as f64 / 1e9));
        out.push_str(&format!("params (M)             {:.3}\n", params as f64 / 1e6));
        out.push_str(&format!("arithmetic intensity   {intensity:.3} MAC/byte\n"));
        out.push_str(&format!("synthetic latency      {latency:.3} ms\n"));
    }
    emit(None, out.as_bytes())
}

fn cmd_table(action: TableAction) -> anyhow::Result<()> {
    match action {
        TableAction::Build(a) => {
            let arch = space_for(&a.space, None)?;
            let table = build_mac_table(&arch, a.res)?;
            emit(a.out.as_deref(), &table_csv(&table)?)
        }
        TableAction::Synth(a) => {
            let arch = space_for(&a.space, None)?;
            let table = synth_latency_table(&arch, &roofline(a.roofline.as_deref())?, a.res)?;
            emit(a.out.as_deref(), &table_csv(&table)?)
        }
        TableAction::Load { space, input } => {
            let arch = space_for(&space, None)?;
            let file = fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let table = load_latency_table(file, &arch)?;
            info!("{}: {} superblocks, valid", input.display(), table.rows());
            emit(None, &table_csv(&table)?)
        }
    }
}

fn table_csv(table: &CostTable) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    Ok(buf)
}

fn cmd_search(a: SearchArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(f) => serde_json::from_str::<SearchConfig>(&read_text(f)?).with_context(|| format!("parsing {}", f.display()))?,
        None => {
            let (Some(epochs), Some(steps)) = (a.epochs, a.steps) else {
                return Err(UsageError("search needs --config or both --epochs and --steps".into()).into());
            };
            SearchConfig::new(a.alpha.unwrap_or(0.0), epochs, steps, 0)
        }
    };
    if let Some(v) = a.alpha {
        config.alpha = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
        config.warmup_epochs = config.warmup_epochs.min(v.saturating_sub(1));
    }
    if let Some(v) = a.steps {
        config.steps_per_epoch = v;
    }
    if let Some(v) = seed {
        config.seed = v;
    }
    config.validate()?;

    let arch = resolve_space(a.space.space.as_deref().unwrap_or("toy"))?;
    let train = match &a.data {
        Some(f) => ToyDataset::read_container(fs::File::open(f).with_context(|| format!("opening {}", f.display()))?)?,
        None => toy::generate_split(config.seed, Split::Train, a.train_size, toy::DEFAULT_DIFFICULTY)?,
    };
    let res = a.res.unwrap_or((train.height, train.width));
    let table = match a.objective {
        Objective::Macs => build_mac_table(&arch, res)?,
        Objective::Synthetic => synth_latency_table(&arch, &roofline(a.roofline.as_deref())?, res)?,
        Objective::Latency => {
            let Some(f) = &a.latency_table else {
                return Err(UsageError("--objective latency needs --latency-table".into()).into());
            };
            load_latency_table(fs::File::open(f).with_context(|| format!("opening {}", f.display()))?, &arch)?
        }
    };
    info!(
        "searching {} superblocks for {} steps (alpha {}, seed {})",
        arch.num_superblocks(),
        config.total_steps(),
        config.alpha,
        config.seed
    );
    let (result, net) = search::<f32>(&config, &arch, &table, &train)?;
    for e in &result.prune_events {
        info!(
            "pruned superblock {} candidate {} ({}) at p = {:.5}, epoch {}",
            e.superblock, e.candidate, e.mnemonic, e.probability, e.epoch
        );
    }
    info!("argmax path {}", result.argmax_path.to_compact());

    let dir = &a.out_dir;
    write_atomic(&dir.join("search_result.json"), result.to_json()?.as_bytes())?;
    let mut weights = Vec::new();
    net.write_weights(&mut weights)?;
    write_atomic(&dir.join("weights.bin"), &weights)?;
    let mut traj = String::from("epoch,total,task,resource,temperature,candidate_evaluations\n");
    for r in &result.trajectory {
        traj.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.loss.total, r.loss.task, r.loss.resource, r.temperature, r.candidate_evaluations
        ));
    }
    write_atomic(&dir.join("trajectory.csv"), traj.as_bytes())?;
    write_atomic(&dir.join("selected_path.json"), result.argmax_path.to_json().as_bytes())?;
    Ok(())
}

fn load_result(file: &Path) -> anyhow::Result<(SearchResult, MacroArch, CostTable)> {
    let result = SearchResult::from_json(&read_text(file)?)?;
    let arch = load_search_space(&result.space.to_string())?;
    let table = result.cost_table()?;
    table.check_arch(&arch)?;
    Ok((result, arch, table))
}

fn cmd_sample(a: SampleArgs, seed: u64) -> anyhow::Result<()> {
    let (result, _, table) = load_result(&a.result)?;
    let paths = sample_paths(&result.theta, a.n, &mut derive_rng(seed, SAMPLE_STREAM, 0))?;
    let mut out = String::from("index,cost,path\n");
    for (k, p) in paths.iter().enumerate() {
        out.push_str(&format!("{k},{},{}\n", table.path_cost(p)?, p.to_compact()));
    }
    emit(None, out.as_bytes())
}

fn cmd_pareto(a: ParetoArgs, seed: u64) -> anyhow::Result<()> {
    let (result, arch, table) = load_result(&a.result)?;
    let mut net = Supernet::<f32>::new(&arch, result.config.seed)?;
    net.read_weights(fs::File::open(&a.weights).with_context(|| format!("opening {}", a.weights.display()))?)?;
    let val = match &a.val {
        Some(f) => ToyDataset::read_container(fs::File::open(f).with_context(|| format!("opening {}", f.display()))?)?,
        None => toy::generate_split(result.config.seed, Split::Val, a.val_size, toy::DEFAULT_DIFFICULTY)?,
    };
    let paths = sample_paths(&result.theta, a.n, &mut derive_rng(seed, SAMPLE_STREAM, 0))?;
    info!("scoring {} sampled architectures on {} validation images", paths.len(), val.len());
    let points = score_paths(&net, &paths, &table, &val)?;
    let frontier = pareto_frontier(&points);
    let selection = select(&frontier, a.target.unwrap_or(f64::INFINITY))?;
    if !selection.within_budget {
        info!("no frontier point meets the target; taking the cheapest");
    }
    arch.validate_path(&selection.point.path)?;

    let dir = &a.out_dir;
    let csv = |pts: &[hwnas::pareto::ParetoPoint]| -> anyhow::Result<Vec<u8>> {
        let mut buf = Vec::new();
        hwnas::pareto::write_csv(pts, &mut buf)?;
        Ok(buf)
    };
    write_atomic(&dir.join("points.csv"), &csv(&points)?)?;
    write_atomic(&dir.join("frontier.csv"), &csv(&frontier)?)?;
    write_atomic(&dir.join("frontier.json"), serde_json::to_string_pretty(&frontier)?.as_bytes())?;
    let svg = hwnas::pareto::render_svg(&points, &frontier, table.metric.label());
    write_atomic(&dir.join("frontier.svg"), svg.as_bytes())?;
    write_atomic(&dir.join("selected_path.json"), selection.point.path.to_json().as_bytes())?;
    let summary = format!(
        "selected {}\ncost {}\nscore {:.6}\nwithin_budget {}\n",
        selection.point.path.to_compact(),
        selection.point.cost,
        selection.point.score,
        selection.within_budget
    );
    emit(None, summary.as_bytes())
}

fn cmd_visualize(a: VisualizeArgs) -> anyhow::Result<()> {
    let arch = space_for(&a.space, Some(&a.path))?;
    let path = resolve_path(&a.path, &arch)?;
    let name = Path::new(&a.path)
        .file_stem()
        .map_or_else(|| a.path.clone(), |s| s.to_string_lossy().into_owned());
    let body = match a.format {
        Format::Text => render::render_text(&name, &arch, &path),
        Format::Svg => render::render_svg(&name, &arch, &path),
    };
    emit(a.out.as_deref(), body.as_bytes())
}

fn cmd_synth_data(a: SynthDataArgs, seed: u64) -> anyhow::Result<()> {
    for (split, size, stem) in [(Split::Train, a.size, "train"), (Split::Val, a.val_size, "val")] {
        let data = toy::generate_split(seed, split, size, a.difficulty)?;
        let container = format!("{stem}.bin");
        let mut bytes = Vec::new();
        data.write_container(&mut bytes)?;
        write_atomic(&a.out_dir.join(&container), &bytes)?;
        let manifest = serde_json::to_string_pretty(&data.manifest(&container))?;
        write_atomic(&a.out_dir.join(format!("{stem}.json")), manifest.as_bytes())?;
        info!("wrote {} {stem} images to {}", data.len(), a.out_dir.display());
    }
    // The space the data is meant for, so a search can be rerun from files alone.
    write_atomic(&a.out_dir.join("space.json"), export_search_space(&toy::toy_space()).as_bytes())?;
    Ok(())
}
