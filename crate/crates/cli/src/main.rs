mod config;
mod staging;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use convlora_core::data::{
    base_from_bytes, generate_domain_suite, load_base, save_base, sha256_hex, AdapterCheckpoint, BaseInfo,
    Container, Dataset, Split, SuiteIndex, SuiteSpec,
};
use convlora_core::metrics::{mean_std, param_report, selector_comparison};
use convlora_core::pipeline::{
    adapt_target, evaluate, pretrain_source, run_matrix, run_parallel, train_esh, EvalReport, MatrixReport,
    Placement, TrainLog,
};
use convlora_core::unet::{InjectionSelector, Phase, UNet, UNetConfig};

use config::RunConfig;
use staging::Staged;

#[derive(Parser)]
#[command(name = "convlora", version, about = "Low-rank convolutional adapters with batch-norm re-estimation for multi-target segmentation adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source + target domain suite.
    GenData(GenData),
    /// Pretrain the U-Net on the labelled source domain.
    Pretrain(Pretrain),
    /// Train the early segmentation head on top of a frozen base.
    TrainEsh(TrainEsh),
    /// Adapt a base model to target domains, or run the placement grid.
    Adapt(Adapt),
    /// Score a base model, optionally carrying adapters, per image.
    Eval(Eval),
    /// Fold an adapter into its base and write a plain checkpoint.
    Merge(Merge),
    /// Print parameter accounting.
    Params(Params),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelName {
    Desk,
    PaperScale,
    Tiny,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct TrainEsh {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct Adapt {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Domain id, comma-separated ids, or `all` for every target domain.
    #[arg(long, default_value = "all")]
    target_domain: String,
    #[arg(long)]
    rank: Option<usize>,
    /// `1`, `1-2`, `1-3`, ..., or `all` (every encoder block and the bottleneck).
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    adabn: Option<Toggle>,
    /// Number of seeds per domain, starting at the configured seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// One exact statistics sweep over the chosen target samples instead of the running average.
    #[arg(long)]
    full_pass: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    target_samples: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run every placement column for every domain and seed and write one table.
    #[arg(long)]
    matrix: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    #[arg(long, num_args = 1..)]
    adapter: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated domain ids; defaults to every domain (or each adapter's own domain).
    #[arg(long)]
    domain: Option<String>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Merge {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Params {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "model")]
    base: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelName>,
    /// `rank,blocks`, e.g. `2,all` or `2,1`.
    #[arg(long)]
    adapter_spec: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::TrainEsh(a) => train_esh_cmd(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Merge(a) => merge(a),
        Command::Params(a) => params(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn threads() -> usize {
    std::env::var("CONVLORA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn log_text(log: &TrainLog) -> String {
    let mut s = String::new();
    for r in &log.records {
        let _ = writeln!(s, "{r}");
    }
    s
}

fn report_epochs(phase: &str, log: &TrainLog) {
    for (e, m) in log.epoch_means().iter().enumerate() {
        eprintln!("{phase} epoch={e} mean_loss={m:.6}");
    }
}

fn load_domain(root: &Path, id: &str) -> Result<Dataset> {
    Dataset::load(root, id).with_context(|| format!("loading domain {id} from {}", root.display()))
}

fn load_source(root: &Path) -> Result<Dataset> {
    let index = SuiteIndex::load(root).with_context(|| format!("reading domain index in {}", root.display()))?;
    load_domain(root, index.source())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.data.size, a.size);
    set(&mut cfg.data.n_train, a.n_train);
    set(&mut cfg.data.n_test, a.n_test);
    cfg.validate()?;
    let mut spec = SuiteSpec::new(cfg.seed, cfg.data.n_train, cfg.data.n_test, cfg.data.size);
    spec.domains = cfg.domain_specs();
    let suite = generate_domain_suite(&spec)?;
    let out = Staged::new(&a.out)?;
    for d in &suite {
        d.save(out.path())?;
    }
    SuiteIndex {
        domains: suite.iter().map(|d| d.domain_id().to_string()).collect(),
    }
    .save(out.path())?;
    out.write("config.toml", cfg.to_toml())?;
    let dest = out.commit()?;
    println!(
        "gen-data domains={} samples_per_domain={} size={} out={}",
        suite.len(),
        spec.total(),
        cfg.data.size,
        dest.display()
    );
    Ok(())
}

fn apply_train_flags(section: &mut config::TrainSection, seed: &mut u64, f: &TrainFlags) {
    set(seed, f.seed);
    set(&mut section.epochs, f.epochs);
    set(&mut section.batch_size, f.batch_size);
    set(&mut section.lr, f.lr);
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.model.depth, a.model.depth);
    set(&mut cfg.model.base_channels, a.model.base_channels);
    apply_train_flags(&mut cfg.pretrain, &mut cfg.seed, &a.train);
    let source = load_source(&a.data)?;
    cfg.data.size = source.size;
    cfg.validate()?;
    let unet = cfg.model.unet();
    unet.check_input(source.size, source.size)?;

    let mut model = UNet::<f32>::build(unet, cfg.seed)?;
    eprintln!("pretrain domain={} params={}", source.domain_id(), model.param_count());
    let log = pretrain_source(&mut model, &source, &cfg.pretrain.spec(cfg.seed))?;
    report_epochs("pretrain", &log);

    let out = Staged::new(&a.out)?;
    let info = BaseInfo {
        config: unet,
        seed: cfg.seed,
        stage: "source".into(),
    };
    let checksum = save_base(&model, &info, &out.join("base.clra"))?;
    let mut snap = Container::new();
    snap.set_meta("base_sha256", &checksum)?;
    for (p, m, v) in model.source_stats() {
        snap.push_f32(format!("{p}.source_mean"), m)?;
        snap.push_f32(format!("{p}.source_var"), v)?;
    }
    snap.save(&out.join("source_bn.clra"))?;
    out.write("train.log", log_text(&log))?;
    out.write("config.toml", cfg.to_toml())?;
    out.write("summary.txt", format!("base_sha256 {checksum}\nparams {}\n", model.param_count()))?;
    let dest = out.commit()?;
    println!("pretrain base={} sha256={checksum}", dest.join("base.clra").display());
    Ok(())
}

fn train_esh_cmd(a: TrainEsh) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_train_flags(&mut cfg.esh, &mut cfg.seed, &a.train);
    let (mut model, info, _) = load_base(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let source = load_source(&a.data)?;
    cfg.model = config::ModelSection::from(info.config);
    cfg.data.size = source.size;
    cfg.validate()?;

    let log = train_esh(&mut model, &source, &cfg.esh.spec(cfg.seed))?;
    report_epochs("esh", &log);

    let out = Staged::new(&a.out)?;
    let info = BaseInfo {
        stage: "source+esh".into(),
        ..info
    };
    let checksum = save_base(&model, &info, &out.join("base.clra"))?;
    out.write("esh.log", log_text(&log))?;
    out.write("config.toml", cfg.to_toml())?;
    out.write("summary.txt", format!("base_sha256 {checksum}\n"))?;
    let dest = out.commit()?;
    println!("train-esh base={} sha256={checksum}", dest.join("base.clra").display());
    Ok(())
}

fn target_ids(index: &SuiteIndex, sel: &str) -> Result<Vec<String>> {
    if sel == "all" {
        return Ok(index.targets().to_vec());
    }
    let ids: Vec<String> = sel.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if ids.is_empty() {
        bail!("no domain given");
    }
    for id in &ids {
        if !index.domains.contains(id) {
            bail!("unknown domain '{id}'; known: {}", index.domains.join(", "));
        }
    }
    Ok(ids)
}

fn matrix_tsv(r: &MatrixReport) -> String {
    let mut s = String::from("domain\tsource");
    for c in &r.columns {
        let _ = write!(s, "\t{c}\t{c}_std");
    }
    s.push('\n');
    for (d, name) in r.domains.iter().enumerate() {
        let _ = write!(s, "{name}\t{:.6}", r.source[d]);
        for c in 0..r.columns.len() {
            let (m, sd) = mean_std(&r.cells[d][c]);
            let _ = write!(s, "\t{m:.6}\t{sd:.6}");
        }
        s.push('\n');
    }
    let _ = write!(s, "mean\t{:.6}", r.source.iter().sum::<f64>() / r.source.len() as f64);
    for c in 0..r.columns.len() {
        let _ = write!(s, "\t{:.6}\t", r.column_mean(c));
    }
    s.push('\n');
    s
}

fn adapt(a: Adapt) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.adapt.rank, a.rank);
    set(&mut cfg.adapt.blocks, a.blocks);
    set(&mut cfg.adapt.adabn, a.adabn.map(Toggle::on));
    set(&mut cfg.adapt.seeds, a.seeds);
    set(&mut cfg.adapt.epochs, a.epochs);
    set(&mut cfg.adapt.lr, a.lr);
    set(&mut cfg.adapt.target_samples, a.target_samples);
    set(&mut cfg.adapt.momentum, a.momentum);
    cfg.adapt.full_pass |= a.full_pass;

    let before = std::fs::read(&a.base).with_context(|| format!("reading {}", a.base.display()))?;
    let (base, info, checksum) = base_from_bytes(&before)?;
    cfg.model = config::ModelSection::from(info.config);
    let index = SuiteIndex::load(&a.data)?;
    let ids = target_ids(&index, &a.target_domain)?;
    let targets = ids.iter().map(|id| load_domain(&a.data, id)).collect::<Result<Vec<_>>>()?;
    cfg.data.size = targets[0].size;
    cfg.validate()?;
    if !a.matrix {
        InjectionSelector::parse(&cfg.adapt.blocks, info.config.depth)?;
    }

    let seeds: Vec<u64> = (0..cfg.adapt.seeds as u64).map(|k| cfg.seed + k).collect();
    let spec = cfg.adapt.spec(cfg.seed);
    let threads = threads();
    let out = Staged::new(&a.out)?;
    out.write("config.toml", cfg.to_toml())?;

    if a.matrix {
        eprintln!(
            "adapt matrix domains={} columns={} seeds={} threads={threads}",
            targets.len(),
            Placement::grid().len(),
            seeds.len()
        );
        let report = run_matrix(&base, &checksum, &targets, &Placement::grid(), &seeds, &spec, cfg.eval.tolerance, threads)?;
        let text = format!("{report}\n");
        out.write("matrix.txt", &text)?;
        out.write("matrix.tsv", matrix_tsv(&report))?;
        print!("{text}");
    } else {
        let jobs: Vec<(usize, u64)> = (0..targets.len()).flat_map(|d| seeds.iter().map(move |&s| (d, s))).collect();
        let results = run_parallel(jobs.clone(), threads, |(d, seed)| {
            adapt_target(&base, &checksum, &targets[d], &convlora_core::pipeline::AdaptSpec { seed, ..spec.clone() })
        });
        let mut summary = String::new();
        for ((d, seed), r) in jobs.into_iter().zip(results) {
            let r = r.with_context(|| format!("adapting to {} with seed {seed}", ids[d]))?;
            let rel = PathBuf::from(&ids[d]).join(format!("seed{seed}.clra"));
            std::fs::create_dir_all(out.join(&ids[d]))?;
            let bytes = r.checkpoint.save(&out.join(&rel))?;
            out.write(PathBuf::from(&ids[d]).join(format!("seed{seed}.log")), log_text(&r.log))?;
            let line = format!(
                "adapter domain={} seed={seed} blocks={} rank={} adabn={} trainable_params={} file={} sha256={}",
                ids[d],
                r.checkpoint.selector,
                r.checkpoint.rank,
                r.checkpoint.adabn,
                r.checkpoint.trainable_param_count(),
                rel.display(),
                sha256_hex(&bytes)
            );
            println!("{line}");
            summary.push_str(&line);
            summary.push('\n');
        }
        out.write("adapt.txt", summary)?;
    }

    let after = std::fs::read(&a.base)?;
    if sha256_hex(&after) != checksum {
        bail!("base checkpoint {} changed during adaptation", a.base.display());
    }
    out.commit()?;
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.eval.tolerance, a.tolerance);
    let (base, info, checksum) = load_base(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    cfg.model = config::ModelSection::from(info.config);
    cfg.validate()?;
    let index = SuiteIndex::load(&a.data)?;
    let tol = cfg.eval.tolerance;

    let mut runs: Vec<(String, EvalReport)> = Vec::new();
    if a.adapter.is_empty() {
        let ids = match &a.domain {
            Some(d) => target_ids(&index, d)?,
            None => index.domains.clone(),
        };
        for id in ids {
            let data = load_domain(&a.data, &id)?;
            let mut m = base.clone();
            runs.push(("base".into(), evaluate(&mut m, &data, a.split, tol)?));
        }
    } else {
        let mut cache: BTreeMap<String, Dataset> = BTreeMap::new();
        for p in &a.adapter {
            let ckpt = AdapterCheckpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let mut m = ckpt.apply(&base, &checksum)?;
            let ids = match &a.domain {
                Some(d) => target_ids(&index, d)?,
                None => vec![ckpt.domain_id.clone()],
            };
            for id in ids {
                if !cache.contains_key(&id) {
                    cache.insert(id.clone(), load_domain(&a.data, &id)?);
                }
                runs.push((p.display().to_string(), evaluate(&mut m, &cache[&id], a.split, tol)?));
            }
        }
    }

    let mut text = String::new();
    let mut by_domain: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (label, r) in &runs {
        let domain = r.scores.first().map(|s| s.domain_id.clone()).unwrap_or_default();
        let _ = writeln!(text, "run model={label} domain={domain} split={}", a.split);
        let _ = writeln!(text, "{r}");
        by_domain
            .entry(domain)
            .or_default()
            .push((r.sds_mean_std().0, r.dice_mean_std().0));
    }
    for (domain, v) in &by_domain {
        let (sm, ss) = mean_std(&v.iter().map(|p| p.0).collect::<Vec<_>>());
        let (dm, ds) = mean_std(&v.iter().map(|p| p.1).collect::<Vec<_>>());
        let _ = writeln!(
            text,
            "aggregate domain={domain} runs={} sds={sm:.4}±{ss:.4} dice={dm:.4}±{ds:.4}",
            v.len()
        );
    }
    print!("{text}");
    if let Some(dest) = &a.out {
        let out = Staged::new(dest)?;
        out.write("report.txt", &text)?;
        out.write("config.toml", cfg.to_toml())?;
        out.commit()?;
    }
    Ok(())
}

fn merge(a: Merge) -> Result<()> {
    let (base, info, checksum) = load_base(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let ckpt = AdapterCheckpoint::load(&a.adapter).with_context(|| format!("loading {}", a.adapter.display()))?;
    let mut model = ckpt.apply(&base, &checksum)?;
    model.merge_adapters();
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let info = BaseInfo {
        stage: format!("merged:{}", ckpt.domain_id),
        ..info
    };
    let sum = save_base(&model, &info, &a.out)?;
    println!("merge out={} domain={} sha256={sum}", a.out.display(), ckpt.domain_id);
    Ok(())
}

fn params(a: Params) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut model: UNet<f32> = match (&a.base, a.model) {
        (Some(p), _) => load_base(p).with_context(|| format!("loading {}", p.display()))?.0,
        (None, Some(name)) => UNet::build(
            match name {
                ModelName::Desk => UNetConfig::desk(),
                ModelName::PaperScale => UNetConfig::paper_scale(),
                ModelName::Tiny => UNetConfig::tiny(),
            },
            cfg.seed,
        )?,
        (None, None) => UNet::build(cfg.model.unet(), cfg.seed)?,
    };
    model.freeze_all();
    let mut extra = String::new();
    if let Some(s) = &a.adapter_spec {
        let (rank, blocks) = s
            .split_once(',')
            .with_context(|| format!("adapter spec '{s}' must be rank,blocks"))?;
        let rank: usize = rank.trim().parse().with_context(|| format!("bad rank '{rank}'"))?;
        let sel = InjectionSelector::parse(blocks.trim(), model.config().depth)?;
        let (full, adapter) = selector_comparison(&model, &sel, rank);
        model.inject_convlora(&sel, rank, cfg.seed)?;
        model.apply_freeze_policy(Phase::Adapt);
        extra = format!(
            "selector blocks={} rank={rank} full_finetune={full} adapter={adapter} adapter_percent={:.4}\n",
            sel.describe(model.config().depth),
            100.0 * adapter as f64 / full as f64
        );
    }
    println!("{}", param_report(&model));
    print!("{extra}");
    Ok(())
}
