use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evseg::autodiff::OpKind;
use evseg::config::RunConfig;
use evseg::exec::Execution;
use evseg::metrics::BinaryMask;
use evseg::model::SegModel;
use evseg::pipeline::{
    evaluate, interactive_predict, split_indices, zero_click_view, EpochRecord, EvalCell, Stage1Outcome, Trainer,
};
use evseg::prompts::SamplerKind;
use evseg::selftest;
use evseg::synthdata::{
    encode_pgm, quantize, read_dataset, write_dataset, write_float_map, write_pgm, Dataset, FloatMap, FG_FRACTION,
};

#[derive(Parser)]
#[command(name = "evseg", version, about = "Evidential interactive segmentation on synthetic ultrasound")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train stage I, then stage II.
    Train(TrainArgs),
    /// Simulated interactive evaluation over click budgets and iterations.
    Eval(EvalArgs),
    /// Run gradient checks and oracle comparisons.
    Selftest(SelftestArgs),
    /// Print the effective configuration.
    Config(CommonArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda1=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides gen.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `1` for stage I only, `2` for stage II from `--init`, `all` for both.
    #[arg(long, default_value = "all", value_parser = ["1", "2", "all"])]
    stage: String,
    /// Stage-I weights to start stage II from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "topk", value_parser = ["topk", "random", "grid"])]
    sampler: String,
    /// Clicks per iteration, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    budgets: Vec<usize>,
    /// Interaction iterations, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    iters: Vec<usize>,
    /// Number of evaluation seeds (0..n).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Evaluate every sample instead of the validation split of train.seed.
    #[arg(long)]
    all: bool,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-sample image | gt | prediction | uncertainty panels.
    #[arg(long)]
    emit_panels: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Sign-flip one backward rule to prove the suite notices.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Bad invocation rather than a failure while running; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: String) -> anyhow::Error {
    Usage(msg).into()
}

fn exit_status(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some() || matches!(c.downcast_ref::<evseg::Error>(), Some(evseg::Error::Config(_)))
    });
    if is_usage {
        1
    } else {
        2
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage(format!("{} is not empty; pass --force to write into it", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(s) = a.seed {
        cfg.gen.seed = s;
    }
    cfg.gen.validate()?;
    ensure_empty_dir(&a.out_dir, a.force)?;
    let data = evseg::synthdata::generate(&cfg.gen, a.common.exec())?;
    write_dataset(&a.out_dir, &data)?;
    let fr: Vec<f64> = data.samples.iter().map(|s| s.foreground_fraction()).collect();
    let (mean, std) = evseg::metrics::mean_std(&fr);
    let min = fr.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fr.iter().copied().fold(0.0, f64::max);
    println!("wrote {} samples to {}", data.len(), a.out_dir.display());
    println!(
        "foreground fraction mean {mean:.4} std {std:.4} min {min:.4} max {max:.4} (allowed {:.2}..{:.2})",
        FG_FRACTION.0, FG_FRACTION.1
    );
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    let data = read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} has no samples", path.display());
    }
    Ok(data)
}

fn uncertainty_pgm(u: &[f64]) -> Vec<u8> {
    u.iter().map(|&v| quantize(v)).collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let data = load_data(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let dump = cfg.dump();
    fs::write(a.out.join("config.cfg"), &dump)?;

    let exec = a.common.exec();
    let quiet = a.quiet;
    let mut hook = |e: &EpochRecord| {
        if !quiet {
            eprintln!("{}", e.to_line());
        }
    };
    let mut trainer = Trainer::new(&data, &cfg.train, exec);
    trainer.config_hash = cfg.hash();
    trainer.hook = Some(&mut hook);
    let (model, record, split, views) = match a.stage.as_str() {
        "1" => {
            let s1 = trainer.stage1()?;
            (s1.model, s1.record, s1.split, s1.views)
        }
        "2" => {
            let init = a
                .init
                .as_ref()
                .ok_or_else(|| usage("--stage 2 needs --init <stage-I weights>".into()))?;
            let blob = fs::read(init).with_context(|| format!("reading {}", init.display()))?;
            let mut model = SegModel::init(cfg.train.model_config())?;
            model.import_weights(&blob)?;
            let s1 = Stage1Outcome::from_model(model, &data, &cfg.train, exec)?;
            let out = trainer.stage2(s1)?;
            (out.model, out.record, out.split, out.views)
        }
        _ => {
            let out = trainer.run()?;
            (out.model, out.record, out.split, out.views)
        }
    };
    fs::write(a.out.join("weights.bin"), model.export_weights())?;
    fs::write(a.out.join("run.log"), record.to_log())?;
    fs::write(a.out.join("run.meta"), record.meta())?;
    let udir = a.out.join("uncertainty");
    fs::create_dir_all(&udir)?;
    for (&i, v) in split.train.iter().zip(&views) {
        let s = &data.samples[i];
        let map = FloatMap {
            height: s.height,
            width: s.width,
            data: v.uncertainty.iter().map(|&u| u as f32).collect(),
        };
        write_float_map(&udir.join(format!("{i:04}.umap")), &map)?;
        write_pgm(&udir.join(format!("{i:04}.pgm")), s.height, s.width, &uncertainty_pgm(&v.uncertainty))?;
    }
    if let Some(last) = record.epochs.last() {
        println!("{}", last.to_line());
    }
    println!("wrote {} ({} epochs)", a.out.display(), record.epochs.len());
    Ok(())
}

fn render_table(cells: &[EvalCell]) -> String {
    let mut s = String::from("sampler budget iters dice_mean dice_std jaccard_mean jaccard_std hd95_mean hd95_std auroc\n");
    for c in cells {
        let auroc = c.per_seed[0].auroc;
        s.push_str(&format!(
            "{} {} {} {:.4} {:.4} {:.4} {:.4} {:.3} {:.3} {:.4}\n",
            c.sampler.name(),
            c.budget,
            c.iterations,
            c.dice.0,
            c.dice.1,
            c.jaccard.0,
            c.jaccard.1,
            c.hd95.0,
            c.hd95.1,
            auroc
        ));
    }
    s
}

fn mask_bytes(m: &BinaryMask) -> Vec<u8> {
    m.data().iter().map(|&b| if b { 255 } else { 0 }).collect()
}

#[allow(clippy::too_many_arguments)]
fn emit_panels(
    dir: &Path,
    model: &SegModel,
    data: &Dataset,
    indices: &[usize],
    sampler: SamplerKind,
    budget: usize,
    iters: usize,
    opts: &evseg::pipeline::InferenceOptions,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for &i in indices {
        let s = &data.samples[i];
        let view = zero_click_view(model, s)?;
        let mut rng = evseg::pipeline::eval_rng(0, i);
        let inter = interactive_predict(model, s, &view, sampler, budget, iters, opts, &mut rng)?;
        let (h, w) = (s.height, s.width);
        let tiles = [
            s.image.iter().map(|&v| quantize(v)).collect::<Vec<u8>>(),
            mask_bytes(&s.mask),
            mask_bytes(&inter.pred),
            uncertainty_pgm(&view.uncertainty),
        ];
        let mut px = vec![0u8; h * w * tiles.len()];
        for r in 0..h {
            for (t, tile) in tiles.iter().enumerate() {
                let dst = r * w * tiles.len() + t * w;
                px[dst..dst + w].copy_from_slice(&tile[r * w..(r + 1) * w]);
            }
        }
        fs::write(dir.join(format!("{i:04}.pgm")), encode_pgm(h, w * tiles.len(), &px))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let blob = fs::read(&a.weights).with_context(|| format!("reading weights {}", a.weights.display()))?;
    let model = SegModel::from_weights(&blob)?;
    let data = load_data(&a.data)?;
    let sampler = SamplerKind::parse(&a.sampler).expect("clap restricts the value");
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1".into()));
    }
    let indices: Vec<usize> = if a.all {
        (0..data.len()).collect()
    } else {
        let split = split_indices(data.len(), cfg.train.seed, cfg.train.val_fraction);
        if split.val.is_empty() {
            (0..data.len()).collect()
        } else {
            split.val
        }
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let opts = cfg.train.inference();
    let cells = evaluate(&model, &data, &indices, sampler, &a.budgets, &a.iters, &seeds, &opts, a.common.exec())?;
    let table = render_table(&cells);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    if let Some(dir) = &a.emit_panels {
        emit_panels(dir, &model, &data, &indices, sampler, a.budgets[0], a.iters[0], &opts)?;
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<bool> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op {name:?}")))?),
        None => None,
    };
    let report = selftest::run(&selftest::Options { fault })?;
    print!("{}", report.render());
    let failures = report.failures();
    if !failures.is_empty() {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        eprintln!("failing invariants: {}", names.join(", "));
    }
    Ok(failures.is_empty())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a).map(|_| true),
        Cmd::Train(a) => cmd_train(a).map(|_| true),
        Cmd::Eval(a) => cmd_eval(a).map(|_| true),
        Cmd::Selftest(a) => cmd_selftest(a),
        Cmd::Config(c) => c.load().map(|cfg| {
            print!("{}", cfg.dump());
            true
        }),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
