use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lhecnn::config::{Dataset, Parity, RunConfig, SynthSpec};
use lhecnn::oracle::{train_plain, PlainModel};
use lhecnn::plan::NetworkPlan;
use lhecnn::refine::{load_base_model, load_session, save_session, session_config, DataProvider, ModelProvider, TeeLink};
use lhecnn::selftest::run_example;
use lhecnn::tee::TeeService;
use lhecnn::{CostTable, Error, Result};

const REE: &str = "ree";
const OWNER: &str = "model-owner";
const DATA: &str = "data-provider";

#[derive(Parser)]
#[command(name = "lhecnn", version, about = "Encrypted CNN inference and refining on a leveled HE simulator")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct Source {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset with default run settings.
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p),
            (_, Some(name)) => RunConfig::from_preset(name),
            _ => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Show the layout choice and predicted forward-pass counts.
    Plan {
        #[command(flatten)]
        src: Source,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Create an encrypted base model, optionally trained in plaintext first.
    InitModel {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: PathBuf,
        /// Plaintext training set (dataset file).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        train_epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        train_lr: f64,
        /// Initialisation seed (default: the config's run seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw a synthetic labelled dataset.
    SynthData {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Label parity the set over-represents.
        #[arg(long, default_value = "odd")]
        dominant: Parity,
        /// Fixes the class prototypes.
        #[arg(long, default_value_t = 0)]
        task: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Encrypted inference; writes the operation report.
    Infer {
        #[command(flatten)]
        src: Source,
        /// Session directory.
        #[arg(long)]
        model: PathBuf,
        /// Dataset file; labels are used only for the accuracy line.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// CSV of per-image logits.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Encrypted refining with TEE interaction; updates the session in place.
    Refine {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the config's run.lr.
        #[arg(long)]
        lr: Option<f64>,
        /// Defaults to the config's run.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Write the refined session here instead of over --model.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Replay the two-image FC example and compare against the golden slots.
    SelftestExample {
        /// Flip one weight slot to check the comparison catches it.
        #[arg(long)]
        corrupt: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_level_exhausted() => 3,
        Error::Config(_) | Error::Layout { .. } | Error::Lhe(lhecnn::LheError::InvalidParams(_)) => 2,
        Error::Io(_) | Error::Format(_) | Error::Lhe(lhecnn::LheError::Decode(_)) => 4,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Plan { src, format } => plan(&src.load()?, format),
        Cmd::InitModel { src, out, train, train_epochs, train_lr, seed } => {
            init_model(&src.load()?, &out, train.as_deref(), train_epochs, train_lr, seed)
        }
        Cmd::SynthData { src, out, count, dominant, task, seed } => {
            let cfg = src.load()?.cnn()?;
            let data = SynthSpec::for_config(&cfg, task).sample(count, dominant, seed);
            data.save(&out)?;
            println!("wrote {} images to {}", data.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Infer { src, model, inputs, report, format, logits } => {
            infer(&src.load()?, &model, &inputs, report.as_deref(), format, logits.as_deref())
        }
        Cmd::Refine { src, model, data, lr, epochs, out, report, format } => {
            let run = src.load()?;
            let lr = lr.unwrap_or(run.run.lr);
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
            }
            let epochs = epochs.unwrap_or(run.run.epochs);
            refine(&run, &model, &data, lr, epochs, out.as_deref().unwrap_or(&model), report.as_deref(), format)
        }
        Cmd::SelftestExample { corrupt } => selftest(corrupt),
    }
}

/// The simulated TEE derives its key from the run seed, so commands sharing
/// a config talk to the same key.
fn tee_for(run: &RunConfig) -> Result<Arc<TeeService>> {
    let tee = Arc::new(TeeService::with_seed(run.params()?, run.run.seed));
    for party in [REE, OWNER, DATA] {
        tee.attest_and_provision(party);
    }
    Ok(tee)
}

fn plan(run: &RunConfig, format: Format) -> Result<ExitCode> {
    let cfg = run.cnn()?;
    let params = run.params()?;
    let plan = NetworkPlan::new(&cfg, &params, run.r_mode())?;
    let top = params.top_level();
    let pred = plan.predict_forward(top, top);
    let mut s = String::new();
    match format {
        Format::Csv => {
            s.push_str("scope,level,add,mul,rot,cmul\n");
            for st in &pred.stages {
                let o = st.ops;
                let _ = writeln!(s, "{},{},{},{},{},{}", st.scope, st.level, o.add, o.mul, o.rot, o.cmul);
            }
            let t = pred.totals();
            let _ = writeln!(s, "total,,{},{},{},{}", t.add, t.mul, t.rot, t.cmul);
        }
        Format::Text => {
            let g = &plan.geo;
            let _ = writeln!(s, "kernel sides  {:?}", g.kernel_sides);
            let _ = writeln!(s, "strides       {:?}", g.strides);
            let _ = writeln!(s, "grid side     {}", g.grid_side);
            let _ = writeln!(s, "r             {} (max {})", plan.r, g.packing_factor);
            let packings: Vec<_> = plan.packings.iter().map(|p| p.tag()).collect();
            let _ = writeln!(s, "packings      {}", packings.join(", "));
            let _ = writeln!(s, "n             {}", cfg.n());
            let _ = writeln!(s, "slots         {}", params.slot_count());
            let _ = writeln!(s, "levels        {} (needs {})", params.max_level(), plan.required_levels());
            let _ = writeln!(s, "\n{:<10} {:>6} {:>10} {:>10} {:>10} {:>6}", "stage", "level", "add", "mul", "rot", "cmul");
            for st in &pred.stages {
                let o = st.ops;
                let _ = writeln!(s, "{:<10} {:>6} {:>10} {:>10} {:>10} {:>6}", st.scope, st.level, o.add, o.mul, o.rot, o.cmul);
            }
            let t = pred.totals();
            let _ = writeln!(s, "{:<10} {:>6} {:>10} {:>10} {:>10} {:>6}", "total", "", t.add, t.mul, t.rot, t.cmul);
            let n = cfg.n() as f64;
            let _ = writeln!(s, "per image  {:>17.3} {:>10.3} {:>10.3}", t.add as f64 / n, t.mul as f64 / n, t.rot as f64 / n);
            s.push('\n');
            for (scope, count) in &pred.encryptions {
                let _ = writeln!(s, "{scope:<20} {count}");
            }
            if pred.feasible() {
                let _ = writeln!(s, "\nlogits at level {}", pred.final_level);
            } else {
                let _ = writeln!(
                    s,
                    "\ninfeasible: {} levels, {} short",
                    params.max_level(),
                    plan.required_levels().saturating_sub(params.max_level())
                );
            }
        }
    }
    print!("{s}");
    Ok(ExitCode::SUCCESS)
}

fn load_data(path: &Path, run: &RunConfig) -> Result<Dataset> {
    Dataset::load(path, run.cnn()?.image_len())
}

fn init_model(run: &RunConfig, out: &Path, train: Option<&Path>, epochs: usize, lr: f64, seed: Option<u64>) -> Result<ExitCode> {
    let cfg = run.cnn()?;
    let mut model = PlainModel::init(&cfg, seed.unwrap_or(run.run.seed));
    if let Some(path) = train {
        let data = load_data(path, run)?;
        let (trained, losses) = train_plain(&cfg, &model, &data.images, &data.labels, lr, epochs, cfg.n())?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            println!("plaintext training: {} epochs, loss {first:.4} -> {last:.4}", losses.len());
        }
        model = trained;
    }
    let tee = tee_for(run)?;
    let plan = NetworkPlan::new(&cfg, tee.params(), run.r_mode())?;
    let enc = ModelProvider::new(tee.public_key()).encrypt(&plan, &model)?;
    let link: Arc<dyn TeeLink> = Arc::new(tee.handle(REE)?);
    let session = load_base_model(link, &cfg, run.r_mode(), enc)?;
    save_session(&session, out)?;
    println!("wrote {} parameter ciphertexts to {}", session.model().ciphertexts().count(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn open(run: &RunConfig, dir: &Path) -> Result<(Arc<TeeService>, lhecnn::refine::Session)> {
    let saved = session_config(dir)?;
    if saved != run.cnn()? {
        return Err(Error::Config(format!("session in {} was built for a different network", dir.display())));
    }
    let tee = tee_for(run)?;
    let link: Arc<dyn TeeLink> = Arc::new(tee.handle(REE)?);
    let session = load_session(dir, link)?;
    Ok((tee, session))
}

fn write_report(report: &lhecnn::OpReport, path: Option<&Path>, format: Format) -> Result<()> {
    let body = match format {
        Format::Csv => report.to_csv(),
        Format::Text => report.to_text(),
    };
    match path {
        Some(p) => std::fs::write(p, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn infer(run: &RunConfig, dir: &Path, inputs: &Path, report: Option<&Path>, format: Format, logits: Option<&Path>) -> Result<ExitCode> {
    let (tee, session) = open(run, dir)?;
    let data = load_data(inputs, run)?;
    if data.is_empty() {
        return Err(Error::Config("no input images".into()));
    }
    let plan = session.plan().clone();
    let n = plan.cfg.n();
    let provider = DataProvider::new(tee.public_key());
    let before = session.meter().snapshot();
    let mut rows = Vec::with_capacity(data.len());
    let mut batches = 0;
    for (images, _) in data.batches(n) {
        let x = provider.encrypt_inputs(&plan, images)?;
        let (out, _) = session.infer(&x)?;
        rows.extend(tee.read_outputs(DATA, &out, images.len())?);
        batches += 1;
    }
    let snap = session.meter().snapshot().since(&before);
    let rep = lhecnn::OpReport::from_snapshot(&snap, &CostTable::reference(), (batches * n) as u64);
    let predicted: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let correct = predicted.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    if let Some(path) = logits {
        let mut s = String::from("image,label,predicted");
        for k in 0..plan.cfg.classes() {
            let _ = write!(s, ",logit{k}");
        }
        s.push('\n');
        for (i, row) in rows.iter().enumerate() {
            let _ = write!(s, "{i},{},{}", data.labels[i], predicted[i]);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        std::fs::write(path, s)?;
    }
    write_report(&rep, report, format)?;
    eprintln!("{} images in {batches} batches, accuracy {:.4}", data.len(), correct as f64 / data.len() as f64);
    Ok(ExitCode::SUCCESS)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

#[allow(clippy::too_many_arguments)]
fn refine(
    run: &RunConfig,
    dir: &Path,
    data: &Path,
    lr: f64,
    epochs: usize,
    out: &Path,
    report: Option<&Path>,
    format: Format,
) -> Result<ExitCode> {
    let (tee, mut session) = open(run, dir)?;
    let data = load_data(data, run)?;
    let batches = DataProvider::new(tee.public_key()).encrypt_dataset(session.plan(), &data.images, &data.labels)?;
    let counters = tee.counters();
    let outcome = session.refine(&batches, lr, epochs)?;
    let seen = tee.counters().since(&counters);
    for r in &outcome.rounds {
        println!("epoch {} round {} loss {:.6} reencrypted {} refreshes {}", r.epoch, r.round, r.loss, r.reencrypted, r.refreshes);
    }
    let rounds = outcome.rounds.len().max(1);
    println!(
        "tee: {} loss-head calls, {} reencrypt calls, {} level resets ({:.2} per round, {} without refresh)",
        seen.loss_head_calls,
        seen.reencrypt_calls,
        seen.level_resets(),
        seen.level_resets() as f64 / rounds as f64,
        session.closed_form_reencryptions()
    );
    save_session(&session, out)?;
    println!("saved session after {} rounds to {}", session.rounds_done(), out.display());
    if report.is_some() {
        write_report(&outcome.report, report, format)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn selftest(corrupt: Option<usize>) -> Result<ExitCode> {
    let checks = run_example(corrupt)?;
    let mut ok = true;
    for c in &checks {
        if c.passed() {
            println!("ok    {}", c.name);
        } else {
            ok = false;
            println!("FAIL  {}", c.name);
            for (slot, e, a) in c.diff() {
                println!("      slot {slot}: expected {e}, got {a}");
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
