//! `pairlat`: generate worlds, audit them, train both stages, evaluate, and
//! run the ablation, writing every artifact under one output directory.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pairlat::audit::{audit_generator, AuditReport};
use pairlat::experiment::report::{write_atomic, write_json, ABLATION_FILE, AUDIT_FILE, EVAL_FILE, STAGE2_FILE};
use pairlat::experiment::{
    emit_report, evaluate_phase, masks_for, preset_names, run_ablation, stage1_phase, stage2_phase,
    train_backbones, ExperimentConfig, OutputLock, PhaseTiming, RunRecord, World,
};
use pairlat::scm::{read_dataset, write_dataset, GroundTruthGenerator};
use pairlat::stage1::{load_checkpoint, save_checkpoint, write_trace_csv, ModelBank};
use pairlat::stage2::FrozenBackbone;
use pairlat::Error;

const OUT_ENV: &str = "PAIRLAT_OUT";
const CONFIG_FILE: &str = "config.toml";
const DATA_DIR: &str = "data";
const STAGE1_CHECKPOINT: &str = "stage1/checkpoint.json";
const STAGE1_TRACE: &str = "stage1/trace.csv";
const STAGE2_CHECKPOINT: &str = "stage2/checkpoint.json";

#[derive(Parser)]
#[command(name = "pairlat", version, about = "Pairwise-modality latent identifiability laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample every edge's paired dataset.
    Gen(RunArgs),
    /// Certify the rank and sparsity conditions on the ground-truth world.
    Audit(RunArgs),
    /// Train encoders and decoders on the paired data.
    TrainStage1(RunArgs),
    /// Train frozen probes, then adapt the Stage I bank to them.
    TrainStage2(RunArgs),
    /// Score the Stage I checkpoint against the ground-truth latents.
    Eval(RunArgs),
    /// Run the five ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Consolidate the artifacts in the output directory.
    Report(RunArgs),
    /// Print the effective configuration and its fingerprint.
    ShowConfig(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config file; may name its base preset with `preset = "..."`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset (fig2, fig2-dropedge, chain5).
    #[arg(long)]
    preset: Option<String>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to `$PAIRLAT_OUT/<name>-seed<seed>`, or
    /// `pairlat-out/<name>-seed<seed>` without the variable.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key.path=value` override, applied after the preset and the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use seeds `seed, seed+1, ...`; defaults to `ablation.seeds`.
    #[arg(long)]
    seeds: Option<u64>,
}

struct Failure {
    phase: &'static str,
    error: Error,
}

trait InPhase<T> {
    fn phase(self, phase: &'static str) -> Result<T, Failure>;
}

impl<T> InPhase<T> for pairlat::Result<T> {
    fn phase(self, phase: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { phase, error })
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Spec { .. } | Error::Graph(_))
}

fn load_config(args: &RunArgs) -> pairlat::Result<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    if args.preset.is_none() && text.is_none() {
        return Err(Error::Config(format!(
            "give --config or --preset (available presets: {})",
            preset_names().join(", ")
        )));
    }
    let mut cfg = ExperimentConfig::assemble(args.preset.as_deref(), text.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("pairlat-out"));
    root.join(format!("{}-seed{}", cfg.name, cfg.seed))
}

/// One run: effective config, output directory held under lock, and the
/// record that is written when the run ends.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    record: RunRecord,
    _lock: OutputLock,
}

impl Run {
    fn start(sub: &str, args: &RunArgs) -> Result<Self, Failure> {
        let cfg = load_config(args).phase("config")?;
        let out = output_dir(args, &cfg);
        let lock = OutputLock::acquire(&out).phase("config")?;
        write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes()).phase("config")?;
        let record = RunRecord::new(sub, cfg.fingerprint(), cfg.seed);
        eprintln!("pairlat {sub}: {} seed {} -> {}", cfg.name, cfg.seed, out.display());
        Ok(Self { cfg, out, record, _lock: lock })
    }

    fn timed<T>(&mut self, phase: &'static str, f: impl FnOnce(&mut Self) -> pairlat::Result<T>) -> Result<T, Failure> {
        let t = Instant::now();
        let v = f(self).phase(phase)?;
        let seconds = t.elapsed().as_secs_f64();
        eprintln!("  {phase}: {seconds:.1}s");
        self.record.phases.push(PhaseTiming { phase: phase.into(), seconds });
        Ok(v)
    }

    fn artifact(&mut self, rel: &str) {
        self.record.artifacts.push(rel.to_string());
    }

    fn verdict(&mut self, key: &str, value: impl Into<String>) {
        self.record.verdicts.insert(key.into(), value.into());
    }

    fn finish(self) -> Result<(), Failure> {
        let path = self.record.write(&self.out).phase("record")?;
        eprintln!("  record: {}", path.display());
        Ok(())
    }

    /// Stored datasets when they match the world, otherwise freshly sampled
    /// and written.
    fn world(&mut self) -> Result<World, Failure> {
        let data = self.out.join(DATA_DIR);
        let (cfg, seed) = (self.cfg.clone(), self.cfg.seed);
        if data.is_dir() {
            let stored = self.timed("data", |_| {
                let mut sets = Vec::new();
                for entry in std::fs::read_dir(&data).map_err(|e| Error::Io { path: data.clone(), source: e })? {
                    let entry = entry.map_err(|e| Error::Io { path: data.clone(), source: e })?;
                    if entry.path().join("manifest.json").is_file() {
                        sets.push(read_dataset(&entry.path())?);
                    }
                }
                if sets.iter().any(|d| d.len() != cfg.data.rows_per_edge) {
                    return Ok(None);
                }
                Ok(World::from_datasets(&cfg, seed, sets).ok())
            })?;
            if let Some(w) = stored {
                return Ok(w);
            }
            eprintln!("  data: stored datasets do not match this world; regenerating");
        }
        self.generate()
    }

    fn generate(&mut self) -> Result<World, Failure> {
        let (cfg, seed) = (self.cfg.clone(), self.cfg.seed);
        let data = self.out.join(DATA_DIR);
        let sets = self.timed("gen", |_| {
            let generator = GroundTruthGenerator::from_config(&cfg.world, seed)?;
            let edges = generator.spec().graph().edges().to_vec();
            edges.iter().map(|&e| generator.sample_pair_dataset(e, cfg.data.rows_per_edge, seed)).collect::<pairlat::Result<Vec<_>>>()
        })?;
        if data.is_dir() {
            std::fs::remove_dir_all(&data).map_err(|e| Error::Io { path: data.clone(), source: e }).phase("gen")?;
        }
        for ds in &sets {
            let e = ds.edge();
            let rel = format!("{DATA_DIR}/edge-{}-{}", e.lo() + 1, e.hi() + 1);
            write_dataset(&self.out.join(&rel), ds).phase("gen")?;
            self.artifact(&rel);
        }
        World::from_datasets(&cfg, seed, sets).phase("gen")
    }

    fn audit(&mut self, world: &World) -> Result<AuditReport, Failure> {
        let (settings, seed) = (self.cfg.audit.clone(), self.cfg.seed);
        self.timed("audit", |_| audit_generator(&world.generator, &settings, seed))
    }

    fn stage1_bank(&mut self) -> Result<ModelBank, Failure> {
        let path = self.out.join(STAGE1_CHECKPOINT);
        if !path.is_file() {
            return Err(Failure {
                phase: "load-stage1",
                error: Error::Config(format!("no Stage I checkpoint at {}; run train-stage1 first", path.display())),
            });
        }
        let (bank, fp) = load_checkpoint(&path).phase("load-stage1")?;
        if fp != self.cfg.fingerprint() {
            eprintln!("  note: the Stage I checkpoint was trained under config {fp}");
        }
        Ok(bank)
    }
}

fn cmd_gen(args: &RunArgs) -> Result<(), Failure> {
    let mut run = Run::start("gen", args)?;
    run.generate()?;
    run.finish()
}

fn cmd_audit(args: &RunArgs) -> Result<(), Failure> {
    let mut run = Run::start("audit", args)?;
    let world = run.world()?;
    let report = run.audit(&world)?;
    write_json(&run.out.join(AUDIT_FILE), &report).phase("audit")?;
    run.artifact(AUDIT_FILE);
    for m in &report.modalities {
        let v = format!("{:?}", m.verdict).to_lowercase();
        eprintln!("  modality {}: {v}", m.modality);
        run.verdict(&format!("audit/m{}", m.modality), v);
    }
    run.finish()
}

fn cmd_train_stage1(args: &RunArgs) -> Result<(), Failure> {
    let mut run = Run::start("train-stage1", args)?;
    let world = run.world()?;
    let (cfg, seed) = (run.cfg.clone(), run.cfg.seed);
    let masks = masks_for(&cfg, &world, seed).phase("stage1")?;
    let out = run.timed("stage1", |_| stage1_phase(&world, &masks, &cfg.stage1, seed))?;
    save_checkpoint(&run.out.join(STAGE1_CHECKPOINT), &out.bank, &cfg.fingerprint()).phase("stage1")?;
    write_trace_csv(&run.out.join(STAGE1_TRACE), &out.trace).phase("stage1")?;
    run.artifact(STAGE1_CHECKPOINT);
    run.artifact(STAGE1_TRACE);
    if let Some(last) = out.trace.last() {
        run.verdict("stage1/final_total", format!("{:e}", last.total));
    }
    run.finish()
}

fn cmd_eval(args: &RunArgs) -> Result<(), Failure> {
    let mut run = Run::start("eval", args)?;
    let world = run.world()?;
    let bank = run.stage1_bank()?;
    let audit = run.audit(&world)?;
    write_json(&run.out.join(AUDIT_FILE), &audit).phase("audit")?;
    run.artifact(AUDIT_FILE);
    let (cfg, seed) = (run.cfg.clone(), run.cfg.seed);
    let masks = masks_for(&cfg, &world, seed).phase("eval")?;
    let report = run.timed("eval", |_| evaluate_phase(&cfg, &world, &bank, &masks, Some(&audit), seed))?;
    write_json(&run.out.join(EVAL_FILE), &report).phase("eval")?;
    run.artifact(EVAL_FILE);
    for m in &report.modalities {
        eprintln!(
            "  modality {}: block R² {:.3}, leakage R² {:.3}, MCC {:.3}",
            m.modality, m.block_r2.mean, m.leakage_r2.mean, m.mcc.mcc
        );
    }
    run.verdict("eval/mean_block_r2", format!("{:.6}", report.mean_block_r2));
    run.verdict("eval/mean_leakage_r2", format!("{:.6}", report.mean_leakage_r2));
    run.finish()
}

fn cmd_train_stage2(args: &RunArgs) -> Result<(), Failure> {
    let mut run = Run::start("train-stage2", args)?;
    let world = run.world()?;
    let bank = run.stage1_bank()?;
    let (cfg, seed) = (run.cfg.clone(), run.cfg.seed);
    let masks = masks_for(&cfg, &world, seed).phase("stage2")?;
    let backbones = run.timed("backbones", |_| train_backbones(&cfg, &world, seed))?;
    for b in &backbones {
        let rel = format!("stage2/backbone-{}.json", b.modality() + 1);
        let path = run.out.join(&rel);
        b.save(&path).phase("backbones")?;
        FrozenBackbone::load(&path).phase("backbones")?;
        run.artifact(&rel);
    }
    let (out, report) =
        run.timed("stage2", |_| stage2_phase(&cfg, &world, bank, &backbones, &masks, &cfg.stage2, seed))?;
    save_checkpoint(&run.out.join(STAGE2_CHECKPOINT), &out.bank, &cfg.fingerprint()).phase("stage2")?;
    write_json(&run.out.join(STAGE2_FILE), &report).phase("stage2")?;
    run.artifact(STAGE2_CHECKPOINT);
    run.artifact(STAGE2_FILE);
    eprintln!(
        "  transfer accuracy {:.1}% -> {:.1}% (chance {:.1}%), backbones unchanged: {}",
        report.accuracy_before, report.accuracy_after, report.chance, report.frozen_verified
    );
    run.verdict("stage2/frozen", if report.frozen_verified { "pass" } else { "fail" });
    run.verdict("stage2/accuracy_after", format!("{:.4}", report.accuracy_after));
    run.finish()
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), Failure> {
    let mut run = Run::start("ablate", &args.run)?;
    let seeds: Vec<u64> = match args.seeds {
        Some(n) => (0..n).map(|k| run.cfg.seed + k).collect(),
        None => run.cfg.ablation.seeds.clone(),
    };
    let cfg = run.cfg.clone();
    let report = run.timed("ablate", |_| run_ablation(&cfg, &seeds))?;
    write_json(&run.out.join(ABLATION_FILE), &report).phase("ablate")?;
    run.artifact(ABLATION_FILE);
    for v in &report.variants {
        let mean = v.mean.map_or("failed".to_string(), |m| format!("{m:.2}%"));
        eprintln!("  {:<14} {mean}", v.name);
    }
    let status = format!("{:?}", report.verdict.status).to_lowercase();
    eprintln!("  chance {:.2}%, ordering {status}", report.chance);
    run.verdict("ablation/ordering", status);
    run.finish()
}

fn cmd_report(args: &RunArgs) -> Result<(), Failure> {
    let mut run = Run::start("report", args)?;
    let out = run.out.clone();
    let report = run.timed("report", |_| emit_report(&out))?;
    run.artifact("report.json");
    for t in report["tables"].as_array().into_iter().flatten() {
        run.artifact(t.as_str().unwrap_or_default());
    }
    if let Some(gaps) = report["gaps"].as_array().filter(|g| !g.is_empty()) {
        let names: Vec<&str> = gaps.iter().filter_map(|g| g.as_str()).collect();
        eprintln!("  gaps: {}", names.join(", "));
    }
    run.finish()
}

fn cmd_show_config(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args).phase("config")?;
    println!("# fingerprint {}", cfg.fingerprint());
    print!("{}", cfg.to_toml());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Audit(a) => cmd_audit(a),
        Command::TrainStage1(a) => cmd_train_stage1(a),
        Command::TrainStage2(a) => cmd_train_stage2(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
        Command::ShowConfig(a) => cmd_show_config(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { phase, error }) => {
            if is_config_error(&error) {
                eprintln!("pairlat: {error}");
                ExitCode::from(2)
            } else {
                eprintln!("pairlat: phase `{phase}` failed: {error}");
                ExitCode::from(3)
            }
        }
    }
}
