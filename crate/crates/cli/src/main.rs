mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use ctxslu::context::mean_role_attention;
use ctxslu::corpus::synth::{self, Designated, RuleFamily, SynthSpec};
use ctxslu::corpus::{load_corpus, write_corpus, Session};
use ctxslu::evaluation::{
    self, f1_scores, format_table, run_ablation, single_role_history_ablation, CellResult, Experiment, F1Mode,
    F1Scores, HistorySource,
};
use ctxslu::model::{Featurizer, Variant};
use ctxslu::training::{self, EpochMetrics};
use ctxslu::Checkpoint64;

use config::{Arch, Hyper, RunFlags};

#[derive(Parser)]
#[command(name = "ctxslu", version, about = "Contextual SLU with role- and time-aware history attention")]
struct Cli {
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus and its train/dev/test splits.
    Synth(SynthArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Train and test a grid of variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (TOML); defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// r1 | r2 | r3
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    sessions: Option<usize>,
    /// tourist | guide | self | other
    #[arg(long)]
    designated: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Output directory for checkpoint.json, metrics.jsonl and config.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// History annotations: gold | predicted.
    #[arg(long, default_value = "gold")]
    history: String,
    /// macro | micro [default: the checkpoint's training setting].
    #[arg(long)]
    f1: Option<String>,
    /// Write one JSON record per utterance, with attention weights.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Mean role weights per speaker (role-level variants only).
    #[arg(long)]
    role_attention_report: bool,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated variant ids or names [default: all twelve].
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// History annotations at test time: gold | predicted.
    #[arg(long, default_value = "gold")]
    history: String,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    /// Reuse finished cells found under `<out>/cells`.
    #[arg(long)]
    resume: bool,
    /// Compare both-role with own-role-only history for this variant
    /// instead of running the grid.
    #[arg(long)]
    own_role: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::FAILURE
        }
    }
}

fn category(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<ctxslu::Error>() {
            return e.category();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "parse";
        }
    }
    "usage"
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!(ctxslu::Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    ctxslu::Error::Config(msg.into()).into()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).with_context(|| format!("writing {}", p.display()))
}

fn write_jsonl<T: Serialize>(p: &Path, items: &[T]) -> Result<()> {
    let f = File::create(p).with_context(|| format!("writing {}", p.display()))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".to_owned(), |x| format!("{x:.2}"))
}

fn load(p: &Option<PathBuf>, what: &str) -> Result<Vec<Session>> {
    match p {
        Some(p) => Ok(load_corpus(p)?),
        None => bail!(usage(format!("--{what} is required"))),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::from_toml_file(p)?,
        None => SynthSpec::default(),
    };
    if let Some(r) = &a.rule {
        spec.rule = match r.as_str() {
            "r1" => RuleFamily::R1,
            "r2" => RuleFamily::R2,
            "r3" => RuleFamily::R3,
            _ => bail!(usage(format!("unknown rule family `{r}`"))),
        };
    }
    if let Some(d) = &a.designated {
        spec.designated = match d.as_str() {
            "tourist" => Designated::Tourist,
            "guide" => Designated::Guide,
            "self" => Designated::SameRole,
            "other" => Designated::Other,
            _ => bail!(usage(format!("unknown designated role `{d}`"))),
        };
    }
    if let Some(n) = a.sessions {
        spec.sessions = n;
    }
    if let Some(h) = a.horizon {
        spec.horizon = h;
    }
    let corpus = synth::generate_synthetic(&spec, a.seed)?;
    let (train, dev, test) = synth::split(&corpus.sessions);
    create_dir(&a.out)?;
    write_corpus(&train, a.out.join("train.jsonl"))?;
    write_corpus(&dev, a.out.join("dev.jsonl"))?;
    write_corpus(&test, a.out.join("test.jsonl"))?;
    write_jsonl(&a.out.join("meta.jsonl"), &corpus.meta)?;
    write_file(&a.out.join("spec.toml"), format!("# seed = {}\n{}", a.seed, spec.to_toml()))?;
    let ceiling = 100.0 * synth::history_free_ceiling(&test);
    match a.format {
        Format::Text => {
            println!(
                "wrote {} sessions to {} (train {}, dev {}, test {})",
                corpus.sessions.len(),
                a.out.display(),
                train.len(),
                dev.len(),
                test.len()
            );
            println!("history-free F1 ceiling on test: {ceiling:.2}");
        }
        Format::Json => println!(
            "{}",
            json!({"sessions": corpus.sessions.len(), "train": train.len(), "dev": dev.len(),
                   "test": test.len(), "test_ceiling": ceiling})
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'static str,
    train: &'a Path,
    dev: &'a Path,
    test: Option<&'a Path>,
    variant: Option<&'static str>,
    arch: Arch,
    hyper: &'a Hyper,
    model: &'a ctxslu::model::ModelConfig,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let run = a.run.resolve_file()?;
    let arch = config::resolve_arch(&run)?;
    let hyper = config::resolve_hyper(&run)?;
    if run.per_role_tasks.is_some() {
        bail!(usage("train takes --task, not --per-role-tasks"));
    }
    let (Some(train_path), Some(dev_path)) = (&run.train, &run.dev) else {
        bail!(usage("--train and --dev are required"));
    };
    let train = load(&run.train, "train")?;
    let dev = load(&run.dev, "dev")?;
    let test = run.test.as_ref().map(load_corpus).transpose()?;
    let emb = config::embeddings(&hyper, &[&train, &dev])?;
    let featurizer = Featurizer::build(&train, emb);
    let model_config = config::model_config(&arch, &hyper, &featurizer)?;

    let resolved = ResolvedTrain {
        command: "train",
        train: train_path,
        dev: dev_path,
        test: run.test.as_deref(),
        variant: arch.variant().map(Variant::name),
        arch,
        hyper: &hyper,
        model: &model_config,
    };
    let resolved = pretty(&resolved)?;
    log::info!("resolved config: {resolved}");
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), &resolved)?;

    let metrics_path = a.out.join("metrics.jsonl");
    let mut log_file = BufWriter::new(File::create(&metrics_path).with_context(|| format!("writing {}", metrics_path.display()))?);
    let mut log_err = None;
    let model = ctxslu::Model64::init(model_config, hyper.train.seed)?;
    let trained = training::train_model(&featurizer, model, &train, &dev, &hyper.train, |m: &EpochMetrics| {
        let r = serde_json::to_writer(&mut log_file, m)
            .map_err(anyhow::Error::from)
            .and_then(|()| Ok(log_file.write_all(b"\n")?))
            .and_then(|()| Ok(log_file.flush()?));
        if let Err(e) = r {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.context(format!("writing {}", metrics_path.display())));
    }
    trained.checkpoint.save(a.out.join("checkpoint.json"))?;

    let last = trained.metrics.last().expect("at least one epoch");
    let test_f1 = match &test {
        Some(t) => {
            let records = evaluation::predict(&trained.checkpoint, t, HistorySource::Gold)?;
            Some(f1_scores(&records, hyper.train.f1_mode)?)
        }
        None => None,
    };
    match a.format {
        Format::Text => {
            println!(
                "epoch {}: dev F1 tourist {} guide {} all {:.2} (theta {:.2})",
                last.epoch,
                fmt_opt(last.dev_f1_tourist),
                fmt_opt(last.dev_f1_guide),
                last.dev_f1_all,
                last.theta
            );
            if let Some(f) = test_f1 {
                println!("test F1 tourist {} guide {} all {:.2}", fmt_opt(f.tourist), fmt_opt(f.guide), f.all);
            }
            println!("checkpoint written to {}", a.out.join("checkpoint.json").display());
        }
        Format::Json => println!("{}", json!({"final": last, "test": test_f1})),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint64::load(&a.checkpoint)?;
    let history: HistorySource = a.history.parse()?;
    let mode: F1Mode = match &a.f1 {
        Some(s) => s.parse()?,
        None => ckpt.train.f1_mode,
    };
    if a.role_attention_report && !ckpt.model.config.attention.level.role() {
        bail!(ctxslu::Error::Unsupported(
            "--role-attention-report needs a variant with role-level attention".into()
        ));
    }
    let test = load_corpus(&a.test)?;
    let records = evaluation::predict(&ckpt, &test, history)?;
    let f1 = f1_scores(&records, mode)?;
    if let Some(p) = &a.dump_attention {
        let dumps: Vec<_> = records
            .iter()
            .map(|r| {
                json!({
                    "session_id": r.session_id,
                    "turn_index": r.turn_index,
                    "speaker": r.speaker,
                    "sentence_weights": r.sentence_weights,
                    "role_weights": r.role_weights,
                })
            })
            .collect();
        write_jsonl(p, &dumps)?;
    }
    let report = if a.role_attention_report {
        Some(mean_role_attention(&records)?)
    } else {
        None
    };
    match a.format {
        Format::Text => {
            print_f1(&f1);
            if let Some(r) = &report {
                println!("role attention    tourist context  guide context");
                for (task, w) in [("tourist task", r.tourist_task), ("guide task", r.guide_task)] {
                    match w {
                        Some(w) => println!("{task:<16}  {:<15.4}  {:.4}", w.tourist, w.guide),
                        None => println!("{task:<16}  -                -"),
                    }
                }
            }
        }
        Format::Json => println!("{}", json!({"f1": f1, "role_attention": report})),
    }
    Ok(())
}

fn print_f1(f: &F1Scores) {
    println!("tourist F1 {}", fmt_opt(f.tourist));
    println!("guide F1   {}", fmt_opt(f.guide));
    println!("all F1     {:.2}", f.all);
}

fn cell_path(out: &Path, v: Variant, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{}-{seed}.json", v.id()))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let run = a.run.resolve_file()?;
    if run.variant.is_some() || run.granular() || run.own_role_only.is_some() {
        bail!(usage("ablate takes --variants or --own-role, not single-variant switches"));
    }
    if run.task.is_some() {
        bail!(usage("ablate takes --per-role-tasks, not --task"));
    }
    let hyper = config::resolve_hyper(&run)?;
    let variants: Vec<Variant> = match &a.variants {
        Some(s) => config::parse_list(s, "variant")?,
        None => Variant::ALL.to_vec(),
    };
    let seeds: Vec<u64> = config::parse_list(&a.seeds, "seed")?;
    if variants.is_empty() || seeds.is_empty() {
        bail!(usage("need at least one variant and one seed"));
    }
    let history: HistorySource = a.history.parse()?;
    let train = load(&run.train, "train")?;
    let dev = load(&run.dev, "dev")?;
    let test = load(&run.test, "test")?;
    let emb = config::embeddings(&hyper, &[&train, &dev])?;
    let exp = Experiment {
        featurizer: Featurizer::build(&train, emb),
        train,
        dev,
        test,
        model: hyper.options.clone(),
        train_config: hyper.train.clone(),
        history,
        f1_mode: hyper.train.f1_mode,
        per_role_tasks: run.per_role_tasks.unwrap_or(false),
    };

    create_dir(&a.out)?;
    let resolved = pretty(&json!({
        "command": "ablate",
        "train": run.train, "dev": run.dev, "test": run.test,
        "history": a.history,
        "hyper": hyper,
        "per_role_tasks": exp.per_role_tasks,
    }))?;
    log::info!("resolved config: {resolved}");
    let config_path = a.out.join("config.json");
    if a.resume {
        if let Ok(old) = fs::read_to_string(&config_path) {
            if old != resolved {
                bail!(usage(format!(
                    "{} was produced with a different configuration; rerun without --resume",
                    a.out.display()
                )));
            }
        }
    }
    write_file(&config_path, &resolved)?;

    if let Some(v) = &a.own_role {
        let v: Variant = v.parse()?;
        let report = single_role_history_ablation(&exp, v, &seeds)?;
        write_file(&a.out.join("own-role.json"), pretty(&report)?)?;
        match a.format {
            Format::Text => {
                println!("variant {} ({}), seeds {:?}", v.id(), v.name(), seeds);
                println!("split    both-roles  own-role  delta   p(lower)  p(two-sided)");
                let rows = [("tourist", report.tourist), ("guide", report.guide), ("all", Some(report.all))];
                for (name, d) in rows {
                    if let Some(d) = d {
                        println!(
                            "{name:<7}  {:<10.2}  {:<8.2}  {:<+6.2}  {:<8.4}  {:.4}",
                            d.both, d.own, d.delta, d.p_lower, d.p_two_sided
                        );
                    }
                }
            }
            Format::Json => println!("{}", serde_json::to_string(&report)?),
        }
        return Ok(());
    }

    let cells_dir = a.out.join("cells");
    create_dir(&cells_dir)?;
    let mut done: Vec<CellResult> = Vec::new();
    if a.resume {
        for &v in &variants {
            for &s in &seeds {
                let p = cell_path(&a.out, v, s);
                if let Ok(text) = fs::read_to_string(&p) {
                    let c: CellResult = serde_json::from_str(&text).with_context(|| format!("reading {}", p.display()))?;
                    done.push(c);
                }
            }
        }
    }
    let computed = AtomicUsize::new(0);
    let write_err = std::sync::Mutex::new(None);
    let report = run_ablation(&exp, &variants, &seeds, &done, &|c: &CellResult| {
        computed.fetch_add(1, Ordering::Relaxed);
        let r = pretty(c).and_then(|s| write_file(&cell_path(&a.out, c.variant, c.seed), s));
        if let Err(e) = r {
            write_err.lock().unwrap().get_or_insert(e);
        }
    });
    if let Some(e) = write_err.into_inner().unwrap() {
        return Err(e);
    }
    eprintln!(
        "{} cells computed, {} reused",
        computed.load(Ordering::Relaxed),
        done.len()
    );
    let table = format_table(&report.rows);
    write_file(&a.out.join("report.json"), pretty(&report.rows)?)?;
    write_file(&a.out.join("table.txt"), &table)?;
    match a.format {
        Format::Text => print!("{table}"),
        Format::Json => println!("{}", serde_json::to_string(&report.rows)?),
    }
    let failed: usize = report.rows.iter().map(|r| r.errors.len()).sum();
    if failed > 0 {
        bail!(ctxslu::Error::Unsupported(format!("{failed} ablation cells failed; see table")));
    }
    Ok(())
}
