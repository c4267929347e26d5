use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use callcast::augment::{augment, UnifiedProfile};
use callcast::compaction::{compact_stream_with, DEFAULT_WINDOW};
use callcast::dynamis::{
    extract_artifacts, prompt_hash, run_dynamis, ArtifactOptions, ClientError, CountScheme, DynamisConfig, HeuristicClient,
    HttpClient, LlmClient, MockClient,
};
use callcast::ir::{parse_program_graph, ProgramGraph};
use callcast::pipeline::{self, write_artifacts, PipelineConfig};
use callcast::region::{apply_codebook, derive_codebook, PathCodebook};
use callcast::seqmodel::{evaluate, train, HotClass, HotSetPrediction, Precision, RnnModel, TrainConfig};
use callcast::trace::{read_trace, write_trace, DecisionScript, Limits, Magic, Trace};

#[derive(Parser)]
#[command(name = "callcast", version, about = "Call-trace compaction, hot-function prediction and LLM-assisted profiles")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Static analysis of a program: call graph, recursion, loop depths.
    Analyze {
        #[arg(long)]
        ir: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Execute a program under a decision script.
    Trace {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Compact the loop phases of a raw trace.
    Compact {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Derive the path codebook and apply it to a compacted trace.
    Encode {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Append chains for never-called functions.
    Augment {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Train the sequence model on a unified profile.
    Train {
        #[arg(long)]
        profile: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Predict the hot set from a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        hot: HotArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Score a prediction against a ground-truth trace.
    Evaluate {
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Profile-free prediction through phased prompts.
    Dynamis(DynamisArgs),
    /// Trace, compact, encode, augment, train and predict in one go.
    RunPipeline {
        #[arg(long)]
        ir: PathBuf,
        /// Training input; repeat for several.
        #[arg(long, required = true)]
        script: Vec<PathBuf>,
        /// Held-out script to evaluate against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        hot: HotArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Model file utilities.
    Model {
        #[command(subcommand)]
        cmd: ModelCmd,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Dimensions, vocabulary and per-block digests.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct Out {
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    hidden: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, value_enum, default_value_t = Prec::F32)]
    precision: Prec,
    #[arg(long)]
    early_stop: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            dropout: self.dropout,
            hidden: self.hidden,
            seed: self.seed,
            precision: match self.precision {
                Prec::F32 => Precision::F32,
                Prec::F64 => Precision::F64,
            },
            early_stop: self.early_stop,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct HotArgs {
    #[arg(long, default_value_t = 3)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = Class::Freq)]
    class: Class,
}

#[derive(Args)]
struct DynamisArgs {
    #[arg(long)]
    ir: PathBuf,
    /// Free-text description of the program input.
    #[arg(long)]
    input: String,
    #[arg(long, default_value_t = 3)]
    phase: u8,
    #[arg(long, default_value_t = 15)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = Class::Freq)]
    class: Class,
    #[arg(long, value_enum, default_value_t = ClientKind::Mock)]
    client: ClientKind,
    /// Reply directory for the mock client.
    #[arg(long, default_value = "mock")]
    mock_dir: PathBuf,
    #[arg(long, default_value = "http://localhost:8080/v1/complete")]
    endpoint: String,
    #[arg(long, default_value = "default")]
    model: String,
    /// Store every reply as a mock reply under this directory.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    obfuscate: bool,
    #[arg(long)]
    budget_tokens: Option<usize>,
    /// Linear counts instead of geometric ones.
    #[arg(long)]
    linear: bool,
    #[command(flatten)]
    out: Out,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Class {
    Freq,
    Hotspot,
}

impl From<Class> for HotClass {
    fn from(c: Class) -> Self {
        match c {
            Class::Freq => HotClass::FrequencyHot,
            Class::Hotspot => HotClass::RuntimeHotspot,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientKind {
    Mock,
    Http,
    /// Offline loop-depth ranking; ignores the prompt.
    Heuristic,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_ir(path: &Path) -> Result<ProgramGraph> {
    parse_program_graph(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_script(path: &Path) -> Result<DecisionScript> {
    DecisionScript::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_trace(path: &Path) -> Result<Trace> {
    Ok(read_trace(path).with_context(|| format!("reading {}", path.display()))?.0)
}

fn load_codebook(path: &Path) -> Result<PathCodebook> {
    PathCodebook::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_profile(path: &Path) -> Result<UnifiedProfile> {
    UnifiedProfile::from_trace(&load_trace(path)?).with_context(|| format!("splitting {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

impl Out {
    fn dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }

    fn file(&self, name: &str) -> Result<PathBuf> {
        Ok(self.dir()?.join(name))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name)?;
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    /// Writes `name` and prints either the JSON or `table`.
    fn report<T: Serialize>(&self, name: &str, v: &T, table: String) -> Result<()> {
        let j = to_json(v);
        self.write(name, &j)?;
        print!("{}", if self.json { j } else { table });
        Ok(())
    }

    fn trace(&self, name: &str, t: &Trace, magic: Magic) -> Result<()> {
        write_trace(self.file(name)?, t, magic).with_context(|| format!("writing {name}"))
    }
}

fn trace_table(t: &Trace) -> String {
    format!(
        "program {}\ninput   {}\nevents  {}\ncalls   {}\n",
        t.program_id,
        t.input_id,
        t.events.len(),
        t.token_count
    )
}

#[derive(Serialize)]
struct TraceSummary<'a> {
    program_id: &'a str,
    input_id: &'a str,
    events: usize,
    token_count: u64,
}

fn summary(t: &Trace) -> TraceSummary<'_> {
    TraceSummary {
        program_id: &t.program_id,
        input_id: &t.input_id,
        events: t.events.len(),
        token_count: t.token_count,
    }
}

fn hot_table(p: &HotSetPrediction) -> String {
    let mut s = String::from("rank function count\n");
    for (i, (f, c)) in p.ranked.iter().take(p.k).enumerate() {
        s += &format!("{:>4} {:>8} {c}\n", i + 1, f);
    }
    s + &format!("coverage {:.4}\n", p.coverage)
}

/// Records each reply of `inner` as a mock reply.
struct Recorder<'a> {
    inner: &'a dyn LlmClient,
    mock: MockClient,
}

impl LlmClient for Recorder<'_> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let r = self.inner.complete(prompt)?;
        self.mock
            .record(prompt, &r)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(r)
    }
}

fn dynamis(a: &DynamisArgs) -> Result<()> {
    let g = load_ir(&a.ir)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.ir.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "program".into())
    });
    let bundle = extract_artifacts(
        &g,
        &ArtifactOptions {
            program_name: name,
            domain_hint: a.domain.clone(),
            obfuscate: a.obfuscate,
        },
    );
    let cfg = DynamisConfig {
        phase: a.phase,
        k: a.topk,
        class: a.class.into(),
        scheme: if a.linear {
            CountScheme::Linear { base: 1000 }
        } else {
            CountScheme::default()
        },
        budget_tokens: a.budget_tokens,
    };
    let client: Box<dyn LlmClient> = match a.client {
        ClientKind::Mock => Box::new(MockClient::new(&a.mock_dir)),
        ClientKind::Http => Box::new(HttpClient::from_env(&a.endpoint, &a.model)),
        ClientKind::Heuristic => Box::new(HeuristicClient::new(&bundle)),
    };
    let run = match &a.record {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let rec = Recorder {
                inner: client.as_ref(),
                mock: MockClient::new(dir),
            };
            run_dynamis(&bundle, &a.input, &cfg, &rec)?
        }
        None => run_dynamis(&bundle, &a.input, &cfg, client.as_ref())?,
    };
    a.out.write("artifacts.json", &to_json(&bundle))?;
    for (p, r) in run.prompts.iter().zip(&run.responses) {
        a.out.write(&format!("prompt_phase{}.txt", p.phase), &p.rendered_text)?;
        a.out.write(&format!("prompt_phase{}.json", p.phase), &to_json(p))?;
        a.out.write(&format!("response_phase{}.json", p.phase), &to_json(r))?;
    }
    let text = run.profile.to_text();
    a.out.write("profile.txt", &text)?;
    let last = run.prompts.last().unwrap();
    let mut table = format!("phase {} prompt {}\n", last.phase, prompt_hash(&last.rendered_text));
    table += &text;
    a.out.report("dynamis.json", &run.profile, table)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Analyze { ir, out } => {
            let g = load_ir(&ir)?;
            let b = extract_artifacts(
                &g,
                &ArtifactOptions {
                    program_name: g.fingerprint(),
                    ..Default::default()
                },
            );
            let mut table = String::from("function depth callees\n");
            for (f, (name, d)) in b.inter_depths.iter().enumerate() {
                let callees = b.call_graph.get(name).map(|c| c.join(",")).unwrap_or_default();
                table += &format!("{f:>8} {d:>5} {name} -> {callees}\n");
            }
            table += &format!("recursive {:?}\n", b.recursive_set);
            out.report("analysis.json", &b, table)
        }
        Cmd::Trace { ir, script, out } => {
            let g = load_ir(&ir)?;
            let t = load_script(&script)?.run(&g, &Limits::default())?;
            out.trace(pipeline::RAW_FILE, &t, Magic::Trace)?;
            out.report("trace.json", &summary(&t), trace_table(&t))
        }
        Cmd::Compact { trace, window, out } => {
            if window < 2 {
                bail!("window must be at least 2");
            }
            let t = compact_stream_with(&load_trace(&trace)?, window)?;
            out.trace(pipeline::COMPACTED_FILE, &t, Magic::Trace)?;
            out.report("compact.json", &summary(&t), trace_table(&t))
        }
        Cmd::Encode { ir, trace, out } => {
            let g = load_ir(&ir)?;
            let cb = derive_codebook(&g);
            let t = apply_codebook(&cb, &load_trace(&trace)?)?;
            out.write(pipeline::CODEBOOK_FILE, &cb.to_json())?;
            out.trace(pipeline::ENCODED_FILE, &t, Magic::Trace)?;
            let table = trace_table(&t) + &format!("codes   {}\n", cb.entries.len());
            out.report("encode.json", &summary(&t), table)
        }
        Cmd::Augment { ir, trace, codebook, out } => {
            let g = load_ir(&ir)?;
            let p = augment(&g, &load_codebook(&codebook)?, &load_trace(&trace)?)?;
            let t = p.to_trace();
            out.trace(pipeline::UNIFIED_FILE, &t, Magic::Unified)?;
            let table = trace_table(&t) + &format!("chains  {}\n", p.augmented_chains.len());
            out.report("augment.json", &summary(&t), table)
        }
        Cmd::Train { profile, train: ta, out } => {
            let (m, r) = train(&load_profile(&profile)?, &ta.config())?;
            m.save(out.file(pipeline::MODEL_FILE)?)?;
            let mut table = String::from("epoch loss\n");
            for (i, l) in r.epoch_losses.iter().enumerate() {
                table += &format!("{:>5} {l:.6}\n", i + 1);
            }
            out.report(pipeline::TRAIN_FILE, &r, table)
        }
        Cmd::Predict {
            model,
            profile,
            codebook,
            hot,
            out,
        } => {
            let m = RnnModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let cfg = PipelineConfig {
                k: hot.topk,
                class: hot.class.into(),
                ..Default::default()
            };
            let p = pipeline::predict(&m, &load_profile(&profile)?, &load_codebook(&codebook)?, &cfg)?;
            let table = hot_table(&p);
            out.report(pipeline::PREDICTION_FILE, &p, table)
        }
        Cmd::Evaluate {
            prediction,
            truth,
            codebook,
            topk,
            out,
        } => {
            let p: HotSetPrediction = serde_json::from_str(&read(&prediction)?).context("parsing prediction")?;
            let e = evaluate(&p, &load_trace(&truth)?, &load_codebook(&codebook)?, topk);
            let table = format!(
                "k         {}\npredicted {:?}\nactual    {:?}\noverlap   {:.4}\ncoverage  {:.4}\n",
                e.k, e.predicted, e.actual, e.overlap, e.coverage
            );
            out.report(pipeline::EVALUATION_FILE, &e, table)
        }
        Cmd::Dynamis(a) => dynamis(&a),
        Cmd::RunPipeline {
            ir,
            script,
            truth,
            window,
            train: ta,
            hot,
            out,
        } => {
            if window < 2 {
                bail!("window must be at least 2");
            }
            let g = load_ir(&ir)?;
            let scripts = script.iter().map(|p| load_script(p)).collect::<Result<Vec<_>>>()?;
            let truth = truth.as_deref().map(load_script).transpose()?;
            let cfg = PipelineConfig {
                train: ta.config(),
                k: hot.topk,
                class: hot.class.into(),
                window,
                ..Default::default()
            };
            let run = pipeline::run_pipeline(&g, &scripts, truth.as_ref(), &cfg)?;
            write_artifacts(&run, out.dir()?)?;
            if out.json {
                print!("{}", to_json(&run.report));
            } else {
                print!("{}", run.report.to_table(Some(&run.timing)));
            }
            Ok(())
        }
        Cmd::Model {
            cmd: ModelCmd::Inspect { model },
        } => {
            let m = RnnModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            print!("{}", to_json(&m.inspect()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
