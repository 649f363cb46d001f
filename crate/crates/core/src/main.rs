use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use opentools::agents::{PolicyConfig, PolicyKind, RunStatus, SelectionMode};
use opentools::community::{CommunityError, Decision, SubmissionContent, ToolContribution};
use opentools::llm::{BackendRegistry, MockScript, OpenAiBackend};
use opentools::reliability::{RoundError, DEFAULT_REGRESSION_THRESHOLD};
use opentools::runtime::EnvVars;
use opentools::schema::validate_manifest;
use opentools::service::{self, ServiceConfig};
use opentools::store::StoreError;
use opentools::stub::{StubServer, STUB_URL_VAR};
use opentools::verification::{CaseStatus, TestCase};
use opentools::workspace::{
    self, AgentRequest, SelectionSpec, Workspace, WorkspaceError, MOCK_BACKEND,
};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_STATE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "opentools",
    version,
    about = "Tool reliability evaluation and agent runs"
)]
struct Cli {
    /// State directory (tools, tests, runs, traces).
    #[arg(
        long,
        global = true,
        env = "OPENTOOLS_STATE_DIR",
        default_value = "opentools-state"
    )]
    state_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Create the state layout with the seed toolbox.
    Init,
    #[command(subcommand)]
    Tools(ToolsCommand),
    #[command(subcommand)]
    Tests(TestsCommand),
    /// Accept or reject a pending submission.
    Review(ReviewArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print the reliability report.
    Report {
        #[arg(long)]
        tool: Option<String>,
    },
    #[command(subcommand)]
    Agent(AgentCommand),
    /// Serve the REST API.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum ToolsCommand {
    List,
    /// Validate a manifest file without registering it.
    Validate {
        manifest: PathBuf,
    },
}

#[derive(Subcommand)]
enum TestsCommand {
    /// Queue a test case (or a `{"manifest", "binding"}` tool contribution) for review.
    Submit {
        file: PathBuf,
        #[arg(long, default_value = "cli")]
        submitter: String,
    },
    /// List submissions.
    List {
        #[arg(long)]
        status: Option<String>,
    },
}

#[derive(Args)]
struct ReviewArgs {
    id: String,
    #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
    accept: bool,
    #[arg(long)]
    reject: bool,
    #[arg(long, default_value = "")]
    reason: String,
    #[arg(long, default_value = "maintainer")]
    reviewer: String,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Run one evaluation round over every accepted suite.
    Run {
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long, default_value_t = DEFAULT_REGRESSION_THRESHOLD)]
        threshold: f64,
        /// Serve the seed API tools from a local stub for this run.
        #[arg(long)]
        with_stub: bool,
    },
}

#[derive(Subcommand)]
enum AgentCommand {
    Run(AgentRunArgs),
}

#[derive(Args)]
struct AgentRunArgs {
    #[arg(long)]
    policy: String,
    #[arg(long)]
    query: String,
    /// Comma-separated toolbox; defaults to every registered tool.
    #[arg(long, value_delimiter = ',')]
    tools: Option<Vec<String>>,
    /// Tool retrieval before the run, e.g. `k=3,mode=lexical`.
    #[arg(long)]
    select: Option<String>,
    /// Scripted backend replies (JSON) for offline runs.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    max_steps: Option<u32>,
    /// Prefer higher-accuracy tools among near-ties during selection.
    #[arg(long)]
    reliability_routing: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "OPENTOOLS_AUTH_TOKEN", hide_env_values = true)]
    auth_token: Option<String>,
    #[arg(long)]
    with_stub: bool,
}

/// A failed command: exit code, machine code, message, optional violations.
struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
    violations: Vec<String>,
}

impl Failure {
    fn new(exit: u8, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit,
            code,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, "usage", message)
    }
}

fn store_failure(e: &StoreError) -> Failure {
    match e {
        StoreError::Corrupt { .. } => Failure::new(EXIT_STATE, "state_corrupt", e.to_string()),
        StoreError::Io(_) => Failure::new(EXIT_RUNTIME, "storage_error", e.to_string()),
    }
}

impl From<WorkspaceError> for Failure {
    fn from(e: WorkspaceError) -> Self {
        let msg = e.to_string();
        match e {
            WorkspaceError::NotInitialized(_) => Failure::new(EXIT_STATE, "not_initialized", msg),
            WorkspaceError::Invalid(v) => Failure {
                violations: v,
                ..Failure::new(EXIT_VALIDATION, "invalid_request", msg)
            },
            WorkspaceError::NotFound(_) => Failure::new(EXIT_VALIDATION, "not_found", msg),
            WorkspaceError::Store(s) => store_failure(&s),
            WorkspaceError::Select(_) => Failure::new(EXIT_VALIDATION, "invalid_selection", msg),
            WorkspaceError::Round(RoundError::Store(s)) => store_failure(&s),
            WorkspaceError::Round(RoundError::NoCases) => {
                Failure::new(EXIT_RUNTIME, "no_cases", msg)
            }
            WorkspaceError::Round(RoundError::BadThreshold(_)) => {
                Failure::new(EXIT_VALIDATION, "invalid_request", msg)
            }
            WorkspaceError::Community(CommunityError::Store(s)) => store_failure(&s),
            WorkspaceError::Community(CommunityError::Invalid(v)) => Failure {
                violations: v,
                ..Failure::new(EXIT_VALIDATION, "invalid_submission", msg)
            },
            WorkspaceError::Community(_) => Failure::new(EXIT_VALIDATION, "rejected", msg),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        store_failure(&e)
    }
}

/// What a successful command prints: a JSON document and its human rendering.
struct Output {
    json: Value,
    human: String,
    exit: u8,
}

impl Output {
    fn new(json: Value, human: impl Into<String>) -> Self {
        Self {
            json,
            human: human.into(),
            exit: 0,
        }
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn open(cli: &Cli, backends: BackendRegistry, env: EnvVars) -> Result<Workspace, Failure> {
    Ok(Workspace::open_dir(&cli.state_dir, backends, env)?)
}

/// Backends from the environment; with a stub running and no real backend,
/// `default` points at the stub's canned chat completion.
fn backends(stub: Option<&StubServer>) -> BackendRegistry {
    let mut reg = BackendRegistry::from_env();
    if let (Some(stub), None) = (stub, reg.get("default")) {
        reg.insert(
            "default",
            Arc::new(OpenAiBackend::new(&stub.url(), None, "stub")),
        );
    }
    reg
}

fn fmt_fraction(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"))
}

fn run(cli: &Cli) -> Result<Output, Failure> {
    match &cli.command {
        Command::Init => {
            let created = workspace::init_dir(&cli.state_dir)?;
            let dir = cli.state_dir.display().to_string();
            let human = if created {
                format!("initialized {dir} with the seed toolbox")
            } else {
                format!("{dir} already initialized")
            };
            Ok(Output::new(
                json!({"state_dir": dir, "created": created}),
                human,
            ))
        }
        Command::Tools(ToolsCommand::List) => {
            let ws = open(cli, BackendRegistry::new(), EnvVars::process())?;
            let tools = ws.tools();
            let mut human = format!(
                "{:<20} {:<10} {:>8}  {}\n",
                "NAME", "CATEGORY", "ACCURACY", "DESCRIPTION"
            );
            for t in &tools {
                human += &format!(
                    "{:<20} {:<10} {:>8}  {}\n",
                    t.name,
                    t.category.to_string(),
                    fmt_fraction(t.accuracy_summary.as_ref().map(|a| a.accuracy)),
                    t.description
                );
            }
            Ok(Output::new(
                serde_json::to_value(&tools).unwrap(),
                human.trim_end(),
            ))
        }
        Command::Tools(ToolsCommand::Validate { manifest }) => {
            let raw = read_file(manifest)?;
            match validate_manifest(raw.as_bytes()) {
                Ok(d) => Ok(Output::new(
                    json!({"valid": true, "name": d.name}),
                    format!("ok: {} {} ({})", d.name, d.version, d.category),
                )),
                Err(e) => Err(Failure {
                    violations: e.violations().iter().map(|v| v.to_string()).collect(),
                    ..Failure::new(
                        EXIT_VALIDATION,
                        "invalid_manifest",
                        format!("{} is not a valid manifest", manifest.display()),
                    )
                }),
            }
        }
        Command::Tests(TestsCommand::Submit { file, submitter }) => {
            let doc: Value = serde_json::from_str(&read_file(file)?).map_err(|e| {
                Failure::new(
                    EXIT_VALIDATION,
                    "invalid_submission",
                    format!("{}: {e}", file.display()),
                )
            })?;
            let content = if doc.get("manifest").is_some() {
                SubmissionContent::ToolManifest(
                    serde_json::from_value::<ToolContribution>(doc).map_err(|e| {
                        Failure::new(EXIT_VALIDATION, "invalid_submission", e.to_string())
                    })?,
                )
            } else {
                SubmissionContent::TestCase(serde_json::from_value::<TestCase>(doc).map_err(
                    |e| Failure::new(EXIT_VALIDATION, "invalid_submission", e.to_string()),
                )?)
            };
            let ws = open(cli, BackendRegistry::new(), EnvVars::process())?;
            let sub = ws.submit(content, submitter)?;
            let human = format!("{} pending review", sub.id);
            Ok(Output::new(serde_json::to_value(&sub).unwrap(), human))
        }
        Command::Tests(TestsCommand::List { status }) => {
            let status = match status.as_deref() {
                None | Some("all") => None,
                Some(s) => Some(
                    CaseStatus::parse(s)
                        .ok_or_else(|| Failure::usage(format!("unknown status {s:?}")))?,
                ),
            };
            let ws = open(cli, BackendRegistry::new(), EnvVars::process())?;
            let subs = ws.submissions(status)?;
            let human = subs
                .iter()
                .map(|s| {
                    format!(
                        "{}  {:?}  {:?}  {}",
                        s.id,
                        s.content.kind(),
                        s.status,
                        s.submitter
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Output::new(serde_json::to_value(&subs).unwrap(), human))
        }
        Command::Review(args) => {
            let decision = if args.accept {
                Decision::Accept
            } else {
                Decision::Reject
            };
            let ws = open(cli, BackendRegistry::new(), EnvVars::process())?;
            let sub = ws.review(&args.id, decision, &args.reviewer, &args.reason)?;
            let human = format!("{} {:?}", sub.id, sub.status).to_lowercase();
            Ok(Output::new(serde_json::to_value(&sub).unwrap(), human))
        }
        Command::Eval(EvalCommand::Run {
            parallelism,
            threshold,
            with_stub,
        }) => {
            let stub = if *with_stub {
                Some(
                    StubServer::start_seeded()
                        .map_err(|e| Failure::new(EXIT_RUNTIME, "stub", e.to_string()))?,
                )
            } else {
                None
            };
            let mut env = EnvVars::process();
            if let Some(s) = &stub {
                env = env.set(STUB_URL_VAR, s.url());
            }
            let ws = open(cli, backends(stub.as_ref()), env)?;
            let outcome = ws.run_round_with(*parallelism, *threshold)?;
            let round = &outcome.round;
            let mut human = format!(
                "round {} (suite {})\n",
                round.round_id,
                &round.suite_version[..12]
            );
            for (tool, s) in &round.per_tool {
                human += &format!(
                    "{:<20} pass {:>3}  fail {:>3}  error {:>3}  accuracy {:>6}  availability {:>6}\n",
                    tool,
                    s.n_pass,
                    s.n_fail,
                    s.n_error,
                    fmt_fraction(s.accuracy),
                    fmt_fraction(s.availability)
                );
            }
            Ok(Output::new(
                serde_json::to_value(round).unwrap(),
                human.trim_end(),
            ))
        }
        Command::Report { tool } => {
            let ws = open(cli, BackendRegistry::new(), EnvVars::process())?;
            let report = ws.report()?;
            if let Some(name) = tool {
                let t = report.tool(name).ok_or_else(|| {
                    Failure::new(
                        EXIT_VALIDATION,
                        "not_found",
                        format!("no tool named {name:?}"),
                    )
                })?;
                let human = format!(
                    "{}: {} accuracy {} availability {} over {} case(s), {} open regression(s)",
                    t.name,
                    t.status,
                    fmt_fraction(t.accuracy),
                    fmt_fraction(t.availability),
                    t.suite_size,
                    t.open_regressions.len()
                );
                return Ok(Output::new(serde_json::to_value(t).unwrap(), human));
            }
            let mut human = match report.round_id {
                Some(r) => format!("report as of round {r}\n"),
                None => "no evaluation round yet\n".to_string(),
            };
            for t in &report.tools {
                human += &format!(
                    "{:<20} {:<10} {:<12} accuracy {:>6}  cases {:>3}{}\n",
                    t.name,
                    t.category.to_string(),
                    t.status,
                    fmt_fraction(t.accuracy),
                    t.suite_size,
                    if t.open_regressions.is_empty() {
                        ""
                    } else {
                        "  REGRESSION"
                    }
                );
            }
            let json: Value = serde_json::from_slice(&report.to_bytes()).unwrap();
            Ok(Output::new(json, human.trim_end()))
        }
        Command::Agent(AgentCommand::Run(args)) => agent_run(cli, args),
        Command::Serve(args) => serve(cli, args),
    }
}

fn parse_selection(raw: &str) -> Result<SelectionSpec, Failure> {
    let mut k = None;
    let mut mode = SelectionMode::Lexical;
    for part in raw.split(',').filter(|p| !p.is_empty()) {
        match part.split_once('=') {
            Some(("k", v)) => {
                k = Some(
                    v.parse::<usize>()
                        .map_err(|_| Failure::usage(format!("--select: bad k {v:?}")))?,
                )
            }
            Some(("mode", v)) => {
                mode = SelectionMode::parse(v)
                    .ok_or_else(|| Failure::usage(format!("--select: unknown mode {v:?}")))?
            }
            _ => {
                return Err(Failure::usage(format!(
                    "--select: expected k=K,mode=M, got {part:?}"
                )))
            }
        }
    }
    let k = k.ok_or_else(|| Failure::usage("--select: k is required"))?;
    Ok(SelectionSpec { k, mode })
}

fn agent_run(cli: &Cli, args: &AgentRunArgs) -> Result<Output, Failure> {
    let kind = PolicyKind::parse(&args.policy).ok_or_else(|| {
        let known: Vec<_> = PolicyKind::ALL.iter().map(|k| k.as_str()).collect();
        Failure::usage(format!(
            "unknown policy {:?}; expected one of {}",
            args.policy,
            known.join(", ")
        ))
    })?;
    let mut config = PolicyConfig::new(kind);
    config.max_steps = args.max_steps;
    config.reliability_routing = args.reliability_routing;
    let mut request = AgentRequest::new(&args.query, config);
    request.tool_names = args.tools.clone();
    request.selection = args.select.as_deref().map(parse_selection).transpose()?;
    if let Some(path) = &args.mock_script {
        let script = MockScript::from_json(&read_file(path)?)
            .map_err(|e| Failure::usage(format!("{}: not a mock script: {e}", path.display())))?;
        request.mock_script = Some(script.responses);
        request.policy_config.backend_id = MOCK_BACKEND.into();
    }
    if let Some(b) = &args.backend {
        request.policy_config.backend_id = b.clone();
    }
    let ws = open(cli, BackendRegistry::from_env(), EnvVars::process())?;
    let run = ws.run_agent(&request)?;
    eprintln!("{} {:?} trace {}", run.run_id, run.status, run.trace_ref);
    let mut out = Output::new(serde_json::to_value(&run).unwrap(), run.answer.clone());
    if run.status == RunStatus::Failed {
        let message = run.error.clone().unwrap_or_else(|| "run failed".into());
        out.human = format!("error: {message}");
        out.exit = EXIT_RUNTIME;
    }
    Ok(out)
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<Output, Failure> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| Failure::usage(format!("bad listen address: {e}")))?;
    let stub = if args.with_stub {
        Some(
            StubServer::start_seeded()
                .map_err(|e| Failure::new(EXIT_RUNTIME, "stub", e.to_string()))?,
        )
    } else {
        None
    };
    let mut env = EnvVars::process();
    if let Some(s) = &stub {
        env = env.set(STUB_URL_VAR, s.url());
    }
    let ws = Arc::new(open(cli, backends(stub.as_ref()), env)?);
    let config = ServiceConfig {
        auth_token: args.auth_token.clone(),
        ..ServiceConfig::default()
    };
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| Failure::new(EXIT_RUNTIME, "runtime", e.to_string()))?;
    eprintln!("listening on http://{addr}");
    rt.block_on(service::serve(ws, config, addr))
        .map_err(|e| Failure::new(EXIT_RUNTIME, "serve", e.to_string()))?;
    Ok(Output::new(json!({"stopped": true}), "stopped"))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("OPENTOOLS_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(out) => {
            match cli.format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&out.json).unwrap()),
                Format::Human if out.exit == 0 => {
                    if !out.human.is_empty() {
                        println!("{}", out.human)
                    }
                }
                Format::Human => eprintln!("{}", out.human),
            }
            ExitCode::from(out.exit)
        }
        Err(f) => {
            match cli.format {
                Format::Json => println!(
                    "{}",
                    serde_json::to_string_pretty(&json!({"error": {
                        "code": f.code, "message": f.message, "violations": f.violations
                    }}))
                    .unwrap()
                ),
                Format::Human => {
                    eprintln!("error: {}", f.message);
                    for v in &f.violations {
                        eprintln!("  - {v}");
                    }
                }
            }
            ExitCode::from(f.exit)
        }
    }
}
