//! `beamline` command-line client.
//!
//! [`run`] takes argv plus output sinks and returns the process exit code:
//! 0 on success, 1 when the server reports an error (its code is printed),
//! 2 for usage and connection errors.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use beamline_core::command::{
    BuildFitArgs, Command, EnergyArgs, FaultArgs, FitReportArgs, MonoParam, MonoParamArgs,
    MoveArgs, ScanArgs, SinceArgs, UnitArgs,
};
use beamline_core::hardware::{UnitKind, UnitSnapshot, UnitState};
use beamline_core::protocol::client::{Client, SessionMode};
use beamline_core::protocol::DEFAULT_PORT;
use beamline_core::scan::{to_csv, ScanPoint, CSV_HEADER};
use beamline_core::{ErrorCode, PositionMode, ServerError, StateSnapshot};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SERVER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// How often `move --wait` and `scan` poll the server.
const POLL: Duration = Duration::from_millis(25);

#[derive(Parser, Debug)]
#[command(
    name = "beamline",
    version,
    about = "Control client for the beamline device server"
)]
pub struct Cli {
    /// Device server host.
    #[arg(
        long,
        global = true,
        env = "BEAMLINE_HOST",
        default_value = "127.0.0.1"
    )]
    pub host: String,
    /// Device server port.
    #[arg(long, global = true, env = "BEAMLINE_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Connection discipline: one persistent session, or one connection per request.
    #[arg(long, global = true, value_enum, default_value_t = Mode::Static)]
    pub session: Mode,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Static,
    Dynamic,
}

impl From<Mode> for SessionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Static => SessionMode::Static,
            Mode::Dynamic => SessionMode::Dynamic,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Static,
    Dynamic,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalcMode {
    Realtime,
    Fit,
}

impl From<CalcMode> for PositionMode {
    fn from(m: CalcMode) -> Self {
        match m {
            CalcMode::Realtime => PositionMode::Realtime,
            CalcMode::Fit => PositionMode::Fit,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Show every unit, the energy and the scan state.
    Status {
        /// Print the snapshot object as returned by the server.
        #[arg(long)]
        json: bool,
    },
    /// Move a motor to an absolute (or relative) step position.
    #[command(allow_negative_numbers = true)]
    Move {
        unit: String,
        steps: i64,
        #[arg(long)]
        rel: bool,
        /// Return only once the motor has stopped.
        #[arg(long)]
        wait: bool,
    },
    /// Drive both monochromator axes to a photon energy (eV).
    Energy {
        e_ev: f64,
        #[arg(long, value_enum, default_value_t = CalcMode::Realtime)]
        mode: CalcMode,
        #[arg(long)]
        wait: bool,
    },
    /// Build or inspect the cubic fit tables.
    #[command(subcommand)]
    Fit(FitCmd),
    /// Run an energy scan, printing points as CSV rows as they arrive.
    Scan(ScanCmd),
    /// Abort the running scan.
    Abort,
    /// `fault <unit> <code>` injects a fault; `fault clear <unit>` clears it.
    Fault {
        unit_or_clear: String,
        code_or_unit: String,
        /// Encoder slip size, for `slip` faults.
        #[arg(long, allow_negative_numbers = true)]
        counts: Option<i64>,
    },
    /// Time N calls under each connection discipline.
    Bench {
        #[arg(long, default_value_t = 500)]
        calls: usize,
        #[arg(long, value_enum, default_value_t = BenchMode::Both)]
        mode: BenchMode,
    },
    /// Change a monochromator parameter (c, k, N or hc).
    #[command(subcommand)]
    Param(ParamCmd),
    /// Send any op with optional JSON args and print the result.
    Call { op: String, args: Option<String> },
    /// Run subcommands from a file (or `-` for stdin), one per line, over one client.
    Batch { file: PathBuf },
}

#[derive(Subcommand, Debug)]
pub enum FitCmd {
    Build {
        e_lo: f64,
        e_hi: f64,
        n: usize,
    },
    Report {
        #[arg(long, default_value_t = FitReportArgs::default().n_probe)]
        n_probe: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum ParamCmd {
    Set { name: String, value: f64 },
}

#[derive(Args, Debug)]
pub struct ScanCmd {
    pub start: f64,
    pub end: f64,
    #[arg(long)]
    pub step: Option<f64>,
    /// Detector integration per point (s).
    #[arg(long)]
    pub dwell: Option<f64>,
    #[arg(long)]
    pub settle: Option<f64>,
    #[arg(long, value_enum, default_value_t = CalcMode::Realtime)]
    pub mode: CalcMode,
    /// Write the received points to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ask the server to persist its own CSV at this path (server filesystem).
    #[arg(long)]
    pub persist: Option<String>,
}

/// A line of a batch file: any subcommand without global flags.
#[derive(Parser, Debug)]
#[command(name = "batch line", no_binary_name = true)]
struct BatchLine {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug)]
enum Failure {
    Server(ServerError),
    /// Ended without a server error but not as asked (an aborted scan).
    Incomplete(String),
    Usage(String),
}

impl From<ServerError> for Failure {
    fn from(e: ServerError) -> Self {
        Failure::Server(e)
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Server(e) if e.code == ErrorCode::Conn => EXIT_USAGE,
            Failure::Server(_) | Failure::Incomplete(_) => EXIT_SERVER,
            Failure::Usage(_) => EXIT_USAGE,
        }
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    let mut client = Client::new(cli.host.clone(), cli.port, cli.session.into());
    let result = execute(&cli, &cli.cmd, &mut client, out);
    client.close();
    report(result, err)
}

fn report(result: Outcome, err: &mut dyn Write) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Server(e) => {
                    let _ = writeln!(err, "{}: {}", e.code.as_str(), e.message);
                }
                Failure::Usage(m) | Failure::Incomplete(m) => {
                    let _ = writeln!(err, "{m}");
                }
            }
            f.exit_code()
        }
    }
}

fn print_json(out: &mut dyn Write, v: &Value) {
    let _ = writeln!(out, "{}", serde_json::to_string(v).expect("json"));
}

fn execute(cli: &Cli, cmd: &Cmd, client: &mut Client, out: &mut dyn Write) -> Outcome {
    match cmd {
        Cmd::Status { json } => {
            let snap = client.call(&Command::Snapshot)?;
            if *json {
                print_json(out, &snap);
            } else {
                let snap: StateSnapshot = serde_json::from_value(snap).map_err(|e| {
                    ServerError::new(ErrorCode::Parse, format!("unexpected snapshot: {e}"))
                })?;
                let _ = write!(out, "{}", render_status(&snap));
            }
        }
        Cmd::Move {
            unit,
            steps,
            rel,
            wait,
        } => {
            let args = MoveArgs {
                unit: unit.clone(),
                steps: *steps,
            };
            let res = client.call(&if *rel {
                Command::MoveRel(args)
            } else {
                Command::MoveAbs(args)
            })?;
            if *wait {
                let state = wait_idle(client, unit)?;
                print_json(out, &state);
            } else {
                print_json(out, &res);
            }
        }
        Cmd::Energy { e_ev, mode, wait } => {
            let res = client.call(&Command::SetEnergy(EnergyArgs {
                e_ev: *e_ev,
                mode: (*mode).into(),
                wait: *wait,
            }))?;
            print_json(out, &res);
        }
        Cmd::Fit(FitCmd::Build { e_lo, e_hi, n }) => {
            print_json(
                out,
                &client.call(&Command::BuildFit(BuildFitArgs {
                    e_lo: *e_lo,
                    e_hi: *e_hi,
                    n: *n,
                }))?,
            );
        }
        Cmd::Fit(FitCmd::Report { n_probe }) => {
            print_json(
                out,
                &client.call(&Command::FitReport(FitReportArgs { n_probe: *n_probe }))?,
            );
        }
        Cmd::Scan(s) => scan(client, s, out)?,
        Cmd::Abort => print_json(out, &client.call(&Command::AbortScan)?),
        Cmd::Fault {
            unit_or_clear,
            code_or_unit,
            counts,
        } => {
            let res = if unit_or_clear == "clear" {
                client.call(&Command::ClearFault(UnitArgs {
                    unit: code_or_unit.clone(),
                }))?
            } else {
                client.call(&Command::InjectFault(FaultArgs {
                    unit: unit_or_clear.clone(),
                    code: code_or_unit.clone(),
                    counts: *counts,
                }))?
            };
            print_json(out, &res);
        }
        Cmd::Bench { calls, mode } => bench(&cli.host, cli.port, *calls, *mode, out)?,
        Cmd::Param(ParamCmd::Set { name, value }) => {
            let name: MonoParam = name.parse().map_err(Failure::Usage)?;
            print_json(
                out,
                &client.call(&Command::SetMonoParam(MonoParamArgs {
                    name,
                    value: *value,
                }))?,
            );
        }
        Cmd::Call { op, args } => {
            let args = match args {
                None => None,
                Some(text) => match serde_json::from_str::<Value>(text) {
                    Ok(Value::Object(m)) => Some(m),
                    _ => {
                        return Err(Failure::Usage(format!(
                            "args must be a JSON object, got: {text}"
                        )))
                    }
                },
            };
            let resp = client.call_raw(op, args)?;
            print_json(out, &Value::Object(resp.outcome?));
        }
        Cmd::Batch { file } => batch(cli, file, client, out)?,
    }
    Ok(())
}

fn batch(cli: &Cli, file: &PathBuf, client: &mut Client, out: &mut dyn Write) -> Outcome {
    let reader: Box<dyn BufRead> = if file.as_os_str() == "-" {
        Box::new(std::io::stdin().lock())
    } else {
        let f = std::fs::File::open(file)
            .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", file.display())))?;
        Box::new(std::io::BufReader::new(f))
    };
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Failure::Usage(format!("cannot read batch: {e}")))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parsed = BatchLine::try_parse_from(line.split_whitespace())
            .map_err(|e| Failure::Usage(format!("batch line {}: {}", n + 1, e.render())))?;
        if matches!(parsed.cmd, Cmd::Batch { .. }) {
            return Err(Failure::Usage(format!(
                "batch line {}: nested batch",
                n + 1
            )));
        }
        execute(cli, &parsed.cmd, client, out)?;
    }
    Ok(())
}

fn wait_idle(client: &mut Client, unit: &str) -> Result<Value, ServerError> {
    let cmd = Command::UnitState(UnitArgs {
        unit: unit.to_string(),
    });
    loop {
        let state = client.call(&cmd)?;
        if state["state"] != "Moving" {
            return Ok(state);
        }
        std::thread::sleep(POLL);
    }
}

fn csv_row(p: &ScanPoint) -> String {
    let mut row = to_csv(std::slice::from_ref(p));
    row.drain(..CSV_HEADER.len() + 1);
    row
}

fn scan(client: &mut Client, s: &ScanCmd, out: &mut dyn Write) -> Outcome {
    let started = client.call(&Command::StartScan(ScanArgs {
        e_start: s.start,
        e_end: s.end,
        step: s.step,
        dwell_s: s.dwell,
        settle_s: s.settle,
        mode: s.mode.into(),
        output: s.persist.clone(),
    }))?;
    let scan_id = started["scan_id"].as_u64();
    let _ = writeln!(out, "{CSV_HEADER}");
    let mut points: Vec<ScanPoint> = Vec::new();
    let status = loop {
        let res = client.call(&Command::ScanPoints(SinceArgs {
            since: points.len(),
        }))?;
        if res["scan_id"].as_u64() != scan_id {
            return Err(
                ServerError::new(ErrorCode::Internal, "scan replaced while streaming").into(),
            );
        }
        let batch: Vec<ScanPoint> = serde_json::from_value(res["points"].clone())
            .map_err(|e| ServerError::new(ErrorCode::Parse, format!("unexpected points: {e}")))?;
        for p in batch {
            let _ = write!(out, "{}", csv_row(&p));
            points.push(p);
        }
        let _ = out.flush();
        let state = res["status"]["state"].as_str().unwrap_or("");
        // Points and status come from the same reply, so none can be missed here.
        if !matches!(state, "running" | "idle") {
            break res["status"].clone();
        }
        std::thread::sleep(POLL);
    };
    if let Some(path) = &s.out {
        std::fs::write(path, to_csv(&points)).map_err(|e| {
            ServerError::new(
                ErrorCode::Io,
                format!("cannot write {}: {e}", path.display()),
            )
        })?;
    }
    match status["state"].as_str() {
        Some("done") => Ok(()),
        Some("failed") => Err(ServerError::new(
            ErrorCode::parse(status["code"].as_str().unwrap_or("")).unwrap_or(ErrorCode::Internal),
            format!("scan failed at point {}", status["at"]),
        )
        .into()),
        _ => Err(Failure::Incomplete(format!(
            "scan aborted at point {}",
            status["at"]
        ))),
    }
}

/// Timing of one bench run.
#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub calls: usize,
    pub total_ms: f64,
}

/// Times `calls` ping round trips using `mode`.
pub fn bench_mode(
    host: &str,
    port: u16,
    calls: usize,
    mode: SessionMode,
) -> Result<BenchResult, ServerError> {
    let mut client = Client::new(host, port, mode);
    let start = Instant::now();
    for _ in 0..calls {
        client.call(&Command::Ping)?;
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    client.close();
    Ok(BenchResult { calls, total_ms })
}

fn bench(host: &str, port: u16, calls: usize, mode: BenchMode, out: &mut dyn Write) -> Outcome {
    let modes: &[(&str, SessionMode)] = match mode {
        BenchMode::Static => &[("static", SessionMode::Static)],
        BenchMode::Dynamic => &[("dynamic", SessionMode::Dynamic)],
        BenchMode::Both => &[
            ("dynamic", SessionMode::Dynamic),
            ("static", SessionMode::Static),
        ],
    };
    let mut totals = Vec::new();
    for (label, m) in modes {
        let r = bench_mode(host, port, calls, *m)?;
        let _ = writeln!(
            out,
            "{label:<8} {} calls  total {:.1} ms  {:.3} ms/call",
            r.calls,
            r.total_ms,
            r.total_ms / r.calls.max(1) as f64
        );
        totals.push(r.total_ms);
    }
    if let [dynamic, stat] = totals[..] {
        let _ = writeln!(out, "static is {:.1}x faster", dynamic / stat);
    }
    Ok(())
}

fn state_cell(u: &UnitSnapshot) -> String {
    match u.state {
        UnitState::Fault => format!("FAULT({})", u.fault_code.as_deref().unwrap_or("?")),
        s => s.as_str().to_uppercase(),
    }
}

fn kind_cell(k: UnitKind) -> &'static str {
    match k {
        UnitKind::Motor => "motor",
        UnitKind::Encoder => "encoder",
        UnitKind::Detector => "detector",
    }
}

fn value_cell(u: &UnitSnapshot) -> String {
    match (u.position, u.reading) {
        (Some(p), _) => p.to_string(),
        (None, Some(r)) => r.to_string(),
        (None, None) => "-".into(),
    }
}

/// Unit table sorted by name. Identical snapshots render identically.
pub fn render_table(snapshot: &StateSnapshot) -> String {
    let mut units: Vec<&UnitSnapshot> = snapshot.units.iter().collect();
    units.sort_by(|a, b| a.name.cmp(&b.name));
    let rows: Vec<[String; 4]> = units
        .iter()
        .map(|u| {
            [
                u.name.clone(),
                kind_cell(u.kind).to_string(),
                state_cell(u),
                value_cell(u),
            ]
        })
        .collect();
    let header = ["NAME", "KIND", "STATE", "POSITION/READING"];
    let mut width = header.map(str::len);
    for r in &rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 4]| {
        let text = format!(
            "{:<a$}  {:<b$}  {:<c$}  {}",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            a = width[0],
            b = width[1],
            c = width[2]
        );
        out.push_str(text.trim_end());
        out.push('\n');
    };
    line(header);
    for r in &rows {
        line([&r[0], &r[1], &r[2], &r[3]]);
    }
    out
}

fn render_status(snap: &StateSnapshot) -> String {
    let energy = snap
        .energy_ev
        .map_or("-".to_string(), |e| format!("{e} eV"));
    let fits = serde_json::to_value(snap.fits)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    let mut scan = snap.scan.status.label().to_string();
    if let Some(id) = snap.scan.scan_id {
        scan = format!("#{id} {scan}, {} points", snap.scan.points);
    }
    format!(
        "server {}  energy {}  mode {}  fits {}  scan {}\n{}",
        snap.server,
        energy,
        snap.mode.as_str(),
        fits,
        scan,
        render_table(snap)
    )
}
