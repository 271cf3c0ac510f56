//! Command-line surface of `bloompipe`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bloompipe_core::evaluation::{evaluate_corpus, EvalError, DEFAULT_IOU_THRESHOLD};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::bench::{bench_ingest, BenchPlan};
use crate::client::{score, ClientError, OrchClient, StoreClient};
use crate::ingest::{content_type_for, ingest, IngestError, IngestPlan, Mode, DEFAULT_CONCURRENCY};

pub const DEFAULT_STORE_URL: &str = "http://127.0.0.1:7070";
pub const DEFAULT_ORCH_URL: &str = "http://127.0.0.1:7071";
pub const DEFAULT_DETECTOR_URL: &str = "http://127.0.0.1:7080";

#[derive(Debug, Parser)]
#[command(name = "bloompipe", version, about = "Operate the bloom detection pipeline")]
pub struct Cli {
    #[arg(long, global = true, env = "PIPE_STORE_URL", default_value = DEFAULT_STORE_URL)]
    pub store_url: String,
    #[arg(long, global = true, env = "PIPE_ORCH_URL", default_value = DEFAULT_ORCH_URL)]
    pub orch_url: String,
    #[arg(long, global = true, env = "PIPE_DETECTOR_URL", default_value = DEFAULT_DETECTOR_URL)]
    pub detector_url: String,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Containers and blobs.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Pipeline definitions.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Event and schedule triggers.
    #[command(subcommand)]
    Trigger(TriggerCmd),
    /// Start pipeline runs.
    #[command(subcommand)]
    Run(RunCmd),
    /// Inspect pipeline runs.
    #[command(subcommand)]
    Runs(RunsCmd),
    /// Upload a directory of files into a container.
    Ingest(IngestArgs),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Compute pool.
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Send one image to the detector.
    Detect(DetectArgs),
}

#[derive(Debug, Subcommand)]
pub enum StoreCmd {
    Mkcontainer {
        name: String,
    },
    Put {
        #[arg(long)]
        container: String,
        #[arg(long)]
        path: String,
        file: PathBuf,
        #[arg(long)]
        content_type: Option<String>,
    },
    Get {
        #[arg(long)]
        container: String,
        #[arg(long)]
        path: String,
        /// Write to this file instead of standard output.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    Ls {
        /// Lists containers when omitted.
        #[arg(long)]
        container: Option<String>,
        #[arg(long, default_value = "")]
        prefix: String,
    },
    Rm {
        #[arg(long)]
        container: String,
        #[arg(long)]
        path: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    Apply {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    Ls,
}

#[derive(Debug, Subcommand)]
pub enum TriggerCmd {
    Apply {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    Enable {
        name: String,
    },
    Disable {
        name: String,
    },
    Ls,
}

#[derive(Debug, Subcommand)]
pub enum RunCmd {
    Start {
        pipeline: String,
        /// Run parameter as name=value; repeatable.
        #[arg(short = 'p', long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
        /// Wait until the run is terminal; exit 1 if it failed.
        #[arg(long)]
        wait: bool,
        #[arg(long, default_value_t = 120)]
        timeout_s: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum RunsCmd {
    Ls {
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long, value_parser = ["Queued", "InProgress", "Succeeded", "Failed"])]
        status: Option<String>,
        /// RFC 3339 timestamp.
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        offset: Option<usize>,
    },
    Show {
        run_id: String,
    },
    DeadLetters,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub container: String,
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[arg(long, value_enum, default_value_t = Mode::Async)]
    pub mode: Mode,
    #[arg(long, default_value_t = DEFAULT_CONCURRENCY, value_parser = parse_concurrency)]
    pub concurrency: usize,
    /// Per-request delay for a store running in test mode.
    #[arg(long)]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    Ingest {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        container: String,
        #[arg(long, default_value = "bench/")]
        prefix: String,
        #[arg(long, default_value_t = DEFAULT_CONCURRENCY, value_parser = parse_concurrency)]
        concurrency: usize,
        #[arg(long)]
        latency_ms: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reject predictions for images missing from the ground truth.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum PoolCmd {
    Status,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    pub file: PathBuf,
    #[arg(long, env = "DETECTOR_KEY", hide_env_values = true)]
    pub key: String,
}

fn parse_concurrency(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected name=value, got {s:?}")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("ValidationError:{}", .0.iter().map(|v| format!("\n  - {v}")).collect::<String>())]
    Validation(Vec<String>),
    #[error("{0}")]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Failed(format!("{}: invalid JSON: {e}", path.display())))
}

/// Unpacks a 400 ValidationError body into its list of violations.
fn validation(e: ClientError) -> CliError {
    if let ClientError::Http { body, .. } = &e {
        if body["error"] == "ValidationError" {
            if let Some(list) = body["violations"].as_array() {
                return CliError::Validation(
                    list.iter()
                        .map(|v| v.as_str().unwrap_or_default().to_string())
                        .collect(),
                );
            }
        }
    }
    CliError::Client(e)
}

fn io(e: std::io::Error) -> CliError {
    CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn pretty(out: &mut dyn Write, v: &Value) -> Result<(), CliError> {
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("JSON value")).map_err(io)
}

fn table(out: &mut dyn Write, headers: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(c);
            } else {
                s.push_str(&format!("{c:<w$}  "));
            }
        }
        s.trim_end().to_string()
    };
    writeln!(out, "{}", line(headers.to_vec())).map_err(io)?;
    for r in rows {
        writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).map_err(io)?;
    }
    Ok(())
}

fn s(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub async fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let json_out = cli.json;
    match cli.command {
        Command::Store(cmd) => store_cmd(&StoreClient::new(&cli.store_url)?, cmd, json_out, out).await,
        Command::Pipeline(cmd) => pipeline_cmd(&OrchClient::new(&cli.orch_url)?, cmd, json_out, out).await,
        Command::Trigger(cmd) => trigger_cmd(&OrchClient::new(&cli.orch_url)?, cmd, json_out, out).await,
        Command::Run(cmd) => run_cmd(&OrchClient::new(&cli.orch_url)?, cmd, json_out, out).await,
        Command::Runs(cmd) => runs_cmd(&OrchClient::new(&cli.orch_url)?, cmd, json_out, out).await,
        Command::Ingest(args) => ingest_cmd(&StoreClient::new(&cli.store_url)?, args, json_out, out).await,
        Command::Bench(BenchCmd::Ingest {
            source,
            container,
            prefix,
            concurrency,
            latency_ms,
        }) => {
            let store = StoreClient::new(&cli.store_url)?;
            let plan = BenchPlan {
                source_dir: source,
                container,
                prefix,
                concurrency,
                simulated_latency_ms: latency_ms,
            };
            let report = bench_ingest(&store, &plan).await?;
            if json_out {
                return pretty(out, &serde_json::to_value(&report).expect("report serializes"));
            }
            writeln!(
                out,
                "{} files, {} bytes, concurrency {}",
                report.files, report.total_bytes, report.concurrency
            )
            .map_err(io)?;
            let row = |name: &str, t: &crate::bench::ModeTiming| {
                vec![
                    name.to_string(),
                    format!("{:.3}", t.wall_time_s),
                    format!("{:.1}", t.files_per_s),
                    format!("{:.0}", t.bytes_per_s),
                    t.failed.to_string(),
                    t.max_in_flight.map_or("-".into(), |m| m.to_string()),
                ]
            };
            table(
                out,
                &["MODE", "WALL_S", "FILES/S", "BYTES/S", "FAILED", "MAX_IN_FLIGHT"],
                &[row("sync", &report.sync), row("async", &report.async_)],
            )?;
            writeln!(out, "speedup {:.2}x", report.speedup).map_err(io)
        }
        Command::Eval(args) => {
            let report = evaluate_corpus(&args.pred, &args.gt, args.iou, args.strict, args.out.as_deref())?;
            if json_out {
                return pretty(out, &serde_json::to_value(&report).expect("report serializes"));
            }
            table(
                out,
                &["IOU", "TP", "FP", "FN", "PRECISION", "RECALL", "F1", "AP"],
                &[vec![
                    format!("{}", report.iou_threshold),
                    report.tp.to_string(),
                    report.fp.to_string(),
                    report.fn_.to_string(),
                    format!("{:.4}", report.precision),
                    format!("{:.4}", report.recall),
                    format!("{:.4}", report.f1),
                    format!("{:.4}", report.ap),
                ]],
            )
        }
        Command::Pool(PoolCmd::Status) => {
            let v = OrchClient::new(&cli.orch_url)?.get(&["v1", "pool"], &[]).await?;
            if json_out {
                return pretty(out, &v);
            }
            table(
                out,
                &[
                    "PHASE",
                    "WORKERS",
                    "QUEUED",
                    "RUNNING",
                    "PEAK",
                    "COLD_STARTS",
                    "LAST_ACTIVITY",
                ],
                &[vec![
                    s(&v["phase"]),
                    s(&v["active_workers"]),
                    s(&v["queued_tasks"]),
                    s(&v["running_tasks"]),
                    s(&v["peak_workers"]),
                    s(&v["cold_starts"]),
                    s(&v["last_activity_at"]),
                ]],
            )
        }
        Command::Detect(args) => {
            let image = read(&args.file)?;
            let name = args
                .file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let v = score(&cli.detector_url, &args.key, &name, image).await?;
            if json_out {
                return pretty(out, &v);
            }
            let rows: Vec<Vec<String>> = v["boxes"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|d| {
                    let b = &d["box"];
                    vec![
                        s(&d["label"]),
                        s(&d["score"]),
                        s(&b["topX"]),
                        s(&b["topY"]),
                        s(&b["bottomX"]),
                        s(&b["bottomY"]),
                    ]
                })
                .collect();
            table(
                out,
                &["LABEL", "SCORE", "TOP_X", "TOP_Y", "BOTTOM_X", "BOTTOM_Y"],
                &rows,
            )
        }
    }
}

async fn store_cmd(store: &StoreClient, cmd: StoreCmd, json_out: bool, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        StoreCmd::Mkcontainer { name } => {
            store.create_container(&name).await?;
            if json_out {
                pretty(out, &json!({"name": name}))
            } else {
                writeln!(out, "created container {name}").map_err(io)
            }
        }
        StoreCmd::Put {
            container,
            path,
            file,
            content_type,
        } => {
            let bytes = read(&file)?;
            let ct = content_type.unwrap_or_else(|| content_type_for(&file).to_string());
            let r = store.put_blob(&container, &path, bytes, &ct, None).await?;
            if json_out {
                pretty(
                    out,
                    &json!({"container": r.container, "path": r.path, "size": r.size, "version": r.version}),
                )
            } else {
                writeln!(
                    out,
                    "{}/{} version {} ({} bytes)",
                    r.container, r.path, r.version, r.size
                )
                .map_err(io)
            }
        }
        StoreCmd::Get {
            container,
            path,
            out: to,
        } => {
            let bytes = store.get_blob(&container, &path).await?;
            match to {
                Some(p) => std::fs::write(&p, bytes).map_err(|source| CliError::Io { path: p, source }),
                None => out.write_all(&bytes).map_err(io),
            }
        }
        StoreCmd::Ls { container: None, .. } => {
            let names = store.list_containers().await?;
            if json_out {
                return pretty(out, &json!(names));
            }
            for n in names {
                writeln!(out, "{n}").map_err(io)?;
            }
            Ok(())
        }
        StoreCmd::Ls {
            container: Some(c),
            prefix,
        } => {
            let blobs = store.list_blobs(&c, &prefix).await?;
            if json_out {
                return pretty(out, &Value::Array(blobs));
            }
            let rows: Vec<Vec<String>> = blobs
                .iter()
                .map(|b| {
                    vec![
                        s(&b["path"]),
                        s(&b["size"]),
                        s(&b["version"]),
                        s(&b["content_type"]),
                        s(&b["created_at"]),
                    ]
                })
                .collect();
            table(out, &["PATH", "SIZE", "VERSION", "CONTENT_TYPE", "CREATED_AT"], &rows)
        }
        StoreCmd::Rm { container, path } => {
            store.delete_blob(&container, &path).await?;
            if json_out {
                pretty(out, &json!({"deleted": format!("{container}/{path}")}))
            } else {
                writeln!(out, "deleted {container}/{path}").map_err(io)
            }
        }
    }
}

async fn pipeline_cmd(
    orch: &OrchClient,
    cmd: PipelineCmd,
    json_out: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    match cmd {
        PipelineCmd::Apply { file } => {
            let def = read_json(&file)?;
            let v = orch.post(&["v1", "pipelines"], &def).await.map_err(validation)?;
            if json_out {
                pretty(out, &v)
            } else {
                writeln!(out, "applied pipeline {}", s(&v["name"])).map_err(io)
            }
        }
        PipelineCmd::Ls => {
            let v = orch.get(&["v1", "pipelines"], &[]).await?;
            if json_out {
                return pretty(out, &v);
            }
            let rows: Vec<Vec<String>> = v
                .as_array()
                .into_iter()
                .flatten()
                .map(|p| {
                    let acts: Vec<String> = p["activities"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .map(|a| format!("{}:{}", s(&a["name"]), s(&a["kind"])))
                        .collect();
                    let params: Vec<String> = p["parameters"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .map(|x| s(&x["name"]))
                        .collect();
                    vec![s(&p["name"]), params.join(","), acts.join(" -> ")]
                })
                .collect();
            table(out, &["NAME", "PARAMETERS", "ACTIVITIES"], &rows)
        }
    }
}

fn trigger_rows(list: &[Value]) -> Vec<Vec<String>> {
    list.iter()
        .map(|t| {
            let source = match s(&t["kind"]).as_str() {
                "Event" => {
                    let f = &t["event_filter"];
                    format!(
                        "{}/{}*{}",
                        s(&f["container"]),
                        f["prefix"].as_str().unwrap_or(""),
                        f["suffix"].as_str().unwrap_or("")
                    )
                }
                _ => s(&t["cron"]),
            };
            vec![
                s(&t["name"]),
                s(&t["kind"]),
                s(&t["pipeline"]),
                source,
                s(&t["enabled"]),
                s(&t["next_fire"]),
                s(&t["runs_started"]),
            ]
        })
        .collect()
}

const TRIGGER_HEADERS: [&str; 7] = ["NAME", "KIND", "PIPELINE", "SOURCE", "ENABLED", "NEXT_FIRE", "RUNS"];

async fn trigger_cmd(orch: &OrchClient, cmd: TriggerCmd, json_out: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let v = match cmd {
        TriggerCmd::Apply { file } => {
            let spec = read_json(&file)?;
            orch.post(&["v1", "triggers"], &spec).await?
        }
        TriggerCmd::Enable { name } => orch.post(&["v1", "triggers", &name, "enable"], &json!({})).await?,
        TriggerCmd::Disable { name } => orch.post(&["v1", "triggers", &name, "disable"], &json!({})).await?,
        TriggerCmd::Ls => {
            let v = orch.get(&["v1", "triggers"], &[]).await?;
            if json_out {
                return pretty(out, &v);
            }
            let list = v.as_array().cloned().unwrap_or_default();
            return table(out, &TRIGGER_HEADERS, &trigger_rows(&list));
        }
    };
    if json_out {
        pretty(out, &v)
    } else {
        table(out, &TRIGGER_HEADERS, &trigger_rows(&[v]))
    }
}

async fn run_cmd(orch: &OrchClient, cmd: RunCmd, json_out: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let RunCmd::Start {
        pipeline,
        params,
        wait,
        timeout_s,
    } = cmd;
    let params: BTreeMap<String, String> = params.into_iter().collect();
    let v = orch
        .post(&["v1", "pipelines", &pipeline, "runs"], &json!({"parameters": params}))
        .await?;
    let run_id = s(&v["run_id"]);
    if !wait {
        return if json_out {
            pretty(out, &v)
        } else {
            writeln!(out, "{run_id}").map_err(io)
        };
    }
    let deadline = Instant::now() + Duration::from_secs(timeout_s);
    let run = loop {
        let run = orch.get(&["v1", "runs", &run_id], &[]).await?;
        if run["status"] == "Succeeded" || run["status"] == "Failed" {
            break run;
        }
        if Instant::now() >= deadline {
            return Err(CliError::Failed(format!(
                "run {run_id} still {} after {timeout_s} s",
                s(&run["status"])
            )));
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    show_run(&run, json_out, out)?;
    if run["status"] == "Failed" {
        return Err(CliError::Failed(format!("run {run_id} failed: {}", s(&run["error"]))));
    }
    Ok(())
}

fn show_run(run: &Value, json_out: bool, out: &mut dyn Write) -> Result<(), CliError> {
    if json_out {
        return pretty(out, run);
    }
    writeln!(out, "run        {}", s(&run["run_id"])).map_err(io)?;
    writeln!(out, "pipeline   {}", s(&run["pipeline"])).map_err(io)?;
    writeln!(out, "status     {}", s(&run["status"])).map_err(io)?;
    writeln!(out, "trigger    {}", trigger_label(&run["trigger"])).map_err(io)?;
    writeln!(out, "parameters {}", run["parameters"]).map_err(io)?;
    writeln!(out, "created    {}", s(&run["created_at"])).map_err(io)?;
    writeln!(out, "ended      {}", s(&run["ended_at"])).map_err(io)?;
    if !run["error"].is_null() {
        writeln!(out, "error      {}", s(&run["error"])).map_err(io)?;
    }
    let rows: Vec<Vec<String>> = run["activities"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|a| {
            vec![
                s(&a["name"]),
                s(&a["kind"]),
                s(&a["status"]),
                s(&a["attempts"]),
                s(&a["started_at"]),
                s(&a["ended_at"]),
                s(&a["error"]),
            ]
        })
        .collect();
    writeln!(out).map_err(io)?;
    table(
        out,
        &["ACTIVITY", "KIND", "STATUS", "ATTEMPTS", "STARTED", "ENDED", "ERROR"],
        &rows,
    )
}

fn trigger_label(t: &Value) -> String {
    match t["trigger"].as_str() {
        Some(name) => format!("{}:{name}", s(&t["kind"])),
        None => s(&t["kind"]),
    }
}

async fn runs_cmd(orch: &OrchClient, cmd: RunsCmd, json_out: bool, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        RunsCmd::Ls {
            pipeline,
            status,
            since,
            limit,
            offset,
        } => {
            let mut q = Vec::new();
            q.extend(pipeline.map(|v| ("pipeline", v)));
            q.extend(status.map(|v| ("status", v)));
            q.extend(since.map(|v| ("since", v)));
            q.extend(limit.map(|v| ("limit", v.to_string())));
            q.extend(offset.map(|v| ("offset", v.to_string())));
            let v = orch.get(&["v1", "runs"], &q).await?;
            if json_out {
                return pretty(out, &v);
            }
            let rows: Vec<Vec<String>> = v["runs"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|r| {
                    vec![
                        s(&r["run_id"]),
                        s(&r["pipeline"]),
                        s(&r["status"]),
                        trigger_label(&r["trigger"]),
                        s(&r["created_at"]),
                        s(&r["error"]),
                    ]
                })
                .collect();
            table(
                out,
                &["RUN_ID", "PIPELINE", "STATUS", "TRIGGER", "CREATED", "ERROR"],
                &rows,
            )
        }
        RunsCmd::Show { run_id } => {
            let run = orch.get(&["v1", "runs", &run_id], &[]).await?;
            show_run(&run, json_out, out)
        }
        RunsCmd::DeadLetters => {
            let v = orch.get(&["v1", "dead-letters"], &[]).await?;
            if json_out {
                return pretty(out, &v);
            }
            let rows: Vec<Vec<String>> = v
                .as_array()
                .into_iter()
                .flatten()
                .map(|d| {
                    vec![
                        s(&d["event_id"]),
                        s(&d["subscription_id"]),
                        format!("{}/{}", s(&d["event"]["container"]), s(&d["event"]["path"])),
                        s(&d["attempts"]),
                        s(&d["last_error"]),
                    ]
                })
                .collect();
            table(
                out,
                &["EVENT_ID", "SUBSCRIPTION", "BLOB", "ATTEMPTS", "LAST_ERROR"],
                &rows,
            )
        }
    }
}

async fn ingest_cmd(
    store: &StoreClient,
    args: IngestArgs,
    json_out: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let plan = IngestPlan {
        mode: args.mode,
        concurrency: args.concurrency,
        source_dir: args.source,
        container: args.container,
        prefix: args.prefix,
        simulated_latency_ms: args.latency_ms,
    };
    let summary = ingest(store, &plan).await?;
    if json_out {
        pretty(out, &serde_json::to_value(&summary).expect("summary serializes"))?;
    } else {
        for r in &summary.results {
            if let crate::ingest::FileStatus::Failed { reason } = &r.status {
                writeln!(out, "FAILED {} -> {}: {reason}", r.file, r.path).map_err(io)?;
            }
        }
        writeln!(
            out,
            "{} files ({} bytes) into {} in {:.3} s, {} succeeded, {} failed",
            summary.files, summary.bytes, summary.container, summary.wall_time_s, summary.succeeded, summary.failed
        )
        .map_err(io)?;
    }
    if summary.failed > 0 {
        return Err(CliError::Failed(format!(
            "{} of {} uploads failed",
            summary.failed, summary.files
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_tree_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn params_and_defaults() {
        let cli = Cli::try_parse_from([
            "bloompipe",
            "run",
            "start",
            "bloom-detect",
            "-p",
            "folder=stream",
            "-p",
            "file=a=b.jpg",
        ])
        .unwrap();
        match cli.command {
            Command::Run(RunCmd::Start { params, wait, .. }) => {
                assert_eq!(
                    params,
                    vec![("folder".into(), "stream".into()), ("file".into(), "a=b.jpg".into())]
                );
                assert!(!wait);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["bloompipe", "run", "start", "p", "-p", "novalue"]).is_err());
        let cli = Cli::try_parse_from(["bloompipe", "ingest", "--source", "d", "--container", "c"]).unwrap();
        match cli.command {
            Command::Ingest(a) => {
                assert_eq!(a.mode, Mode::Async);
                assert_eq!(a.concurrency, 64);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from([
            "bloompipe",
            "ingest",
            "--source",
            "d",
            "--container",
            "c",
            "--concurrency",
            "0"
        ])
        .is_err());
        assert!(Cli::try_parse_from(["bloompipe", "runs", "ls", "--status", "Sideways"]).is_err());
    }

    #[test]
    fn tables_align() {
        let mut buf = Vec::new();
        table(&mut buf, &["A", "BB"], &[vec!["xxx".into(), "y".into()]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "A    BB\nxxx  y\n");
    }
}
