use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::Args;
use humantool_core::orchestrator::{run_to_completion, Mode, ResponseScript, Session, SessionConfig};
use humantool_core::planner::{LlmEndpointConfig, LlmPlanner, Planner, ScriptedPlan, ScriptedPlanner};
use humantool_core::store::{events_path, session_dir, ActivationReport, FsyncPolicy, LogWriter};
use humantool_core::taskgraph::NodeStatus;

use crate::{pretty, profile, read_json, write_file, CliResult, Ctx, Failure, PlannerKind};

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub profile: PathBuf,
    /// Scripted plan (goal pattern, tree, node outputs).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Scripted human responses.
    #[arg(long)]
    pub responses: PathBuf,
    /// human-tool or ai-only.
    #[arg(long, default_value = "human-tool")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "scripted")]
    pub planner: PlannerKind,
    /// Endpoint config JSON for `--planner llm`.
    #[arg(long)]
    pub endpoint: Option<PathBuf>,
    /// Goal text; defaults to the scenario's goal.
    #[arg(long)]
    pub goal: Option<String>,
    #[arg(long, default_value = "run")]
    pub session_id: String,
    /// Virtual clock start (RFC 3339); defaults to now.
    #[arg(long)]
    pub start: Option<DateTime<Utc>>,
}

pub fn census_line(census: &BTreeMap<NodeStatus, usize>) -> String {
    census.iter().filter(|(_, n)| **n > 0).map(|(s, n)| format!("{} {n}", serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())).collect::<Vec<_>>().join(", ")
}

/// Planner chosen on the command line, plus the goal it should work on.
pub fn build_planner(
    ctx: &Ctx,
    kind: PlannerKind,
    scenario: Option<&PathBuf>,
    endpoint: Option<&PathBuf>,
) -> Result<(Box<dyn Planner>, Option<String>), Failure> {
    match kind {
        PlannerKind::Scripted => {
            let path = scenario.ok_or_else(|| Failure::usage("--planner scripted needs --scenario"))?;
            let plan: ScriptedPlan = read_json(&ctx.path(path))?;
            let goal = plan.goal_pattern.clone();
            Ok((Box::new(ScriptedPlanner::new(plan)), Some(goal)))
        }
        PlannerKind::Llm => {
            let path = endpoint.ok_or_else(|| Failure::usage("--planner llm needs --endpoint"))?;
            let config: LlmEndpointConfig = read_json(&ctx.path(path))?;
            let goal = match scenario {
                Some(p) => Some(read_json::<ScriptedPlan>(&ctx.path(p))?.goal_pattern),
                None => None,
            };
            Ok((Box::new(LlmPlanner::new(config).map_err(Failure::usage)?), goal))
        }
    }
}

pub fn run(ctx: &Ctx, args: &RunArgs) -> CliResult {
    let profile = profile::load(ctx, &args.profile)?;
    let (planner, scenario_goal) = build_planner(ctx, args.planner, args.scenario.as_ref(), args.endpoint.as_ref())?;
    let goal = args.goal.clone().or(scenario_goal).ok_or_else(|| Failure::usage("no goal: pass --goal or --scenario"))?;
    let mut script: ResponseScript = read_json(&ctx.path(&args.responses))?;
    let log_path = events_path(&ctx.workdir, &args.session_id);
    if log_path.exists() {
        return Err(Failure::usage(format!("{} already exists; pick another --session-id", log_path.display())));
    }
    let start = args.start.unwrap_or_else(Utc::now);

    let mut session = Session::start(&args.session_id, profile, &goal, planner.as_ref(), SessionConfig::with_mode(args.mode), start)
        .map_err(|e| Failure::Domain(format!("session could not start: {e}")))?;
    let outcome = run_to_completion(&mut session, planner.as_ref(), &mut script, start);

    // The log is written even when the run stopped early.
    let mut writer = LogWriter::open(&ctx.workdir, &args.session_id, FsyncPolicy::OnSnapshot).map_err(Failure::usage)?;
    writer.sync_from(session.log()).map_err(Failure::usage)?;
    writer.write_snapshot(session.state()).map_err(Failure::usage)?;
    let report = ActivationReport::from_events(session.log().events());
    let report_path = session_dir(&ctx.workdir, &args.session_id).join("report.json");
    write_file(&report_path, &pretty(&report))?;

    let summary = outcome.map_err(|e| Failure::Domain(format!("session stopped: {e}")))?;
    if ctx.json {
        let out = serde_json::json!({ "summary": summary, "log": log_path, "report": report_path });
        print!("{}", pretty(&out));
    } else {
        println!("session {}: {}", summary.session_id, if session.is_terminal() { "ending" } else { "not finished" });
        println!("census: {}", census_line(&summary.census));
        println!(
            "human invocations {}, calls issued {}, ai executions {}",
            summary.human_invocations, summary.calls_issued, summary.ai_executions
        );
        let failed = if summary.failed_authority_nodes.is_empty() { "none".to_string() } else { summary.failed_authority_nodes.join(", ") };
        println!("failed authority nodes: {failed}");
        println!("state hash {}", summary.state_hash);
        println!("log: {}", log_path.display());
        println!("report: {}", report_path.display());
    }
    if !session.is_terminal() {
        return Err(Failure::Domain("session did not reach ending".into()));
    }
    if !summary.failed_authority_nodes.is_empty() {
        return Err(Failure::Domain(format!("authority nodes failed: {}", summary.failed_authority_nodes.join(", "))));
    }
    Ok(())
}
