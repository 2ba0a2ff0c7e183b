use std::path::PathBuf;

use clap::Args;
use humantool_core::store::{read_log_file, ActivationReport};

use crate::{pretty, write_file, CliResult, Ctx, Failure};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// events.ndjson files; none gives an all-zero report.
    pub logs: Vec<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn report(ctx: &Ctx, args: &ReportArgs) -> CliResult {
    let mut logs = Vec::with_capacity(args.logs.len());
    for p in &args.logs {
        let path = ctx.path(p);
        logs.push(read_log_file(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?);
    }
    let report = ActivationReport::from_logs(&logs);
    if let Some(out) = &args.out {
        write_file(&ctx.path(out), &pretty(&report))?;
    }
    if ctx.json {
        print!("{}", pretty(&report));
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}
