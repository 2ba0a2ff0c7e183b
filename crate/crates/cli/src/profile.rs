use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use humantool_core::schema::{
    profile_from_questionnaire, validate_profile, Domain, HumanToolProfile, ProfileConfig, QUESTION_LABELS,
};

use crate::{pretty, read_json, write_file, CliResult, Ctx, Failure};

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub human_id: String,
    /// travel_planning, story_writing or generic.
    #[arg(long, default_value = "generic")]
    pub domain: String,
    /// Eight comma-separated option indices (1-5). Prompts on stdin when absent.
    #[arg(long, value_delimiter = ',')]
    pub answers: Option<Vec<u8>>,
    #[arg(long, default_value = "profile.json")]
    pub out: PathBuf,
    /// Free-form preferences to keep on the profile.
    #[arg(long, default_value = "")]
    pub notes: String,
}

fn ask(stdin: &mut impl BufRead) -> Result<Vec<u8>, Failure> {
    let mut answers = Vec::new();
    for (i, label) in QUESTION_LABELS.iter().enumerate() {
        eprint!("{}. {label} [1-5]: ", i + 1);
        io::stderr().flush().ok();
        let mut line = String::new();
        if stdin.read_line(&mut line).map_err(Failure::usage)? == 0 {
            return Err(Failure::usage(format!("input ended after {i} answers")));
        }
        let v: u8 = line.trim().parse().map_err(|_| Failure::usage(format!("question {}: `{}` is not a number", i + 1, line.trim())))?;
        answers.push(v);
    }
    Ok(answers)
}

pub fn init(ctx: &Ctx, args: &InitArgs) -> CliResult {
    let domain: Domain = args.domain.parse().map_err(Failure::usage)?;
    let answers = match &args.answers {
        Some(a) => a.clone(),
        None => ask(&mut io::stdin().lock())?,
    };
    let mut profile = profile_from_questionnaire(&answers, domain).map_err(Failure::usage)?;
    profile.human_id = args.human_id.clone();
    profile.preference_notes = args.notes.clone();
    let v = validate_profile(&profile, &ProfileConfig::default());
    if !v.is_ok() {
        return Err(Failure::usage(format!("invalid profile: {v}")));
    }
    let out = ctx.path(&args.out);
    write_file(&out, &pretty(&profile))?;
    if ctx.json {
        print!("{}", pretty(&serde_json::json!({ "path": out, "profile": profile })));
    } else {
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn load(ctx: &Ctx, path: &Path) -> Result<HumanToolProfile, Failure> {
    let path = ctx.path(path);
    let profile: HumanToolProfile = read_json(&path)?;
    let v = validate_profile(&profile, &ProfileConfig::default());
    if v.is_ok() {
        Ok(profile)
    } else {
        Err(Failure::usage(format!("{}: {v}", path.display())))
    }
}

pub fn validate(ctx: &Ctx, path: &Path) -> CliResult {
    let profile = load(ctx, path)?;
    if ctx.json {
        print!("{}", pretty(&serde_json::json!({ "valid": true, "human_id": profile.human_id })));
    } else {
        println!("{}: ok ({})", ctx.path(path).display(), profile.human_id);
    }
    Ok(())
}
