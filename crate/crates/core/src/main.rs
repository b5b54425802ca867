use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fracpole::cli::{self, exit, write_json, ExperimentConfig, RoundtripReport};
use fracpole::Error;

#[derive(Parser)]
#[command(name = "fracpole", version, about = "Forward solver and parameter recovery for fractional superdiffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write mode coefficients, g and z samples and the true parameters.
    Synth(Common),
    /// Solve the forward problem and write trace.csv.
    Forward(Common),
    /// Matrix-pencil poles of the trace tail.
    Poles(Common),
    /// Recover the unknowns from trace.csv.
    Invert(Common),
    /// Check the hypotheses of the uniqueness result on the fixture.
    Verify(Common),
    /// synth, forward, invert and verify in sequence.
    Roundtrip(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config, or builtin:two-term / builtin:zero-source.
    #[arg(long, default_value = "builtin:two-term")]
    config: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Turn warnings and failed checks into exit status 4.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "tol-override", value_name = "KEY=VAL")]
    tol_override: Vec<String>,
}

enum Outcome {
    Done,
    Breach(String),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for o in &self.tol_override {
            cfg.numerics.tolerances.set(o)?;
        }
        std::fs::create_dir_all(&self.out).map_err(|e| Error::config("--out", e.to_string()))?;
        Ok(cfg)
    }
}

fn breach_if(strict: bool, bad: bool, what: &str) -> Outcome {
    if strict && bad {
        Outcome::Breach(what.to_string())
    } else {
        Outcome::Done
    }
}

fn run(cmd: &Cmd) -> Result<Outcome, Error> {
    let (c, name) = match cmd {
        Cmd::Synth(c) => (c, "synth"),
        Cmd::Forward(c) => (c, "forward"),
        Cmd::Poles(c) => (c, "poles"),
        Cmd::Invert(c) => (c, "invert"),
        Cmd::Verify(c) => (c, "verify"),
        Cmd::Roundtrip(c) => (c, "roundtrip"),
    };
    let cfg = c.load()?;
    let out: &Path = &c.out;
    let report = out.join(format!("{name}.json"));
    match cmd {
        Cmd::Synth(_) => {
            write_json(&report, &cli::synth(&cfg, out)?)?;
            Ok(Outcome::Done)
        }
        Cmd::Forward(_) => {
            let (_, r) = cli::forward(&cfg, out)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            write_json(&report, &r)?;
            Ok(breach_if(c.strict, !r.warnings.is_empty(), "forward warnings"))
        }
        Cmd::Poles(_) => {
            let r = cli::poles(&cfg, out)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            write_json(&report, &r)?;
            Ok(breach_if(c.strict, !r.warnings.is_empty(), "pole warnings"))
        }
        Cmd::Invert(_) => {
            let r = cli::invert(&cfg, out)?;
            write_json(&report, &r)?;
            Ok(breach_if(c.strict, !r.pass, "recovered parameters outside tolerance"))
        }
        Cmd::Verify(_) => {
            let r = cli::verify(&cfg, out)?;
            write_json(&report, &r)?;
            Ok(breach_if(c.strict, !r.all_flags, "hypothesis checks failed"))
        }
        Cmd::Roundtrip(_) => {
            write_json(&out.join("synth.json"), &cli::synth(&cfg, out)?)?;
            let (_, fwd) = cli::forward(&cfg, out)?;
            write_json(&out.join("forward.json"), &fwd)?;
            let inv = cli::invert(&cfg, out)?;
            write_json(&out.join("invert.json"), &inv)?;
            let ver = cli::verify(&cfg, out)?;
            write_json(&out.join("verify.json"), &ver)?;
            let strict_bad = c.strict && (!fwd.warnings.is_empty() || !ver.all_flags);
            let pass = inv.pass && !strict_bad;
            let failed: Vec<String> = inv.checks.iter().filter(|k| !k.pass).map(|k| k.name.clone()).collect();
            write_json(
                &report,
                &RoundtripReport {
                    command: "roundtrip",
                    timestamp_unix: fwd.timestamp_unix,
                    forward: fwd,
                    invert: inv,
                    verify_all_flags: ver.all_flags,
                    pass,
                },
            )?;
            if pass {
                Ok(Outcome::Done)
            } else if failed.is_empty() {
                Ok(Outcome::Breach("warnings in strict mode".into()))
            } else {
                Ok(Outcome::Breach(format!("outside tolerance: {}", failed.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli.cmd) {
        Ok(Outcome::Done) => exit::OK,
        Ok(Outcome::Breach(why)) => {
            eprintln!("error: {why}");
            exit::BREACH
        }
        Err(e) => {
            eprintln!("error: {e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
