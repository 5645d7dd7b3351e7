use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, ArgMatches, Command};

use warehouse_marl::checkpoint::Checkpoint;
use warehouse_marl::env::EnvConfig;
use warehouse_marl::harness::benchmark::matrix;
use warehouse_marl::harness::render::playback;
use warehouse_marl::harness::selftest::run_all;
use warehouse_marl::harness::{benchmark, evaluate_checkpoint, train, LearnerKind, LoadedPolicy, TrainConfig};
use warehouse_marl::{Error, Result};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value config file"),
    );
    for key in TrainConfig::keys() {
        cmd = cmd.arg(Arg::new(*key).long(flag(key)).value_name("VALUE"));
    }
    cmd
}

fn cli() -> Command {
    let out = Arg::new("out").long("out").value_name("DIR").help("output directory");
    let checkpoint = Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("PATH")
        .required(true)
        .help("checkpoint.bin or a run directory");
    let env = Arg::new("env").long("env").value_name("PRESET|LAYOUT");
    let seed = Arg::new("seed").long("seed").value_name("N");
    Command::new("marl")
        .about("Cooperative warehouse agents: training, evaluation and benchmarks")
        .subcommand_required(true)
        .subcommand(config_args(Command::new("train").about("Train one learner")).arg(out.clone()))
        .subcommand(
            Command::new("evaluate")
                .about("Greedy test return of a checkpoint")
                .arg(checkpoint.clone())
                .arg(env.clone())
                .arg(seed.clone())
                .arg(Arg::new("episodes").long("episodes").value_name("N")),
        )
        .subcommand(
            config_args(Command::new("benchmark").about("Compare learners across seeds"))
                .arg(out)
                .arg(
                    Arg::new("learners")
                        .long("learners")
                        .value_name("LIST")
                        .default_value("qmix,ippo,random"),
                )
                .arg(Arg::new("envs").long("envs").value_name("LIST"))
                .arg(Arg::new("seeds").long("seeds").value_name("LIST").default_value("0,1,2")),
        )
        .subcommand(
            Command::new("render")
                .about("ASCII playback of a greedy episode")
                .arg(checkpoint)
                .arg(env)
                .arg(seed.clone())
                .arg(
                    Arg::new("delay-ms")
                        .long("delay-ms")
                        .value_name("MS")
                        .default_value("0"),
                ),
        )
        .subcommand(
            Command::new("selftest")
                .about("Run the invariant suites")
                .arg(seed.default_value("0"))
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue)),
        )
}

fn build_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut text = match m.get_one::<String>("config") {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {p}: {e}")))?,
        None => String::new(),
    };
    if let Some(p) = m.get_one::<String>("profile") {
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != Some("profile"))
            .collect();
        text = format!("profile = {p}\n{}", kept.join("\n"));
    }
    let mut cfg = TrainConfig::parse(&text)?;
    for key in TrainConfig::keys().iter().filter(|k| **k != "profile") {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn parse_num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("--{name}: cannot parse {v:?}")))
}

fn stamped_dir(prefix: &str) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    PathBuf::from("runs").join(format!("{prefix}-{secs}"))
}

fn checkpoint_path(p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_dir() {
        path.join("checkpoint.bin")
    } else {
        path.to_path_buf()
    }
}

fn env_override(m: &ArgMatches) -> Result<Option<EnvConfig>> {
    m.get_one::<String>("env")
        .map(|e| {
            let mut cfg = TrainConfig::default();
            cfg.env = e.clone();
            cfg.env_config()
        })
        .transpose()
}

fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("train", m)) => {
            let cfg = build_config(m)?;
            cfg.validate()?;
            let dir = m
                .get_one::<String>("out")
                .map_or_else(|| stamped_dir(cfg.learner.name()), PathBuf::from);
            let outcome = train(&cfg, &dir)?;
            let last = outcome.rows.last().expect("final row");
            println!(
                "{} on {}: {} steps, {} updates, test return {} (std {})",
                cfg.learner,
                cfg.env,
                last.env_step,
                outcome.updates,
                outcome.final_eval.mean,
                outcome.final_eval.std
            );
            println!("run directory: {}", outcome.run_dir.display());
        }
        Some(("evaluate", m)) => {
            let ck = Checkpoint::load(&checkpoint_path(m.get_one::<String>("checkpoint").expect("required")))?;
            let cfg = TrainConfig::parse(&ck.config_text)?;
            let seed = m.get_one::<String>("seed").map_or(Ok(cfg.seed), |s| parse_num("seed", s))?;
            let episodes = m
                .get_one::<String>("episodes")
                .map_or(Ok(cfg.eval_episodes), |s| parse_num("episodes", s))?;
            let env = env_override(m)?;
            let summary = evaluate_checkpoint(&ck, env.as_ref(), episodes, seed)?;
            println!("episodes {episodes}");
            println!("mean_return {}", summary.mean);
            println!("std_return {}", summary.std);
        }
        Some(("benchmark", m)) => {
            let base = build_config(m)?;
            base.validate()?;
            let learners = m
                .get_one::<String>("learners")
                .expect("default")
                .split(',')
                .map(|s| s.trim().parse::<LearnerKind>())
                .collect::<Result<Vec<_>>>()?;
            let envs: Vec<String> = m
                .get_one::<String>("envs")
                .map_or_else(|| vec![base.env.clone()], |s| s.split(',').map(|e| e.trim().to_string()).collect());
            let seeds = m
                .get_one::<String>("seeds")
                .expect("default")
                .split(',')
                .map(|s| parse_num("seeds", s.trim()))
                .collect::<Result<Vec<u64>>>()?;
            let dir = m
                .get_one::<String>("out")
                .map_or_else(|| stamped_dir("benchmark"), PathBuf::from);
            let report = benchmark(&base, &matrix(&learners, &envs, &seeds), &dir)?;
            print!("{}", report.table());
            println!("comparison: {}", dir.join("comparison.csv").display());
            if report.cells.iter().any(|c| c.outcome.is_err()) {
                return Err(Error::Failed("some benchmark cells failed".into()));
            }
        }
        Some(("render", m)) => {
            let ck = Checkpoint::load(&checkpoint_path(m.get_one::<String>("checkpoint").expect("required")))?;
            let cfg = TrainConfig::parse(&ck.config_text)?;
            let env = match env_override(m)? {
                Some(e) => e,
                None => cfg.env_config()?,
            };
            let seed = m.get_one::<String>("seed").map_or(Ok(cfg.seed), |s| parse_num("seed", s))?;
            let delay: u64 = parse_num("delay-ms", m.get_one::<String>("delay-ms").expect("default"))?;
            let policy = LoadedPolicy::from_checkpoint(&ck, &env)?;
            for frame in playback(&policy, &env, seed)? {
                println!("{}", frame.to_text());
                if delay > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(delay));
                }
            }
        }
        Some(("selftest", m)) => {
            let seed: u64 = parse_num("seed", m.get_one::<String>("seed").expect("default"))?;
            let results = run_all(seed);
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                if !m.get_flag("quiet") || !r.passed {
                    println!("[{status}] {} ({:.2}s): {}", r.name, r.seconds, r.detail);
                }
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} suites, {failed} failed", results.len());
            if failed > 0 {
                return Err(Error::Failed(format!("{failed} selftest suites failed")));
            }
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
