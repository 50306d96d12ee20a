use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use slqr::experiment::{self, Demo, ACCEPT_TOL};
use slqr::linalg::{self, Mat};
use slqr::scenario::{self, AreTarget, Mode, SharedScenario};

#[derive(Parser)]
#[command(name = "slqr", version, about = "Shared-control LQR learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file; the car-following benchmark when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Nudge RNG seed (overrides the scenario's).
    #[arg(long)]
    seed: Option<u64>,
    /// KEY=VALUE scenario override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve both Riccati targets of a scenario with the model-based oracle.
    Care(Common),
    /// On-policy minimum-intervention learning.
    Onpolicy(Common),
    /// Off-policy minimum-intervention learning with experience replay.
    Offpolicy(Common),
    /// Off-policy takeover learning with the human in the loop.
    Takeover(Common),
    /// Solvability and rank demonstrations.
    Analysis {
        #[command(flatten)]
        common: Common,
        /// behavior-independence, nonuniqueness, single-trajectory,
        /// distinct-trajectories or all.
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Car-following benchmark in all three learning modes.
    Carfollow(Common),
}

fn load_scenario(c: &Common, mode: Mode) -> anyhow::Result<SharedScenario> {
    let mut s = match &c.scenario {
        Some(path) => SharedScenario::load(path)
            .with_context(|| format!("loading scenario {}", path.display()))?,
        None => SharedScenario::car_following(mode, 0),
    };
    s.mode = mode;
    if let Some(seed) = c.seed {
        s.nudge.seed = seed;
    }
    experiment::apply_overrides(&mut s, &c.overrides)?;
    Ok(s)
}

fn print_matrix(name: &str, m: &Mat) {
    println!("{name} =");
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>22.14e}")).collect();
        println!("  [{}]", cells.join(" "));
    }
}

fn print_target(label: &str, t: &AreTarget) {
    println!("== {label}");
    print_matrix("P*", &t.p_star);
    print_matrix("K*", &t.k_star);
    println!("ARE residual = {:.3e} ({} iterations)", t.residual, t.iterations);
    let eig: Vec<String> = linalg::eigenvalues(&t.closed_loop(&t.k_star))
        .iter()
        .map(|c| format!("{:.6}{:+.6}i", c.re, c.im))
        .collect();
    println!("closed-loop eigenvalues = {}", eig.join(", "));
}

fn care(c: &Common) -> anyhow::Result<bool> {
    let s = load_scenario(c, Mode::OffPolicyTakeover)?;
    let min = scenario::build_min_intervention_target(&s)?;
    let take = scenario::build_takeover_target(&s)?;
    print_target("minimum intervention (A_h, Q_h)", &min);
    print_target("takeover (A, Q)", &take);
    std::fs::create_dir_all(&c.out)?;
    let file = experiment::OracleFile {
        min_intervention: min,
        takeover: take,
    };
    std::fs::write(c.out.join("oracle.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(file.min_intervention.residual <= 1e-8 && file.takeover.residual <= 1e-8)
}

fn learn(c: &Common, mode: Mode) -> anyhow::Result<bool> {
    let s = load_scenario(c, mode)?;
    match experiment::run_and_write(&s, &c.out)? {
        Ok(rep) => {
            let passed = rep.passed(ACCEPT_TOL);
            println!(
                "{}: relative error {:.3e} after {} iterations ({} segments collected, {} fresh after collection) -> {}",
                mode.name(),
                rep.relative_error,
                rep.convergence.iterations.len(),
                rep.collected_segments,
                rep.fresh_segments_after_collection,
                if passed { "PASS" } else { "FAIL" }
            );
            if let Some(p) = &rep.post_exit {
                println!(
                    "after human exit: |x(T)|/|x0| = {:.3e}, cost {:.6} vs predicted {:.6}",
                    p.state_ratio, p.realized_cost, p.predicted_cost
                );
            }
            Ok(passed)
        }
        Err(e) => {
            eprintln!("{}: {e}", mode.name());
            Ok(false)
        }
    }
}

fn analysis(c: &Common, mode: &str) -> anyhow::Result<bool> {
    let demos = if mode == "all" {
        Demo::ALL.to_vec()
    } else {
        match Demo::parse(mode) {
            Some(d) => vec![d],
            None => bail!("unknown analysis mode {mode:?}"),
        }
    };
    if !c.overrides.is_empty() || c.scenario.is_some() {
        eprintln!("note: analysis demonstrations use built-in systems; scenario and overrides are ignored");
    }
    let mut all = true;
    for d in demos {
        let ok = experiment::run_demo(d, c.seed.unwrap_or(0), &c.out)?;
        println!("{}: {}", d.name(), if ok { "expected outcome" } else { "UNEXPECTED" });
        all &= ok;
    }
    Ok(all)
}

fn carfollow(c: &Common) -> anyhow::Result<bool> {
    if c.scenario.is_some() {
        bail!("carfollow uses the built-in scenario; drop --scenario");
    }
    let summary = experiment::run_carfollow(&c.out, c.seed.unwrap_or(0), &c.overrides)?;
    for m in &summary.modes {
        match (&m.relative_error, &m.error) {
            (Some(e), _) => println!(
                "{}: relative error {e:.3e} -> {}",
                m.mode.name(),
                if m.passed { "PASS" } else { "FAIL" }
            ),
            (None, Some(err)) => println!("{}: FAIL ({err})", m.mode.name()),
            (None, None) => println!("{}: FAIL", m.mode.name()),
        }
    }
    Ok(summary.passed)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Care(c) => care(c),
        Command::Onpolicy(c) => learn(c, Mode::OnPolicyMinIntervention),
        Command::Offpolicy(c) => learn(c, Mode::OffPolicyMinIntervention),
        Command::Takeover(c) => learn(c, Mode::OffPolicyTakeover),
        Command::Analysis { common, mode } => analysis(common, mode),
        Command::Carfollow(c) => carfollow(c),
    }
}

fn out_dir(cli: &Cli) -> &Path {
    match &cli.command {
        Command::Care(c)
        | Command::Onpolicy(c)
        | Command::Offpolicy(c)
        | Command::Takeover(c)
        | Command::Carfollow(c) => &c.out,
        Command::Analysis { common, .. } => &common.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("reports written to {}", out_dir(&cli).display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
