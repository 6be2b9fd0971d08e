//! `giant`: seeded, scriptable access to the digraph toolkit. Subcommands
//! emit CSV or schema-versioned JSON; every randomized run either takes
//! `--seed` or prints the seed it generated, so any output can be
//! reproduced afterwards.

use std::fs;
use std::io::Read;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use giant_core::digraph::{self, Digraph};
use giant_core::enumerate::{self, exact_transition, oracle_transition, q_transition};
use giant_core::peel::{self, StateVector};
use giant_core::{mc, rng, theory};

#[derive(Parser)]
#[command(name = "giant", version, about = "Giant strong components in sparse random digraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a random digraph and print its edge list
    Gen(GenArgs),
    /// Strong-component summary of an edge list
    Scc(InArgs),
    /// Extract the (1,1)-core of an edge list
    Core(CoreArgs),
    /// Run the deletion chain and report its trajectory
    Peel(PeelArgs),
    /// One-step transition kernel from a state, as CSV
    Kernel(KernelArgs),
    /// Compare the counting kernel against brute-force enumeration
    Oracle(OracleArgs),
    /// Limit means and covariance matrices for an arc density
    Theory(TheoryArgs),
    /// Seeded Monte Carlo batch with summary statistics
    Mc(McArgs),
    /// Run the built-in consistency suites
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// nm (fixed arc count) or np (independent arcs)
    #[arg(long)]
    model: String,
    #[arg(long)]
    n: u64,
    /// Arc density: m = round(c n) or p = c/n
    #[arg(long)]
    c: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (default: standard output)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct InArgs {
    /// Edge-list path, or - for standard input
    #[arg(long = "in")]
    input: String,
}

#[derive(Args)]
struct CoreArgs {
    /// Edge-list path, or - for standard input
    #[arg(long = "in")]
    input: String,
    /// Write the core's edge list here (summary still goes to stdout)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct PeelArgs {
    /// Edge-list path, or - for standard input; alternative to sampling
    #[arg(long = "in")]
    input: Option<String>,
    #[arg(long, requires = "n")]
    model: Option<String>,
    #[arg(long, requires = "model")]
    n: Option<u64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-step trace CSV here
    #[arg(long)]
    trace: Option<String>,
}

#[derive(Args)]
struct KernelArgs {
    /// State as nu,nu_i,nu_o,mu
    #[arg(long)]
    state: String,
    /// Use the large-state approximate kernel instead of exact counts
    #[arg(long)]
    approx: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    max_nu: u64,
    #[arg(long, default_value_t = 6)]
    max_mu: u64,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    c: f64,
    /// JSON output path, or - for standard output
    #[arg(long)]
    json: Option<String>,
    /// Include the near-critical expansion rows
    #[arg(long)]
    eps_series: bool,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    c: f64,
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Full report as JSON: a path, or - for standard output
    #[arg(long)]
    json: Option<String>,
    /// Per-trial CSV path
    #[arg(long)]
    csv: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Smaller enumeration ranges
    #[arg(long)]
    quick: bool,
}

/// Failures split by exit code: usage problems (2) against honest runtime
/// or validation failures (1).
enum Failure {
    Usage(String),
    Run(String),
}

impl From<giant_core::Error> for Failure {
    fn from(e: giant_core::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    if let Ok(raw) = std::env::var("GIANT_THREADS") {
        match raw.parse::<usize>() {
            Ok(k) if k >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => {
                eprintln!("error: GIANT_THREADS must be a positive integer, got {raw:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Scc(a) => cmd_scc(a),
        Command::Core(a) => cmd_core(a),
        Command::Peel(a) => cmd_peel(a),
        Command::Kernel(a) => cmd_kernel(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Mc(a) => cmd_mc(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// The seed to use: the given one, or a fresh one announced on the error
/// stream so the run stays reproducible.
fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("seed {s}");
            s
        }
    }
}

fn parse_model(raw: &str) -> Result<mc::Model, Failure> {
    mc::Model::from_str(raw)
        .map_err(|_| Failure::Usage(format!("model must be nm or np, got {raw:?}")))
}

fn read_input(path: &str) -> Result<String, Failure> {
    if path == "-" {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        Ok(buf)
    } else {
        Ok(fs::read_to_string(path)?)
    }
}

fn write_output(path: Option<&str>, content: &str) -> Result<(), Failure> {
    match path {
        None | Some("-") => {
            print!("{content}");
            Ok(())
        }
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
    }
}

/// Samples from the requested model: m = round(c n) arcs for nm,
/// p = c/n for np. The derived density parameter is echoed on the error
/// stream so a run records exactly what it sampled.
fn sample(model: mc::Model, n: u64, c: f64, seed: u64) -> Result<Digraph, Failure> {
    if c < 0.0 || !c.is_finite() {
        return Err(Failure::Usage(format!("c must be a finite nonnegative number, got {c}")));
    }
    Ok(match model {
        mc::Model::Nm => {
            let m = (c * n as f64).round() as usize;
            eprintln!("m {m}");
            digraph::sample_dnm(n as usize, m, seed)?
        }
        mc::Model::Np => {
            let p = c / n as f64;
            eprintln!("p {p}");
            digraph::sample_dnp(n as usize, p, seed)?
        }
    })
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let model = parse_model(&a.model)?;
    let seed = resolve_seed(a.seed);
    let d = sample(model, a.n, a.c, seed)?;
    write_output(a.out.as_deref(), &d.to_edge_list())
}

#[derive(Serialize)]
struct SccSummary {
    schema: &'static str,
    n: usize,
    m: usize,
    /// Vertices and arcs of the largest strong component.
    v1: usize,
    a1: usize,
    /// Number of strong components with at least two vertices.
    nontrivial: usize,
}

fn cmd_scc(a: InArgs) -> Result<(), Failure> {
    let d = Digraph::from_edge_list(&read_input(&a.input)?)?;
    let scc = digraph::largest_scc(&d);
    let nontrivial = digraph::strongly_connected_components(&d)
        .iter()
        .filter(|comp| comp.len() >= 2)
        .count();
    let summary = SccSummary {
        schema: "1",
        n: d.n(),
        m: d.m(),
        v1: scc.v1,
        a1: scc.a1,
        nontrivial,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct CoreSummary {
    schema: &'static str,
    n: usize,
    m: usize,
    core_v: usize,
    core_a: usize,
}

fn cmd_core(a: CoreArgs) -> Result<(), Failure> {
    let d = Digraph::from_edge_list(&read_input(&a.input)?)?;
    let core = digraph::core_11(&d);
    let summary = CoreSummary {
        schema: "1",
        n: d.n(),
        m: d.m(),
        core_v: core.support().len(),
        core_a: core.m(),
    };
    if let Some(out) = &a.out {
        fs::write(out, core.to_edge_list())?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct PeelSummary {
    schema: &'static str,
    seed: u64,
    s0: StateVector,
    terminal: StateVector,
    steps: usize,
    core_v: usize,
    core_a: usize,
}

fn cmd_peel(a: PeelArgs) -> Result<(), Failure> {
    enum Source {
        File(String),
        Sample(mc::Model, u64, f64),
    }
    // Validate the input source before drawing a seed, so usage errors
    // do not echo one.
    let source = match (&a.input, a.model.as_deref()) {
        (Some(path), None) => Source::File(path.clone()),
        (None, Some(model)) => {
            let c = a
                .c
                .ok_or_else(|| Failure::Usage("sampling needs --c".into()))?;
            Source::Sample(parse_model(model)?, a.n.expect("clap enforces n with model"), c)
        }
        _ => {
            return Err(Failure::Usage(
                "pass exactly one of --in or (--model, --n, --c)".into(),
            ))
        }
    };
    let seed = resolve_seed(a.seed);
    let d = match source {
        Source::File(path) => Digraph::from_edge_list(&read_input(&path)?)?,
        Source::Sample(model, n, c) => sample(model, n, c, rng::derive_seed(seed, 0))?,
    };
    let (core, traj) = peel::run_deletion(&d, rng::derive_seed(seed, 1));
    let summary = PeelSummary {
        schema: "1",
        seed,
        s0: traj.states[0],
        terminal: *traj.states.last().expect("trajectory has states"),
        steps: traj.deltas.len(),
        core_v: core.support().len(),
        core_a: core.m(),
    };
    if let Some(path) = &a.trace {
        fs::write(path, traj.trace_csv())?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn parse_state(raw: &str) -> Result<StateVector, Failure> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 4 {
        return Err(Failure::Usage(format!(
            "state must be nu,nu_i,nu_o,mu, got {raw:?}"
        )));
    }
    let mut v = [0u64; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("bad state component {part:?}")))?;
    }
    StateVector::new(v[0], v[1], v[2], v[3])
        .map_err(|e| Failure::Usage(format!("invalid state: {e}")))
}

fn kernel_csv(kernel: &enumerate::TransitionKernel) -> String {
    let mut out = String::from("flavor,a,b,r_i,r_o,k,prob\n");
    for (d, p) in &kernel.entries {
        let flavor = match d.flavor {
            peel::Flavor::I => "i",
            peel::Flavor::O => "o",
        };
        out.push_str(&format!(
            "{flavor},{},{},{},{},{},{}\n",
            d.a, d.b, d.r_i, d.r_o, d.k, p
        ));
    }
    out
}

fn cmd_kernel(a: KernelArgs) -> Result<(), Failure> {
    let s = parse_state(&a.state)?;
    let kernel = if a.approx { q_transition(&s)? } else { exact_transition(&s)? };
    print!("{}", kernel_csv(&kernel));
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> Result<(), Failure> {
    let mut states = 0u64;
    let mut worst: f64 = 0.0;
    for nu in 1..=a.max_nu {
        for nu_i in 0..=nu {
            for nu_o in 0..=(nu - nu_i) {
                if nu_i + nu_o == 0 {
                    continue;
                }
                for mu in 1..=a.max_mu.min(nu * (nu - 1)) {
                    let Ok(s) = StateVector::new(nu, nu_i, nu_o, mu) else {
                        continue;
                    };
                    if enumerate::exact_g(&s)? == 0 {
                        continue;
                    }
                    let fast = exact_transition(&s)?;
                    let slow = oracle_transition(&s)?;
                    let mut dev = (fast.total_mass() - 1.0).abs();
                    if fast.entries.len() != slow.entries.len() {
                        dev = f64::INFINITY;
                    } else {
                        for (delta, &p) in &fast.entries {
                            dev = dev.max((p - slow.prob(delta)).abs());
                        }
                    }
                    worst = worst.max(dev);
                    states += 1;
                    let verdict = if dev <= 1e-12 { "ok" } else { "FAIL" };
                    println!(
                        "{verdict} state ({nu},{nu_i},{nu_o},{mu}) max deviation {dev:.3e}"
                    );
                }
            }
        }
    }
    println!("{states} states, worst deviation {worst:.3e}");
    if worst <= 1e-12 {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Run("kernel and oracle disagree".into()))
    }
}

fn cmd_theory(a: TheoryArgs) -> Result<(), Failure> {
    let grid = [0.02, 0.01, 0.005];
    let eps = if a.eps_series { Some(&grid[..]) } else { None };
    let report = theory::theory_report(a.c, eps)?;
    match &a.json {
        Some(path) => {
            let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
            write_output(Some(path), &text)?;
        }
        None => {
            println!("c       {}", report.c);
            println!("theta   {:.12}", report.theta);
            println!("mean    {:.12} {:.12}", report.mean[0], report.mean[1]);
            for (name, m) in [("B", report.b), ("Btilde", report.btilde), ("B_np", report.b_np)] {
                println!(
                    "{name:7} [[{:.6}, {:.6}], [{:.6}, {:.6}]]",
                    m[0][0], m[0][1], m[1][0], m[1][1]
                );
            }
            println!(
                "K       [[{:.6}, {:.6}, {:.6}], [.., {:.6}, {:.6}], [.., .., {:.6}]]",
                report.k[0][0],
                report.k[0][1],
                report.k[0][2],
                report.k[1][1],
                report.k[1][2],
                report.k[2][2]
            );
        }
    }
    Ok(())
}

fn cmd_mc(a: McArgs) -> Result<(), Failure> {
    let model = parse_model(&a.model)?;
    let seed = resolve_seed(a.seed);
    let report = mc::run_experiment(model, a.n, a.c, a.trials, seed)?;
    if let Some(path) = &a.csv {
        fs::write(path, mc::trials_csv(&report))?;
    }
    match &a.json {
        Some(path) => {
            let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
            write_output(Some(path), &text)?;
        }
        None => {
            let (m, density) = match model {
                mc::Model::Nm => ("m", (a.c * a.n as f64).round()),
                mc::Model::Np => ("p*n", a.c),
            };
            println!(
                "model {} n {} {m} {density} trials {} seed {seed}",
                a.model, report.n, report.trials
            );
            println!("theta {:.6}", report.theta);
            println!(
                "core mean ({:.4}, {:.4})  giant mean ({:.4}, {:.4})",
                report.core_mean[0],
                report.core_mean[1],
                report.giant_mean[0],
                report.giant_mean[1]
            );
            if let Some(cov) = report.giant_cov {
                println!(
                    "giant cov [[{:.4}, {:.4}], [{:.4}, {:.4}]]",
                    cov[0][0], cov[0][1], cov[1][0], cov[1][1]
                );
            }
            println!(
                "gap mean v {:.3} a {:.3}  max v {} a {}",
                report.gap_stats.v_mean,
                report.gap_stats.a_mean,
                report.gap_stats.v_max,
                report.gap_stats.a_max
            );
        }
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let max_nu = if a.quick { 4 } else { 5 };
    let max_mu = if a.quick { 5 } else { 6 };
    let mut failures = 0u32;
    let mut check = |name: &str, outcome: Result<String, String>| match outcome {
        Ok(detail) => println!("ok   {name} ({detail})"),
        Err(detail) => {
            failures += 1;
            println!("FAIL {name} ({detail})");
        }
    };

    check("kernel vs oracle", {
        (|| {
            let mut states = 0u64;
            let mut worst: f64 = 0.0;
            for nu in 1..=max_nu {
                for nu_i in 0..=nu {
                    for nu_o in 0..=(nu - nu_i) {
                        if nu_i + nu_o == 0 {
                            continue;
                        }
                        for mu in 1..=max_mu.min(nu * (nu - 1)) {
                            let Ok(s) = StateVector::new(nu, nu_i, nu_o, mu) else {
                                continue;
                            };
                            if enumerate::exact_g(&s).map_err(|e| e.to_string())? == 0 {
                                continue;
                            }
                            let fast = exact_transition(&s).map_err(|e| e.to_string())?;
                            let slow = oracle_transition(&s).map_err(|e| e.to_string())?;
                            for (delta, &p) in &fast.entries {
                                worst = worst.max((p - slow.prob(delta)).abs());
                            }
                            worst = worst.max((fast.total_mass() - 1.0).abs());
                            states += 1;
                        }
                    }
                }
            }
            if worst <= 1e-12 {
                Ok(format!("{states} states, worst {worst:.2e}"))
            } else {
                Err(format!("worst deviation {worst:.2e}"))
            }
        })()
    });

    check("count bounds", {
        (|| {
            let mut states = 0u64;
            for nu in 1..=max_nu {
                for nu_i in 0..=nu {
                    for nu_o in 0..=(nu - nu_i) {
                        for mu in 0..=nu * (nu - 1) {
                            let Ok(s) = StateVector::new(nu, nu_i, nu_o, mu) else {
                                continue;
                            };
                            if enumerate::z_of_state(&s).is_err() {
                                continue;
                            }
                            let g = enumerate::exact_g(&s).map_err(|e| e.to_string())? as f64;
                            let bound = enumerate::g_upper_bound_ln(&s)
                                .map_err(|e| e.to_string())?
                                .exp();
                            if g > bound * (1.0 + 1e-9) {
                                return Err(format!("state {s:?}: {g} > {bound}"));
                            }
                            states += 1;
                        }
                    }
                }
            }
            Ok(format!("{states} states"))
        })()
    });

    check("survival root", {
        (|| {
            for c in [1.2f64, 2.0, 5.0] {
                let th = theory::theta(c).map_err(|e| e.to_string())?;
                let residual = (1.0 - th - (-c * th).exp()).abs();
                if residual > 1e-12 {
                    return Err(format!("c = {c}: residual {residual:.2e}"));
                }
            }
            Ok("c in {1.2, 2, 5}, residual <= 1e-12".into())
        })()
    });

    check("characteristic endpoint", {
        (|| {
            let c = 2.0;
            let th = theory::theta(c).map_err(|e| e.to_string())?;
            let traj = theory::integrate_characteristic(
                &theory::likely_initial(c),
                theory::DEFAULT_BETA_TOL,
            )
            .map_err(|e| e.to_string())?;
            let err = (traj.endpoint.alpha - th * th)
                .abs()
                .max((traj.endpoint.gamma - c * th * th).abs());
            if err <= 1e-6 {
                Ok(format!("endpoint error {err:.2e}"))
            } else {
                Err(format!("endpoint error {err:.2e}"))
            }
        })()
    });

    check("covariance quadrature", {
        (|| {
            let ode = theory::psi_matrix(&theory::likely_initial(2.0))
                .map_err(|e| e.to_string())?;
            let sym = theory::psi_matrix_symmetric(2.0)
                .map_err(|e| e.to_string())?
                .matrix;
            let mut dev: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    dev = dev.max((ode[i][j] - sym[i][j]).abs());
                }
            }
            if dev <= 1e-7 {
                Ok(format!("closed form vs ODE {dev:.2e}"))
            } else {
                Err(format!("closed form vs ODE {dev:.2e}"))
            }
        })()
    });

    check("approximate kernel mass", {
        (|| {
            let s = peel::likely_initial_state(10_000, 2.0);
            let q = q_transition(&s).map_err(|e| e.to_string())?;
            let deficit = q.deficit();
            if q.total_mass() <= 1.0 + 1e-12 && deficit > 0.0 && deficit < 1e-3 {
                Ok(format!("deficit {deficit:.2e}"))
            } else {
                Err(format!("mass {}, deficit {deficit:.2e}", q.total_mass()))
            }
        })()
    });

    if failures == 0 {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Run(format!("{failures} checks failed")))
    }
}
