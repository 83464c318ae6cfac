//! Command-line entry point.
//!
//! Exit codes from `verify`: 0 all invariants hold (within bounds), 1 at
//! least one violated (counterexamples written when --out is given), 2 at
//! least one unknown outcome, 3 or more for input/solver errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mboxverify::scenario::ScenarioParams;
use mboxverify::{verify, EngineKind, RunConfig};

#[derive(Parser)]
#[command(name = "mboxverify", version, about = "Verify reachability invariants in networks with mutable datapaths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify invariants against a network.
    Verify(VerifyArgs),
    /// Generate an evaluation scenario as network/invariant files.
    Gen(GenArgs),
    /// Classify a middlebox model's state behavior.
    Classify(ClassifyArgs),
    /// Emit the SMT-LIB2 encoding without running a solver.
    Encode(EncodeArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    invariants: PathBuf,
    /// bmc | smt-bounded | smt-causal | both
    #[arg(long, default_value = "bmc")]
    engine: String,
    /// Maximum timesteps searched.
    #[arg(long, default_value_t = 8)]
    depth: u32,
    /// Maximum host emissions per trace.
    #[arg(long, default_value_t = 2)]
    max_emits: u32,
    /// Failure budget override (defaults to each invariant's).
    #[arg(long)]
    max_failures: Option<u32>,
    /// Solver command (SMT-LIB2 on stdin), e.g. "z3 -in".
    #[arg(long)]
    solver_cmd: Option<String>,
    #[arg(long, default_value_t = 60)]
    solver_timeout: u64,
    #[arg(long)]
    no_slicing: bool,
    #[arg(long)]
    no_symmetry: bool,
    /// Verify representatives concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for report.json and counterexample traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    /// enterprise | redundant | multi_tenant | isp_ids | cache_acl
    scenario: String,
    #[arg(long, default_value_t = 3)]
    subnets: u32,
    #[arg(long, default_value_t = 4)]
    tenants: u32,
    #[arg(long, default_value_t = 1)]
    peerings: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Delete this many configured rules (seeded).
    #[arg(long, default_value_t = 0)]
    delete_rules: u32,
    /// Strip the backup middlebox's rules.
    #[arg(long)]
    break_backup: bool,
    /// Install failover routes that bypass the mandatory middlebox.
    #[arg(long)]
    reroute_around_idps: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Bundled model name or path to a DSL file.
    #[arg(long)]
    model: String,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    invariants: PathBuf,
    /// bounded | causal
    #[arg(long, default_value = "bounded")]
    mode: String,
    #[arg(long, default_value_t = 8)]
    depth: u32,
    #[arg(long, default_value_t = 2)]
    max_emits: u32,
    /// Output file; invariant names are suffixed when several are given.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Verify(a) => {
            let engine = EngineKind::parse(&a.engine)
                .ok_or_else(|| format!("unknown engine {:?}", a.engine))?;
            let cfg = RunConfig {
                engine,
                depth: a.depth,
                max_emits: a.max_emits,
                max_failures: a.max_failures,
                solver_cmd: a
                    .solver_cmd
                    .filter(|s| !s.trim().is_empty())
                    .or_else(mboxverify_core::smt::default_solver),
                solver_timeout_s: a.solver_timeout,
                slicing: !a.no_slicing,
                symmetry: !a.no_symmetry,
                jobs: a.jobs,
                out_dir: a.out.clone(),
            };
            let (report, net) = verify(&a.network, &a.invariants, &cfg)?;
            if a.json {
                println!("{:#}", report.to_json(&net));
            } else {
                mboxverify::print_summary(&report, &net);
            }
            Ok(ExitCode::from(report.exit_code() as u8))
        }
        Command::Gen(a) => {
            let params = ScenarioParams {
                subnets: a.subnets,
                tenants: a.tenants,
                peerings: a.peerings,
                seed: a.seed,
                delete_rules: a.delete_rules,
                break_backup: a.break_backup,
                reroute_around_idps: a.reroute_around_idps,
            };
            let written = mboxverify::write_scenario(&a.scenario, &params, &a.out)?;
            for w in written {
                println!("wrote {}", w.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Classify(a) => {
            let model = if a.model.ends_with(".dsl") {
                let src = std::fs::read_to_string(&a.model)?;
                std::sync::Arc::new(mboxverify_core::mbx::parse_model(&src)?)
            } else {
                mboxverify_core::mbx::builtin(&a.model)?
            };
            let declared = mboxverify_core::slicer::declared_state_class(&model.name);
            let checked = mboxverify_core::slicer::classify_state_class(
                model.clone(),
                &mboxverify_core::slicer::ClassifyBounds::default(),
            )?;
            println!("model: {}", model.name);
            if let Some(d) = declared {
                println!("declared: {d}");
            }
            println!("checked: {}", checked.kind);
            if let mboxverify_core::slicer::Provenance::Refuted { witness, .. } =
                &checked.provenance
            {
                println!(
                    "flow-parallel refuted by a history of {} packet(s) and one probe",
                    witness.history.len()
                );
            }
            if let Some(d) = declared {
                if d != checked.kind {
                    println!(
                        "note: declared tag {d} differs from the bounded check ({}); the declared tag is authoritative",
                        checked.kind
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Encode(a) => {
            let loaded = mboxverify::schema::load_network(&a.network)?;
            let invariants = mboxverify::schema::load_invariants(&a.invariants, &loaded.net)?;
            let many = invariants.len() > 1;
            for inv in &invariants {
                let script = match a.mode.as_str() {
                    "bounded" => {
                        let bounds = mboxverify_core::bmc::Bounds {
                            depth: a.depth,
                            max_emits: a.max_emits,
                            ..Default::default()
                        };
                        mboxverify_core::smt::encode_bounded(&loaded.net, inv, &bounds)?
                    }
                    "causal" => mboxverify_core::smt::encode_causal(&loaded.net, inv)?,
                    other => return Err(format!("unknown mode {other:?}").into()),
                };
                let path = if many {
                    let stem = a.out.to_string_lossy();
                    PathBuf::from(format!("{stem}.{}.smt2", inv.name))
                } else {
                    a.out.clone()
                };
                std::fs::write(&path, &script.text)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
