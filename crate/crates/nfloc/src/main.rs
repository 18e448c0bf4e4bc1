//! Command-line front end: Monte Carlo sweeps, derivative self-checks,
//! bound-only sweeps, and a verbose single-trial demo.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use nfloc::deriv::{
    fd_gradient, ChannelModelKind, GradientDomain, MessageKind, MessageObjective,
};
use nfloc::estimator::ObservationModel;
use nfloc::geometry::{CartesianPosition, PolarPosition};
use nfloc::harness::{
    aggregates_csv, records_csv, run_sweep, sample_scenario, trial_seed, Algorithm,
    ExperimentConfig, SweepResult,
};

use nfloc::partition::make_partition;
use nfloc::rf::{sigma2_for_snr, synthesize_received};

#[derive(Parser)]
#[command(name = "nfloc", about = "Near-field localization experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config JSON; defaults to the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for result files.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads; 0 means all cores. Defaults to $NFLOC_JOBS or 0.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the SNR list, comma separated dB values.
    #[arg(long, value_delimiter = ',')]
    snr: Option<Vec<f64>>,
    /// Override the algorithm list (aple-lm, aple-lm-acm, es-ga).
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo sweep and write aggregates (and optional records).
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Treat any trial failure as a hard error.
        #[arg(long)]
        strict: bool,
    },
    /// Compare analytic message derivatives against finite differences.
    CheckDerivatives {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compute the position error bound over the SNR list, no estimation.
    Bcrb {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// One verbose trial with the per-iteration position trace.
    Demo {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| {
                format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())
            })?
        }
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(snr) = &common.snr {
        cfg.snr_db = snr.clone();
    }
    if let Some(algos) = &common.algo {
        cfg.algorithms = algos
            .iter()
            .map(|s| Algorithm::from_str(s).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate().map_err(|e| {
        let source = common
            .config
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<built-in config>".into());
        format!("{source}: {e}")
    })?;
    Ok(cfg)
}

fn jobs_of(common: &CommonArgs) -> usize {
    common.jobs.unwrap_or_else(|| {
        std::env::var("NFLOC_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, strict: bool) -> Result<ExitCode, String> {
    let cfg = load_config(common)?;
    let result = run_sweep(&cfg, jobs_of(common)).map_err(|e| e.to_string())?;
    save_sweep(&common.out, &result)?;
    for warning in &result.failures {
        eprintln!("warning: trial failed: {warning}");
    }
    if strict && !result.failures.is_empty() {
        eprintln!("error: {} trial(s) failed under --strict", result.failures.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn save_sweep(dir: &Path, result: &SweepResult) -> Result<(), String> {
    let meta = serde_json::to_string_pretty(result).map_err(|e| e.to_string())?;
    write_file(dir, "sweep.json", &meta)?;
    write_file(dir, "aggregates.csv", &aggregates_csv(&result.aggregates))?;
    if !result.records.is_empty() {
        write_file(dir, "records.csv", &records_csv(&result.records))?;
    }
    Ok(())
}

fn cmd_check_derivatives(common: &CommonArgs) -> Result<ExitCode, String> {
    let cfg = load_config(common)?;
    let geometry = cfg.geometry().map_err(|e| e.to_string())?;
    let spec = make_partition(&geometry, cfg.partition_m).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (trial, &kind) in [MessageKind::Xi, MessageKind::Psi].iter().enumerate() {
        for (m_idx, &model) in [ChannelModelKind::Exact, ChannelModelKind::Approximate]
            .iter()
            .enumerate()
        {
            let seed = trial_seed(cfg.master_seed, trial, m_idx);
            let mut scenario = sample_scenario(&cfg, seed).map_err(|e| e.to_string())?;
            scenario.sigma2 = sigma2_for_snr(&scenario, 20.0).map_err(|e| e.to_string())?;
            let obs_seed = trial_seed(cfg.master_seed, trial, m_idx + 100);
            let received = synthesize_received(&scenario, obs_seed).map_err(|e| e.to_string())?;
            let obj = build_objective(kind, model, &scenario, &spec, &received.y)
                .map_err(|e| e.to_string())?;
            // evaluate slightly away from the truth so the gradient is
            // informative
            let points: Vec<CartesianPosition> = scenario
                .users
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    let s = 0.04 * (1.0 + 0.5 * k as f64);
                    CartesianPosition::new(u.position.x + s, u.position.y - 0.6 * s, u.position.z + s)
                })
                .collect();
            let (_, analytic) = obj
                .grad_log_message(&points, GradientDomain::Cartesian)
                .map_err(|e| e.to_string())?;
            let x0 = DVector::from_iterator(
                3 * points.len(),
                points.iter().flat_map(|p| [p.x, p.y, p.z]),
            );
            let numeric = fd_gradient(
                &|x: &DVector<f64>| {
                    let pts: Vec<CartesianPosition> = x
                        .as_slice()
                        .chunks(3)
                        .map(|c| CartesianPosition::new(c[0], c[1], c[2]))
                        .collect();
                    obj.eval_log_message(&pts).expect("objective evaluation")
                },
                &x0,
                1e-6,
            );
            let rel = (&analytic - &numeric).norm() / numeric.norm().max(1e-300);
            worst = worst.max(rel);
            let hess = obj
                .hess_log_message(&points)
                .map_err(|e| e.to_string())?
                .hessian
                .expect("order-2 evaluation");
            let asym = (&hess - hess.transpose()).norm() / hess.norm().max(1e-300);
            let ok = rel < 1e-5 && asym < 1e-10;
            if !ok {
                failures += 1;
            }
            println!(
                "{} {:?}/{:?}: gradient rel err {rel:.3e}, Hessian asymmetry {asym:.3e}",
                if ok { "ok  " } else { "FAIL" },
                kind,
                model
            );
        }
    }
    println!("worst gradient deviation {worst:.3e}");
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn build_objective(
    kind: MessageKind,
    model: ChannelModelKind,
    scenario: &nfloc::rf::UplinkScenario,
    spec: &nfloc::partition::PartitionSpec,
    y: &DVector<nalgebra::Complex<f64>>,
) -> nfloc::Result<MessageObjective> {
    use nalgebra::DMatrix;
    let k = scenario.users.len();
    let m2 = spec.num_subarrays();
    let obs = ObservationModel {
        y: y.clone(),
        w: scenario.beamformer.weights.clone(),
        spec: *spec,
        sigma2: scenario.sigma2,
        pilots: scenario.users.iter().map(|u| (u.tx_power_w, u.pilot)).collect(),
    };
    match kind {
        MessageKind::Xi => MessageObjective::new(
            kind,
            model,
            *spec,
            Some(obs.w.clone()),
            obs.noise_precision()?,
            obs.y.clone(),
            DMatrix::from_diagonal_element(k * m2, k * m2, nalgebra::Complex::new(1e-3, 0.0)),
            k,
        ),
        MessageKind::Psi => {
            // a synthetic gain-message factor with unit precision
            let dim = k * m2;
            let z = DVector::from_fn(dim, |i, _| {
                nalgebra::Complex::new(0.1 + 0.01 * i as f64, -0.02 * i as f64)
            });
            MessageObjective::new(
                kind,
                model,
                *spec,
                None,
                DMatrix::identity(dim, dim),
                z,
                DMatrix::from_diagonal_element(k, k, nalgebra::Complex::new(1e-3, 0.0)),
                k,
            )
        }
    }
}

fn cmd_bcrb(common: &CommonArgs) -> Result<ExitCode, String> {
    let cfg = load_config(common)?;
    let spec = make_partition(&cfg.geometry().map_err(|e| e.to_string())?, cfg.partition_m)
        .map_err(|e| e.to_string())?;
    let est = cfg.estimator_config();
    let mut out = String::from("snr_db,bcrb_rmse_m,trials\n");
    for (s, &snr_db) in cfg.snr_db.iter().enumerate() {
        let mut ms = 0.0;
        for t in 0..cfg.num_trials {
            let seed = trial_seed(cfg.master_seed, s, t);
            let mut scenario = sample_scenario(&cfg, seed).map_err(|e| e.to_string())?;
            scenario.sigma2 = sigma2_for_snr(&scenario, snr_db).map_err(|e| e.to_string())?;
            let j = nfloc::bcrb::fisher_matrix(&scenario, &spec).map_err(|e| e.to_string())?
                + nfloc::bcrb::prior_matrix(
                    cfg.num_users,
                    nfloc::harness::cone_position_variance(&cfg),
                    est.tau_pri,
                );
            let (_, bound) = nfloc::bcrb::position_bcrb(&j).map_err(|e| e.to_string())?;
            ms += bound * bound;
        }
        let rmse = (ms / cfg.num_trials as f64).sqrt();
        println!("snr {snr_db} dB: position bound {rmse:.6e} m");
        out.push_str(&format!("{snr_db},{rmse},{}\n", cfg.num_trials));
    }
    write_file(&common.out, "bcrb.csv", &out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_demo(common: &CommonArgs) -> Result<ExitCode, String> {
    let cfg = load_config(common)?;
    let spec = make_partition(&cfg.geometry().map_err(|e| e.to_string())?, cfg.partition_m)
        .map_err(|e| e.to_string())?;
    let snr_db = *cfg.snr_db.last().expect("validated nonempty");
    let seed = trial_seed(cfg.master_seed, 0, 0);
    let mut scenario = sample_scenario(&cfg, seed).map_err(|e| e.to_string())?;
    scenario.sigma2 = sigma2_for_snr(&scenario, snr_db).map_err(|e| e.to_string())?;
    let received =
        synthesize_received(&scenario, trial_seed(cfg.master_seed, 0, 1)).map_err(|e| e.to_string())?;
    let obs = ObservationModel {
        y: received.y,
        w: scenario.beamformer.weights.clone(),
        spec,
        sigma2: scenario.sigma2,
        pilots: scenario.users.iter().map(|u| (u.tx_power_w, u.pilot)).collect(),
    };
    let result = nfloc::estimator::run(&obs, &cfg.estimator_config()).map_err(|e| e.to_string())?;

    let mut report = String::new();
    report.push_str(&format!("demo trial: seed {seed}, snr {snr_db} dB\n"));
    for (k, u) in scenario.users.iter().enumerate() {
        let p = u.position;
        let pol = PolarPosition::from_cartesian(&p).map_err(|e| e.to_string())?;
        report.push_str(&format!(
            "user {k}: true position ({:.4}, {:.4}, {:.4}) m, range {:.4} m\n",
            p.x, p.y, p.z, pol.r
        ));
    }
    for (it, t) in result.trace.iter().enumerate() {
        report.push_str(&format!("iteration {it}: objective {:.6e}\n", t.objective));
        for (k, p) in t.positions.iter().enumerate() {
            let err = p.distance(&scenario.users[k].position);
            report.push_str(&format!(
                "  user {k}: ({:.4}, {:.4}, {:.4}) m, error {err:.6e} m\n",
                p.x, p.y, p.z
            ));
        }
    }
    report.push_str(&format!(
        "converged: {} after {} iterations, {} numerical fallbacks\n",
        result.converged, result.iterations, result.numerical_failures
    ));
    print!("{report}");
    write_file(&common.out, "demo.txt", &report)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Sweep { common, strict } => cmd_sweep(common, *strict),
        Command::CheckDerivatives { common } => cmd_check_derivatives(common),
        Command::Bcrb { common } => cmd_bcrb(common),
        Command::Demo { common } => cmd_demo(common),
    };
    match outcome {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
