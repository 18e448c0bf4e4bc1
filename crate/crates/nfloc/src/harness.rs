//! Monte Carlo experiment harness: scenario sampling, the exhaustive-search
//! plus gradient-ascent baseline, metrics, SNR sweeps, and result files.
//!
//! Sweeps are deterministic in the master seed regardless of worker count:
//! every trial derives its own seed from (master seed, SNR index, trial
//! index) and aggregation happens serially in a fixed order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bcrb;
use crate::channel::{channel_matrix, UserChannelParams};
use crate::deriv::{ChannelModelKind, MessageKind, MessageObjective};
use crate::error::{Error, Result};
use crate::estimator::{
    ga_maximize, grid_candidates, reconstruct_with_model, EstimatorConfig, ObservationModel,
    PositionObjective,
};
use crate::geometry::{ArrayGeometry, CartesianPosition};
use crate::linalg::{hermitian_part, HermitianSolver};
use crate::partition::make_partition;
use crate::rf::{random_beamformer, sigma2_for_snr, synthesize_received, UplinkScenario};

/// Algorithms the sweep can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "aple-lm")]
    ApleLm,
    #[serde(rename = "aple-lm-acm")]
    ApleLmAcm,
    #[serde(rename = "es-ga")]
    EsGa,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::ApleLm => "aple-lm",
            Algorithm::ApleLmAcm => "aple-lm-acm",
            Algorithm::EsGa => "es-ga",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aple-lm" => Ok(Algorithm::ApleLm),
            "aple-lm-acm" => Ok(Algorithm::ApleLmAcm),
            "es-ga" => Ok(Algorithm::EsGa),
            other => Err(Error::Config(format!(
                "unknown algorithm '{other}' (expected aple-lm, aple-lm-acm, or es-ga)"
            ))),
        }
    }
}

fn default_estimator() -> EstimatorConfig {
    EstimatorConfig::new(5.0, 10.0)
}

fn default_cone_angle() -> f64 {
    120.0
}

/// Everything one sweep needs; serialized as JSON with units in the field
/// names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub spacing_m: f64,
    pub wavelength_m: f64,
    /// Partition factor: the array splits into partition_m^2 subarrays.
    pub partition_m: usize,
    pub n_rf: usize,
    pub num_users: usize,
    #[serde(default = "default_cone_angle")]
    pub cone_vertex_angle_deg: f64,
    pub r_min_m: f64,
    pub r_max_m: f64,
    pub snr_db: Vec<f64>,
    pub num_trials: usize,
    pub master_seed: u64,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorConfig,
    /// Also keep per-trial records in the result (and the records CSV).
    #[serde(default)]
    pub save_records: bool,
}

impl ExperimentConfig {
    /// A desk-scale configuration that runs in minutes rather than days.
    pub fn desk() -> Self {
        ExperimentConfig {
            n_x: 21,
            n_y: 21,
            spacing_m: 0.025,
            wavelength_m: 0.05,
            partition_m: 3,
            n_rf: 32,
            num_users: 2,
            cone_vertex_angle_deg: 120.0,
            r_min_m: 5.0,
            r_max_m: 10.0,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            num_trials: 100,
            master_seed: 1,
            algorithms: vec![Algorithm::ApleLm, Algorithm::EsGa],
            estimator: default_estimator(),
            save_records: false,
        }
    }

    /// The full-scale reference setup: 45x45 array, 160 RF chains, 3 users.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            n_x: 45,
            n_y: 45,
            partition_m: 3,
            n_rf: 160,
            num_users: 3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_trials == 0 {
            return fail("num_trials must be >= 1".into());
        }
        if self.snr_db.is_empty() {
            return fail("snr_db list must be nonempty".into());
        }
        if !(self.cone_vertex_angle_deg > 0.0 && self.cone_vertex_angle_deg < 180.0) {
            return fail(format!(
                "cone_vertex_angle_deg {} must lie in (0, 180)",
                self.cone_vertex_angle_deg
            ));
        }
        if self.num_users == 0 {
            return fail("num_users must be >= 1".into());
        }
        if self.algorithms.is_empty() {
            return fail("algorithms list must be nonempty".into());
        }
        if !(self.r_min_m > 0.0 && self.r_max_m > self.r_min_m) {
            return fail(format!(
                "range interval [{}, {}] must satisfy 0 < r_min_m < r_max_m",
                self.r_min_m, self.r_max_m
            ));
        }
        self.geometry()?;
        make_partition(&self.geometry()?, self.partition_m)?;
        self.estimator_config().validate()?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.n_x, self.n_y, self.spacing_m, self.wavelength_m)
    }

    /// The estimator configuration with the sweep's range interval applied.
    pub fn estimator_config(&self) -> EstimatorConfig {
        let mut est = self.estimator.clone();
        est.r_min = self.r_min_m;
        est.r_max = self.r_max_m;
        est
    }
}

/// One Monte Carlo trial; maps are keyed by algorithm name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub snr_db: f64,
    pub sigma2: f64,
    pub true_positions_m: Vec<[f64; 3]>,
    /// Estimates reordered by the minimum-cost user matching.
    pub estimates_m: BTreeMap<String, Vec<[f64; 3]>>,
    /// Sum over users of squared position error, m^2.
    pub sq_error_m2: BTreeMap<String, f64>,
    /// Sum over users of per-user channel NMSE.
    pub channel_nmse: BTreeMap<String, f64>,
    /// Sum over users of squared error after each outer iteration.
    pub iteration_sq_error_m2: BTreeMap<String, Vec<f64>>,
    pub iterations: BTreeMap<String, usize>,
    pub bcrb_rmse_m: f64,
    pub wall_time_s: f64,
}

/// One aggregates-CSV row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepAggregate {
    pub snr_db: f64,
    pub algo: String,
    pub rmse_m: f64,
    pub nmse: f64,
    pub bcrb_rmse_m: f64,
    pub trials_ok: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub aggregates: Vec<SweepAggregate>,
    /// Kept only when the config asks for per-trial records.
    pub records: Vec<TrialRecord>,
    /// Human-readable descriptions of trials that failed and were excluded.
    pub failures: Vec<String>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Pure per-trial seed derivation.
pub fn trial_seed(master_seed: u64, snr_idx: usize, trial_idx: usize) -> u64 {
    splitmix(master_seed ^ splitmix(((snr_idx as u64) << 32) | trial_idx as u64))
}

/// Draw K user positions i.i.d.: direction uniform over the spherical cap
/// about +z with half-angle equal to half the cone vertex angle, range
/// uniform on [r_min, r_max]. The beamformer is redrawn per scenario.
pub fn sample_scenario(cfg: &ExperimentConfig, seed: u64) -> Result<UplinkScenario> {
    let geometry = cfg.geometry()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cos_max = (cfg.cone_vertex_angle_deg.to_radians() / 2.0).cos();
    let mut users = Vec::with_capacity(cfg.num_users);
    for _ in 0..cfg.num_users {
        let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        // cos(theta) uniform on [cos_max, 1] is uniform over the cap area
        let cos_t = cos_max + rng.gen::<f64>() * (1.0 - cos_max);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let r = cfg.r_min_m + rng.gen::<f64>() * (cfg.r_max_m - cfg.r_min_m);
        let p = CartesianPosition::new(r * sin_t * phi.cos(), r * sin_t * phi.sin(), r * cos_t);
        users.push(UserChannelParams::new(p, cfg.wavelength_m));
    }
    let beamformer = random_beamformer(
        cfg.n_rf,
        geometry.num_antennas(),
        splitmix(seed ^ 0xBEA3),
    );
    Ok(UplinkScenario {
        geometry,
        users,
        beamformer,
        sigma2: 0.0,
    })
}

/// Sequential exhaustive-search + gradient-ascent baseline. Each user is
/// located against the residual signal; its fitted rank-one component is
/// then subtracted before the next user.
///
/// Returns matched-order positions and the reconstructed channels.
pub fn es_ga_baseline(
    y: &DVector<Complex64>,
    w: &DMatrix<Complex64>,
    geometry: &ArrayGeometry,
    sigma2: f64,
    num_users: usize,
    pilots: &[(f64, Complex64)],
    est_cfg: &EstimatorConfig,
) -> Result<(Vec<CartesianPosition>, Vec<crate::channel::ChannelMatrix>, usize)> {
    let spec = make_partition(geometry, 1)?;
    let cn = (w * w.adjoint()).map(|x| x * sigma2);
    let cn_inv = HermitianSolver::new(&hermitian_part(&cn))?.inverse();
    let grid = grid_candidates(est_cfg, &spec);
    if !grid.iter().any(|c| c.feasible()) {
        return Err(Error::Config("search grid has no feasible points".into()));
    }

    let mut y_res = y.clone();
    let mut positions = Vec::with_capacity(num_users);
    let mut channels = Vec::with_capacity(num_users);
    let mut ga_iters = 0;
    for k in 0..num_users {
        let obj = MessageObjective::new(
            MessageKind::Xi,
            est_cfg.model,
            spec,
            Some(w.clone()),
            cn_inv.clone(),
            y_res.clone(),
            DMatrix::zeros(1, 1),
            1,
        )?;
        let mut best: Option<(f64, CartesianPosition)> = None;
        for cand in &grid {
            if !cand.feasible() {
                continue;
            }
            let p = cand.to_cartesian()?;
            let value = obj.value(std::slice::from_ref(&p))?;
            if best.as_ref().map_or(true, |(v, _)| value > *v) {
                best = Some((value, p));
            }
        }
        let (_, start) = best.expect("grid has a feasible point");
        let ga = ga_maximize(&obj, &[start], &[0], est_cfg)?;
        let p_hat = ga.positions[0];
        ga_iters += ga.iterations;

        // closed-form amplitude on the fitted column, then peel it off
        let col = obj.user_columns(0, &p_hat, 0)?.a.column(0).into_owned();
        let gc = cn_inv.clone() * &col;
        let denom = col.dotc(&gc);
        if denom.norm() == 0.0 {
            return Err(Error::Numerical("degenerate baseline column".into()));
        }
        let beta = gc.dotc(&y_res).conj() / denom;
        y_res -= col.map(|x| x * beta);

        let (power, pilot) = pilots[k];
        let h_ref = beta / (Complex64::new(power.sqrt(), 0.0) * pilot);
        channels.push(reconstruct_with_model(&p_hat, h_ref, &spec, est_cfg.model)?);
        positions.push(p_hat);
    }
    Ok((positions, channels, ga_iters))
}

/// Minimum-cost matching of estimates to true users by squared position
/// error; brute force over permutations (user counts are small).
pub fn match_users(
    truth: &[CartesianPosition],
    estimates: &[CartesianPosition],
) -> Result<Vec<usize>> {
    let k = truth.len();
    if estimates.len() != k {
        return Err(Error::InvalidArgument(format!(
            "matching {} estimates against {} users",
            estimates.len(),
            k
        )));
    }
    if k > 8 {
        return Err(Error::InvalidArgument(
            "user matching supports at most 8 users".into(),
        ));
    }
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| {
                let d = truth[i].as_vector() - estimates[j].as_vector();
                d.norm_squared()
            })
            .sum()
    };
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = cost(&perm);
    // Heap's algorithm
    let mut c = vec![0usize; k];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let cur = cost(&perm);
            if cur < best_cost {
                best_cost = cur;
                best = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Matched sum of squared position errors over users, m^2.
pub fn matched_sq_error(
    truth: &[CartesianPosition],
    estimates: &[CartesianPosition],
) -> Result<(Vec<usize>, f64)> {
    let perm = match_users(truth, estimates)?;
    let sq = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| (truth[i].as_vector() - estimates[j].as_vector()).norm_squared())
        .sum();
    Ok((perm, sq))
}

/// Aggregate RMSE and NMSE over a set of records for one algorithm.
pub fn compute_metrics(records: &[&TrialRecord], algo: &str, num_users: usize) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to aggregate".into()));
    }
    let n = records.len() as f64;
    let k = num_users as f64;
    let mut sq = 0.0;
    let mut nmse = 0.0;
    for r in records {
        sq += r
            .sq_error_m2
            .get(algo)
            .ok_or_else(|| Error::InvalidArgument(format!("record missing algorithm '{algo}'")))?;
        nmse += r.channel_nmse.get(algo).copied().unwrap_or(f64::NAN);
    }
    Ok(((sq / (k * n)).sqrt(), nmse / (k * n)))
}

/// Per-coordinate variance (averaged over x, y, z) of the cone-region
/// position distribution. The error bound uses it as a Gaussian surrogate
/// prior so that, at low SNR, the bound saturates at the region scale just
/// like any estimator confined to the region.
pub fn cone_position_variance(cfg: &ExperimentConfig) -> f64 {
    let c0 = (cfg.cone_vertex_angle_deg.to_radians() / 2.0).cos();
    let (a, b) = (cfg.r_min_m, cfg.r_max_m);
    let er = 0.5 * (a + b);
    let er2 = (b * b * b - a * a * a) / (3.0 * (b - a));
    let ec = 0.5 * (1.0 + c0);
    let ec2 = (1.0 - c0 * c0 * c0) / (3.0 * (1.0 - c0));
    let var_z = er2 * ec2 - (er * ec).powi(2);
    let var_xy = er2 * (1.0 - ec2) / 2.0;
    (2.0 * var_xy + var_z) / 3.0
}

fn positions_of(users: &[UserChannelParams]) -> Vec<CartesianPosition> {
    users.iter().map(|u| u.position).collect()
}

fn run_trial(cfg: &ExperimentConfig, snr_idx: usize, trial_idx: usize) -> Result<TrialRecord> {
    let started = std::time::Instant::now();
    let seed = trial_seed(cfg.master_seed, snr_idx, trial_idx);
    let snr_db = cfg.snr_db[snr_idx];
    let mut scenario = sample_scenario(cfg, seed)?;
    scenario.sigma2 = sigma2_for_snr(&scenario, snr_db)?;
    let received = synthesize_received(&scenario, splitmix(seed ^ 0x0153))?;
    let spec = make_partition(&scenario.geometry, cfg.partition_m)?;
    let truth = positions_of(&scenario.users);
    let true_channels: Vec<DVector<Complex64>> = scenario
        .users
        .iter()
        .map(|u| channel_matrix(u, &scenario.geometry).map(|h| h.to_vector()))
        .collect::<Result<_>>()?;
    let pilots: Vec<(f64, Complex64)> = scenario
        .users
        .iter()
        .map(|u| (u.tx_power_w, u.pilot))
        .collect();
    let base_cfg = cfg.estimator_config();

    let j = bcrb::fisher_matrix(&scenario, &spec)?
        + bcrb::prior_matrix(cfg.num_users, cone_position_variance(cfg), base_cfg.tau_pri);
    let (_, bcrb_rmse_m) = bcrb::position_bcrb(&j)?;

    let mut record = TrialRecord {
        seed,
        snr_db,
        sigma2: scenario.sigma2,
        true_positions_m: truth.iter().map(|p| [p.x, p.y, p.z]).collect(),
        estimates_m: BTreeMap::new(),
        sq_error_m2: BTreeMap::new(),
        channel_nmse: BTreeMap::new(),
        iteration_sq_error_m2: BTreeMap::new(),
        iterations: BTreeMap::new(),
        bcrb_rmse_m,
        wall_time_s: 0.0,
    };

    for algo in &cfg.algorithms {
        let mut est_cfg = base_cfg.clone();
        let (positions, channels, iterations, trace) = match algo {
            Algorithm::ApleLm | Algorithm::ApleLmAcm => {
                est_cfg.model = if *algo == Algorithm::ApleLmAcm {
                    ChannelModelKind::Approximate
                } else {
                    ChannelModelKind::Exact
                };
                let obs = ObservationModel {
                    y: received.y.clone(),
                    w: scenario.beamformer.weights.clone(),
                    spec,
                    sigma2: scenario.sigma2,
                    pilots: pilots.clone(),
                };
                let out = crate::estimator::run(&obs, &est_cfg)?;
                let per_iter: Vec<f64> = out
                    .trace
                    .iter()
                    .map(|t| matched_sq_error(&truth, &t.positions).map(|(_, sq)| sq))
                    .collect::<Result<_>>()?;
                let ch: Vec<DVector<Complex64>> =
                    out.channels.iter().map(|c| c.to_vector()).collect();
                (out.positions, ch, out.iterations, per_iter)
            }
            Algorithm::EsGa => {
                // match the effective grid the message-passing estimator uses
                est_cfg.grid_mx = Some(base_cfg.grid_mx.unwrap_or(4 * spec.ns_x));
                est_cfg.grid_my = Some(base_cfg.grid_my.unwrap_or(4 * spec.ns_y));
                let (positions, channels, iters) = es_ga_baseline(
                    &received.y,
                    &scenario.beamformer.weights,
                    &scenario.geometry,
                    scenario.sigma2,
                    cfg.num_users,
                    &pilots,
                    &est_cfg,
                )?;
                let ch = channels.iter().map(|c| c.to_vector()).collect();
                (positions, ch, iters, Vec::new())
            }
        };
        let (perm, sq) = matched_sq_error(&truth, &positions)?;
        let channels: Vec<&DVector<Complex64>> = perm.iter().map(|&jj| &channels[jj]).collect();
        let nmse: f64 = true_channels
            .iter()
            .zip(&channels)
            .map(|(h, h_hat)| (*h_hat - h).norm_squared() / h.norm_squared())
            .sum();
        let name = algo.as_str().to_string();
        record.estimates_m.insert(
            name.clone(),
            perm.iter()
                .map(|&jj| [positions[jj].x, positions[jj].y, positions[jj].z])
                .collect(),
        );
        record.sq_error_m2.insert(name.clone(), sq);
        record.channel_nmse.insert(name.clone(), nmse);
        record.iterations.insert(name.clone(), iterations);
        if !trace.is_empty() {
            record.iteration_sq_error_m2.insert(name, trace);
        }
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Recompute per-SNR aggregates from the ordered per-trial records.
pub fn aggregate_records(
    cfg: &ExperimentConfig,
    records: &[(usize, TrialRecord)],
) -> Result<Vec<SweepAggregate>> {
    let mut aggregates = Vec::new();
    for (snr_idx, &snr_db) in cfg.snr_db.iter().enumerate() {
        let group: Vec<&TrialRecord> = records
            .iter()
            .filter(|(i, _)| *i == snr_idx)
            .map(|(_, r)| r)
            .collect();
        for algo in &cfg.algorithms {
            if group.is_empty() {
                aggregates.push(SweepAggregate {
                    snr_db,
                    algo: algo.as_str().to_string(),
                    rmse_m: f64::NAN,
                    nmse: f64::NAN,
                    bcrb_rmse_m: f64::NAN,
                    trials_ok: 0,
                });
                continue;
            }
            let (rmse_m, nmse) = compute_metrics(&group, algo.as_str(), cfg.num_users)?;
            let bcrb_ms: f64 =
                group.iter().map(|r| r.bcrb_rmse_m * r.bcrb_rmse_m).sum::<f64>() / group.len() as f64;
            aggregates.push(SweepAggregate {
                snr_db,
                algo: algo.as_str().to_string(),
                rmse_m,
                nmse,
                bcrb_rmse_m: bcrb_ms.sqrt(),
                trials_ok: group.len(),
            });
        }
    }
    Ok(aggregates)
}

/// Run the full sweep. `jobs = 0` uses rayon's default worker count.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let items: Vec<(usize, usize)> = (0..cfg.snr_db.len())
        .flat_map(|s| (0..cfg.num_trials).map(move |t| (s, t)))
        .collect();

    let work = || -> Vec<(usize, usize, std::result::Result<TrialRecord, String>)> {
        items
            .par_iter()
            .map(|&(s, t)| (s, t, run_trial(cfg, s, t).map_err(|e| e.to_string())))
            .collect()
    };
    let outcomes = if jobs == 0 {
        work()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(work)
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (s, t, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push((s, r)),
            Err(e) => failures.push(format!(
                "snr {} dB trial {t}: {e}",
                cfg.snr_db[s]
            )),
        }
    }
    let aggregates = aggregate_records(cfg, &records)?;
    Ok(SweepResult {
        config: cfg.clone(),
        aggregates,
        records: if cfg.save_records {
            records.into_iter().map(|(_, r)| r).collect()
        } else {
            Vec::new()
        },
        failures,
    })
}

pub const AGGREGATE_CSV_HEADER: &str = "snr_db,algo,rmse_m,nmse,bcrb_rmse_m,trials_ok";

/// Aggregates as CSV with the fixed header.
pub fn aggregates_csv(aggregates: &[SweepAggregate]) -> String {
    let mut out = String::from(AGGREGATE_CSV_HEADER);
    out.push('\n');
    for a in aggregates {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.snr_db, a.algo, a.rmse_m, a.nmse, a.bcrb_rmse_m, a.trials_ok
        ));
    }
    out
}

/// Per-trial records as CSV, one row per (trial, algorithm).
pub fn records_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("seed,snr_db,algo,sq_error_m2,channel_nmse,iterations,bcrb_rmse_m\n");
    for r in records {
        for (algo, sq) in &r.sq_error_m2 {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                r.snr_db,
                algo,
                sq,
                r.channel_nmse.get(algo).copied().unwrap_or(f64::NAN),
                r.iterations.get(algo).copied().unwrap_or(0),
                r.bcrb_rmse_m
            ));
        }
    }
    out
}
