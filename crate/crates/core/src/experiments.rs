//! Monte Carlo harness: assignment-matched RMSE, SNR and target-count
//! sweeps with paired delay-only baseline runs, CRLB overlay and CSV I/O.

use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

use crate::crlb::{crlb_position, CrlbOptions};
use crate::error::{Error, Result};
use crate::estimator::{delay_only_localize, localize, EstimatorConfig, LocalizationResult, Roi};
use crate::geometry::{TargetTruth, Vec2};
use crate::rng;
use crate::scenario::ScenarioConfig;
use crate::signal::{noise_sigma_for_snr, synthesize_scene};

/// Largest target count the subset-DP assignment accepts.
const MAX_ASSIGN: usize = 20;

/// Minimum-total-squared-distance matching of estimates to truths, as
/// `(estimate, truth)` index pairs sorted by truth index.
pub fn assign(estimates: &[Vec2], truths: &[Vec2]) -> Result<Vec<(usize, usize)>> {
    let n = truths.len();
    if estimates.len() != n {
        return Err(Error::LengthMismatch {
            estimates: estimates.len(),
            truths: n,
        });
    }
    if n > MAX_ASSIGN {
        return Err(Error::Config(format!("assignment limited to {MAX_ASSIGN} targets")));
    }
    // best[mask]: min cost matching truths 0..popcount(mask) to the
    // estimates in mask
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if !best[mask].is_finite() {
            continue;
        }
        let t = mask.count_ones() as usize;
        if t == n {
            continue;
        }
        for (e, est) in estimates.iter().enumerate() {
            if mask & (1 << e) != 0 {
                continue;
            }
            let next = mask | (1 << e);
            let c = best[mask] + (est - truths[t]).norm_squared();
            if c < best[next] {
                best[next] = c;
                choice[next] = e;
            }
        }
    }
    let mut pairs = vec![(0, 0); n];
    let mut mask = full - 1;
    for t in (0..n).rev() {
        let e = choice[mask];
        pairs[t] = (e, t);
        mask &= !(1 << e);
    }
    Ok(pairs)
}

/// √((1/L) Σ ‖p̂ − p‖²) after optimal assignment.
pub fn rmse(estimates: &[Vec2], truths: &[Vec2]) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::LengthMismatch {
            estimates: estimates.len(),
            truths: 0,
        });
    }
    let pairs = assign(estimates, truths)?;
    let sq: f64 = pairs
        .iter()
        .map(|&(e, t)| (estimates[e] - truths[t]).norm_squared())
        .sum();
    Ok((sq / truths.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub snr_db: f64,
    /// Error per truth index, meters.
    pub per_target_error: Vec<f64>,
    pub assigned_pairs: Vec<(usize, usize)>,
    pub converged_flags: Vec<bool>,
    /// Estimator error, or the highest-Ψ estimate lies beyond the outlier
    /// gate from every truth.
    pub failed: bool,
}

impl TrialRecord {
    pub fn mean_square_error(&self) -> f64 {
        let n = self.per_target_error.len().max(1) as f64;
        self.per_target_error.iter().map(|e| e * e).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// SNR values in dB or target counts.
    pub axis: Vec<f64>,
    pub rmse: Vec<f64>,
    pub root_crlb: Vec<f64>,
    pub trials_per_point: usize,
    pub failures: Vec<usize>,
    pub baseline_rmse: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub result: SweepResult,
    /// `records[axis_index][trial]`.
    pub records: Vec<Vec<TrialRecord>>,
    pub baseline_records: Option<Vec<Vec<TrialRecord>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub baseline: bool,
    /// Synthesize without noise (SNR still sets the CRLB).
    pub noiseless: bool,
    /// A trial fails when its highest-Ψ estimate is farther than this from
    /// every truth, meters.
    pub outlier_gate: f64,
    pub crlb: CrlbOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            baseline: false,
            noiseless: false,
            outlier_gate: 50.0,
            crlb: CrlbOptions::default(),
        }
    }
}

/// Random target placement for the target-count sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementRule {
    pub region: Roi,
    pub min_separation: f64,
    /// Velocity components drawn uniformly from ±max_speed, m/s.
    pub max_speed: f64,
    pub rcs: f64,
    pub max_attempts: usize,
}

impl PlacementRule {
    /// Uniform inside `roi` shrunk by a 10 m margin, 40 m separation.
    pub fn within(roi: &Roi) -> Self {
        let m = 10.0;
        Self {
            region: Roi {
                x0: roi.x0 + m,
                y0: roi.y0 + m,
                x1: roi.x1 - m,
                y1: roi.y1 - m,
            },
            min_separation: 40.0,
            max_speed: 30.0,
            rcs: 0.01,
            max_attempts: 1000,
        }
    }

    pub fn place<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<TargetTruth>> {
        let r = &self.region;
        for _ in 0..self.max_attempts {
            let mut placed: Vec<TargetTruth> = Vec::with_capacity(count);
            let mut ok = true;
            for _ in 0..count {
                let p = Vec2::new(rng.random_range(r.x0..=r.x1), rng.random_range(r.y0..=r.y1));
                if placed.iter().any(|t| (t.position - p).norm() < self.min_separation) {
                    ok = false;
                    break;
                }
                let v = Vec2::new(
                    rng.random_range(-self.max_speed..=self.max_speed),
                    rng.random_range(-self.max_speed..=self.max_speed),
                );
                placed.push(TargetTruth::new(p, v, self.rcs)?);
            }
            if ok {
                return Ok(placed);
            }
        }
        Err(Error::PlacementFailure {
            count,
            separation: self.min_separation,
            attempts: self.max_attempts,
        })
    }
}

fn score(
    outcome: Result<LocalizationResult>,
    truths: &[Vec2],
    trial_id: usize,
    seed: u64,
    snr_db: f64,
    gate: f64,
) -> TrialRecord {
    let mut record = TrialRecord {
        trial_id,
        seed,
        snr_db,
        per_target_error: Vec::new(),
        assigned_pairs: Vec::new(),
        converged_flags: Vec::new(),
        failed: true,
    };
    let res = match outcome {
        Ok(r) => r,
        Err(e) => {
            log::debug!("trial {trial_id} failed: {e}");
            return record;
        }
    };
    let Ok(pairs) = assign(&res.estimates, truths) else {
        return record;
    };
    let mut errors = vec![0.0; truths.len()];
    for &(e, t) in &pairs {
        errors[t] = (res.estimates[e] - truths[t]).norm();
    }
    let best = (0..res.estimates.len())
        .max_by(|&a, &b| res.spectrum_values[a].total_cmp(&res.spectrum_values[b]).then(b.cmp(&a)));
    record.failed = match best {
        Some(b) => !truths.iter().any(|t| (res.estimates[b] - t).norm() <= gate),
        None => true,
    } || errors.iter().any(|e| !e.is_finite());
    record.per_target_error = errors;
    record.assigned_pairs = pairs;
    record.converged_flags = res.converged;
    record
}

/// Trial-averaged RMSE over non-failed trials, and the failure count.
pub fn aggregate(records: &[TrialRecord]) -> (f64, usize) {
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| !r.failed).collect();
    let failures = records.len() - ok.len();
    if ok.is_empty() {
        return (f64::NAN, failures);
    }
    let mse = ok.iter().map(|r| r.mean_square_error()).sum::<f64>() / ok.len() as f64;
    (mse.sqrt(), failures)
}

fn mean_root_crlb(scenario: &ScenarioConfig, sigma: f64, options: CrlbOptions) -> f64 {
    if !(sigma > 0.0) {
        return f64::NAN;
    }
    let roots: Vec<f64> = (0..scenario.targets.len())
        .filter_map(|l| crlb_position(scenario, l, sigma, options).ok())
        .map(|r| r.root_crlb)
        .collect();
    if roots.is_empty() {
        f64::NAN
    } else {
        roots.iter().sum::<f64>() / roots.len() as f64
    }
}

/// Per SNR point: fixed geometry, fresh noise, beamformers and gain phases
/// per trial; trial t at point i is seeded from (master_seed, i, t).
pub fn run_snr_sweep(
    scenario: &ScenarioConfig,
    snr_list: &[f64],
    trials: usize,
    cfg: &EstimatorConfig,
    master_seed: u64,
    options: SweepOptions,
) -> Result<SweepOutput> {
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    scenario.validate()?;
    let truths = scenario.target_positions();
    let cfg = EstimatorConfig {
        targets: scenario.targets.len(),
        ..cfg.clone()
    };
    cfg.validate()?;

    let sigmas = snr_list
        .iter()
        .map(|&snr| noise_sigma_for_snr(scenario, snr))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..snr_list.len())
        .flat_map(|i| (0..trials).map(move |t| (i, t)))
        .collect();
    let outcomes: Vec<(TrialRecord, Option<TrialRecord>)> = jobs
        .par_iter()
        .map(|&(i, t)| {
            let seed = rng::derive_seed(master_seed, &[i as u64, t as u64]);
            let sigma = if options.noiseless { 0.0 } else { sigmas[i] };
            let snr = snr_list[i];
            let tensors = match synthesize_scene(scenario, sigma, seed) {
                Ok(t) => t,
                Err(e) => {
                    let rec = score(Err(e), &truths, t, seed, snr, options.outlier_gate);
                    return (rec.clone(), options.baseline.then_some(rec));
                }
            };
            let proposed = score(
                localize(&tensors, &scenario.aps, &scenario.ofdm, &cfg),
                &truths,
                t,
                seed,
                snr,
                options.outlier_gate,
            );
            let baseline = options.baseline.then(|| {
                score(
                    delay_only_localize(&tensors, &scenario.aps, &scenario.ofdm, &cfg),
                    &truths,
                    t,
                    seed,
                    snr,
                    options.outlier_gate,
                )
            });
            (proposed, baseline)
        })
        .collect();

    let mut records = vec![Vec::with_capacity(trials); snr_list.len()];
    let mut baseline_records = vec![Vec::with_capacity(trials); snr_list.len()];
    for ((i, _), (p, b)) in jobs.iter().zip(outcomes) {
        records[*i].push(p);
        if let Some(b) = b {
            baseline_records[*i].push(b);
        }
    }

    let mut result = SweepResult {
        axis: snr_list.to_vec(),
        rmse: Vec::new(),
        root_crlb: Vec::new(),
        trials_per_point: trials,
        failures: Vec::new(),
        baseline_rmse: options.baseline.then(Vec::new),
    };
    for (i, recs) in records.iter().enumerate() {
        let (r, f) = aggregate(recs);
        result.rmse.push(r);
        result.failures.push(f);
        let sigma = if options.noiseless { 0.0 } else { sigmas[i] };
        result.root_crlb.push(mean_root_crlb(scenario, sigma, options.crlb));
        if let Some(b) = result.baseline_rmse.as_mut() {
            b.push(aggregate(&baseline_records[i]).0);
        }
    }
    Ok(SweepOutput {
        result,
        records,
        baseline_records: options.baseline.then_some(baseline_records),
    })
}

/// Per target count L: each trial draws a fresh placement (seeded from
/// (master_seed, L index, trial, 0)) and noise (… , 1).
#[allow(clippy::too_many_arguments)]
pub fn run_target_sweep(
    template: &ScenarioConfig,
    target_counts: &[usize],
    snr_db: f64,
    trials: usize,
    cfg: &EstimatorConfig,
    placement: &PlacementRule,
    master_seed: u64,
    options: SweepOptions,
) -> Result<SweepOutput> {
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..target_counts.len())
        .flat_map(|i| (0..trials).map(move |t| (i, t)))
        .collect();

    type Outcome = (TrialRecord, Option<TrialRecord>, f64);
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|&(i, t)| -> Result<Outcome> {
            let count = target_counts[i];
            let mut place_rng = rng::stream(master_seed, &[i as u64, t as u64, 0]);
            let mut scenario = template.clone();
            scenario.targets = placement.place(count, &mut place_rng)?;
            let truths = scenario.target_positions();
            let sigma = noise_sigma_for_snr(&scenario, snr_db)?;
            let seed = rng::derive_seed(master_seed, &[i as u64, t as u64, 1]);
            let tensors = synthesize_scene(&scenario, if options.noiseless { 0.0 } else { sigma }, seed)?;
            let trial_cfg = EstimatorConfig {
                targets: count,
                ..cfg.clone()
            };
            let proposed = score(
                localize(&tensors, &scenario.aps, &scenario.ofdm, &trial_cfg),
                &truths,
                t,
                seed,
                snr_db,
                options.outlier_gate,
            );
            let baseline = options.baseline.then(|| {
                score(
                    delay_only_localize(&tensors, &scenario.aps, &scenario.ofdm, &trial_cfg),
                    &truths,
                    t,
                    seed,
                    snr_db,
                    options.outlier_gate,
                )
            });
            Ok((proposed, baseline, mean_root_crlb(&scenario, sigma, options.crlb)))
        })
        .collect::<Result<Vec<_>>>()?;

    let n_axis = target_counts.len();
    let mut records = vec![Vec::with_capacity(trials); n_axis];
    let mut baseline_records = vec![Vec::with_capacity(trials); n_axis];
    let mut crlb_sum = vec![(0.0, 0usize); n_axis];
    for ((i, _), (p, b, c)) in jobs.iter().zip(outcomes) {
        records[*i].push(p);
        if let Some(b) = b {
            baseline_records[*i].push(b);
        }
        if c.is_finite() {
            crlb_sum[*i].0 += c;
            crlb_sum[*i].1 += 1;
        }
    }

    let mut result = SweepResult {
        axis: target_counts.iter().map(|&c| c as f64).collect(),
        rmse: Vec::new(),
        root_crlb: crlb_sum
            .iter()
            .map(|&(s, n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect(),
        trials_per_point: trials,
        failures: Vec::new(),
        baseline_rmse: options.baseline.then(Vec::new),
    };
    for (i, recs) in records.iter().enumerate() {
        let (r, f) = aggregate(recs);
        result.rmse.push(r);
        result.failures.push(f);
        if let Some(b) = result.baseline_rmse.as_mut() {
            b.push(aggregate(&baseline_records[i]).0);
        }
    }
    Ok(SweepOutput {
        result,
        records,
        baseline_records: options.baseline.then_some(baseline_records),
    })
}

pub const SWEEP_CSV_HEADER: &str = "axis_value,rmse_m,root_crlb_m,baseline_rmse_m,trials,failures";

/// Header plus one row per axis point; floats use the shortest
/// representation that parses back to the identical value.
pub fn sweep_csv_string(result: &SweepResult) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for i in 0..result.axis.len() {
        let baseline = result
            .baseline_rmse
            .as_ref()
            .map(|b| format!("{}", b[i]))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            result.axis[i], result.rmse[i], result.root_crlb[i], baseline, result.trials_per_point, result.failures[i]
        );
    }
    s
}

pub fn emit_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, sweep_csv_string(result))?;
    Ok(())
}

pub fn parse_sweep_csv(text: &str) -> Result<SweepResult> {
    let mut lines = text.lines();
    match lines.next() {
        Some(SWEEP_CSV_HEADER) => {}
        other => return Err(Error::Config(format!("unexpected sweep header {other:?}"))),
    }
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))) };
    let int = |s: &str| -> Result<usize> { s.parse::<usize>().map_err(|e| Error::Config(format!("bad count {s:?}: {e}"))) };
    let mut result = SweepResult {
        axis: Vec::new(),
        rmse: Vec::new(),
        root_crlb: Vec::new(),
        trials_per_point: 0,
        failures: Vec::new(),
        baseline_rmse: None,
    };
    let mut baseline = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Config(format!("expected 6 columns, got {}", f.len())));
        }
        result.axis.push(num(f[0])?);
        result.rmse.push(num(f[1])?);
        result.root_crlb.push(num(f[2])?);
        if !f[3].is_empty() {
            baseline.push(num(f[3])?);
        }
        result.trials_per_point = int(f[4])?;
        result.failures.push(int(f[5])?);
    }
    if !baseline.is_empty() {
        result.baseline_rmse = Some(baseline);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    /// Exhaustive permutation oracle.
    fn brute_rmse(est: &[Vec2], truth: &[Vec2]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(truth.len())
            .iter()
            .map(|perm| {
                let s: f64 = perm.iter().enumerate().map(|(t, &e)| (est[e] - truth[t]).norm_squared()).sum();
                (s / truth.len() as f64).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn rmse_cases() {
        let truths = vec![v(1.0, 2.0), v(-4.0, 7.0)];
        assert_eq!(rmse(&truths, &truths).unwrap(), 0.0);
        assert_eq!(rmse(&[v(3.0, 4.0)], &[v(0.0, 0.0)]).unwrap(), 5.0);

        let t = vec![v(0.0, 0.0), v(100.0, 0.0)];
        let swapped = vec![v(100.0, 1.0), v(0.0, -1.0)];
        assert!((rmse(&swapped, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((brute_rmse(&swapped, &t) - 1.0).abs() < 1e-12);
        let naive = ((swapped[0] - t[0]).norm_squared() / 2.0 + (swapped[1] - t[1]).norm_squared() / 2.0).sqrt();
        assert!(naive >= 70.0);

        assert!(matches!(rmse(&[v(0.0, 0.0)], &t), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn assignment_matches_exhaustive_oracle() {
        let mut r = rng::stream(5, &[]);
        for n in 1..=6 {
            for _ in 0..20 {
                let pts = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec2> {
                    (0..n).map(|_| v(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0))).collect()
                };
                let e = pts(&mut r);
                let t = pts(&mut r);
                let fast = rmse(&e, &t).unwrap();
                let slow = brute_rmse(&e, &t);
                assert!((fast - slow).abs() < 1e-9 * slow.max(1.0));
            }
        }
    }

    #[test]
    fn aggregate_excludes_failures() {
        let rec = |errs: Vec<f64>, failed| TrialRecord {
            trial_id: 0,
            seed: 0,
            snr_db: 0.0,
            per_target_error: errs,
            assigned_pairs: vec![],
            converged_flags: vec![],
            failed,
        };
        let (r, f) = aggregate(&[rec(vec![3.0, 4.0], false), rec(vec![1000.0], true), rec(vec![0.0, 0.0], false)]);
        assert_eq!(f, 1);
        assert!((r - (12.5f64 / 2.0).sqrt()).abs() < 1e-12);
        let (r, f) = aggregate(&[rec(vec![], true)]);
        assert!(r.is_nan());
        assert_eq!(f, 1);
    }

    #[test]
    fn placement_respects_separation() {
        let rule = PlacementRule::within(&Roi::square(100.0));
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            let ts = rule.place(4, &mut r).unwrap();
            for i in 0..ts.len() {
                assert!(rule.region.contains(ts[i].position));
                for j in 0..i {
                    assert!((ts[i].position - ts[j].position).norm() >= 40.0);
                }
            }
        }
        let tight = PlacementRule {
            min_separation: 500.0,
            max_attempts: 20,
            ..rule
        };
        assert!(matches!(tight.place(2, &mut r), Err(Error::PlacementFailure { .. })));
    }

    #[test]
    fn csv_empty_and_schema() {
        let empty = SweepResult {
            axis: vec![],
            rmse: vec![],
            root_crlb: vec![],
            trials_per_point: 10,
            failures: vec![],
            baseline_rmse: None,
        };
        assert_eq!(sweep_csv_string(&empty), format!("{SWEEP_CSV_HEADER}\n"));

        let r = SweepResult {
            axis: vec![-5.0, 0.0],
            rmse: vec![1.25, 0.5],
            root_crlb: vec![0.125, f64::NAN],
            trials_per_point: 3,
            failures: vec![1, 0],
            baseline_rmse: Some(vec![7.0, 2.5]),
        };
        let golden = "axis_value,rmse_m,root_crlb_m,baseline_rmse_m,trials,failures\n\
                      -5,1.25,0.125,7,3,1\n\
                      0,0.5,NaN,2.5,3,0\n";
        assert_eq!(sweep_csv_string(&r), golden);
    }

    proptest! {
        #[test]
        fn assignment_matches_exhaustive_search(
            pts in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 2..12),
        ) {
            let n = pts.len() / 2;
            let est: Vec<Vec2> = pts[..n].iter().map(|&(x, y)| v(x, y)).collect();
            let truth: Vec<Vec2> = pts[n..2 * n].iter().map(|&(x, y)| v(x, y)).collect();
            let got = rmse(&est, &truth).unwrap();
            prop_assert!((got - brute_rmse(&est, &truth)).abs() < 1e-9);

            let mut rev = est.clone();
            rev.reverse();
            prop_assert!((rmse(&rev, &truth).unwrap() - got).abs() < 1e-9);
        }
    }
}
