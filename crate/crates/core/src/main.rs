use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coopsense::crlb::{crlb_position, CrlbOptions, FimConvention, CRLB_CSV_HEADER};
use coopsense::estimator::{localize, EstimatorConfig, Roi};
use coopsense::experiments::{emit_csv, run_snr_sweep, run_target_sweep, sweep_csv_string, PlacementRule, SweepOptions};
use coopsense::geometry::AngleJacobian;
use coopsense::scenario::{load_scenario, LoadedScenario, ScenarioConfig};
use coopsense::signal::{noise_sigma_for_snr, synthesize_scene};
use coopsense::subspace::{spectrum_grid, FusedSpectrum, Smoothing, SteeringModel};
use coopsense::{Error, Result};

#[derive(Parser)]
#[command(name = "coopsense", version, about = "Cooperative multi-AP OFDM sensing simulator")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Large-scale settings: 96 subcarriers and 1000 trials.
    #[arg(long, global = true)]
    full: bool,
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; the built-in five-AP, two-target scene if omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args)]
struct EstimatorArgs {
    /// Covariance window averaging, ANTENNASxSUBCARRIERS.
    #[arg(long)]
    smooth: Option<String>,
    /// Forward-backward averaging (with --smooth).
    #[arg(long)]
    forward_backward: bool,
    /// Restrict coarse peak picks to local maxima.
    #[arg(long)]
    local_maxima: bool,
    /// Shorthand: all antennas × half the subcarriers, forward-backward,
    /// local maxima.
    #[arg(long)]
    decorrelate: bool,
}

impl EstimatorArgs {
    fn apply(&self, loaded: &mut LoadedScenario) -> Result<()> {
        let antennas = loaded.scenario.aps.iter().map(|a| a.antennas).min().unwrap_or(1);
        let subcarriers = loaded.scenario.ofdm.subcarriers;
        if self.decorrelate {
            loaded.estimator = loaded.estimator.clone().decorrelated(antennas, subcarriers);
        }
        if let Some(w) = &self.smooth {
            let dims = w
                .split('x')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("bad window {w:?}")))?;
            if dims.len() != 2 {
                return Err(Error::Config(format!("window {w:?} is not AxK")));
            }
            loaded.estimator.smoothing = Some(Smoothing {
                antennas: dims[0],
                subcarriers: dims[1],
                forward_backward: self.forward_backward,
            });
        }
        if self.local_maxima {
            loaded.estimator.local_maxima = true;
        }
        if let Some(sm) = &loaded.estimator.smoothing {
            sm.validate(antennas, subcarriers)?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize echoes, localize, print estimates and errors.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        /// Directory for estimates.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the fused spectrum on a grid and write it as CSV (dB).
    Spectrum {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long)]
        resolution: Option<f64>,
        /// x0,y0,x1,y1 in meters.
        #[arg(long, allow_hyphen_values = true)]
        roi: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        /// Synthesize without noise.
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the position bound for every target.
    Crlb {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[command(flatten)]
        bound: BoundArgs,
    },
    /// RMSE and root CRLB versus SNR.
    SweepSnr {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
        /// start:step:stop or a comma list, dB.
        #[arg(long, allow_hyphen_values = true, default_value = "-5:5:15")]
        snr: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noiseless: bool,
        #[command(flatten)]
        bound: BoundArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RMSE and root CRLB versus the number of targets.
    SweepTargets {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long, default_value = "1,2,3")]
        counts: String,
        #[arg(long, allow_hyphen_values = true, default_value_t = 5.0)]
        snr: f64,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minimum pairwise target separation, meters.
        #[arg(long, default_value_t = 40.0)]
        separation: f64,
        #[command(flatten)]
        bound: BoundArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Printed,
    PhaseCentered,
}

#[derive(Clone, Copy, ValueEnum)]
enum AngleArg {
    Local,
    Global,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, value_enum, default_value = "printed")]
    fim: ConventionArg,
    #[arg(long, value_enum, default_value = "local")]
    angle_jacobian: AngleArg,
}

impl BoundArgs {
    fn options(&self) -> CrlbOptions {
        CrlbOptions {
            convention: match self.fim {
                ConventionArg::Printed => FimConvention::Printed,
                ConventionArg::PhaseCentered => FimConvention::PhaseCentered,
            },
            angle: match self.angle_jacobian {
                AngleArg::Local => AngleJacobian::LocalFrame,
                AngleArg::Global => AngleJacobian::Global,
            },
        }
    }
}

fn load(args: &ScenarioArgs, full: bool) -> Result<LoadedScenario> {
    let mut loaded = match &args.scenario {
        Some(path) => load_scenario(path)?,
        None => {
            let scenario = ScenarioConfig::reference_scene(2);
            LoadedScenario {
                estimator: EstimatorConfig::new(scenario.targets.len()),
                scenario,
                snr_db: 10.0,
            }
        }
    };
    if full {
        loaded.scenario.ofdm.subcarriers = 96;
    }
    Ok(loaded)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} value {v:?}"))))
        .collect()
}

/// `start:step:stop` (inclusive) or a comma-separated list.
fn parse_snr_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 1 {
        return parse_list(s, "SNR");
    }
    if parts.len() != 3 {
        return Err(Error::Config(format!("SNR range {s:?} is not start:step:stop")));
    }
    let v = parse_list::<f64>(&parts.join(","), "SNR")?;
    let (start, step, stop) = (v[0], v[1], v[2]);
    if !(step > 0.0) || stop < start {
        return Err(Error::Config(format!("empty SNR range {s:?}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

fn parse_roi(s: &str) -> Result<Roi> {
    let v = parse_list::<f64>(s, "ROI")?;
    if v.len() != 4 {
        return Err(Error::Config("ROI needs x0,y0,x1,y1".into()));
    }
    Roi::new(v[0], v[1], v[2], v[3])
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let default_trials = if cli.full { 1000 } else { 100 };
    match cli.command {
        Command::Simulate {
            scenario,
            estimator,
            seed,
            snr,
            out,
        } => {
            let mut loaded = load(&scenario, cli.full)?;
            estimator.apply(&mut loaded)?;
            let s = &loaded.scenario;
            let snr = snr.unwrap_or(loaded.snr_db);
            let sigma = noise_sigma_for_snr(s, snr)?;
            let tensors = synthesize_scene(s, sigma, seed)?;
            let res = localize(&tensors, &s.aps, &s.ofdm, &loaded.estimator)?;
            let truths = s.target_positions();
            let pairs = coopsense::experiments::assign(&res.estimates, &truths)?;
            let mut text = String::from("estimate_id,x_m,y_m,truth_id,error_m,converged,low_confidence\n");
            let mut by_estimate = pairs.clone();
            by_estimate.sort();
            for (e, t) in by_estimate {
                let p = res.estimates[e];
                text.push_str(&format!(
                    "{e},{},{},{t},{},{},{}\n",
                    p.x,
                    p.y,
                    (p - truths[t]).norm(),
                    res.converged[e],
                    res.low_confidence[e]
                ));
            }
            print!("{text}");
            println!("rmse_m={}", coopsense::experiments::rmse(&res.estimates, &truths)?);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("estimates.csv"), &text)?;
            }
        }
        Command::Spectrum {
            scenario,
            estimator,
            resolution,
            roi,
            seed,
            snr,
            noiseless,
            out,
        } => {
            let mut loaded = load(&scenario, cli.full)?;
            estimator.apply(&mut loaded)?;
            let s = &loaded.scenario;
            let sigma = if noiseless {
                0.0
            } else {
                noise_sigma_for_snr(s, snr.unwrap_or(loaded.snr_db))?
            };
            let roi = match roi {
                Some(r) => parse_roi(&r)?,
                None => loaded.estimator.roi,
            };
            let resolution = resolution.unwrap_or(loaded.estimator.coarse_resolution);
            let tensors = synthesize_scene(s, sigma, seed)?;
            let spectrum = FusedSpectrum::from_tensors_smoothed(
                &tensors,
                &s.aps,
                &s.ofdm,
                s.targets.len(),
                SteeringModel::Eva,
                loaded.estimator.smoothing,
            )?;
            spectrum_grid(&spectrum, &roi, resolution)?.write_csv(&out)?;
        }
        Command::Crlb { scenario, snr, bound } => {
            let loaded = load(&scenario, cli.full)?;
            let s = &loaded.scenario;
            let snr = snr.unwrap_or(loaded.snr_db);
            let sigma = noise_sigma_for_snr(s, snr)?;
            println!("{CRLB_CSV_HEADER}");
            for l in 0..s.targets.len() {
                println!("{}", crlb_position(s, l, sigma, bound.options())?.csv_row(l, snr));
            }
        }
        Command::SweepSnr {
            scenario,
            estimator,
            snr,
            trials,
            baseline,
            seed,
            noiseless,
            bound,
            out,
        } => {
            let mut loaded = load(&scenario, cli.full)?;
            estimator.apply(&mut loaded)?;
            let opts = SweepOptions {
                baseline,
                noiseless,
                crlb: bound.options(),
                ..SweepOptions::default()
            };
            let sweep = run_snr_sweep(
                &loaded.scenario,
                &parse_snr_range(&snr)?,
                trials.unwrap_or(default_trials),
                &loaded.estimator,
                seed,
                opts,
            )?;
            match out {
                Some(p) => emit_csv(&sweep.result, p)?,
                None => write_or_print(&sweep_csv_string(&sweep.result), None)?,
            }
        }
        Command::SweepTargets {
            scenario,
            estimator,
            counts,
            snr,
            trials,
            baseline,
            seed,
            separation,
            bound,
            out,
        } => {
            let mut loaded = load(&scenario, cli.full)?;
            estimator.apply(&mut loaded)?;
            let placement = PlacementRule {
                min_separation: separation,
                ..PlacementRule::within(&loaded.estimator.roi)
            };
            let opts = SweepOptions {
                baseline,
                crlb: bound.options(),
                ..SweepOptions::default()
            };
            let sweep = run_target_sweep(
                &loaded.scenario,
                &parse_list::<usize>(&counts, "count")?,
                snr,
                trials.unwrap_or(default_trials),
                &loaded.estimator,
                &placement,
                seed,
                opts,
            )?;
            match out {
                Some(p) => emit_csv(&sweep.result, p)?,
                None => write_or_print(&sweep_csv_string(&sweep.result), None)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
