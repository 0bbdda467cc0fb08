use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{create_dir, write_file, HarnessError};
use crate::seeding::{self, Stream};
use crate::theory::{
    a_high, agreeing_pair_solution, conserved3, distance_profile9, final_distance, fixed_points3, integrate3,
    integrate9, loss9, merger_condition, origin_modes3, preset9, presets9, run_vector_oracle,
    state_on_level3, suggest_dt3, suggest_t_max3, FixedPoint, Interaction3Params,
    Interaction3State, Interaction9State, IntegrateOptions, MergerInputs, Stability, Termination,
    VectorOracleConfig, VectorPairModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoryCommand {
    Ode3,
    Ode9,
    FixedPoints,
    MergerCheck,
    Oracle3,
}

impl FromStr for TheoryCommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ode3" => TheoryCommand::Ode3,
            "ode9" => TheoryCommand::Ode9,
            "fixed-points" => TheoryCommand::FixedPoints,
            "merger-check" => TheoryCommand::MergerCheck,
            "oracle3" => TheoryCommand::Oracle3,
            other => return Err(format!("unknown theory command `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub params3: Interaction3Params,
    pub initial3: Interaction3State,
    /// Step and horizon for the single `ode3` trajectory; derived from the
    /// system's rates when absent.
    pub dt: Option<f64>,
    pub t_max: Option<f64>,
    /// Random draws for the `ode3` closed-form and Bernoulli comparisons.
    pub draws: usize,
    pub seed: u64,
    /// `ode9` preset; all presets when absent.
    pub preset: Option<String>,
    pub merger: MergerInputs,
    /// Use the scaled merger criterion instead of the exact one.
    pub scaled: bool,
    pub oracle: VectorOracleConfig,
    pub oracle_instances: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            params3: Interaction3Params {
                tau_h: 1.0,
                tau_y: 1.0,
                n: 2,
                target_gap2: 0.25,
            },
            initial3: Interaction3State {
                dh2: 1.0,
                dy2: 0.5,
                w: 0.3,
            },
            dt: None,
            t_max: None,
            draws: 100,
            seed: 0,
            preset: None,
            merger: MergerInputs::exact(-1.0, 0.0),
            scaled: false,
            oracle: VectorOracleConfig::default(),
            oracle_instances: 20,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.params3
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.initial3.dh2 > 0.0) {
            return Err(HarnessError::Config("initial3.dh2 must be positive".into()));
        }
        if self.draws == 0 {
            return Err(HarnessError::Config("draws must be at least 1".into()));
        }
        if self.dt.is_some_and(|d| !(d > 0.0)) || self.t_max.is_some_and(|t| !(t > 0.0)) {
            return Err(HarnessError::Config("dt and t_max must be positive".into()));
        }
        if let Some(name) = &self.preset {
            preset9(name).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Random parameters and a consistent initial state for the 3-scalar
/// system. The gap is zero for `agreeing`; otherwise positive. `dh2` is
/// log-uniform on `[1e-3, 10]` and `dy2/dh2` (the squared output gain
/// along the pair direction) uniform on `[0.05, 2]`.
///
/// `w` is drawn from `[dy2 − sqrt(dy2·gap²), dy2]`, the part of the
/// Cauchy–Schwarz range where the output difference does not point
/// against the target gap. That region is forward invariant and keeps
/// `dh2` away from zero; starting outside it can drive the pair through
/// `dh = 0` in finite time, where the squared-distance variables are
/// singular.
pub fn random_params3<R: Rng + ?Sized>(rng: &mut R, agreeing: bool) -> (Interaction3State, Interaction3Params) {
    let p = Interaction3Params {
        tau_h: rng.gen_range(0.3..3.0),
        tau_y: rng.gen_range(0.3..3.0),
        n: rng.gen_range(1..=4),
        target_gap2: if agreeing { 0.0 } else { rng.gen_range(0.01..1.0) },
    };
    let dh2 = 10f64.powf(rng.gen_range(-3.0..1.0));
    let dy2 = dh2 * rng.gen_range(0.05..2.0);
    let spread = (dy2 * p.target_gap2).sqrt();
    let w = dy2 - spread * rng.gen_range(0.0..1.0);
    (Interaction3State { dh2, dy2, w }, p)
}

fn default_options3(s: &Interaction3State, p: &Interaction3Params) -> IntegrateOptions {
    let mut o = IntegrateOptions::new(suggest_dt3(s, p), suggest_t_max3(s, p));
    o.record_every = usize::MAX;
    o
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ode3Check {
    pub draws: usize,
    pub max_rel_err: f64,
    pub elapsed_seconds: f64,
}

/// Integrates `draws` random instances (half agreeing) to their limit and
/// compares the terminal `‖dh‖²` with the closed form. The error is
/// relative to the closed-form value, or to the initial distance when that
/// value is zero (a merger).
pub fn ode3_check(draws: usize, seed: u64) -> Result<Ode3Check, HarnessError> {
    let start = Instant::now();
    let mut rng = seeding::rng(seed, Stream::Oracle);
    let mut max_rel_err: f64 = 0.0;
    for k in 0..draws {
        let (s0, p) = random_params3(&mut rng, k % 2 == 0);
        let traj = integrate3(s0, &p, &default_options3(&s0, &p))?;
        let got = if traj.termination == Termination::Merged { 0.0 } else { traj.last()[0] };
        let expect = final_distance(s0.dh2, s0.dy2, &p);
        let scale = if expect > 0.0 { expect } else { s0.dh2 };
        max_rel_err = max_rel_err.max((got - expect).abs() / scale);
    }
    Ok(Ode3Check {
        draws,
        max_rel_err,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Pointwise comparison of integrated and closed-form `‖dh‖²(t)` for
/// agreeing pairs, started on `w = dy2`. Returns the maximum relative
/// error over all recorded points of all draws.
pub fn bernoulli_check(draws: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = seeding::rng(seed.wrapping_add(1), Stream::Oracle);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let (mut s0, p) = random_params3(&mut rng, true);
        s0.w = s0.dy2;
        let mut opts = default_options3(&s0, &p);
        opts.record_every = 1;
        let traj = integrate3(s0, &p, &opts)?;
        let ah = a_high(s0.dh2, s0.dy2, &p);
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let exact = agreeing_pair_solution(*t, s0.dh2, ah, p.n, p.tau_y);
            if exact > 1e-9 * s0.dh2 {
                worst = worst.max((s[0] - exact).abs() / exact);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub instances: usize,
    /// Largest deviation of an observable, relative to that observable's
    /// largest magnitude along the reduced trajectory.
    pub max_rel_err: f64,
}

fn oracle_vs_ode(cfg: &VectorOracleConfig, model: VectorPairModel) -> Result<(f64, Vec<[f64; 6]>, Vec<f64>), HarnessError> {
    let oracle = run_vector_oracle(model, cfg);
    let s0 = oracle.observables[0];
    let every = cfg.record_every.max(1);
    let substeps = 10;
    let mut opts = IntegrateOptions::new(cfg.dt * every as f64 / substeps as f64, cfg.t_end);
    opts.record_every = substeps;
    opts.converge_tol = 0.0;
    let ode = integrate3(s0, &oracle.params, &opts)?;
    let n = ode.states.len().min(oracle.observables.len());
    let mut scale = [0.0f64; 3];
    for s in &ode.states[..n] {
        for c in 0..3 {
            scale[c] = scale[c].max(s[c].abs());
        }
    }
    let mut err: f64 = 0.0;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let a = oracle.observables[i].to_array();
        let b = ode.states[i];
        for c in 0..3 {
            if scale[c] > 0.0 {
                err = err.max((a[c] - b[c]).abs() / scale[c]);
            }
        }
        rows.push([a[0], a[1], a[2], b[0], b[1], b[2]]);
    }
    Ok((err, rows, oracle.times[..n].to_vec()))
}

/// Vector-level gradient flow against the reduced 3-scalar integration on
/// `instances` random small configurations.
pub fn oracle3_check(instances: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let mut rng = seeding::rng(seed.wrapping_add(2), Stream::Oracle);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let cfg = VectorOracleConfig {
            hidden_dim: rng.gen_range(2..=5),
            output_dim: rng.gen_range(1..=3),
            n: rng.gen_range(1..=4),
            tau_h1: rng.gen_range(0.5..2.0),
            tau_h2: rng.gen_range(0.5..2.0),
            tau_y: rng.gen_range(0.5..2.0),
            tau_ybar: 1.0,
            agreeing: rng.gen_bool(0.5),
            initial_distance: rng.gen_range(0.5..1.5),
            dt: 1e-4,
            t_end: 2.0,
            record_every: 100,
        };
        let model = VectorPairModel::random(&cfg, &mut rng);
        worst = worst.max(oracle_vs_ode(&cfg, model)?.0);
    }
    Ok(OracleCheck {
        instances,
        max_rel_err: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityTrial {
    /// `positive` or `origin`.
    pub point: &'static str,
    pub label: Stability,
    pub observed: Stability,
}

/// Perturbation experiments around the fixed points of random 3-scalar
/// systems. Each trial starts a small step away from a fixed point, on
/// the conserved level through it, and calls the point stable if the
/// perturbation shrinks tenfold within the run and unstable if it grows
/// tenfold.
pub fn stability_check(draws: usize, seed: u64) -> Result<Vec<StabilityTrial>, HarnessError> {
    let mut rng = seeding::rng(seed.wrapping_add(3), Stream::Oracle);
    let mut trials = Vec::new();
    for k in 0..draws {
        let (s0, p) = random_params3(&mut rng, k % 3 == 0);
        let fps = fixed_points3(s0.dh2, s0.dy2, &p);
        let k_level = fps.conserved;

        if fps.positive.dh2 > 0.0 {
            trials.push(StabilityTrial {
                point: "positive",
                label: fps.positive.stability,
                observed: perturb_positive(&fps.positive, k_level, &p, &mut rng)?,
            });
        }

        let modes = origin_modes3(fps.a_high, fps.a_low, &p);
        // perturb along the leading mode when it grows, else along the
        // decaying one
        let (r, lam) = if fps.origin.stability == Stability::Unstable { modes[0] } else { modes[1] };
        let x0 = 1e-6 * s0.dh2.max(fps.positive.dh2);
        let start = state_on_level3(x0, r * x0, k_level, &p);
        let horizon = if lam.abs() > 0.0 { 12.0 / lam.abs() } else { suggest_t_max3(&s0, &p) };
        let mut opts = IntegrateOptions::new(suggest_dt3(&start, &p).min(horizon / 2000.0), horizon);
        opts.record_every = usize::MAX;
        opts.converge_tol = 0.0;
        let traj = integrate3(start, &p, &opts)?;
        let end = if traj.termination == Termination::Merged { 0.0 } else { traj.last()[0] };
        trials.push(StabilityTrial {
            point: "origin",
            label: fps.origin.stability,
            observed: classify(end / x0),
        });
    }
    Ok(trials)
}

fn classify(growth: f64) -> Stability {
    if growth < 0.1 {
        Stability::Stable
    } else if growth > 10.0 {
        Stability::Unstable
    } else {
        Stability::Invalid
    }
}

fn perturb_positive<R: Rng + ?Sized>(
    fp: &FixedPoint,
    k_level: f64,
    p: &Interaction3Params,
    rng: &mut R,
) -> Result<Stability, HarnessError> {
    let delta = 1e-6 * fp.dh2;
    let dx = delta * rng.gen_range(-1.0..1.0);
    let dw = delta * rng.gen_range(-1.0..1.0);
    let start = state_on_level3(fp.dh2 + dx, dw, k_level, p);
    let (tr, det) = (fp.trace, fp.det);
    let disc = tr * tr - 4.0 * det;
    let slow = if disc > 0.0 { (tr.abs() - disc.sqrt()) / 2.0 } else { tr.abs() / 2.0 };
    let horizon = 12.0 / slow.max(1e-9);
    let mut opts = IntegrateOptions::new(suggest_dt3(&start, p).min(horizon / 2000.0), horizon);
    opts.record_every = usize::MAX;
    opts.converge_tol = 0.0;
    let traj = integrate3(start, p, &opts)?;
    let end = traj.last();
    let dist = |x: f64, w: f64| ((x - fp.dh2).powi(2) + w * w).sqrt();
    Ok(classify(dist(end[0], end[2]) / dist(fp.dh2 + dx, dw)))
}

/// Runs a theory subcommand, writing its files into `dir` and returning
/// the report text (also saved as `report.txt`).
pub fn run_theory(cmd: TheoryCommand, config: &TheoryConfig, dir: &Path) -> Result<String, HarnessError> {
    config.validate()?;
    create_dir(dir)?;
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    let mut report = String::new();
    match cmd {
        TheoryCommand::Ode3 => ode3_command(config, dir, &mut report)?,
        TheoryCommand::Ode9 => ode9_command(config, dir, &mut report)?,
        TheoryCommand::FixedPoints => fixed_points_command(config, dir, &mut report)?,
        TheoryCommand::MergerCheck => {
            let merge = merger_condition(&config.merger, config.scaled);
            let _ = writeln!(report, "a_high {}", config.merger.a_high);
            let _ = writeln!(report, "a_low {}", config.merger.a_low);
            let _ = writeln!(report, "criterion {}", if config.scaled { "scaled" } else { "exact" });
            let _ = writeln!(report, "merge={merge}");
        }
        TheoryCommand::Oracle3 => oracle3_command(config, dir, &mut report)?,
    }
    write_file(&dir.join("report.txt"), &report)?;
    Ok(report)
}

fn csv_lines(header: &str, rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn ode3_command(config: &TheoryConfig, dir: &Path, report: &mut String) -> Result<(), HarnessError> {
    let (s0, p) = (config.initial3, config.params3);
    let mut opts = IntegrateOptions::new(
        config.dt.unwrap_or_else(|| suggest_dt3(&s0, &p)),
        config.t_max.unwrap_or_else(|| suggest_t_max3(&s0, &p)),
    );
    let steps = (opts.t_max / opts.dt).ceil() as usize;
    opts.record_every = (steps / 2000).max(1);
    let traj = integrate3(s0, &p, &opts)?;
    let k0 = conserved3(&s0, &p);
    let csv = csv_lines(
        "t,dh2,dy2,w,conserved",
        traj.times.iter().zip(&traj.states).map(|(t, s)| {
            let st = Interaction3State::from_array(*s);
            vec![*t, s[0], s[1], s[2], conserved3(&st, &p)]
        }),
    );
    write_file(&dir.join("ode3_trajectory.csv"), csv)?;
    let drift = traj
        .states
        .iter()
        .map(|s| (conserved3(&Interaction3State::from_array(*s), &p) - k0).abs())
        .fold(0.0, f64::max);
    let expect = final_distance(s0.dh2, s0.dy2, &p);
    let check = ode3_check(config.draws, config.seed)?;
    let _ = writeln!(report, "termination {}", traj.termination);
    let _ = writeln!(report, "final_distance_integrated {}", traj.last()[0]);
    let _ = writeln!(report, "final_distance_closed_form {expect}");
    let _ = writeln!(report, "conserved_drift {drift:e}");
    let _ = writeln!(report, "draws {}", check.draws);
    let _ = writeln!(report, "max_rel_err_final_distance {:e}", check.max_rel_err);
    let _ = writeln!(report, "max_rel_err_bernoulli {:e}", bernoulli_check(config.draws.min(20), config.seed)?);
    Ok(())
}

fn ode9_command(config: &TheoryConfig, dir: &Path, report: &mut String) -> Result<(), HarnessError> {
    let presets = match &config.preset {
        Some(name) => vec![preset9(name)?],
        None => presets9()?,
    };
    for preset in presets {
        let mut opts = IntegrateOptions::new(preset.dt, preset.t_max);
        opts.record_every = 100;
        let traj = integrate9(preset.initial, &preset.params, &opts)?;
        let losses: Vec<f64> = traj
            .states
            .iter()
            .map(|s| loss9(&Interaction9State::from_array(*s), &preset.params))
            .collect();
        let csv = csv_lines(
            "t,h1,h2,b_dv,by1,by2,b2,dv2,y_dv1,y_dv2,distance,loss",
            traj.times.iter().zip(&traj.states).zip(&losses).map(|((t, s), l)| {
                let mut row = vec![*t];
                row.extend_from_slice(s);
                row.push((s[1] - s[0]).abs());
                row.push(*l);
                row
            }),
        );
        write_file(&dir.join(format!("ode9_{}.csv", preset.name)), csv)?;
        let (d0, peak, last) = distance_profile9(&traj);
        let monotone_loss = losses.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        let _ = writeln!(
            report,
            "{} initial {d0} peak {peak} final {last} termination {} loss_monotone {monotone_loss}",
            preset.name, traj.termination
        );
    }
    Ok(())
}

fn fixed_points_command(config: &TheoryConfig, dir: &Path, report: &mut String) -> Result<(), HarnessError> {
    let (s0, p) = (config.initial3, config.params3);
    let fps = fixed_points3(s0.dh2, s0.dy2, &p);
    let mut csv = String::from("point,dh2,dy2,w,stability,trace,det,eig_low,eig_high\n");
    for (name, fp) in [("negative", fps.negative), ("positive", fps.positive), ("origin", fps.origin)] {
        let [lo, hi] = fp.eigenvalues.unwrap_or([f64::NAN; 2]);
        let stab = serde_json::to_value(fp.stability)?;
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{lo},{hi}",
            fp.dh2,
            fp.dy2,
            fp.w,
            stab.as_str().unwrap_or(""),
            fp.trace,
            fp.det
        );
        let _ = writeln!(report, "{name} dh2 {} stability {}", fp.dh2, stab.as_str().unwrap_or(""));
    }
    let _ = writeln!(report, "a_high {}", fps.a_high);
    let _ = writeln!(report, "a_low {}", fps.a_low);
    write_file(&dir.join("fixed_points.csv"), csv)?;
    Ok(())
}

fn oracle3_command(config: &TheoryConfig, dir: &Path, report: &mut String) -> Result<(), HarnessError> {
    let mut rng = seeding::rng(config.seed, Stream::Oracle);
    let model = VectorPairModel::random(&config.oracle, &mut rng);
    let (err, rows, times) = oracle_vs_ode(&config.oracle, model)?;
    let csv = csv_lines(
        "t,oracle_dh2,oracle_dy2,oracle_w,ode_dh2,ode_dy2,ode_w",
        times.iter().zip(rows).map(|(t, r)| {
            let mut v = vec![*t];
            v.extend_from_slice(&r);
            v
        }),
    );
    write_file(&dir.join("oracle3.csv"), csv)?;
    let check = oracle3_check(config.oracle_instances, config.seed)?;
    let _ = writeln!(report, "max_rel_err_configured {err:e}");
    let _ = writeln!(report, "instances {}", check.instances);
    let _ = writeln!(report, "max_rel_err_instances {:e}", check.max_rel_err);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_parse() {
        assert_eq!("ode3".parse::<TheoryCommand>().unwrap(), TheoryCommand::Ode3);
        assert_eq!("merger-check".parse::<TheoryCommand>().unwrap(), TheoryCommand::MergerCheck);
        assert!("ode4".parse::<TheoryCommand>().is_err());
    }

    #[test]
    fn random_draws_respect_cauchy_schwarz() {
        let mut rng = seeding::rng(0, Stream::Oracle);
        for k in 0..200 {
            let (s, p) = random_params3(&mut rng, k % 2 == 0);
            assert!(s.w <= s.dy2 && s.dy2 - s.w <= (s.dy2 * p.target_gap2).sqrt() + 1e-15);
        }
    }

    #[test]
    fn merger_check_default_merges() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_theory(TheoryCommand::MergerCheck, &TheoryConfig::default(), dir.path()).unwrap();
        assert!(r.contains("merge=true"));
    }
}
