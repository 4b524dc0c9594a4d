use std::fmt::Write as _;
use std::io::Write as _;

use anyhow::anyhow;
use bdlp_core::analysis::{
    check_semigroup_conditions, check_stationary_conditions, relative_bound_check, write_conditions_csv, AnalysisError,
    Verdict,
};
use bdlp_core::estimators::{density_estimate, pair_correlation_at, PairCorrelationEstimate, RadialBins};
use bdlp_core::harmonic::{
    adjointness_check, compare_symbol_with_oracle, k_inverse, minlos_check, FiniteConfiguration, FiniteFunction, Region,
};
use bdlp_core::moments::{
    analytic_bounds, bdlp_hierarchy_solve, probe_alpha, write_bounds_csv, write_k1_csv, write_q_csv, BoundInputs,
    ClosureScheme, MomentError, MomentTrajectory, PeriodicGrid, Stepping,
};
use bdlp_core::rng::{replicate_seed, stream};
use bdlp_core::simulator::{run_replicates, RunOptions, SimError, SnapshotMode, Trajectory};
use bdlp_core::ModelParams;
use rand::Rng;

use crate::output::{
    write_compare_csv, write_density_csv, write_line_svg, write_paircorr_csv, write_positions_csv, CompareRow,
    OutputDir, Series,
};
use crate::scenario::Scenario;

/// Ways a run can end other than success, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, bad arguments or I/O trouble.
    Setup(anyhow::Error),
    /// NaN, blow-up or runaway population.
    Numerical(anyhow::Error),
    /// A verification suite reported a failing condition.
    VerifyFailed(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Setup(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::VerifyFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Setup(e) => write!(f, "{e:#}"),
            Failure::Numerical(e) => write!(f, "numerical failure: {e:#}"),
            Failure::VerifyFailed(s) => write!(f, "verification failed: {s}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Setup(e)
    }
}

impl From<crate::scenario::ScenarioError> for Failure {
    fn from(e: crate::scenario::ScenarioError) -> Self {
        Failure::Setup(e.into())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::EventCap { .. } | SimError::CacheDrift { .. } => Failure::Numerical(e.into()),
            _ => Failure::Setup(e.into()),
        }
    }
}

impl From<MomentError> for Failure {
    fn from(e: MomentError) -> Self {
        match e {
            MomentError::Blowup(_) | MomentError::DNotConverged { .. } => Failure::Numerical(e.into()),
            _ => Failure::Setup(e.into()),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::Setup(e.into())
    }
}

impl From<bdlp_core::estimators::EstimatorError> for Failure {
    fn from(e: bdlp_core::estimators::EstimatorError) -> Self {
        Failure::Setup(e.into())
    }
}

fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), Failure> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Failure::Numerical(anyhow!("{what} contains non-finite values")))
    }
}

struct Simulation {
    trajectories: Vec<Trajectory>,
    density: bdlp_core::estimators::DensityEstimate,
    pair: Vec<(f64, PairCorrelationEstimate)>,
}

fn simulation(s: &Scenario, params: &ModelParams) -> Result<Simulation, Failure> {
    let options = RunOptions {
        event_cap: s.run.event_cap,
        snapshots: SnapshotMode::Positions,
    };
    let trajectories = run_replicates(
        params,
        s.init.z,
        s.run.t_end,
        &s.run.record_times,
        options,
        s.run.master_seed,
        s.run.replicates,
    )?;
    let density = density_estimate(&trajectories, &params.space)?;
    ensure_finite("density estimate", density.mean.iter().copied())?;
    let bins = RadialBins::uniform(s.estimators.bins, s.estimators.r_max, &params.space)?;
    let pair = s
        .run
        .record_times
        .iter()
        .enumerate()
        .map(|(k, &t)| Ok((t, pair_correlation_at(&trajectories, k, &params.space, &bins)?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    Ok(Simulation {
        trajectories,
        density,
        pair,
    })
}

pub fn simulate(s: &Scenario, out: &mut OutputDir, plots: bool) -> Result<(), Failure> {
    let params = s.model_params()?;
    let sim = simulation(s, &params)?;
    out.write_with("density.csv", |w| write_density_csv(w, &sim.density))?;
    out.write_with("paircorr.csv", |w| write_paircorr_csv(w, &sim.pair))?;
    if s.run.positions {
        out.write_with("positions.csv", |w| {
            write_positions_csv(w, &sim.trajectories, params.space.dim())
        })?;
    }
    if plots {
        let density = Series {
            label: "mean density".into(),
            points: sim
                .density
                .times
                .iter()
                .copied()
                .zip(sim.density.mean.iter().copied())
                .collect(),
        };
        out.write_with("density.svg", |w| {
            write_line_svg(w, "Population density", "t", "density", &[density])
        })?;
        let curves: Vec<Series> = sim.pair.iter().map(|(t, est)| pair_series(*t, est)).collect();
        out.write_with("paircorr.svg", |w| {
            write_line_svg(w, "Pair correlation", "r", "q", &curves)
        })?;
    }
    let last = sim.density.times.len() - 1;
    println!(
        "simulated {} replicates; density at t={}: {:.6} ± {:.6}",
        s.run.replicates, sim.density.times[last], sim.density.mean[last], sim.density.stderr[last]
    );
    Ok(())
}

fn pair_series(t: f64, est: &PairCorrelationEstimate) -> Series {
    Series {
        label: format!("t = {t}"),
        points: est
            .q_mean
            .iter()
            .enumerate()
            .map(|(b, q)| (0.5 * (est.edges[b] + est.edges[b + 1]), *q))
            .collect(),
    }
}

/// Steps between recorded states so that every record time is hit.
fn record_every(s: &Scenario) -> Result<usize, Failure> {
    let dt = s.moments.dt;
    let mut g = 0usize;
    for &t in s.run.record_times.iter().chain(std::iter::once(&s.run.t_end)) {
        let steps = t / dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Failure::Setup(anyhow!(
                "record time {t} is not a multiple of moments.dt = {dt}"
            )));
        }
        g = gcd(g, steps.round() as usize);
    }
    Ok(g.max(1))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct MomentRun {
    grid: PeriodicGrid,
    trajectory: MomentTrajectory,
}

fn solve_moments(s: &Scenario, params: &ModelParams) -> Result<MomentRun, Failure> {
    let grid = PeriodicGrid::for_model(params, s.moments.grid_points)?;
    let stepping = Stepping::new(s.run.t_end, s.moments.dt, record_every(s)?)?;
    let closure = ClosureScheme::new(s.moments.closure, s.moments.k1_floor)?;
    let k1_0 = s.init.z;
    let q0 = vec![k1_0 * k1_0; grid.len()];
    let trajectory = bdlp_hierarchy_solve(params, closure, &grid, k1_0, &q0, &stepping)?;
    ensure_finite("moment solution", trajectory.states.iter().map(|st| st.k1))?;
    Ok(MomentRun { grid, trajectory })
}

fn state_at(run: &MomentRun, t: f64) -> Result<&bdlp_core::moments::MomentState, Failure> {
    run.trajectory
        .states
        .iter()
        .find(|st| (st.t - t).abs() <= 0.5 * run.trajectory.dt)
        .ok_or_else(|| Failure::Setup(anyhow!("no recorded moment state at t = {t}")))
}

pub fn moments(s: &Scenario, out: &mut OutputDir, plots: bool) -> Result<(), Failure> {
    let params = s.model_params()?;
    let run = solve_moments(s, &params)?;
    let inputs = BoundInputs {
        c: s.moments.c,
        a0: params.a_plus.sup_norm(),
        alpha: probe_alpha(&params.a_plus, s.moments.probe_half_width),
        d_integral: None,
    };
    let rows: Vec<_> = run
        .trajectory
        .states
        .iter()
        .flat_map(|st| (1..=3).flat_map(|n| analytic_bounds(&params, &inputs, st.t, n).rows()))
        .collect();
    out.write_with("k1.csv", |w| write_k1_csv(w, &run.trajectory))?;
    out.write_with("q.csv", |w| write_q_csv(w, &run.grid, &run.trajectory))?;
    out.write_with("bounds.csv", |w| write_bounds_csv(w, &rows))?;
    if plots {
        let k1 = Series {
            label: "k1".into(),
            points: run.trajectory.states.iter().map(|st| (st.t, st.k1)).collect(),
        };
        out.write_with("k1.svg", |w| {
            write_line_svg(w, "Density (moment solution)", "t", "k1", &[k1])
        })?;
        let last = run.trajectory.last();
        let q = Series {
            label: format!("t = {}", last.t),
            points: run.grid.axis_profile(&last.q),
        };
        out.write_with("q.svg", |w| {
            write_line_svg(w, "Pair function (moment solution)", "r", "q", &[q])
        })?;
    }
    println!(
        "moment hierarchy ({:?} closure): k1({}) = {:.6e}",
        s.moments.closure,
        run.trajectory.last().t,
        run.trajectory.last().k1
    );
    Ok(())
}

pub fn compare(s: &Scenario, out: &mut OutputDir, plots: bool) -> Result<(), Failure> {
    let params = s.model_params()?;
    let sim = simulation(s, &params)?;
    let run = solve_moments(s, &params)?;
    let mut rows = Vec::new();
    for (k, &t) in s.run.record_times.iter().enumerate() {
        let state = state_at(&run, t)?;
        rows.push(CompareRow {
            t,
            quantity: "density",
            r: None,
            simulated: sim.density.mean[k],
            stderr: sim.density.stderr[k],
            moments: state.k1,
        });
        let est = &sim.pair[k].1;
        let model = run.grid.radial_bin_averages(&state.q, &est.edges)?;
        for (b, q) in model.into_iter().enumerate() {
            rows.push(CompareRow {
                t,
                quantity: "q",
                r: Some((est.edges[b], est.edges[b + 1])),
                simulated: est.q_mean[b],
                stderr: est.q_stderr[b],
                moments: q,
            });
        }
    }
    out.write_with("compare.csv", |w| write_compare_csv(w, &rows))?;
    if plots {
        let sim_series = Series {
            label: "simulation".into(),
            points: sim
                .density
                .times
                .iter()
                .copied()
                .zip(sim.density.mean.iter().copied())
                .collect(),
        };
        let mom_series = Series {
            label: "moments".into(),
            points: run.trajectory.states.iter().map(|st| (st.t, st.k1)).collect(),
        };
        out.write_with("compare.svg", |w| {
            write_line_svg(
                w,
                "Density: simulation vs moments",
                "t",
                "density",
                &[sim_series, mom_series],
            )
        })?;
    }
    let zs: Vec<f64> = rows.iter().map(|r| r.z()).filter(|z| z.is_finite()).collect();
    let beyond = zs.iter().filter(|z| z.abs() > 3.0).count();
    println!(
        "{:>8} {:>12} {:>12} {:>12} {:>8}",
        "t", "simulated", "stderr", "moments", "z"
    );
    for r in rows.iter().filter(|r| r.quantity == "density") {
        println!(
            "{:>8} {:>12.6} {:>12.6} {:>12.6} {:>8.2}",
            r.t,
            r.simulated,
            r.stderr,
            r.moments,
            r.z()
        );
    }
    println!("{beyond} of {} compared values lie beyond 3 stderr", zs.len());
    Ok(())
}

struct HarmonicLine {
    name: String,
    pass: bool,
    detail: String,
}

fn random_configuration<R: Rng>(rng: &mut R, n: usize, dim: usize, lo: f64, hi: f64) -> FiniteConfiguration {
    let coords: Vec<f64> = (0..n * dim).map(|_| rng.random_range(lo..hi)).collect();
    FiniteConfiguration::from_flat(dim, coords).expect("coordinates match the dimension")
}

fn bump(dim: usize, lo: f64, hi: f64, centre: f64, width: f64, max_card: usize) -> FiniteFunction {
    FiniteFunction::new(
        max_card,
        Some(Region::cube(dim, lo, hi).expect("valid cube")),
        move |eta| {
            let r2: f64 = eta.coords().iter().map(|x| (x - centre).powi(2)).sum();
            (1.0 + 0.5 * eta.len() as f64) * (-r2 / (width * width)).exp()
        },
    )
}

fn harmonic_suite(s: &Scenario, params: &ModelParams) -> Result<Vec<HarmonicLine>, Failure> {
    let dim = params.space.dim();
    let mc = s.verify.mc;
    let mut rng = stream(replicate_seed(s.run.master_seed, 0x4841_524d));
    let mut lines = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let w: Vec<f64> = (0..=5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = FiniteFunction::new(5, None, move |eta| {
            w[eta.len()] * (eta.coords().iter().sum::<f64>()).cos()
        });
        let n = rng.random_range(0..=5);
        let eta = random_configuration(&mut rng, n, dim, -2.0, 2.0);
        let back = k_inverse(&g.k_transformed(), &eta).map_err(|e| Failure::Setup(e.into()))?;
        worst = worst.max((back - g.eval(&eta)).abs());
    }
    lines.push(HarmonicLine {
        name: "k_transform_round_trip".into(),
        pass: worst <= 1e-12,
        detail: format!("max |K⁻¹KG − G| = {worst:.2e} over 20 functions"),
    });

    for (i, card) in [1usize, 2, 3].into_iter().enumerate() {
        let g = bump(dim, -1.5, 1.5, 0.0, 1.0 + 0.3 * i as f64, 3);
        let eta = random_configuration(&mut rng, card, dim, -1.0, 1.0);
        let cmp = compare_symbol_with_oracle(params, &g, &eta, mc, &mut rng).map_err(|e| Failure::Setup(e.into()))?;
        lines.push(HarmonicLine {
            name: format!("symbol_identity_{}", i + 1),
            pass: cmp.agrees(3.0),
            detail: format!(
                "|η| = {card}: symbol {:.6} ± {:.1e}, K⁻¹LK {:.6} ± {:.1e}, paired difference {:.2e} ± {:.1e}",
                cmp.symbol.value,
                cmp.symbol.stderr,
                cmp.oracle.value,
                cmp.oracle.stderr,
                cmp.difference.value,
                cmp.difference.stderr
            ),
        });
    }

    let g = bump(dim, 0.0, 1.5, 0.75, 1.0, 2);
    let k = FiniteFunction::new(3, Some(Region::cube(dim, -1.0, 2.5).expect("valid cube")), |eta| {
        0.5f64.powi(eta.len() as i32) * (1.0 + 0.5 * eta.coords().iter().map(|x| x.cos()).sum::<f64>())
    });
    let (lhs, rhs) = adjointness_check(params, &g, &k, mc, &mut rng).map_err(|e| Failure::Setup(e.into()))?;
    let se = lhs.estimated_error.hypot(rhs.estimated_error);
    let gap = (lhs.value - rhs.value).abs();
    lines.push(HarmonicLine {
        name: "adjointness".into(),
        pass: gap <= 3.0 * se + 1e-12 * lhs.value.abs().max(rhs.value.abs()),
        detail: format!(
            "⟨⟨L̂G,k⟩⟩ = {:.6} ± {:.1e}, ⟨⟨G,L̂*k⟩⟩ = {:.6} ± {:.1e}",
            lhs.value, lhs.estimated_error, rhs.value, rhs.estimated_error
        ),
    });

    let (l, r) = minlos_check(
        |n| 1.0 / (1.0 + n as f64),
        |a, b| ((a + 2 * b) as f64).sin(),
        s.init.z,
        20,
    );
    let rel = (l - r).abs() / l.abs().max(r.abs()).max(1e-300);
    lines.push(HarmonicLine {
        name: "minlos_identity".into(),
        pass: rel <= 1e-10,
        detail: format!("lhs {l:.10}, rhs {r:.10}, relative gap {rel:.1e}"),
    });

    let g = bump(dim, -1.0, 1.0, 0.0, 0.7, 2);
    let report = relative_bound_check(params, s.verify.c, &g, mc, &mut rng)?;
    for check in &report.checks {
        let suffix = match (check.verdict, check.suggested_mc) {
            (Verdict::Inconclusive, Some(n)) => format!(" (about {n} samples per sector would decide)"),
            _ => String::new(),
        };
        lines.push(HarmonicLine {
            name: format!("relative_bound_{}", check.name),
            pass: check.verdict != Verdict::Fail,
            detail: format!(
                "{:?}: lhs {:.6}, coefficient × rhs {:.6}, margin {:.3e} ± {:.1e}{suffix}",
                check.verdict, check.lhs.value, check.rhs.value, check.difference.value, check.difference.stderr
            ),
        });
    }
    Ok(lines)
}

pub fn verify(s: &Scenario, out: &mut OutputDir) -> Result<(), Failure> {
    let params = s.model_params()?;
    let c = s.verify.c;
    let conditions = vec![
        check_semigroup_conditions(&params, c)?,
        check_stationary_conditions(&params, c)?,
    ];
    out.write_with("conditions.csv", |w| write_conditions_csv(w, &conditions))?;
    let harmonic = harmonic_suite(s, &params)?;

    let mut text = String::new();
    let _ = writeln!(text, "Conditions at C = {c}");
    for report in &conditions {
        for r in report.flatten() {
            let _ = writeln!(
                text,
                "  {:<5} {:<32} margin {:.6}",
                if r.pass { "PASS" } else { "FAIL" },
                r.name,
                r.margin
            );
        }
    }
    let _ = writeln!(
        text,
        "Harmonic-analysis oracle checks ({} samples per sector)",
        s.verify.mc
    );
    for line in &harmonic {
        let _ = writeln!(
            text,
            "  {:<5} {:<32} {}",
            if line.pass { "PASS" } else { "FAIL" },
            line.name,
            line.detail
        );
    }
    out.write_with("harmonic_report.txt", |w| w.write_all(text.as_bytes()))?;
    print!("{text}");

    let mut failed: Vec<String> = conditions
        .iter()
        .flat_map(|r| r.flatten())
        .filter(|r| !r.pass && r.components.is_empty())
        .map(|r| r.name.clone())
        .collect();
    failed.extend(harmonic.iter().filter(|l| !l.pass).map(|l| l.name.clone()));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::VerifyFailed(failed.join(", ")))
    }
}
