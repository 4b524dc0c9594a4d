//! Scenario files: JSON documents describing one experiment.
//!
//! Every optional field that is left out gets a default, and the name of the
//! defaulted field is recorded so the run metadata can echo it.

use std::fmt;
use std::path::PathBuf;

use bdlp_core::moments::{ClosureKind, DEFAULT_DT, DEFAULT_GRID_POINTS, DEFAULT_K1_FLOOR};
use bdlp_core::simulator::DEFAULT_EVENT_CAP;
use bdlp_core::{Kernel, KernelFamily, KernelSpec, ModelParams, SpaceSpec};
use serde::{Deserialize, Serialize};

pub const DEFAULT_DIM: usize = 1;
pub const DEFAULT_LENGTH: f64 = 100.0;
pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_Z: f64 = 0.5;
pub const DEFAULT_T_END: f64 = 5.0;
pub const DEFAULT_RECORD_INTERVALS: usize = 10;
pub const DEFAULT_REPLICATES: usize = 200;
pub const DEFAULT_MASTER_SEED: u64 = 1;
pub const DEFAULT_PROBE_HALF_WIDTH: f64 = 0.5;
pub const DEFAULT_VERIFY_C: f64 = 4.0;
pub const DEFAULT_VERIFY_MC: usize = 20_000;

const DEFAULT_KERNEL: KernelSpec = KernelSpec {
    family: KernelFamily::Gaussian,
    sigma: 1.0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Simulate,
    Moments,
    Verify,
    Compare,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Simulate => "simulate",
            Experiment::Moments => "moments",
            Experiment::Verify => "verify",
            Experiment::Compare => "compare",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Poisson,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    experiment: Option<Experiment>,
    model: RawModel,
    init: Option<RawInit>,
    run: Option<RawRun>,
    moments: Option<RawMoments>,
    estimators: Option<RawEstimators>,
    verify: Option<RawVerify>,
    outputs: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    m: f64,
    kappa_plus: f64,
    kappa_minus: Option<f64>,
    a_plus: Option<KernelSpec>,
    a_minus: Option<KernelSpec>,
    dim: Option<usize>,
    length: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    #[serde(rename = "type")]
    kind: Option<InitKind>,
    z: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    t_end: Option<f64>,
    record_times: Option<Vec<f64>>,
    replicates: Option<usize>,
    master_seed: Option<u64>,
    event_cap: Option<u64>,
    positions: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMoments {
    grid_points: Option<usize>,
    dt: Option<f64>,
    closure: Option<ClosureKind>,
    k1_floor: Option<f64>,
    c: Option<f64>,
    probe_half_width: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimators {
    bins: Option<usize>,
    r_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    c: Option<f64>,
    mc: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    pub m: f64,
    pub kappa_plus: f64,
    pub kappa_minus: f64,
    pub a_plus: KernelSpec,
    pub a_minus: KernelSpec,
    pub dim: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitSection {
    #[serde(rename = "type")]
    pub kind: InitKind,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSection {
    pub t_end: f64,
    pub record_times: Vec<f64>,
    pub replicates: usize,
    pub master_seed: u64,
    pub event_cap: u64,
    pub positions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentsSection {
    pub grid_points: usize,
    pub dt: f64,
    pub closure: ClosureKind,
    pub k1_floor: f64,
    /// Constant of the initial bound `k0⁽ⁿ⁾ ≤ n!·Cⁿ`.
    pub c: f64,
    pub probe_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorsSection {
    pub bins: usize,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySection {
    pub c: f64,
    pub mc: usize,
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub experiment: Option<Experiment>,
    pub model: ModelSection,
    pub init: InitSection,
    pub run: RunSection,
    pub moments: MomentsSection,
    pub estimators: EstimatorsSection,
    pub verify: VerifySection,
    pub outputs: PathBuf,
    #[serde(skip)]
    pub defaults_applied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError(pub String);

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ScenarioError {}

fn invalid(field: &str, requirement: &str, got: impl fmt::Display) -> ScenarioError {
    ScenarioError(format!("field `{field}` {requirement}, got {got}"))
}

/// Closest candidate by edit distance, if it is plausibly a typo.
fn nearest<'a>(word: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(word, c), *c))
        .min()
        .filter(|(d, c)| *d <= (c.len() / 3).max(2))
        .map(|(_, c)| c)
}

/// Turns serde's "unknown field/variant `x`, expected one of `a`, `b`" into a
/// message with a suggestion.
fn suggestion(message: &str) -> Option<String> {
    if !(message.starts_with("unknown field") || message.starts_with("unknown variant")) {
        return None;
    }
    let quoted: Vec<&str> = message.split('`').skip(1).step_by(2).collect();
    let (word, candidates) = quoted.split_first()?;
    nearest(word, candidates).map(|c| format!("did you mean `{c}`?"))
}

struct Defaults(Vec<String>);

impl Defaults {
    fn take<T>(&mut self, value: Option<T>, default: T, field: &str) -> T {
        value.unwrap_or_else(|| {
            self.0.push(field.to_string());
            default
        })
    }
}

fn finite_nonnegative(field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, "must be finite and ≥ 0", v))
    }
}

fn finite_positive(field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, "must be finite and > 0", v))
    }
}

fn kernel(field: &str, spec: KernelSpec, dim: usize) -> Result<Kernel, ScenarioError> {
    finite_positive(&format!("{field}.sigma"), spec.sigma)?;
    Kernel::from_spec(spec, dim).map_err(|e| ScenarioError(format!("field `{field}`: {e}")))
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let mut msg = format!("line {}, column {}: ", inner.line(), inner.column());
        if path != "." {
            msg.push_str(&format!("in `{path}`: "));
        }
        let text = inner.to_string();
        let core = text.split(" at line ").next().unwrap_or(&text).to_string();
        msg.push_str(&core);
        if let Some(s) = suggestion(&core) {
            msg.push_str("; ");
            msg.push_str(&s);
        }
        ScenarioError(msg)
    })?;
    resolve(raw)
}

fn resolve(raw: RawScenario) -> Result<Scenario, ScenarioError> {
    let mut d = Defaults(Vec::new());

    let rm = raw.model;
    let dim = d.take(rm.dim, DEFAULT_DIM, "model.dim");
    if !(1..=3).contains(&dim) {
        return Err(invalid("model.dim", "must be 1, 2 or 3", dim));
    }
    let model = ModelSection {
        m: finite_nonnegative("model.m", rm.m)?,
        kappa_plus: finite_nonnegative("model.kappa_plus", rm.kappa_plus)?,
        kappa_minus: finite_nonnegative("model.kappa_minus", d.take(rm.kappa_minus, 0.0, "model.kappa_minus"))?,
        a_plus: d.take(rm.a_plus, DEFAULT_KERNEL, "model.a_plus"),
        a_minus: d.take(rm.a_minus, DEFAULT_KERNEL, "model.a_minus"),
        dim,
        length: finite_positive("model.length", d.take(rm.length, DEFAULT_LENGTH, "model.length"))?,
    };
    let a_plus = kernel("model.a_plus", model.a_plus, dim)?;
    kernel("model.a_minus", model.a_minus, dim)?;

    let ri = raw.init.unwrap_or_default();
    let init = InitSection {
        kind: d.take(ri.kind, InitKind::Poisson, "init.type"),
        z: finite_positive("init.z", d.take(ri.z, DEFAULT_Z, "init.z"))?,
    };

    let rr = raw.run.unwrap_or_default();
    let t_end = finite_positive("run.t_end", d.take(rr.t_end, DEFAULT_T_END, "run.t_end"))?;
    let default_times: Vec<f64> = (0..=DEFAULT_RECORD_INTERVALS)
        .map(|i| t_end * i as f64 / DEFAULT_RECORD_INTERVALS as f64)
        .collect();
    let record_times = d.take(rr.record_times, default_times, "run.record_times");
    if record_times.is_empty()
        || record_times
            .iter()
            .any(|t| !(t.is_finite() && (0.0..=t_end).contains(t)))
        || record_times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(invalid(
            "run.record_times",
            "must be a nonempty increasing list inside [0, run.t_end]",
            format!("{record_times:?}"),
        ));
    }
    let run = RunSection {
        t_end,
        record_times,
        replicates: d.take(rr.replicates, DEFAULT_REPLICATES, "run.replicates"),
        master_seed: d.take(rr.master_seed, DEFAULT_MASTER_SEED, "run.master_seed"),
        event_cap: d.take(rr.event_cap, DEFAULT_EVENT_CAP, "run.event_cap"),
        positions: d.take(rr.positions, false, "run.positions"),
    };
    if run.replicates == 0 {
        return Err(invalid("run.replicates", "must be ≥ 1", 0));
    }
    if run.event_cap == 0 {
        return Err(invalid("run.event_cap", "must be ≥ 1", 0));
    }

    let rmo = raw.moments.unwrap_or_default();
    let moments = MomentsSection {
        grid_points: d.take(rmo.grid_points, DEFAULT_GRID_POINTS, "moments.grid_points"),
        dt: finite_positive("moments.dt", d.take(rmo.dt, DEFAULT_DT, "moments.dt"))?,
        closure: d.take(rmo.closure, ClosureKind::Power1, "moments.closure"),
        k1_floor: finite_positive(
            "moments.k1_floor",
            d.take(rmo.k1_floor, DEFAULT_K1_FLOOR, "moments.k1_floor"),
        )?,
        c: finite_positive("moments.c", d.take(rmo.c, init.z, "moments.c"))?,
        probe_half_width: finite_nonnegative(
            "moments.probe_half_width",
            d.take(
                rmo.probe_half_width,
                DEFAULT_PROBE_HALF_WIDTH,
                "moments.probe_half_width",
            ),
        )?,
    };
    if moments.grid_points < 4 || !moments.grid_points.is_power_of_two() {
        return Err(invalid(
            "moments.grid_points",
            "must be a power of two ≥ 4",
            moments.grid_points,
        ));
    }

    let re = raw.estimators.unwrap_or_default();
    let half = model.length / 2.0;
    let estimators = EstimatorsSection {
        bins: d.take(re.bins, DEFAULT_BINS, "estimators.bins"),
        r_max: finite_positive(
            "estimators.r_max",
            d.take(re.r_max, half.min(6.0 * a_plus.sigma()), "estimators.r_max"),
        )?,
    };
    if estimators.bins == 0 {
        return Err(invalid("estimators.bins", "must be ≥ 1", 0));
    }
    if estimators.r_max > half {
        return Err(invalid(
            "estimators.r_max",
            &format!("must not exceed half the box ({half})"),
            estimators.r_max,
        ));
    }

    let rv = raw.verify.unwrap_or_default();
    let verify = VerifySection {
        c: finite_positive("verify.c", d.take(rv.c, DEFAULT_VERIFY_C, "verify.c"))?,
        mc: d.take(rv.mc, DEFAULT_VERIFY_MC, "verify.mc"),
    };
    if verify.mc < 100 {
        return Err(invalid("verify.mc", "must be ≥ 100", verify.mc));
    }

    let scenario = Scenario {
        experiment: raw.experiment,
        outputs: d.take(raw.outputs, PathBuf::from("bdlp-out"), "outputs"),
        model,
        init,
        run,
        moments,
        estimators,
        verify,
        defaults_applied: d.0,
    };
    scenario.model_params()?;
    Ok(scenario)
}

impl Scenario {
    pub fn model_params(&self) -> Result<ModelParams, ScenarioError> {
        let m = &self.model;
        let space = SpaceSpec::new(m.dim, m.length).map_err(|e| ScenarioError(format!("field `model.length`: {e}")))?;
        ModelParams::new(
            m.m,
            m.kappa_plus,
            m.kappa_minus,
            kernel("model.a_plus", m.a_plus, m.dim)?,
            kernel("model.a_minus", m.a_minus, m.dim)?,
            space,
        )
        .map_err(|e| ScenarioError(format!("model: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONTACT: &str = r#"{"model": {"m": 1.0, "kappa_plus": 0.8}, "init": {"z": 0.5}}"#;

    #[test]
    fn minimal_contact_config_gets_documented_defaults() {
        let s = parse_scenario(CONTACT).unwrap();
        assert_eq!(s.model.dim, 1);
        assert_eq!(s.model.length, 100.0);
        assert_eq!(s.moments.grid_points, 1024);
        assert_eq!(s.estimators.bins, 50);
        assert_eq!(s.model.kappa_minus, 0.0);
        assert_eq!(s.estimators.r_max, 6.0);
        assert_eq!(s.run.record_times.len(), 11);
        for f in ["model.dim", "model.length", "moments.grid_points", "estimators.bins"] {
            assert!(s.defaults_applied.iter().any(|d| d == f), "{f} not echoed");
        }
        assert!(!s.defaults_applied.iter().any(|d| d == "init.z"));
    }

    #[test]
    fn negative_mortality_names_the_field() {
        let err = parse_scenario(r#"{"model": {"m": -1.0, "kappa_plus": 0.8}}"#).unwrap_err();
        assert!(err.0.contains("model.m"), "{err}");
    }

    #[test]
    fn unknown_key_gets_suggestion_and_location() {
        let text = "{\n  \"model\": {\"m\": 1.0, \"kappa_pls\": 0.8}\n}";
        let err = parse_scenario(text).unwrap_err();
        assert!(err.0.contains("kappa_pls"), "{err}");
        assert!(err.0.contains("did you mean `kappa_plus`"), "{err}");
        assert!(err.0.contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_kernel_family_gets_suggestion() {
        let text = r#"{"model": {"m": 1, "kappa_plus": 1, "a_plus": {"family": "gausian", "sigma": 1}}}"#;
        let err = parse_scenario(text).unwrap_err();
        assert!(err.0.contains("did you mean `gaussian`"), "{err}");
    }

    #[test]
    fn far_off_keys_get_no_suggestion() {
        assert_eq!(nearest("zzzzzzzz", &["m", "kappa_plus"]), None);
    }

    #[test]
    fn record_times_must_fit_the_horizon() {
        let text = r#"{"model": {"m": 1, "kappa_plus": 1}, "run": {"t_end": 2, "record_times": [0, 3]}}"#;
        assert!(parse_scenario(text).unwrap_err().0.contains("run.record_times"));
    }

    #[test]
    fn small_torus_is_rejected() {
        let text = r#"{"model": {"m": 1, "kappa_plus": 1, "length": 4}}"#;
        assert!(parse_scenario(text).is_err());
    }
}
