//! Workload specifications for the simulator.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "rules": {"align": {"duration_hours": {"dist": "normal", "mean": 7, "sd": 0.5},
//!                       "peak_cpu": 7, "peak_mem_gb": 56, "peak_disk_gb": 225}},
//!   "overrides": [{"sample": "S3", "rule": "align", "peak_mem_gb": 60}],
//!   "failures": [{"sample": "S1", "attempts": [1], "step": "align"}]
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use rust_decimal::prelude::{FromPrimitive, ToPrimitive};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::workflow::TaskPlan;

/// Smallest duration a drawn step can take, in hours.
const MIN_DRAWN_HOURS: Decimal = Decimal::from_parts(1, 0, 0, false, 6);
const DURATION_DP: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Quantity {
    Fixed(Decimal),
    Random(Distribution),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Distribution {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl Quantity {
    fn validate(&self) -> Result<(), String> {
        match *self {
            Self::Fixed(v) if v.is_sign_negative() && !v.is_zero() => Err(format!("negative value {v}")),
            Self::Fixed(_) => Ok(()),
            Self::Random(Distribution::Normal { mean, sd }) => {
                if !mean.is_finite() || !sd.is_finite() || mean < 0.0 || sd < 0.0 {
                    Err(format!("normal(mean={mean}, sd={sd}) needs finite mean ≥ 0 and sd ≥ 0"))
                } else {
                    Ok(())
                }
            }
            Self::Random(Distribution::Uniform { low, high }) => {
                if !low.is_finite() || !high.is_finite() || low < 0.0 || low > high {
                    Err(format!("uniform(low={low}, high={high}) needs 0 ≤ low ≤ high"))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Self::Fixed(v) => v.to_f64().unwrap_or(0.0),
            Self::Random(Distribution::Normal { mean, sd }) => {
                if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).expect("validated").sample(rng).max(0.0)
                }
            }
            Self::Random(Distribution::Uniform { low, high }) => {
                if low == high {
                    low
                } else {
                    rng.gen_range(low..=high)
                }
            }
        }
    }

    /// Expected value, ignoring clipping at zero.
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Fixed(v) => v.to_f64().unwrap_or(0.0),
            Self::Random(Distribution::Normal { mean, .. }) => mean,
            Self::Random(Distribution::Uniform { low, high }) => (low + high) / 2.0,
        }
    }

    fn is_degenerate(&self) -> bool {
        match *self {
            Self::Fixed(_) => true,
            Self::Random(Distribution::Normal { sd, .. }) => sd == 0.0,
            Self::Random(Distribution::Uniform { low, high }) => low == high,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleWorkload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_hours: Option<Quantity>,
    #[serde(default, alias = "peak_cpu_cores", skip_serializing_if = "Option::is_none")]
    pub peak_cpu: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_mem_gb: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_disk_gb: Option<Quantity>,
}

impl RuleWorkload {
    fn fields(&self) -> [(&'static str, Option<&Quantity>); 4] {
        [
            ("duration_hours", self.duration_hours.as_ref()),
            ("peak_cpu", self.peak_cpu.as_ref()),
            ("peak_mem_gb", self.peak_mem_gb.as_ref()),
            ("peak_disk_gb", self.peak_disk_gb.as_ref()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub sample: String,
    pub rule: String,
    #[serde(flatten)]
    pub values: RuleWorkload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedFailure {
    pub sample: String,
    pub attempts: Vec<u32>,
    pub step: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    #[serde(default)]
    pub rules: BTreeMap<String, RuleWorkload>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<Override>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<InjectedFailure>,
    /// Probability that any step attempt fails with an injected fault.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_rate: Option<f64>,
    /// Redraw durations and peaks on every attempt instead of once per
    /// (sample, rule).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub vary_by_attempt: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("workload spec: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading workload spec {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("workload spec: {location}: {message}")]
    Invalid { location: String, message: String },
    #[error("workload spec has no {field} for rule '{rule}' (sample '{sample}')")]
    IncompleteSpec {
        rule: String,
        sample: String,
        field: &'static str,
    },
}

/// Values drawn for one step of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDraw {
    pub duration_hours: Decimal,
    pub peak_cpu: f64,
    pub peak_mem_gb: f64,
    pub peak_disk_gb: f64,
}

impl WorkloadSpec {
    pub fn from_json(text: &str) -> Result<Self, WorkloadError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workload serializes")
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let invalid = |location: String, message: String| WorkloadError::Invalid { location, message };
        let check = |location: &str, w: &RuleWorkload| -> Result<(), WorkloadError> {
            for (field, q) in w.fields() {
                if let Some(q) = q {
                    q.validate().map_err(|m| invalid(format!("{location}.{field}"), m))?;
                    if field == "duration_hours" && matches!(q, Quantity::Fixed(v) if v.is_zero()) {
                        return Err(invalid(format!("{location}.{field}"), "duration must be positive".into()));
                    }
                }
            }
            Ok(())
        };
        for (rule, w) in &self.rules {
            check(&format!("rules.{rule}"), w)?;
        }
        for (i, o) in self.overrides.iter().enumerate() {
            check(&format!("overrides[{i}]"), &o.values)?;
        }
        for (i, f) in self.failures.iter().enumerate() {
            if f.attempts.contains(&0) {
                return Err(invalid(format!("failures[{i}]"), "attempts are numbered from 1".into()));
            }
        }
        if let Some(p) = self.failure_rate {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid("failure_rate".into(), format!("{p} is not a probability")));
            }
        }
        Ok(())
    }

    fn quantity(&self, sample: &str, rule: &str, field: &'static str) -> Result<&Quantity, WorkloadError> {
        fn pick<'a>(w: &'a RuleWorkload, field: &str) -> Option<&'a Quantity> {
            match field {
                "duration_hours" => w.duration_hours.as_ref(),
                "peak_cpu" => w.peak_cpu.as_ref(),
                "peak_mem_gb" => w.peak_mem_gb.as_ref(),
                _ => w.peak_disk_gb.as_ref(),
            }
        }
        self.overrides
            .iter()
            .rev()
            .filter(|o| o.sample == sample && o.rule == rule)
            .find_map(|o| pick(&o.values, field))
            .or_else(|| self.rules.get(rule).and_then(|w| pick(w, field)))
            .ok_or_else(|| WorkloadError::IncompleteSpec {
                rule: rule.to_string(),
                sample: sample.to_string(),
                field,
            })
    }

    fn rng(&self, parts: &[&[u8]]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Draw one step's values. Identical inputs always give identical draws.
    pub fn draw(&self, sample: &str, rule: &str, attempt: u32) -> Result<StepDraw, WorkloadError> {
        let attempt_key = if self.vary_by_attempt { attempt } else { 0 };
        let mut out = [0.0f64; 4];
        let mut duration = Decimal::ZERO;
        for (i, field) in ["duration_hours", "peak_cpu", "peak_mem_gb", "peak_disk_gb"]
            .into_iter()
            .enumerate()
        {
            let q = self.quantity(sample, rule, field)?;
            if i == 0 {
                duration = match q {
                    Quantity::Fixed(v) => *v,
                    _ => {
                        let mut rng = self.rng(&[sample.as_bytes(), rule.as_bytes(), field.as_bytes(), &attempt_key.to_le_bytes()]);
                        Decimal::from_f64(q.draw(&mut rng))
                            .unwrap_or(Decimal::ZERO)
                            .round_dp(DURATION_DP)
                            .max(MIN_DRAWN_HOURS)
                    }
                };
            } else {
                let mut rng = self.rng(&[sample.as_bytes(), rule.as_bytes(), field.as_bytes(), &attempt_key.to_le_bytes()]);
                out[i] = q.draw(&mut rng);
            }
        }
        Ok(StepDraw {
            duration_hours: duration,
            peak_cpu: out[1],
            peak_mem_gb: out[2],
            peak_disk_gb: out[3],
        })
    }

    /// Step named for an injected failure on this attempt, if any.
    pub fn injected_failure(&self, sample: &str, attempt: u32) -> Option<&str> {
        self.failures
            .iter()
            .find(|f| f.sample == sample && f.attempts.contains(&attempt))
            .map(|f| f.step.as_str())
    }

    /// Seeded Bernoulli draw against `failure_rate`; always keyed by attempt.
    pub fn random_failure(&self, sample: &str, rule: &str, attempt: u32) -> bool {
        match self.failure_rate {
            Some(p) if p > 0.0 => {
                let mut rng = self.rng(&[sample.as_bytes(), rule.as_bytes(), b"failure", &attempt.to_le_bytes()]);
                rng.gen_bool(p)
            }
            _ => false,
        }
    }

    /// Every step of `plan` has all four values available.
    pub fn check_covers(&self, plan: &TaskPlan) -> Result<(), WorkloadError> {
        for step in &plan.steps {
            for field in ["duration_hours", "peak_cpu", "peak_mem_gb", "peak_disk_gb"] {
                self.quantity(&plan.sample_id, &step.rule_name, field)?;
            }
        }
        Ok(())
    }

    /// Expected task duration from the rule-level means, in hours.
    pub fn expected_task_hours(&self, plan: &TaskPlan) -> Option<Decimal> {
        plan.steps
            .iter()
            .map(|s| {
                self.quantity(&plan.sample_id, &s.rule_name, "duration_hours")
                    .ok()
                    .and_then(|q| Decimal::from_f64(q.mean()))
            })
            .sum::<Option<Decimal>>()
            .map(|d| d.round_dp(DURATION_DP))
    }

    /// Whether any quantity can vary between seeds.
    pub fn is_random(&self) -> bool {
        self.rules
            .values()
            .chain(self.overrides.iter().map(|o| &o.values))
            .flat_map(|w| w.fields().into_iter().filter_map(|(_, q)| q))
            .any(|q| !q.is_degenerate())
    }

    /// A spec with fixed values for one rule.
    pub fn fixed(seed: u64, rule: &str, hours: Decimal, cpu: f64, mem_gb: f64, disk_gb: f64) -> Self {
        let q = |v: f64| Some(Quantity::Fixed(Decimal::from_f64(v).expect("finite")));
        let mut rules = BTreeMap::new();
        rules.insert(
            rule.to_string(),
            RuleWorkload {
                duration_hours: Some(Quantity::Fixed(hours)),
                peak_cpu: q(cpu),
                peak_mem_gb: q(mem_gb),
                peak_disk_gb: q(disk_gb),
            },
        );
        Self {
            seed,
            rules,
            overrides: Vec::new(),
            failures: Vec::new(),
            failure_rate: None,
            vary_by_attempt: false,
        }
    }
}
