//! Experiment configuration files.
//!
//! Configs are TOML documents. Top-level keys:
//!
//! | key          | type            | meaning                                               |
//! |--------------|-----------------|-------------------------------------------------------|
//! | `T`          | integer         | horizon; iterates `w_0 .. w_{T-1}`                     |
//! | `t_rule`     | string          | `half_T` (default) or `explicit`                       |
//! | `t`          | integer         | averaging start when `t_rule = "explicit"`             |
//! | `gamma_rule` | string          | `half_inv_R2` (default), `half_inv_rho_R2`, `explicit`, `frac_inv_R2:<f>` |
//! | `gamma`      | float           | stepsize when `gamma_rule = "explicit"`                |
//! | `w0`         | array of floats | starting point, zeros by default                       |
//! | `replicates` | integer         | independent runs (default 100)                         |
//! | `seed`       | integer         | master seed (default 0)                                |
//!
//! plus a `[distribution]` table (see [`DistributionConfig`]) and an optional
//! `[outputs]` table with `path` and `format` (`csv` or `json`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::rho_misspec;
use crate::distributions::{
    estimate_moments, exact_moments, DistributionConfig, DistributionSpec, Moments,
};
use crate::error::{Error, Result};
use crate::matcore::Vector;
use crate::sgd::SgdConfig;

/// Samples used for plug-in moments when a family has no closed form.
pub const FALLBACK_MOMENT_SAMPLES: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaRule {
    /// `gamma = 1 / (2 R^2)`.
    HalfInvR2,
    /// `gamma = 1 / (2 rho R^2)`.
    HalfInvRhoR2,
    /// `gamma = f / R^2`.
    FractionInvR2(f64),
    Explicit,
}

impl FromStr for GammaRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_inv_R2" => Ok(GammaRule::HalfInvR2),
            "half_inv_rho_R2" => Ok(GammaRule::HalfInvRhoR2),
            "explicit" => Ok(GammaRule::Explicit),
            other => {
                if let Some(frac) = other.strip_prefix("frac_inv_R2:") {
                    let f: f64 = frac.parse().map_err(|_| {
                        Error::schema("gamma_rule", format!("bad fraction in `{other}`"))
                    })?;
                    if !(f > 0.0 && f.is_finite()) {
                        return Err(Error::schema("gamma_rule", "fraction must be positive"));
                    }
                    Ok(GammaRule::FractionInvR2(f))
                } else {
                    Err(Error::schema(
                        "gamma_rule",
                        format!("unknown rule `{other}`"),
                    ))
                }
            }
        }
    }
}

impl fmt::Display for GammaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaRule::HalfInvR2 => write!(f, "half_inv_R2"),
            GammaRule::HalfInvRhoR2 => write!(f, "half_inv_rho_R2"),
            GammaRule::FractionInvR2(x) => write!(f, "frac_inv_R2:{x}"),
            GammaRule::Explicit => write!(f, "explicit"),
        }
    }
}

impl Serialize for GammaRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TRule {
    #[serde(rename = "half_T")]
    HalfT,
    #[serde(rename = "explicit")]
    Explicit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    #[default]
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::schema("format", format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub format: Option<OutputFormat>,
}

/// Raw document, before rules are resolved.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    distribution: DistributionConfig,
    #[serde(default)]
    gamma_rule: Option<String>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    t_rule: Option<TRule>,
    #[serde(default)]
    t: Option<usize>,
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(default)]
    w0: Option<Vec<f64>>,
    #[serde(default)]
    replicates: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    outputs: OutputsConfig,
}

pub const DEFAULT_REPLICATES: usize = 100;

/// A validated experiment: distribution, resolved stepsize and window.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub distribution: DistributionConfig,
    pub spec: DistributionSpec,
    /// Exact moments when available, else plug-in estimates.
    pub moments: Moments,
    pub gamma_rule: GammaRule,
    pub gamma: f64,
    pub t_rule: TRule,
    pub t: usize,
    pub horizon: usize,
    pub w0: Vector,
    pub replicates: usize,
    pub seed: u64,
    pub outputs: OutputsConfig,
}

/// Exact moments, or plug-in moments when the family has no closed form.
pub fn reference_moments(spec: &DistributionSpec, seed: u64) -> Result<Moments> {
    match exact_moments(spec) {
        Ok(m) => Ok(m),
        Err(Error::IntractableMoments(_)) => estimate_moments(spec, FALLBACK_MOMENT_SAMPLES, seed),
        Err(e) => Err(e),
    }
}

/// Stepsize for `rule`. A noiseless problem has no misspecification ratio;
/// `rho = 1` is used there.
pub fn resolve_gamma(
    rule: GammaRule,
    explicit: Option<f64>,
    spec: &DistributionSpec,
    moments: &Moments,
) -> Result<f64> {
    let r2 = spec.r2();
    let gamma = match rule {
        GammaRule::HalfInvR2 => 0.5 / r2,
        GammaRule::HalfInvRhoR2 => {
            let rho = match rho_misspec(moments) {
                Ok(r) => r,
                Err(Error::ZeroNoise) => 1.0,
                Err(e) => return Err(e),
            };
            0.5 / (rho * r2)
        }
        GammaRule::FractionInvR2(f) => f / r2,
        GammaRule::Explicit => explicit
            .ok_or_else(|| Error::schema("gamma", "required when gamma_rule = \"explicit\""))?,
    };
    let limit = spec.stability_limit();
    if !(gamma > 0.0 && gamma < limit) {
        return Err(Error::StepSizeTooLarge { gamma, limit });
    }
    Ok(gamma)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| Error::schema("<document>", e.message().to_string()))?;
        Self::resolve(raw)
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let spec = DistributionSpec::from_config(&raw.distribution)?;
        let seed = raw.seed.unwrap_or(0);
        let moments = reference_moments(&spec, seed)?;
        let gamma_rule = match raw.gamma_rule.as_deref() {
            Some(s) => s.parse()?,
            None if raw.gamma.is_some() => GammaRule::Explicit,
            None => GammaRule::HalfInvR2,
        };
        if raw.gamma.is_some() && gamma_rule != GammaRule::Explicit {
            return Err(Error::schema(
                "gamma",
                "only allowed with gamma_rule = \"explicit\"",
            ));
        }
        let gamma = resolve_gamma(gamma_rule, raw.gamma, &spec, &moments)?;
        if raw.horizon < 2 {
            return Err(Error::schema("T", "must be at least 2"));
        }
        let t_rule = raw.t_rule.unwrap_or(if raw.t.is_some() {
            TRule::Explicit
        } else {
            TRule::HalfT
        });
        let t = match t_rule {
            TRule::HalfT => {
                if raw.t.is_some() {
                    return Err(Error::schema(
                        "t",
                        "only allowed with t_rule = \"explicit\"",
                    ));
                }
                raw.horizon / 2
            }
            TRule::Explicit => raw
                .t
                .ok_or_else(|| Error::schema("t", "required when t_rule = \"explicit\""))?,
        };
        if t >= raw.horizon {
            return Err(Error::EmptyAverageWindow {
                t,
                horizon: raw.horizon,
            });
        }
        let d = spec.dim();
        let w0 = match raw.w0 {
            Some(w) if w.len() == d => Vector::from_vec(w),
            Some(w) => {
                return Err(Error::schema(
                    "w0",
                    format!("expected length {d}, got {}", w.len()),
                ))
            }
            None => Vector::zeros(d),
        };
        if w0.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema("w0", "entries must be finite"));
        }
        let replicates = raw.replicates.unwrap_or(DEFAULT_REPLICATES);
        if replicates < 2 {
            return Err(Error::schema("replicates", "must be at least 2"));
        }
        Ok(ExperimentConfig {
            distribution: raw.distribution,
            spec,
            moments,
            gamma_rule,
            gamma,
            t_rule,
            t,
            horizon: raw.horizon,
            w0,
            replicates,
            seed,
            outputs: raw.outputs,
        })
    }

    /// Builds a config directly from a spec, for programmatic use.
    pub fn from_spec(
        distribution: DistributionConfig,
        gamma_rule: GammaRule,
        explicit_gamma: Option<f64>,
        horizon: usize,
        replicates: usize,
        seed: u64,
    ) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::schema("T", "must be at least 2"));
        }
        let spec = DistributionSpec::from_config(&distribution)?;
        let moments = reference_moments(&spec, seed)?;
        let gamma = resolve_gamma(gamma_rule, explicit_gamma, &spec, &moments)?;
        let d = spec.dim();
        Ok(ExperimentConfig {
            distribution,
            spec,
            moments,
            gamma_rule,
            gamma,
            t_rule: TRule::HalfT,
            t: horizon / 2,
            horizon,
            w0: Vector::zeros(d),
            replicates,
            seed,
            outputs: OutputsConfig::default(),
        })
    }

    pub fn with_w0(mut self, w0: Vector) -> Self {
        self.w0 = w0;
        self
    }

    pub fn with_window(mut self, t: usize, horizon: usize) -> Self {
        self.t_rule = TRule::Explicit;
        self.t = t;
        self.horizon = horizon;
        self
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig::new(self.gamma, self.w0.clone(), self.t, self.horizon)
    }

    /// `||w0 - w*||^2`.
    pub fn dist0_sq(&self) -> f64 {
        (&self.w0 - self.spec.w_star()).norm_squared()
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        T = 1000
        gamma_rule = "half_inv_R2"
        [distribution]
        kind = "gaussian_well_specified"
        d = 3
        noise_sigma = 1.0
    "#;

    #[test]
    fn minimal_config_resolves() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert!((cfg.gamma - 0.1).abs() < 1e-15);
        assert_eq!(cfg.t, 500);
        assert_eq!(cfg.t_rule, TRule::HalfT);
        assert_eq!(cfg.replicates, DEFAULT_REPLICATES);
        assert_eq!(cfg.w0, Vector::zeros(3));
        assert!(cfg.moments.is_exact());
    }

    #[test]
    fn explicit_gamma_gate() {
        let text = MINIMAL.replace(
            "gamma_rule = \"half_inv_R2\"",
            "gamma_rule = \"explicit\"\ngamma = 0.2",
        );
        assert!(matches!(
            parse_config(&text),
            Err(Error::StepSizeTooLarge { .. })
        ));
        let text = MINIMAL.replace("gamma_rule = \"half_inv_R2\"", "gamma = 0.05");
        assert!((parse_config(&text).unwrap().gamma - 0.05).abs() < 1e-15);
    }

    #[test]
    fn rho_rule_uses_misspecification() {
        let text = r#"
            T = 100
            gamma_rule = "half_inv_rho_R2"
            [distribution]
            kind = "gaussian_misspecified"
            H = [[1.0, 0.0], [0.0, 0.25]]
            noise_sigma = 1.0
        "#;
        let cfg = parse_config(text).unwrap();
        let rho = rho_misspec(&cfg.moments).unwrap();
        assert!(rho > 1.0);
        assert!((cfg.gamma - 0.5 / (rho * cfg.moments.r2())).abs() < 1e-15);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let missing_t = MINIMAL.replace("T = 1000", "");
        assert!(matches!(
            parse_config(&missing_t),
            Err(Error::Schema { .. })
        ));
        let unknown = format!("bogus = 1\n{MINIMAL}");
        assert!(matches!(parse_config(&unknown), Err(Error::Schema { .. })));
        let bad_rule = MINIMAL.replace("half_inv_R2", "quarter");
        match parse_config(&bad_rule) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "gamma_rule"),
            other => panic!("{other:?}"),
        }
        let bad_w0 = format!("w0 = [1.0]\n{MINIMAL}");
        match parse_config(&bad_w0) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "w0"),
            other => panic!("{other:?}"),
        }
        let window = MINIMAL.replace("T = 1000", "T = 10\nt = 10");
        assert!(matches!(
            parse_config(&window),
            Err(Error::EmptyAverageWindow { .. })
        ));
    }

    #[test]
    fn gamma_rule_strings_round_trip() {
        for s in [
            "half_inv_R2",
            "half_inv_rho_R2",
            "explicit",
            "frac_inv_R2:0.9",
        ] {
            let r: GammaRule = s.parse().unwrap();
            assert_eq!(r.to_string(), s);
        }
        assert!("frac_inv_R2:-1".parse::<GammaRule>().is_err());
    }

    #[test]
    fn intractable_family_falls_back_to_estimates() {
        let text = r#"
            T = 100
            [distribution]
            kind = "gaussian_misspecified"
            d = 2
            noise_sigma = 0.5
            misspec_fn = "saturating_norm"
        "#;
        let cfg = parse_config(text).unwrap();
        assert!(!cfg.moments.is_exact());
    }
}
