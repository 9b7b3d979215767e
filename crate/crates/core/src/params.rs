//! Physical parameters and chemistry closures of the DFN cell model.
//!
//! A [`ParameterSet`] is immutable once validated. Closures (electrolyte
//! conductivity, open-circuit potentials) are chosen from named built-in
//! families so that every evaluation comes with an exact derivative.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Error, Result};

/// The three layers of a cell, ordered along the through-cell axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubdomainTag {
    Negative,
    Separator,
    Positive,
}

impl SubdomainTag {
    pub const ALL: [SubdomainTag; 3] = [Self::Negative, Self::Separator, Self::Positive];
    pub const ELECTRODES: [SubdomainTag; 2] = [Self::Negative, Self::Positive];

    pub fn is_electrode(self) -> bool {
        self != SubdomainTag::Separator
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SubdomainTag::Negative => "negative",
            SubdomainTag::Separator => "separator",
            SubdomainTag::Positive => "positive",
        }
    }
}

impl fmt::Display for SubdomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Electrolyte conductivity families, `kappa1(c1)` in S/m with `c1` in mol/m³.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductivityCurve {
    Constant {
        value: f64,
    },
    /// `sum_i coeffs[i] * c1^i`
    Polynomial {
        coeffs: Vec<f64>,
    },
    /// `prefactor * exp(rate * c1)`
    Exponential {
        prefactor: f64,
        rate: f64,
    },
    /// LiPF6 in EC:DMC (Capiglia et al. 1999), scaled by `scale`
    /// (typically a Bruggeman factor).
    Capiglia1999 {
        scale: f64,
    },
}

impl ConductivityCurve {
    /// Returns `(kappa1, d kappa1 / d c1)`.
    pub fn eval(&self, c1: f64) -> (f64, f64) {
        match self {
            ConductivityCurve::Constant { value } => (*value, 0.0),
            ConductivityCurve::Polynomial { coeffs } => horner_with_derivative(coeffs, c1),
            ConductivityCurve::Exponential { prefactor, rate } => {
                let v = prefactor * (rate * c1).exp();
                (v, rate * v)
            }
            ConductivityCurve::Capiglia1999 { scale } => {
                let x = c1 / 1000.0;
                let v = 0.0911 + 1.9101 * x - 1.052 * x * x + 0.1554 * x * x * x;
                let dv = (1.9101 - 2.0 * 1.052 * x + 3.0 * 0.1554 * x * x) / 1000.0;
                (scale * v, scale * dv)
            }
        }
    }
}

/// Open-circuit potential families, `U(x)` in volts of stoichiometry `x = c2 / c2max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OcpCurve {
    Constant {
        value: f64,
    },
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// `sum_i coeffs[i] * x^i`
    Polynomial {
        coeffs: Vec<f64>,
    },
    /// MCMB 2528 graphite (Dualfoil 1998 fit).
    GraphiteDualfoil1998,
    /// LiCoO2 (Dualfoil 1998 fit).
    Lico2Dualfoil1998,
}

// (amplitude, centre, width) for `amplitude * tanh((x - centre) / width)`
const GRAPHITE_TANH: [(f64, f64, f64); 8] = [
    (0.0351, 0.286, 0.083),
    (-0.0045, 0.849, 0.119),
    (-0.035, 0.9233, 0.05),
    (-0.0147, 0.5, 0.034),
    (-0.102, 0.194, 0.142),
    (-0.022, 0.9, 0.0164),
    (-0.011, 0.124, 0.0226),
    (0.0155, 0.105, 0.029),
];

fn tanh_term(amp: f64, centre: f64, width: f64, x: f64) -> (f64, f64) {
    let t = ((x - centre) / width).tanh();
    (amp * t, amp * (1.0 - t * t) / width)
}

impl OcpCurve {
    /// Returns `(U, dU/dx)` at stoichiometry `x`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            OcpCurve::Constant { value } => (*value, 0.0),
            OcpCurve::Linear { intercept, slope } => (intercept + slope * x, *slope),
            OcpCurve::Polynomial { coeffs } => horner_with_derivative(coeffs, x),
            OcpCurve::GraphiteDualfoil1998 => {
                let e = (-120.0 * x).exp();
                let mut u = 0.194 + 1.5 * e;
                let mut du = -180.0 * e;
                for (a, c, w) in GRAPHITE_TANH {
                    let (v, dv) = tanh_term(a, c, w, x);
                    u += v;
                    du += dv;
                }
                (u, du)
            }
            OcpCurve::Lico2Dualfoil1998 => {
                let stretch = 1.062;
                let s = stretch * x;
                // each entry: amplitude * tanh(p + q * s)
                let lin = [
                    (0.07645, 30.834, -54.4806),
                    (2.1581, 52.294, -50.294),
                    (-0.14169, 11.0923, -19.8543),
                    (0.2051, 1.4684, -5.4888),
                    (0.2531, 0.56478 / 0.1316, -1.0 / 0.1316),
                    (-0.02167, -0.525 / 0.006, 1.0 / 0.006),
                ];
                let mut u = 2.16216;
                let mut du = 0.0;
                for (a, p, q) in lin {
                    let t = (p + q * s).tanh();
                    u += a * t;
                    du += a * (1.0 - t * t) * q * stretch;
                }
                (u, du)
            }
        }
    }
}

fn horner_with_derivative(coeffs: &[f64], x: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut dv = 0.0;
    for &c in coeffs.iter().rev() {
        dv = dv * x + v;
        v = v * x + c;
    }
    (v, dv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ButlerVolmer {
    /// Rate constant `k_m`.
    pub rate: f64,
    pub alpha_a: f64,
    pub alpha_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConstants {
    pub faraday: f64,
    pub gas_constant: f64,
    pub temperature: f64,
    pub t_plus: f64,
}

impl CellConstants {
    /// `F / (R T0)` in 1/V.
    pub fn inverse_thermal_voltage(&self) -> f64 {
        self.faraday / (self.gas_constant * self.temperature)
    }
}

/// Electrolyte-side coefficients present in every subdomain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorParams {
    pub eps1: f64,
    pub k1: f64,
    pub kappa1: ConductivityCurve,
    pub c1_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeParams {
    pub eps1: f64,
    pub k1: f64,
    pub kappa1: ConductivityCurve,
    pub c1_init: f64,
    pub sigma: f64,
    pub k2: f64,
    pub a1: f64,
    pub a2: f64,
    pub radius: f64,
    pub c2max: f64,
    pub c2_init: f64,
    pub kinetics: ButlerVolmer,
    pub ocp: OcpCurve,
}

/// Applied current density on the current collectors, piecewise constant in time.
///
/// The value is the discharge current density in A/m²: positive means current
/// leaves the cell through the positive collector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current: Option<f64>,
    /// `[[t_start, value], ...]`, starting at t = 0 with ascending start times.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<Vec<[f64; 2]>>,
}

impl OperatingParams {
    pub fn constant(current: f64) -> Self {
        Self {
            current: Some(current),
            program: None,
        }
    }

    /// Current density applied at time `t`.
    pub fn current_at(&self, t: f64) -> f64 {
        if let Some(program) = &self.program {
            let mut value = 0.0;
            for &[start, v] in program {
                if t + 1e-12 * t.abs().max(1.0) >= start {
                    value = v;
                } else {
                    break;
                }
            }
            value
        } else {
            self.current.unwrap_or(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSet {
    pub cell: CellConstants,
    pub negative: ElectrodeParams,
    pub separator: SeparatorParams,
    pub positive: ElectrodeParams,
    pub operating: OperatingParams,
}

/// Butler–Volmer reaction rate and its exact partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reaction {
    pub value: f64,
    pub d_c1: f64,
    pub d_c2s: f64,
    pub d_eta: f64,
}

impl ParameterSet {
    /// Built-in parameter presets by name.
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_value(preset_value(name)?, &format!("<preset {name}>"))
    }

    pub fn electrode(&self, tag: SubdomainTag) -> Result<&ElectrodeParams, DomainError> {
        match tag {
            SubdomainTag::Negative => Ok(&self.negative),
            SubdomainTag::Positive => Ok(&self.positive),
            SubdomainTag::Separator => Err(DomainError::new("electrode-only parameter in separator", f64::NAN)),
        }
    }

    /// Electrode parameters; panics on the separator. Callers iterate electrode tags only.
    pub fn electrode_of(&self, tag: SubdomainTag) -> &ElectrodeParams {
        match tag {
            SubdomainTag::Negative => &self.negative,
            SubdomainTag::Positive => &self.positive,
            SubdomainTag::Separator => panic!("separator has no electrode parameters"),
        }
    }

    pub fn eps1(&self, tag: SubdomainTag) -> f64 {
        match tag {
            SubdomainTag::Negative => self.negative.eps1,
            SubdomainTag::Separator => self.separator.eps1,
            SubdomainTag::Positive => self.positive.eps1,
        }
    }

    pub fn k1(&self, tag: SubdomainTag) -> f64 {
        match tag {
            SubdomainTag::Negative => self.negative.k1,
            SubdomainTag::Separator => self.separator.k1,
            SubdomainTag::Positive => self.positive.k1,
        }
    }

    pub fn c1_init(&self, tag: SubdomainTag) -> f64 {
        match tag {
            SubdomainTag::Negative => self.negative.c1_init,
            SubdomainTag::Separator => self.separator.c1_init,
            SubdomainTag::Positive => self.positive.c1_init,
        }
    }

    pub fn kappa1_curve(&self, tag: SubdomainTag) -> &ConductivityCurve {
        match tag {
            SubdomainTag::Negative => &self.negative.kappa1,
            SubdomainTag::Separator => &self.separator.kappa1,
            SubdomainTag::Positive => &self.positive.kappa1,
        }
    }

    /// `(kappa1, d kappa1/d c1)` for subdomain `tag`.
    pub fn kappa1_of(&self, tag: SubdomainTag, c1: f64) -> Result<(f64, f64), DomainError> {
        if !(c1 > 0.0) {
            return Err(DomainError::new("c1", c1));
        }
        Ok(self.kappa1_curve(tag).eval(c1))
    }

    /// Diffusional conductivity `kappa2 = (2 R T0 / F) kappa1(c1) (1 - t_plus)`
    /// with its derivative in `c1`.
    pub fn kappa2_of(&self, tag: SubdomainTag, c1: f64) -> Result<(f64, f64), DomainError> {
        let (k, dk) = self.kappa1_of(tag, c1)?;
        let factor = 2.0 / self.cell.inverse_thermal_voltage() * (1.0 - self.cell.t_plus);
        Ok((factor * k, factor * dk))
    }

    /// Open-circuit potential `(U, dU/dc2s)` of electrode `tag`.
    pub fn ocp(&self, tag: SubdomainTag, c2s: f64) -> Result<(f64, f64), DomainError> {
        let e = self.electrode(tag)?;
        if !(c2s > 0.0 && c2s < e.c2max) {
            return Err(DomainError::new("c2 surface", c2s));
        }
        let (u, du) = e.ocp.eval(c2s / e.c2max);
        Ok((u, du / e.c2max))
    }

    /// `eta = phi2 - phi1 - U(c2s)`.
    pub fn overpotential(&self, tag: SubdomainTag, phi1: f64, phi2: f64, c2s: f64) -> Result<f64, DomainError> {
        let (u, _) = self.ocp(tag, c2s)?;
        Ok(phi2 - phi1 - u)
    }

    /// Butler–Volmer rate
    /// `k c1^aa (c2max - c2s)^aa c2s^ac (exp(aa f eta) - exp(-ac f eta))`, `f = F/(R T0)`.
    pub fn butler_volmer(&self, tag: SubdomainTag, c1: f64, c2s: f64, eta: f64) -> Result<Reaction, DomainError> {
        let e = self.electrode(tag)?;
        if !(c1 > 0.0) {
            return Err(DomainError::new("c1", c1));
        }
        if !(c2s > 0.0 && c2s < e.c2max) {
            return Err(DomainError::new("c2 surface", c2s));
        }
        let ButlerVolmer { rate, alpha_a, alpha_c } = e.kinetics;
        let f = self.cell.inverse_thermal_voltage();
        let gap = e.c2max - c2s;
        let prefactor = rate * c1.powf(alpha_a) * gap.powf(alpha_a) * c2s.powf(alpha_c);
        let ea = (alpha_a * f * eta).exp();
        let ec = (-alpha_c * f * eta).exp();
        let drive = ea - ec;
        let value = prefactor * drive;
        Ok(Reaction {
            value,
            d_c1: alpha_a / c1 * value,
            d_c2s: prefactor * (alpha_c / c2s - alpha_a / gap) * drive,
            d_eta: prefactor * f * (alpha_a * ea + alpha_c * ec),
        })
    }

    /// Reads a TOML (or `.json`) parameter file, applies `overrides` given as
    /// dotted keys with TOML-syntax values, and validates the result.
    pub fn load(path: impl AsRef<Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value = parse_config_text(path, &text)?;
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value, &path.display().to_string())
    }

    pub fn from_value(value: serde_json::Value, origin: &str) -> Result<Self> {
        let ps: ParameterSet = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
        ps.validate()?;
        Ok(ps)
    }

    /// Checks every invariant; the error names the first violated one.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        let c = &self.cell;
        for (name, v) in [
            ("cell.faraday", c.faraday),
            ("cell.gas_constant", c.gas_constant),
            ("cell.temperature", c.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(c.t_plus > 0.0 && c.t_plus < 1.0) {
            return fail(format!("cell.t_plus out of (0,1): {}", c.t_plus));
        }
        let sep = &self.separator;
        for (name, v) in [
            ("separator.eps1", sep.eps1),
            ("separator.k1", sep.k1),
            ("separator.c1_init", sep.c1_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        check_conductivity("separator", &sep.kappa1, sep.c1_init)?;
        for tag in SubdomainTag::ELECTRODES {
            let e = self.electrode_of(tag);
            let n = tag.name();
            for (field, v) in [
                ("eps1", e.eps1),
                ("k1", e.k1),
                ("c1_init", e.c1_init),
                ("sigma", e.sigma),
                ("k2", e.k2),
                ("a1", e.a1),
                ("a2", e.a2),
                ("radius", e.radius),
                ("c2max", e.c2max),
                ("kinetics.rate", e.kinetics.rate),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return fail(format!("{n}.{field} must be positive, got {v}"));
                }
            }
            for (field, v) in [("alpha_a", e.kinetics.alpha_a), ("alpha_c", e.kinetics.alpha_c)] {
                if !(v > 0.0 && v < 1.0) {
                    return fail(format!("{n}.kinetics.{field} out of (0,1): {v}"));
                }
            }
            if !(e.c2_init > 0.0 && e.c2_init < e.c2max) {
                return fail(format!(
                    "{n}.c2_init must lie in the open interval (0, c2max = {}), got {}",
                    e.c2max, e.c2_init
                ));
            }
            check_conductivity(n, &e.kappa1, e.c1_init)?;
            let (u, du) = e.ocp.eval(e.c2_init / e.c2max);
            if !(u.is_finite() && du.is_finite()) {
                return fail(format!("{n}.ocp is not finite at the initial stoichiometry"));
            }
        }
        let op = &self.operating;
        match (&op.current, &op.program) {
            (Some(_), Some(_)) => return fail("operating: give either `current` or `program`, not both".into()),
            (None, None) => return fail("operating: one of `current` or `program` is required".into()),
            (Some(v), None) if !v.is_finite() => return fail(format!("operating.current not finite: {v}")),
            (None, Some(p)) => {
                if p.is_empty() || p[0][0] != 0.0 {
                    return fail("operating.program must start at t = 0".into());
                }
                if p.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return fail("operating.program start times must be strictly increasing".into());
                }
                if p.iter().any(|s| !s[1].is_finite()) {
                    return fail("operating.program values must be finite".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_conductivity(section: &str, curve: &ConductivityCurve, c1: f64) -> Result<()> {
    let (k, dk) = curve.eval(c1);
    if !(k > 0.0 && k.is_finite() && dk.is_finite()) {
        return Err(Error::Validation(format!(
            "{section}.kappa1 must be positive at c1_init = {c1}, got {k}"
        )));
    }
    Ok(())
}

/// Unvalidated contents of a built-in preset.
pub fn preset_value(name: &str) -> Result<serde_json::Value> {
    let text = match name {
        "marquis2019" => include_str!("../presets/marquis2019.toml"),
        other => return Err(Error::Validation(format!("unknown preset `{other}`"))),
    };
    toml::from_str(text).map_err(|e| Error::Parse {
        path: format!("<preset {name}>").into(),
        message: e.to_string(),
    })
}

/// Parses TOML, or JSON when the extension is `.json`, into a generic value.
pub fn parse_config_text(path: &Path, text: &str) -> Result<serde_json::Value> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

/// Sets dotted keys (`negative.k2`) to values written in TOML syntax.
pub fn apply_overrides(value: &mut serde_json::Value, overrides: &BTreeMap<String, String>) -> Result<()> {
    let mut parsed = BTreeMap::new();
    for (key, raw) in overrides {
        let v = toml::from_str::<serde_json::Value>(&format!("v = {raw}"))
            .map_err(|e| Error::Validation(format!("override {key}={raw}: {e}")))?
            .get("v")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        parsed.insert(key.clone(), v);
    }
    apply_value_overrides(value, &parsed)
}

/// Sets dotted keys to already-parsed values.
pub fn apply_value_overrides(
    value: &mut serde_json::Value,
    overrides: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    for (key, parsed) in overrides {
        let mut cursor = &mut *value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_object_mut()
                .ok_or_else(|| Error::Validation(format!("override {key}: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            cursor = table
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}
