//! Mixed search space over the simulator's numerical controls.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::{Formulation, NumericalControls, Ordering, SolverKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Categorical { categories: Vec<String> },
    Integer { lo: i64, hi: i64 },
    Real { lo: f64, hi: f64 },
    LogReal { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Real(r) => Some(*r),
            ParamValue::Cat(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Cat(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Real(r) => write!(f, "{r}"),
            ParamValue::Cat(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDef {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
    pub default: ParamValue,
}

impl ParameterDef {
    pub fn categorical(name: &str, cats: &[&str], default: &str) -> Self {
        Self {
            name: name.into(),
            domain: Domain::Categorical { categories: cats.iter().map(|c| c.to_string()).collect() },
            default: ParamValue::Cat(default.into()),
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64, default: i64) -> Self {
        Self { name: name.into(), domain: Domain::Integer { lo, hi }, default: ParamValue::Int(default) }
    }

    pub fn real(name: &str, lo: f64, hi: f64, default: f64) -> Self {
        Self { name: name.into(), domain: Domain::Real { lo, hi }, default: ParamValue::Real(default) }
    }

    pub fn log_real(name: &str, lo: f64, hi: f64, default: f64) -> Self {
        Self { name: name.into(), domain: Domain::LogReal { lo, hi }, default: ParamValue::Real(default) }
    }

    /// Checks a value against this parameter's domain.
    pub fn check(&self, v: &ParamValue) -> Result<(), String> {
        match (&self.domain, v) {
            (Domain::Categorical { categories }, ParamValue::Cat(s)) => {
                if categories.contains(s) {
                    Ok(())
                } else {
                    Err(format!("{s:?} is not one of {categories:?}"))
                }
            }
            (Domain::Integer { lo, hi }, ParamValue::Int(i)) => {
                if lo <= i && i <= hi {
                    Ok(())
                } else {
                    Err(format!("{i} outside [{lo}, {hi}]"))
                }
            }
            (Domain::Real { lo, hi } | Domain::LogReal { lo, hi }, ParamValue::Real(_) | ParamValue::Int(_)) => {
                let x = v.as_f64().unwrap_or(f64::NAN);
                if *lo <= x && x <= *hi {
                    Ok(())
                } else {
                    Err(format!("{x} outside [{lo}, {hi}]"))
                }
            }
            (d, v) => Err(format!("value {v} has the wrong type for a {} parameter", domain_kind(d))),
        }
    }

    fn encoded_len(&self) -> usize {
        match &self.domain {
            Domain::Categorical { categories } => categories.len(),
            _ => 1,
        }
    }
}

fn domain_kind(d: &Domain) -> &'static str {
    match d {
        Domain::Categorical { .. } => "categorical",
        Domain::Integer { .. } => "integer",
        Domain::Real { .. } => "real",
        Domain::LogReal { .. } => "log_real",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceDoc", into = "SpaceDoc")]
pub struct SearchSpace {
    params: Vec<ParameterDef>,
}

#[derive(Serialize, Deserialize)]
struct SpaceDoc {
    parameters: Vec<ParameterDef>,
}

impl TryFrom<SpaceDoc> for SearchSpace {
    type Error = SearchError;
    fn try_from(doc: SpaceDoc) -> Result<Self, SearchError> {
        SearchSpace::new(doc.parameters)
    }
}

impl From<SearchSpace> for SpaceDoc {
    fn from(s: SearchSpace) -> Self {
        SpaceDoc { parameters: s.params }
    }
}

/// One failed check from [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub parameter: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.parameter, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid sample: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Violations(Vec<Violation>),
    #[error("sample count must be at least 1")]
    EmptySample,
    #[error("levels per numeric parameter must be at least 2")]
    TooFewLevels,
    #[error("encoded vector has length {found}, expected {expected}")]
    EncodedLength { expected: usize, found: usize },
}

/// Parameter name to value. Iteration order is alphabetical; layouts that
/// depend on order use the space's parameter order instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigSample {
    pub values: BTreeMap<String, ParamValue>,
}

impl ConfigSample {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    pub fn set(&mut self, name: &str, v: ParamValue) {
        self.values.insert(name.to_string(), v);
    }

    fn num(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::as_f64)
    }
}

/// Pairs `(lo, hi)` that must satisfy `value(lo) <= value(hi)` when both exist.
const ORDERED_PAIRS: [(&str, &str); 3] =
    [("dt_min", "dt_max"), ("norm_press", "maxchange_press"), ("norm_satur", "maxchange_satur")];

impl SearchSpace {
    pub fn new(params: Vec<ParameterDef>) -> Result<Self, SearchError> {
        let bad = |m: String| Err(SearchError::InvalidSpace(m));
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.name == p.name) {
                return bad(format!("duplicate parameter {}", p.name));
            }
            match &p.domain {
                Domain::Categorical { categories } => {
                    if categories.is_empty() {
                        return bad(format!("{}: no categories", p.name));
                    }
                }
                Domain::Integer { lo, hi } => {
                    if lo >= hi {
                        return bad(format!("{}: need lo < hi", p.name));
                    }
                }
                Domain::Real { lo, hi } => {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        return bad(format!("{}: need finite lo < hi", p.name));
                    }
                }
                Domain::LogReal { lo, hi } => {
                    if !(*lo > 0.0 && lo < hi && hi.is_finite()) {
                        return bad(format!("{}: need 0 < lo < hi", p.name));
                    }
                }
            }
            if let Err(m) = p.check(&p.default) {
                return bad(format!("{}: default {m}", p.name));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[ParameterDef] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParameterDef> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn defaults(&self) -> ConfigSample {
        ConfigSample { values: self.params.iter().map(|p| (p.name.clone(), p.default.clone())).collect() }
    }

    pub fn encoded_len(&self) -> usize {
        self.params.iter().map(ParameterDef::encoded_len).sum()
    }

    /// Column names of the encoded layout; categorical slots are `name=category`.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for p in &self.params {
            match &p.domain {
                Domain::Categorical { categories } => {
                    out.extend(categories.iter().map(|c| format!("{}={c}", p.name)));
                }
                _ => out.push(p.name.clone()),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SearchError> {
        serde_json::from_str(text).map_err(|e| SearchError::InvalidSpace(e.to_string()))
    }
}

/// The controls of the built-in simulator, with their defaults.
pub fn builtin_space() -> SearchSpace {
    SearchSpace::new(vec![
        ParameterDef::real("dt_max", 5.0, 365.0, 365.0),
        ParameterDef::real("dt_min", 1e-6, 1e-3, 1e-3),
        ParameterDef::integer("lin_iter_max", 5, 200, 10),
        ParameterDef::integer("maxchange_press", 15, 300, 60),
        ParameterDef::real("maxchange_satur", 0.1, 0.9, 0.1),
        ParameterDef::categorical("ncuts_max", &["unlimited", "10", "100"], "unlimited"),
        ParameterDef::integer("newton_max", 5, 40, 10),
        ParameterDef::integer("norm_press", 10, 70, 30),
        ParameterDef::real("norm_satur", 0.1, 0.3, 0.1),
        ParameterDef::integer("north_restart", 15, 200, 30),
        ParameterDef::categorical("pivot_stab", &["off", "on"], "off"),
        ParameterDef::log_real("lin_tol", 1e-5, 1e-3, 1e-4),
        ParameterDef::categorical("solver_kind", &["direct", "iterative"], "iterative"),
        ParameterDef::categorical("ordering", &["natural", "rcm", "red-black"], "red-black"),
        ParameterDef::categorical("formulation", &["fully-implicit", "impes"], "fully-implicit"),
    ])
    .expect("built-in space is well formed")
}

/// Checks every parameter and the cross-field ordering rules; returns all
/// violations found.
pub fn validate(sample: &ConfigSample, space: &SearchSpace) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for p in &space.params {
        match sample.get(&p.name) {
            None => out.push(Violation { parameter: p.name.clone(), message: "missing".into() }),
            Some(v) => {
                if let Err(m) = p.check(v) {
                    out.push(Violation { parameter: p.name.clone(), message: m });
                }
            }
        }
    }
    for name in sample.values.keys() {
        if space.param(name).is_none() {
            out.push(Violation { parameter: name.clone(), message: "not in the search space".into() });
        }
    }
    for (lo, hi) in ORDERED_PAIRS {
        if let (Some(a), Some(b)) = (sample.num(lo), sample.num(hi)) {
            if a > b {
                out.push(Violation { parameter: lo.into(), message: format!("{lo} = {a} exceeds {hi} = {b}") });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn unit_to_value(p: &ParameterDef, u: f64) -> ParamValue {
    match &p.domain {
        Domain::Integer { lo, hi } => {
            let x = *lo as f64 + u * (hi - lo) as f64;
            ParamValue::Int((x.round() as i64).clamp(*lo, *hi))
        }
        Domain::Real { lo, hi } => ParamValue::Real((lo + u * (hi - lo)).clamp(*lo, *hi)),
        Domain::LogReal { lo, hi } => {
            let (a, b) = (lo.ln(), hi.ln());
            ParamValue::Real((a + u * (b - a)).exp().clamp(*lo, *hi))
        }
        Domain::Categorical { .. } => unreachable!("categorical handled by index"),
    }
}

/// Applies the cross-field repairs: swap an inverted `dt_min`/`dt_max`,
/// lower a `norm_*` above its `maxchange_*` to that value.
pub fn repair(sample: &mut ConfigSample) {
    if let (Some(a), Some(b)) = (sample.get("dt_min").cloned(), sample.get("dt_max").cloned()) {
        if a.as_f64() > b.as_f64() {
            sample.set("dt_min", b);
            sample.set("dt_max", a);
        }
    }
    for (norm, cap) in &ORDERED_PAIRS[1..] {
        if let (Some(a), Some(b)) = (sample.num(norm), sample.num(cap)) {
            if a > b {
                let v = match sample.get(norm) {
                    Some(ParamValue::Int(_)) => ParamValue::Int(b.floor() as i64),
                    _ => ParamValue::Real(b),
                };
                sample.set(norm, v);
            }
        }
    }
}

/// Latin hypercube sample of `n` configurations.
pub fn lhs_sample(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<ConfigSample>, SearchError> {
    if n < 1 {
        return Err(SearchError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![ConfigSample::default(); n];
    for p in &space.params {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        match &p.domain {
            Domain::Categorical { categories } => {
                let k = categories.len();
                let offset = rng.random_range(0..k);
                for (sample, s) in out.iter_mut().zip(&strata) {
                    let idx = (s * k / n + offset) % k;
                    sample.set(&p.name, ParamValue::Cat(categories[idx].clone()));
                }
            }
            _ => {
                for (sample, s) in out.iter_mut().zip(&strata) {
                    let u = (*s as f64 + rng.random::<f64>()) / n as f64;
                    sample.set(&p.name, unit_to_value(p, u));
                }
            }
        }
    }
    for s in &mut out {
        repair(s);
    }
    Ok(out)
}

fn numeric_levels(p: &ParameterDef, levels: usize) -> Vec<ParamValue> {
    let mut vals: Vec<ParamValue> = Vec::new();
    for k in 0..levels {
        let u = k as f64 / (levels - 1) as f64;
        let v = unit_to_value(p, u);
        if !vals.contains(&v) {
            vals.push(v);
        }
    }
    vals
}

/// One-at-a-time plan: the default configuration first, then every variant
/// that changes exactly one parameter. Variants that break a cross-field
/// rule against the defaults are left out.
pub fn oat_plan(space: &SearchSpace, levels_per_numeric: usize) -> Result<Vec<ConfigSample>, SearchError> {
    if levels_per_numeric < 2 {
        return Err(SearchError::TooFewLevels);
    }
    let base = space.defaults();
    let mut plan = vec![base.clone()];
    for p in &space.params {
        let candidates: Vec<ParamValue> = match &p.domain {
            Domain::Categorical { categories } => categories.iter().cloned().map(ParamValue::Cat).collect(),
            _ => numeric_levels(p, levels_per_numeric),
        };
        for v in candidates {
            if values_equal(&v, &p.default) {
                continue;
            }
            let mut s = base.clone();
            s.set(&p.name, v);
            if validate(&s, space).is_ok() {
                plan.push(s);
            }
        }
    }
    Ok(plan)
}

fn values_equal(a: &ParamValue, b: &ParamValue) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

/// Min-max scaled numerics (log scale for log-real) and one-hot categoricals,
/// in parameter order.
pub fn encode(sample: &ConfigSample, space: &SearchSpace) -> Result<Vec<f64>, SearchError> {
    validate(sample, space).map_err(SearchError::Violations)?;
    let mut out = Vec::with_capacity(space.encoded_len());
    for p in &space.params {
        let v = &sample.values[&p.name];
        match &p.domain {
            Domain::Categorical { categories } => {
                let s = v.as_str().unwrap_or_default();
                out.extend(categories.iter().map(|c| if c == s { 1.0 } else { 0.0 }));
            }
            Domain::Integer { lo, hi } => {
                out.push((v.as_f64().unwrap_or(0.0) - *lo as f64) / (hi - lo) as f64);
            }
            Domain::Real { lo, hi } => out.push((v.as_f64().unwrap_or(0.0) - lo) / (hi - lo)),
            Domain::LogReal { lo, hi } => {
                out.push((v.as_f64().unwrap_or(1.0).ln() - lo.ln()) / (hi.ln() - lo.ln()));
            }
        }
    }
    Ok(out)
}

/// Inverse layout walk of [`encode`]: numerics are unscaled (integers
/// rounded, everything clamped), categoricals take the largest slot.
pub fn decode(x: &[f64], space: &SearchSpace) -> Result<ConfigSample, SearchError> {
    let expected = space.encoded_len();
    if x.len() != expected {
        return Err(SearchError::EncodedLength { expected, found: x.len() });
    }
    let mut s = ConfigSample::default();
    let mut at = 0;
    for p in &space.params {
        match &p.domain {
            Domain::Categorical { categories } => {
                let slots = &x[at..at + categories.len()];
                let mut best = 0;
                for (i, v) in slots.iter().enumerate() {
                    if *v > slots[best] {
                        best = i;
                    }
                }
                s.set(&p.name, ParamValue::Cat(categories[best].clone()));
                at += categories.len();
            }
            _ => {
                s.set(&p.name, unit_to_value(p, x[at].clamp(0.0, 1.0)));
                at += 1;
            }
        }
    }
    Ok(s)
}

/// Applies the sample's values on top of `base`. Parameters absent from the
/// sample keep their value in `base`.
pub fn to_controls(sample: &ConfigSample, base: &NumericalControls) -> Result<NumericalControls, SearchError> {
    let mut c = base.clone();
    let mut errs = Vec::new();
    for (name, v) in &sample.values {
        let bad = |errs: &mut Vec<Violation>| {
            errs.push(Violation { parameter: name.clone(), message: format!("unusable value {v}") })
        };
        let num = v.as_f64();
        let cat = v.as_str();
        match (name.as_str(), num, cat) {
            ("dt_max", Some(x), _) => c.dt_max = x,
            ("dt_min", Some(x), _) => c.dt_min = x,
            ("lin_iter_max", Some(x), _) => c.lin_iter_max = x as u32,
            ("maxchange_press", Some(x), _) => c.maxchange_press = x,
            ("maxchange_satur", Some(x), _) => c.maxchange_satur = x,
            ("newton_max", Some(x), _) => c.newton_max = x as u32,
            ("norm_press", Some(x), _) => c.norm_press = x,
            ("norm_satur", Some(x), _) => c.norm_satur = x,
            ("north_restart", Some(x), _) => c.north_restart = x as u32,
            ("lin_tol", Some(x), _) => c.lin_tol = x,
            ("ncuts_max", _, Some("unlimited")) => c.ncuts_max = None,
            ("ncuts_max", _, Some(s)) => match s.parse() {
                Ok(k) => c.ncuts_max = Some(k),
                Err(_) => bad(&mut errs),
            },
            ("pivot_stab", _, Some("on")) => c.pivot_stab = true,
            ("pivot_stab", _, Some("off")) => c.pivot_stab = false,
            ("solver_kind", _, Some("direct")) => c.solver_kind = SolverKind::Direct,
            ("solver_kind", _, Some("iterative")) => c.solver_kind = SolverKind::Iterative,
            ("ordering", _, Some("natural")) => c.ordering = Ordering::Natural,
            ("ordering", _, Some("rcm")) => c.ordering = Ordering::Rcm,
            ("ordering", _, Some("red-black")) => c.ordering = Ordering::RedBlack,
            ("formulation", _, Some("fully-implicit")) => c.formulation = Formulation::FullyImplicit,
            ("formulation", _, Some("impes")) => c.formulation = Formulation::Impes,
            _ => bad(&mut errs),
        }
    }
    if errs.is_empty() {
        Ok(c)
    } else {
        Err(SearchError::Violations(errs))
    }
}

/// The built-in space's view of a set of controls.
pub fn from_controls(c: &NumericalControls) -> ConfigSample {
    let mut s = ConfigSample::default();
    s.set("dt_max", ParamValue::Real(c.dt_max));
    s.set("dt_min", ParamValue::Real(c.dt_min));
    s.set("lin_iter_max", ParamValue::Int(c.lin_iter_max as i64));
    s.set("maxchange_press", ParamValue::Int(c.maxchange_press.round() as i64));
    s.set("maxchange_satur", ParamValue::Real(c.maxchange_satur));
    let cuts = c.ncuts_max.map_or("unlimited".to_string(), |k| k.to_string());
    s.set("ncuts_max", ParamValue::Cat(cuts));
    s.set("newton_max", ParamValue::Int(c.newton_max as i64));
    s.set("norm_press", ParamValue::Int(c.norm_press.round() as i64));
    s.set("norm_satur", ParamValue::Real(c.norm_satur));
    s.set("north_restart", ParamValue::Int(c.north_restart as i64));
    s.set("pivot_stab", ParamValue::Cat(if c.pivot_stab { "on" } else { "off" }.into()));
    s.set("lin_tol", ParamValue::Real(c.lin_tol));
    let kind = match c.solver_kind {
        SolverKind::Direct => "direct",
        SolverKind::Iterative => "iterative",
    };
    s.set("solver_kind", ParamValue::Cat(kind.into()));
    let ord = match c.ordering {
        Ordering::Natural => "natural",
        Ordering::Rcm => "rcm",
        Ordering::RedBlack => "red-black",
    };
    s.set("ordering", ParamValue::Cat(ord.into()));
    let form = match c.formulation {
        Formulation::FullyImplicit => "fully-implicit",
        Formulation::Impes => "impes",
    };
    s.set("formulation", ParamValue::Cat(form.into()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_defaults_are_the_simulator_defaults() {
        let space = builtin_space();
        let c = to_controls(&space.defaults(), &NumericalControls::default()).unwrap();
        assert_eq!(c, NumericalControls::default());
        assert_eq!(from_controls(&c), space.defaults());
    }

    #[test]
    fn cross_field_repair() {
        let mut s = ConfigSample::default();
        s.set("dt_min", ParamValue::Real(10.0));
        s.set("dt_max", ParamValue::Real(5.0));
        s.set("norm_press", ParamValue::Int(70));
        s.set("maxchange_press", ParamValue::Int(20));
        repair(&mut s);
        assert_eq!(s.get("dt_min"), Some(&ParamValue::Real(5.0)));
        assert_eq!(s.get("norm_press"), Some(&ParamValue::Int(20)));
    }
}
