//! Conditional means for the TSIR and epidemic/endemic (EE) families.
//!
//! TSIR:
//! `mu_it = [e^{l_ar(t)} y_{i,t-1} + e^{l_ne} N_i^tau1 sum_j w_ij y_{j,t-1}^tau2]^alpha * x_{i,t-1}/N_i + N_i e^{l_en}`
//! with `l_ar(t) = b0 + b1 t + g sin(wt) + d cos(wt)` and distance power-law weights.
//! The susceptible ratio is 1 unless reconstructed susceptibles are supplied.
//!
//! EE:
//! `mu_it = e^{l_ar + b_i^ar} y_{i,t-1} + e^{l_ne + b_i^ne} sum_j w_ij y_{j,t-1} + N_it e^{l_en(t) + b_i^en}`
//! with the trend and seasonal terms in the endemic rate and graph-order power-law weights.
//!
//! Parameters live on an unconstrained scale: decay `theta` as a logit, the
//! NegBin size `phi` and random-effect standard deviations as logs, and the
//! TSIR mixing power `alpha` as a logit over its bounds.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{SpatialStructure, SurveillancePanel};
use crate::error::{Error, Result};
use crate::weights::{power_law_with_derivative, rho_from_theta, DecayBase, WeightMatrix, WeightsWithDerivative};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Ar,
    Ne,
    En,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Ar, Component::Ne, Component::En];

    pub fn tag(self) -> &'static str {
        match self {
            Component::Ar => "ar",
            Component::Ne => "ne",
            Component::En => "en",
        }
    }
}

/// A gravity exponent that is either held fixed or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exponent {
    Fixed(f64),
    Free,
}

/// Whether the TSIR susceptible ratio `x_{i,t-1}/N_i` is 1 or comes from a
/// reconstructed susceptible series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SusceptibleSource {
    #[default]
    Population,
    Reconstructed,
}

fn yes() -> bool {
    true
}

fn fixed_one() -> Exponent {
    Exponent::Fixed(1.0)
}

fn default_alpha_bounds() -> [f64; 2] {
    [0.95, 1.0]
}

fn distance_base() -> DecayBase {
    DecayBase::Distance
}

fn graph_base() -> DecayBase {
    DecayBase::GraphOrder
}

fn all_components() -> BTreeSet<Component> {
    Component::ALL.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsirSpec {
    #[serde(default = "yes")]
    pub include_endemic: bool,
    #[serde(default = "fixed_one")]
    pub tau1: Exponent,
    #[serde(default = "fixed_one")]
    pub tau2: Exponent,
    #[serde(default = "default_alpha_bounds")]
    pub alpha_bounds: [f64; 2],
    #[serde(default = "yes")]
    pub trend: bool,
    #[serde(default = "yes")]
    pub seasonal: bool,
    #[serde(default)]
    pub seasonal_period: Option<u32>,
    #[serde(default = "distance_base")]
    pub decay: DecayBase,
    #[serde(default)]
    pub susceptibles: SusceptibleSource,
}

impl Default for TsirSpec {
    fn default() -> Self {
        Self {
            include_endemic: true,
            tau1: Exponent::Fixed(1.0),
            tau2: Exponent::Fixed(1.0),
            alpha_bounds: default_alpha_bounds(),
            trend: true,
            seasonal: true,
            seasonal_period: None,
            decay: DecayBase::Distance,
            susceptibles: SusceptibleSource::Population,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EeSpec {
    #[serde(default = "all_components")]
    pub components: BTreeSet<Component>,
    #[serde(default)]
    pub random_effects: BTreeSet<Component>,
    #[serde(default = "yes")]
    pub endemic_trend: bool,
    #[serde(default = "yes")]
    pub seasonal: bool,
    #[serde(default)]
    pub seasonal_period: Option<u32>,
    #[serde(default = "graph_base")]
    pub decay: DecayBase,
}

impl Default for EeSpec {
    fn default() -> Self {
        Self {
            components: all_components(),
            random_effects: BTreeSet::new(),
            endemic_trend: true,
            seasonal: true,
            seasonal_period: None,
            decay: DecayBase::GraphOrder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Tsir(TsirSpec),
    Ee(EeSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Tsir(s) => {
                let [lo, hi] = s.alpha_bounds;
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "alpha bounds [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
                    )));
                }
                for tau in [s.tau1, s.tau2] {
                    if let Exponent::Fixed(v) = tau {
                        if !v.is_finite() {
                            return Err(Error::InvalidParameter("gravity exponents must be finite".into()));
                        }
                    }
                }
                if s.seasonal_period == Some(0) {
                    return Err(Error::InvalidParameter("seasonal period must be >= 1".into()));
                }
            }
            ModelSpec::Ee(s) => {
                if s.components.is_empty() {
                    return Err(Error::InvalidParameter("at least one of ar, ne, en must be enabled".into()));
                }
                if let Some(c) = s.random_effects.iter().find(|c| !s.components.contains(c)) {
                    return Err(Error::InvalidParameter(format!(
                        "random effect on disabled component {}",
                        c.tag()
                    )));
                }
                if s.seasonal_period == Some(0) {
                    return Err(Error::InvalidParameter("seasonal period must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Tsir(_) => "tsir",
            ModelSpec::Ee(_) => "ee",
        }
    }

    fn seasonal_period(&self) -> Option<u32> {
        match self {
            ModelSpec::Tsir(s) => s.seasonal_period,
            ModelSpec::Ee(s) => s.seasonal_period,
        }
    }

    pub fn decay(&self) -> DecayBase {
        match self {
            ModelSpec::Tsir(s) => s.decay,
            ModelSpec::Ee(s) => s.decay,
        }
    }

    /// Whether the neighbour term (and thus a decay parameter) is present.
    pub fn has_neighbours(&self) -> bool {
        match self {
            ModelSpec::Tsir(_) => true,
            ModelSpec::Ee(s) => s.components.contains(&Component::Ne),
        }
    }
}

/// How a layout entry maps to its natural scale, and which prior applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Regression coefficient on the natural scale; normal prior.
    Fixed,
    /// Gravity exponent; normal prior like the fixed effects.
    Exponent,
    /// Logit of a power-law decay `theta`; uniform prior on `theta`.
    LogitTheta,
    /// Logit of `(alpha - lo) / (hi - lo)`; uniform prior on `alpha`.
    LogitAlpha,
    /// Log of the NegBin size.
    LogPhi,
    /// Log standard deviation of a random-effect block; gamma prior on the precision.
    LogSigma(Component),
    /// Random effect of one area.
    RandomEffect(Component, usize),
}

/// Named blocks used by the sampler and for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub range: Range<usize>,
}

/// Stable ordering of the parameter vector, determined by spec and area count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub blocks: Vec<Block>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices of the natural-scale regression coefficients.
    pub fn fixed_effects(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| matches!(self.kinds[k], ParamKind::Fixed))
            .collect()
    }

    /// Indices of everything except random effects.
    pub fn hyper_and_fixed(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| !matches!(self.kinds[k], ParamKind::RandomEffect(..)))
            .collect()
    }

    fn push(&mut self, name: impl Into<String>, kind: ParamKind) -> usize {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.names.len() - 1
    }

    fn block(&mut self, name: &str, start: usize) {
        if self.names.len() > start {
            self.blocks.push(Block {
                name: name.into(),
                range: start..self.names.len(),
            });
        }
    }
}

#[derive(Debug, Clone, Default)]
struct TsirIndex {
    beta0: usize,
    beta1: Option<usize>,
    gamma: Option<usize>,
    delta: Option<usize>,
    lambda_ne: usize,
    lambda_en: Option<usize>,
    tau1: Option<usize>,
    tau2: Option<usize>,
    alpha: Option<usize>,
    theta: usize,
    phi: usize,
}

#[derive(Debug, Clone, Default)]
struct EeIndex {
    lambda_ar: Option<usize>,
    lambda_ne: Option<usize>,
    beta0: Option<usize>,
    beta1: Option<usize>,
    gamma: Option<usize>,
    delta: Option<usize>,
    theta: Option<usize>,
    phi: usize,
    log_sigma: [Option<usize>; 3],
    re_start: [Option<usize>; 3],
}

fn comp_ix(c: Component) -> usize {
    match c {
        Component::Ar => 0,
        Component::Ne => 1,
        Component::En => 2,
    }
}

#[derive(Debug, Clone)]
enum Index {
    Tsir(TsirIndex),
    Ee(EeIndex),
}

fn build_layout(spec: &ModelSpec, areas: &[String]) -> (ParamLayout, Index) {
    let mut l = ParamLayout {
        names: Vec::new(),
        kinds: Vec::new(),
        blocks: Vec::new(),
    };
    match spec {
        ModelSpec::Tsir(s) => {
            let mut ix = TsirIndex::default();
            let start = 0;
            ix.beta0 = l.push("beta0_ar", ParamKind::Fixed);
            if s.trend {
                ix.beta1 = Some(l.push("beta1_ar", ParamKind::Fixed));
            }
            if s.seasonal {
                ix.gamma = Some(l.push("gamma_seas", ParamKind::Fixed));
                ix.delta = Some(l.push("delta_seas", ParamKind::Fixed));
            }
            ix.lambda_ne = l.push("lambda_ne", ParamKind::Fixed);
            if s.include_endemic {
                ix.lambda_en = Some(l.push("lambda_en", ParamKind::Fixed));
            }
            if s.tau1 == Exponent::Free {
                ix.tau1 = Some(l.push("tau1", ParamKind::Exponent));
            }
            if s.tau2 == Exponent::Free {
                ix.tau2 = Some(l.push("tau2", ParamKind::Exponent));
            }
            l.block("fixed", start);
            let start = l.len();
            if s.alpha_bounds[0] < s.alpha_bounds[1] {
                ix.alpha = Some(l.push("alpha_logit", ParamKind::LogitAlpha));
            }
            ix.theta = l.push("theta_logit", ParamKind::LogitTheta);
            ix.phi = l.push("log_phi", ParamKind::LogPhi);
            l.block("shape", start);
            (l, Index::Tsir(ix))
        }
        ModelSpec::Ee(s) => {
            let mut ix = EeIndex::default();
            let has = |c| s.components.contains(&c);
            if has(Component::Ar) {
                ix.lambda_ar = Some(l.push("lambda_ar", ParamKind::Fixed));
            }
            if has(Component::Ne) {
                ix.lambda_ne = Some(l.push("lambda_ne", ParamKind::Fixed));
            }
            if has(Component::En) {
                ix.beta0 = Some(l.push("beta0_en", ParamKind::Fixed));
                if s.endemic_trend {
                    ix.beta1 = Some(l.push("beta1_en", ParamKind::Fixed));
                }
                if s.seasonal {
                    ix.gamma = Some(l.push("gamma_seas", ParamKind::Fixed));
                    ix.delta = Some(l.push("delta_seas", ParamKind::Fixed));
                }
            }
            l.block("fixed", 0);
            let start = l.len();
            if has(Component::Ne) {
                ix.theta = Some(l.push("theta_logit", ParamKind::LogitTheta));
            }
            ix.phi = l.push("log_phi", ParamKind::LogPhi);
            for &c in &s.random_effects {
                ix.log_sigma[comp_ix(c)] = Some(l.push(format!("log_sigma_{}", c.tag()), ParamKind::LogSigma(c)));
            }
            l.block("shape", start);
            for &c in &s.random_effects {
                let start = l.len();
                ix.re_start[comp_ix(c)] = Some(start);
                for (i, a) in areas.iter().enumerate() {
                    l.push(format!("b_{}[{a}]", c.tag()), ParamKind::RandomEffect(c, i));
                }
                l.block(&format!("re_{}", c.tag()), start);
            }
            (l, Index::Ee(ix))
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Parameter values on the unconstrained scale, tagged with their names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.values[k])
    }
}

/// Per-area lagged data shared by every cell of one time step.
#[derive(Debug, Clone, Default)]
pub(crate) struct Decay {
    pub rho: f64,
    pub weights: Option<WeightsWithDerivative>,
}

/// Quantities of a single cell needed for both the mean and its gradient.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CellTerms {
    pub ar: f64,
    pub ne: f64,
    pub en: f64,
    /// TSIR: epidemic bracket before the power.
    pub bracket: f64,
    /// TSIR: `bracket^alpha * susceptible ratio`.
    pub epidemic: f64,
    pub mu: f64,
}

/// A model specification bound to a panel and its spatial structure.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    panel: SurveillancePanel,
    spatial: SpatialStructure,
    layout: ParamLayout,
    index: Index,
    omega: f64,
    susceptible_ratio: Option<Vec<Vec<f64>>>,
}

impl Model {
    pub fn new(spec: ModelSpec, panel: SurveillancePanel, spatial: &SpatialStructure) -> Result<Self> {
        spec.validate()?;
        let spatial = spatial.aligned_to(panel.areas())?;
        if let ModelSpec::Tsir(s) = &spec {
            if s.susceptibles == SusceptibleSource::Reconstructed {
                return Err(Error::MissingData(
                    "reconstructed susceptibles must be supplied with Model::with_susceptibles".into(),
                ));
            }
        }
        let period = spec.seasonal_period().unwrap_or(panel.period());
        let (layout, index) = build_layout(&spec, panel.areas());
        Ok(Self {
            spec,
            panel,
            spatial,
            layout,
            index,
            omega: 2.0 * PI / f64::from(period),
            susceptible_ratio: None,
        })
    }

    /// TSIR with reconstructed susceptibles `x[i][t-1]` (area-major, 1-based time
    /// stored at index `t-1`); the epidemic term is scaled by `x_{i,t-1}/N_i`.
    pub fn with_susceptibles(
        mut spec: TsirSpec,
        panel: SurveillancePanel,
        spatial: &SpatialStructure,
        susceptibles: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if susceptibles.len() != panel.n_areas() || susceptibles.iter().any(|r| r.len() != panel.n_times()) {
            return Err(Error::Shape("susceptible series must match the panel shape".into()));
        }
        spec.susceptibles = SusceptibleSource::Population;
        let mut m = Model::new(ModelSpec::Tsir(spec), panel, spatial)?;
        let ratio = susceptibles
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(t, x)| x.max(0.0) / m.panel.population(i, t + 1) as f64)
                    .collect()
            })
            .collect();
        m.susceptible_ratio = Some(ratio);
        if let ModelSpec::Tsir(s) = &mut m.spec {
            s.susceptibles = SusceptibleSource::Reconstructed;
        }
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn panel(&self) -> &SurveillancePanel {
        &self.panel
    }

    pub fn spatial(&self) -> &SpatialStructure {
        &self.spatial
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Same model over different counts with identical shape.
    pub fn with_panel(&self, panel: SurveillancePanel) -> Result<Self> {
        if panel.areas() != self.panel.areas() {
            return Err(Error::Shape("replacement panel has different areas".into()));
        }
        let mut m = self.clone();
        let period = m.spec.seasonal_period().unwrap_or(panel.period());
        m.omega = 2.0 * PI / f64::from(period);
        m.panel = panel;
        Ok(m)
    }

    pub fn vector(&self, values: Vec<f64>) -> ParamVector {
        ParamVector {
            names: self.layout.names.clone(),
            values,
        }
    }

    /// Index of the NegBin size parameter (log scale).
    pub fn phi_index(&self) -> usize {
        match &self.index {
            Index::Tsir(ix) => ix.phi,
            Index::Ee(ix) => ix.phi,
        }
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        x[self.phi_index()].exp()
    }

    pub fn theta_index(&self) -> Option<usize> {
        match &self.index {
            Index::Tsir(ix) => Some(ix.theta),
            Index::Ee(ix) => ix.theta,
        }
    }

    pub fn theta(&self, x: &[f64]) -> Option<f64> {
        self.theta_index().map(|k| sigmoid(x[k]))
    }

    pub fn alpha(&self, x: &[f64]) -> f64 {
        match &self.index {
            Index::Tsir(ix) => {
                let ModelSpec::Tsir(s) = &self.spec else { unreachable!() };
                let [lo, hi] = s.alpha_bounds;
                match ix.alpha {
                    Some(k) => lo + (hi - lo) * sigmoid(x[k]),
                    None => lo,
                }
            }
            Index::Ee(_) => 1.0,
        }
    }

    /// `(lo, hi)` for the TSIR mixing power.
    pub fn alpha_bounds(&self) -> Option<[f64; 2]> {
        match &self.spec {
            ModelSpec::Tsir(s) => Some(s.alpha_bounds),
            ModelSpec::Ee(_) => None,
        }
    }

    /// Default starting point: moderate epidemic rates, endemic rate matched
    /// to the overall incidence, `theta = 0.5`, `phi = 1`, `sigma = 0.5`.
    pub fn default_start(&self) -> Vec<f64> {
        let n = self.panel.n_areas();
        let t_len = self.panel.n_times();
        let total: f64 = self.panel.counts().iter().flatten().map(|&c| c as f64).sum();
        let pop: f64 = (0..n).map(|i| self.panel.population(i, 1) as f64).sum();
        let rate = ((total + 0.5) / (pop * t_len as f64)).ln();
        let mut x = vec![0.0; self.dim()];
        for (k, name) in self.layout.names.iter().enumerate() {
            x[k] = match name.as_str() {
                "lambda_ar" => 0.3f64.ln(),
                "beta0_ar" => 0.3f64.ln(),
                "lambda_ne" => 0.1f64.ln(),
                "beta0_en" | "lambda_en" => rate,
                "tau1" | "tau2" => 1.0,
                "log_sigma_ar" | "log_sigma_ne" | "log_sigma_en" => 0.5f64.ln(),
                _ => 0.0,
            };
        }
        if let ModelSpec::Tsir(s) = &self.spec {
            // TSIR neighbour term scales with N_i^tau1.
            if let Some(k) = self.layout.index_of("lambda_ne") {
                let tau1 = match s.tau1 {
                    Exponent::Fixed(v) => v,
                    Exponent::Free => 1.0,
                };
                x[k] = 0.1f64.ln() - tau1 * (pop / n as f64).ln();
            }
        }
        x
    }

    /// Builds a vector from named values. Accepts both unconstrained names
    /// (`theta_logit`, `log_phi`, `alpha_logit`, `log_sigma_ar`) and natural
    /// ones (`theta`, `phi`, `alpha`, `sigma_ar`). Random effects default to
    /// zero, standard deviations to one; anything else missing is an error.
    pub fn params_from_named(&self, named: &BTreeMap<String, f64>) -> Result<ParamVector> {
        let mut x = vec![0.0; self.dim()];
        for (k, name) in self.layout.names.iter().enumerate() {
            let kind = self.layout.kinds[k];
            let value = if let Some(&v) = named.get(name) {
                v
            } else {
                match kind {
                    ParamKind::LogitTheta => logit(self.natural(named, "theta", |v| v > 0.0 && v < 1.0)?),
                    ParamKind::LogitAlpha => {
                        let [lo, hi] = self.alpha_bounds().unwrap_or([0.0, 1.0]);
                        let a = self.natural(named, "alpha", |v| v > lo && v < hi)?;
                        logit((a - lo) / (hi - lo))
                    }
                    ParamKind::LogPhi => self.natural(named, "phi", |v| v > 0.0)?.ln(),
                    ParamKind::LogSigma(c) => match named.get(&format!("sigma_{}", c.tag())) {
                        Some(&v) if v > 0.0 => v.ln(),
                        Some(&v) => {
                            return Err(Error::InvalidParameter(format!("sigma_{} must be > 0, got {v}", c.tag())))
                        }
                        None => 0.0,
                    },
                    ParamKind::RandomEffect(..) => 0.0,
                    ParamKind::Fixed | ParamKind::Exponent => {
                        return Err(Error::InvalidParameter(format!("missing parameter {name}")));
                    }
                }
            };
            if !value.is_finite() {
                return Err(Error::InvalidParameter(format!("parameter {name} is not finite")));
            }
            x[k] = value;
        }
        Ok(self.vector(x))
    }

    fn natural(&self, named: &BTreeMap<String, f64>, key: &str, ok: impl Fn(f64) -> bool) -> Result<f64> {
        match named.get(key) {
            Some(&v) if ok(v) => Ok(v),
            Some(&v) => Err(Error::InvalidParameter(format!("{key} = {v} is out of range"))),
            None => Err(Error::InvalidParameter(format!("missing parameter {key}"))),
        }
    }

    /// Natural-scale view: `theta`, `phi`, `alpha`, `sigma_*` replace their transforms.
    pub fn natural_named(&self, x: &[f64]) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (k, name) in self.layout.names.iter().enumerate() {
            match self.layout.kinds[k] {
                ParamKind::LogitTheta => {
                    out.insert("theta".into(), sigmoid(x[k]));
                }
                ParamKind::LogitAlpha => {
                    out.insert("alpha".into(), self.alpha(x));
                }
                ParamKind::LogPhi => {
                    out.insert("phi".into(), x[k].exp());
                }
                ParamKind::LogSigma(c) => {
                    out.insert(format!("sigma_{}", c.tag()), x[k].exp());
                }
                _ => {
                    out.insert(name.clone(), x[k]);
                }
            }
        }
        if let ModelSpec::Tsir(s) = &self.spec {
            if self.layout.index_of("alpha_logit").is_none() {
                out.insert("alpha".into(), s.alpha_bounds[0]);
            }
        }
        out
    }

    /// Weights (and `dw/drho`) for the decay parameter in `x`.
    pub(crate) fn decay(&self, x: &[f64]) -> Result<Decay> {
        let Some(k) = self.theta_index() else {
            return Ok(Decay::default());
        };
        if self.panel.n_areas() < 2 {
            return Ok(Decay::default());
        }
        let theta = sigmoid(x[k]);
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidParameter(format!("theta = {theta} outside (0, 1)")));
        }
        let rho = rho_from_theta(theta);
        let weights = power_law_with_derivative(self.spec.decay(), rho, &self.spatial)?;
        Ok(Decay {
            rho,
            weights: Some(weights),
        })
    }

    /// Weight matrix implied by the decay parameter in `x`.
    pub fn weights(&self, x: &[f64]) -> Result<Option<WeightMatrix>> {
        Ok(self.decay(x)?.weights.map(|w| w.weights))
    }

    /// Conditional mean of area `i` at time `t`, for `2 <= t <= T + 1`.
    pub fn mean(&self, x: &[f64], i: usize, t: usize) -> Result<f64> {
        self.check_time(t)?;
        let decay = self.decay(x)?;
        Ok(self.cell_terms(x, &decay, i, t).mu)
    }

    /// All conditional means, `means[i][t - 2]` for `t = 2..=T`.
    pub fn fitted_means(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let decay = self.decay(x)?;
        let t_len = self.panel.n_times();
        Ok((0..self.panel.n_areas())
            .map(|i| (2..=t_len).map(|t| self.cell_terms(x, &decay, i, t).mu).collect())
            .collect())
    }

    pub(crate) fn check_time(&self, t: usize) -> Result<()> {
        if t < 2 {
            return Err(Error::Domain("the first time point has no lagged count and no mean".into()));
        }
        if t > self.panel.n_times() + 1 {
            return Err(Error::Domain(format!(
                "time {t} is beyond the one-step forecast horizon {}",
                self.panel.n_times() + 1
            )));
        }
        Ok(())
    }

    fn lag(&self, i: usize, t: usize) -> f64 {
        self.panel.count(i, t - 1) as f64
    }

    fn season(&self, t: usize) -> (f64, f64) {
        let wt = self.omega * t as f64;
        (wt.sin(), wt.cos())
    }

    /// Mean and intermediate terms of cell `(i, t)`; `2 <= t <= T + 1`.
    pub(crate) fn cell_terms(&self, x: &[f64], decay: &Decay, i: usize, t: usize) -> CellTerms {
        self.cell_terms_with(x, decay, i, t, |j| self.lag(j, t))
    }

    /// As [`Model::cell_terms`] with lagged counts `y_{j,t-1}` supplied by `lag`.
    pub(crate) fn cell_terms_with(
        &self,
        x: &[f64],
        decay: &Decay,
        i: usize,
        t: usize,
        lag: impl Fn(usize) -> f64,
    ) -> CellTerms {
        let n = self.panel.n_areas();
        let pop = self.panel.population(i, t) as f64;
        let tf = t as f64;
        let (sin, cos) = self.season(t);
        let opt = |k: Option<usize>| k.map_or(0.0, |k| x[k]);
        match &self.index {
            Index::Tsir(ix) => {
                let ModelSpec::Tsir(s) = &self.spec else { unreachable!() };
                let l_ar = x[ix.beta0] + opt(ix.beta1) * tf + opt(ix.gamma) * sin + opt(ix.delta) * cos;
                let ar = l_ar.exp() * lag(i);
                let tau1 = ix.tau1.map_or_else(|| fixed_exponent(s.tau1), |k| x[k]);
                let tau2 = ix.tau2.map_or_else(|| fixed_exponent(s.tau2), |k| x[k]);
                let mut gsum = 0.0;
                if let Some(w) = &decay.weights {
                    let row = w.weights.row(i);
                    for j in 0..n {
                        if j != i && row[j] > 0.0 {
                            gsum += row[j] * pow_count(lag(j), tau2);
                        }
                    }
                }
                let ne = x[ix.lambda_ne].exp() * pop.powf(tau1) * gsum;
                let bracket = ar + ne;
                let ratio = self
                    .susceptible_ratio
                    .as_ref()
                    .map_or(1.0, |r| r[i][(t - 2).min(r[i].len() - 1)]);
                let epidemic = if bracket > 0.0 {
                    bracket.powf(self.alpha(x)) * ratio
                } else {
                    0.0
                };
                let en = ix.lambda_en.map_or(0.0, |k| pop * x[k].exp());
                CellTerms {
                    ar,
                    ne,
                    en,
                    bracket,
                    epidemic,
                    mu: epidemic + en,
                }
            }
            Index::Ee(ix) => {
                let re = |c: Component| ix.re_start[comp_ix(c)].map_or(0.0, |s| x[s + i]);
                let ar = ix
                    .lambda_ar
                    .map_or(0.0, |k| (x[k] + re(Component::Ar)).exp() * lag(i));
                let ne = match (ix.lambda_ne, &decay.weights) {
                    (Some(k), Some(w)) => {
                        let row = w.weights.row(i);
                        let s: f64 = (0..n).filter(|&j| j != i).map(|j| row[j] * lag(j)).sum();
                        (x[k] + re(Component::Ne)).exp() * s
                    }
                    _ => 0.0,
                };
                let en = ix.beta0.map_or(0.0, |k| {
                    let l = x[k] + opt(ix.beta1) * tf + opt(ix.gamma) * sin + opt(ix.delta) * cos + re(Component::En);
                    pop * l.exp()
                });
                CellTerms {
                    ar,
                    ne,
                    en,
                    bracket: 0.0,
                    epidemic: ar + ne,
                    mu: ar + ne + en,
                }
            }
        }
    }

    /// Means of all areas at time `t` given lagged counts `lags[j] = y_{j,t-1}`.
    /// Time-varying terms (trend, season, populations) use `t`, which may
    /// exceed the panel length; populations are then held at their last value.
    pub fn step_means(&self, x: &[f64], t: usize, lags: &[f64]) -> Result<Vec<f64>> {
        if lags.len() != self.panel.n_areas() {
            return Err(Error::Shape("one lagged count per area is required".into()));
        }
        if t < 2 {
            return Err(Error::Domain("the first time point has no lagged count and no mean".into()));
        }
        let decay = self.decay(x)?;
        Ok((0..lags.len())
            .map(|i| self.cell_terms_with(x, &decay, i, t, |j| lags[j]).mu)
            .collect())
    }

    /// Adds `c * d(mu_it)/dx` into `grad`.
    pub(crate) fn scatter_mean_grad(
        &self,
        x: &[f64],
        decay: &Decay,
        terms: &CellTerms,
        i: usize,
        t: usize,
        c: f64,
        grad: &mut [f64],
    ) {
        if c == 0.0 {
            return;
        }
        let n = self.panel.n_areas();
        let tf = t as f64;
        let (sin, cos) = self.season(t);
        match &self.index {
            Index::Tsir(ix) => {
                let ModelSpec::Tsir(s) = &self.spec else { unreachable!() };
                if let Some(k) = ix.lambda_en {
                    grad[k] += c * terms.en;
                }
                if terms.bracket <= 0.0 {
                    return;
                }
                let alpha = self.alpha(x);
                let d_bracket = c * alpha * terms.epidemic / terms.bracket;
                grad[ix.beta0] += d_bracket * terms.ar;
                if let Some(k) = ix.beta1 {
                    grad[k] += d_bracket * terms.ar * tf;
                }
                if let Some(k) = ix.gamma {
                    grad[k] += d_bracket * terms.ar * sin;
                }
                if let Some(k) = ix.delta {
                    grad[k] += d_bracket * terms.ar * cos;
                }
                grad[ix.lambda_ne] += d_bracket * terms.ne;
                let pop = self.panel.population(i, t) as f64;
                if let Some(k) = ix.tau1 {
                    grad[k] += d_bracket * terms.ne * pop.ln();
                }
                let tau1 = ix.tau1.map_or_else(|| fixed_exponent(s.tau1), |k| x[k]);
                let tau2 = ix.tau2.map_or_else(|| fixed_exponent(s.tau2), |k| x[k]);
                let scale = x[ix.lambda_ne].exp() * pop.powf(tau1);
                if let Some(w) = &decay.weights {
                    let row = w.weights.row(i);
                    let drow = w.d_rho_row(i);
                    let mut d_tau2 = 0.0;
                    let mut d_rho = 0.0;
                    for j in 0..n {
                        let y = self.lag(j, t);
                        if j == i || y == 0.0 {
                            continue;
                        }
                        let p = pow_count(y, tau2);
                        d_tau2 += row[j] * p * y.ln();
                        d_rho += drow[j] * p;
                    }
                    if let Some(k) = ix.tau2 {
                        grad[k] += d_bracket * scale * d_tau2;
                    }
                    grad[ix.theta] += d_bracket * scale * d_rho * decay.rho;
                }
                if let Some(k) = ix.alpha {
                    let [lo, hi] = s.alpha_bounds;
                    let u = sigmoid(x[k]);
                    grad[k] += c * terms.epidemic * terms.bracket.ln() * (hi - lo) * u * (1.0 - u);
                }
            }
            Index::Ee(ix) => {
                if let Some(k) = ix.lambda_ar {
                    grad[k] += c * terms.ar;
                    if let Some(s) = ix.re_start[0] {
                        grad[s + i] += c * terms.ar;
                    }
                }
                if let Some(k) = ix.lambda_ne {
                    grad[k] += c * terms.ne;
                    if let Some(s) = ix.re_start[1] {
                        grad[s + i] += c * terms.ne;
                    }
                    if let (Some(kt), Some(w)) = (ix.theta, &decay.weights) {
                        let drow = w.d_rho_row(i);
                        let ds: f64 = (0..n).filter(|&j| j != i).map(|j| drow[j] * self.lag(j, t)).sum();
                        let re = ix.re_start[1].map_or(0.0, |s| x[s + i]);
                        grad[kt] += c * (x[k] + re).exp() * ds * decay.rho;
                    }
                }
                if let Some(k) = ix.beta0 {
                    let e = c * terms.en;
                    grad[k] += e;
                    if let Some(k) = ix.beta1 {
                        grad[k] += e * tf;
                    }
                    if let Some(k) = ix.gamma {
                        grad[k] += e * sin;
                    }
                    if let Some(k) = ix.delta {
                        grad[k] += e * cos;
                    }
                    if let Some(s) = ix.re_start[2] {
                        grad[s + i] += e;
                    }
                }
            }
        }
    }

    /// `(component, log_sigma index, random-effect range)` for every RE block.
    pub(crate) fn random_effect_blocks(&self) -> Vec<(Component, usize, Range<usize>)> {
        match &self.index {
            Index::Tsir(_) => Vec::new(),
            Index::Ee(ix) => Component::ALL
                .iter()
                .filter_map(|&c| {
                    let k = comp_ix(c);
                    match (ix.log_sigma[k], ix.re_start[k]) {
                        (Some(ls), Some(s)) => Some((c, ls, s..s + self.panel.n_areas())),
                        _ => None,
                    }
                })
                .collect(),
        }
    }
}

fn fixed_exponent(e: Exponent) -> f64 {
    match e {
        Exponent::Fixed(v) => v,
        Exponent::Free => 1.0,
    }
}

/// `y^tau` for a non-negative count; zero counts contribute nothing.
fn pow_count(y: f64, tau: f64) -> f64 {
    debug_assert!(y >= 0.0, "counts are non-negative");
    if y == 0.0 {
        0.0
    } else {
        y.powf(tau)
    }
}

/// Named natural-scale TSIR parameters for direct mean evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsirParams {
    pub beta0_ar: f64,
    pub beta1_ar: f64,
    pub gamma_seas: f64,
    pub delta_seas: f64,
    pub lambda_ne: f64,
    pub lambda_en: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub alpha: f64,
}

/// TSIR conditional mean for a given weight matrix.
pub fn tsir_mean(
    spec: &TsirSpec,
    p: &TsirParams,
    panel: &SurveillancePanel,
    w: &WeightMatrix,
    t: usize,
    i: usize,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::Domain("the first time point has no lagged count and no mean".into()));
    }
    let omega = 2.0 * PI / f64::from(spec.seasonal_period.unwrap_or(panel.period()));
    let tf = t as f64;
    let l_ar = p.beta0_ar
        + if spec.trend { p.beta1_ar * tf } else { 0.0 }
        + if spec.seasonal {
            p.gamma_seas * (omega * tf).sin() + p.delta_seas * (omega * tf).cos()
        } else {
            0.0
        };
    let pop = panel.population(i, t) as f64;
    let g: f64 = (0..panel.n_areas())
        .filter(|&j| j != i)
        .map(|j| w.get(i, j) * pow_count(panel.count(j, t - 1) as f64, p.tau2))
        .sum();
    let bracket = l_ar.exp() * panel.count(i, t - 1) as f64 + p.lambda_ne.exp() * pop.powf(p.tau1) * g;
    let epidemic = if bracket > 0.0 { bracket.powf(p.alpha) } else { 0.0 };
    let en = if spec.include_endemic {
        pop * p.lambda_en.exp()
    } else {
        0.0
    };
    Ok(epidemic + en)
}

/// Named natural-scale EE parameters; random effects indexed by area.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EeParams {
    pub lambda_ar: f64,
    pub lambda_ne: f64,
    pub beta0_en: f64,
    pub beta1_en: f64,
    pub gamma_seas: f64,
    pub delta_seas: f64,
    pub b_ar: Vec<f64>,
    pub b_ne: Vec<f64>,
    pub b_en: Vec<f64>,
}

/// EE conditional mean for a given weight matrix. Disabled components
/// contribute zero; empty random-effect vectors mean zero effects.
pub fn ee_mean(
    spec: &EeSpec,
    p: &EeParams,
    panel: &SurveillancePanel,
    w: &WeightMatrix,
    t: usize,
    i: usize,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::Domain("the first time point has no lagged count and no mean".into()));
    }
    let re = |v: &Vec<f64>| v.get(i).copied().unwrap_or(0.0);
    let omega = 2.0 * PI / f64::from(spec.seasonal_period.unwrap_or(panel.period()));
    let tf = t as f64;
    let mut mu = 0.0;
    if spec.components.contains(&Component::Ar) {
        mu += (p.lambda_ar + re(&p.b_ar)).exp() * panel.count(i, t - 1) as f64;
    }
    if spec.components.contains(&Component::Ne) {
        let s: f64 = (0..panel.n_areas())
            .filter(|&j| j != i)
            .map(|j| w.get(i, j) * panel.count(j, t - 1) as f64)
            .sum();
        mu += (p.lambda_ne + re(&p.b_ne)).exp() * s;
    }
    if spec.components.contains(&Component::En) {
        let mut l = p.beta0_en + re(&p.b_en);
        if spec.endemic_trend {
            l += p.beta1_en * tf;
        }
        if spec.seasonal {
            l += p.gamma_seas * (omega * tf).sin() + p.delta_seas * (omega * tf).cos();
        }
        mu += panel.population(i, t) as f64 * l.exp();
    }
    Ok(mu)
}

/// Aggregate-consistent and naive means for a binary individual-level covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcologicalMeans {
    /// `[(1 - zbar) e^alpha + zbar e^{alpha + beta}] * y_lag`
    pub consistent: f64,
    /// `exp(alpha + beta zbar) * y_lag`
    pub naive: f64,
}

pub fn ecological_aggregate_mean(alpha: f64, beta: f64, zbar: f64, population: u64, y_lag: f64) -> Result<EcologicalMeans> {
    if !(0.0..=1.0).contains(&zbar) {
        return Err(Error::Domain(format!("area covariate mean {zbar} outside [0, 1]")));
    }
    if population == 0 {
        return Err(Error::InvalidParameter("population must be >= 1".into()));
    }
    let n = population as f64;
    let hazard = n * ((1.0 - zbar) * alpha.exp() + zbar * (alpha + beta).exp());
    Ok(EcologicalMeans {
        consistent: hazard * y_lag / n,
        naive: (alpha + beta * zbar).exp() * y_lag,
    })
}
