//! Observations, marker declarations, exponential-family log-densities and the
//! per-subject design used by every likelihood evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::priors::PriorOverrides;

/// Days per month used when ingesting times recorded in days.
pub const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Family {
    /// The canonical link; the pairing is fixed.
    pub fn link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Poisson => Link::Log,
            Family::Bernoulli => Link::Logit,
        }
    }

    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Mean of the response for a given linear predictor.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => logistic(eta),
        }
    }

    pub fn check_value(self, y: f64) -> std::result::Result<(), String> {
        if !y.is_finite() {
            return Err(format!("non-finite value {y}"));
        }
        match self {
            Family::Gaussian => Ok(()),
            Family::Poisson => {
                if y < 0.0 || y.fract() != 0.0 {
                    Err(format!("poisson value must be a nonnegative integer, got {y}"))
                } else {
                    Ok(())
                }
            }
            Family::Bernoulli => {
                if y == 0.0 || y == 1.0 {
                    Ok(())
                } else {
                    Err(format!("bernoulli value must be 0 or 1, got {y}"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Months,
    Days,
}

impl TimeUnit {
    pub fn to_months(self, t: f64) -> f64 {
        match self {
            TimeUnit::Months => t,
            TimeUnit::Days => t / DAYS_PER_MONTH,
        }
    }
}

/// Covariate constructors available for building `x` and `z` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Intercept,
    Time,
    TimePower(i32),
    /// A per-subject constant looked up in the model's subject attributes.
    Attribute(String),
}

impl Covariate {
    pub fn evaluate(&self, t: f64, attrs: Option<&BTreeMap<String, f64>>) -> Option<f64> {
        match self {
            Covariate::Intercept => Some(1.0),
            Covariate::Time => Some(t),
            Covariate::TimePower(p) => Some(t.powi(*p)),
            Covariate::Attribute(name) => attrs.and_then(|a| a.get(name).copied()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Covariate::Intercept => "intercept".into(),
            Covariate::Time => "time".into(),
            Covariate::TimePower(p) => format!("time^{p}"),
            Covariate::Attribute(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub id: String,
    pub family: Family,
    /// Optional in input; must agree with the family when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<Link>,
    #[serde(default)]
    pub fixed: Vec<Covariate>,
    #[serde(default)]
    pub random: Vec<Covariate>,
}

impl MarkerSpec {
    pub fn new(id: &str, family: Family, fixed: Vec<Covariate>, random: Vec<Covariate>) -> Self {
        Self {
            id: id.to_string(),
            family,
            link: None,
            fixed,
            random,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("marker id must not be empty".into()));
        }
        if let Some(link) = self.link {
            if link != self.family.link() {
                return Err(Error::Validation(format!(
                    "marker '{}': link {:?} does not match family {:?}",
                    self.id, link, self.family
                )));
            }
        }
        for c in &self.fixed {
            if self.random.contains(c) {
                return Err(Error::Validation(format!(
                    "marker '{}': covariate '{}' appears in both fixed and random parts",
                    self.id,
                    c.label()
                )));
            }
        }
        for (list, what) in [(&self.fixed, "fixed"), (&self.random, "random")] {
            for (i, c) in list.iter().enumerate() {
                if list[..i].contains(c) {
                    return Err(Error::Validation(format!(
                        "marker '{}': duplicated {what} covariate '{}'",
                        self.id,
                        c.label()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Model configuration document (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub markers: Vec<MarkerSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subject_attributes: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub prior: PriorOverrides,
}

impl ModelConfig {
    pub fn new(markers: Vec<MarkerSpec>) -> Self {
        Self {
            markers,
            subject_attributes: BTreeMap::new(),
            prior: PriorOverrides::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: String,
    pub marker: String,
    /// Months.
    pub time: f64,
    pub value: f64,
}

/// Raw, unvalidated long-format data together with its marker declarations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub markers: Vec<MarkerSpec>,
    pub observations: Vec<Observation>,
    pub attributes: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Dataset {
    pub fn new(markers: Vec<MarkerSpec>, observations: Vec<Observation>) -> Self {
        Self {
            markers,
            observations,
            attributes: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &ModelConfig, observations: Vec<Observation>) -> Self {
        Self {
            markers: config.markers.clone(),
            observations,
            attributes: config.subject_attributes.clone(),
        }
    }
}

/// Position of each marker's random-effect block inside the stacked vector `b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectLayout {
    pub q: usize,
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    pub fixed_dims: Vec<usize>,
    pub families: Vec<Family>,
    pub effect_names: Vec<String>,
    pub fixed_names: Vec<Vec<String>>,
    pub marker_ids: Vec<String>,
}

impl EffectLayout {
    pub fn from_markers(markers: &[MarkerSpec]) -> Self {
        let mut offsets = Vec::with_capacity(markers.len());
        let mut q = 0;
        let mut effect_names = Vec::new();
        for m in markers {
            offsets.push(q);
            q += m.random.len();
            for c in &m.random {
                effect_names.push(format!("{}:{}", m.id, c.label()));
            }
        }
        Self {
            q,
            offsets,
            sizes: markers.iter().map(|m| m.random.len()).collect(),
            fixed_dims: markers.iter().map(|m| m.fixed.len()).collect(),
            families: markers.iter().map(|m| m.family).collect(),
            effect_names,
            fixed_names: markers
                .iter()
                .map(|m| m.fixed.iter().map(|c| format!("{}:{}", m.id, c.label())).collect())
                .collect(),
            marker_ids: markers.iter().map(|m| m.id.clone()).collect(),
        }
    }

    pub fn n_markers(&self) -> usize {
        self.sizes.len()
    }

    pub fn all_gaussian(&self) -> bool {
        self.families.iter().all(|f| *f == Family::Gaussian)
    }

    /// The slice of `b` belonging to marker `r`.
    pub fn block<'a>(&self, b: &'a [f64], r: usize) -> &'a [f64] {
        &b[self.offsets[r]..self.offsets[r] + self.sizes[r]]
    }
}

/// GLMM-level parameters: fixed effects per marker and dispersions for
/// gaussian markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmParams {
    pub alpha: Vec<Vec<f64>>,
    pub phi: Vec<Option<f64>>,
}

impl GlmmParams {
    pub fn zeros(layout: &EffectLayout) -> Self {
        Self {
            alpha: layout.fixed_dims.iter().map(|&p| vec![0.0; p]).collect(),
            phi: layout
                .families
                .iter()
                .map(|f| f.has_dispersion().then_some(1.0))
                .collect(),
        }
    }

    pub fn validate(&self, layout: &EffectLayout) -> Result<()> {
        if self.alpha.len() != layout.n_markers() || self.phi.len() != layout.n_markers() {
            return Err(Error::Dimension("GLMM parameters do not match marker count".into()));
        }
        for r in 0..layout.n_markers() {
            if self.alpha[r].len() != layout.fixed_dims[r] {
                return Err(Error::Dimension(format!(
                    "marker {}: {} fixed effects given, {} expected",
                    layout.marker_ids[r],
                    self.alpha[r].len(),
                    layout.fixed_dims[r]
                )));
            }
            match (layout.families[r].has_dispersion(), self.phi[r]) {
                (true, Some(p)) if p > 0.0 && p.is_finite() => {}
                (true, _) => {
                    return Err(Error::Validation(format!(
                        "marker {}: gaussian dispersion must be positive",
                        layout.marker_ids[r]
                    )))
                }
                (false, None) => {}
                (false, Some(_)) => {
                    return Err(Error::Validation(format!(
                        "marker {}: dispersion given for a non-gaussian family",
                        layout.marker_ids[r]
                    )))
                }
            }
        }
        Ok(())
    }
}

/// One observation row of a subject's design.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub marker: usize,
    pub family: Family,
    pub y: f64,
    /// Response-only constant of the log-density (`-ln y!` for poisson).
    pub log_norm: f64,
    pub x_start: usize,
    pub z_start: usize,
}

/// Covariates and responses of one subject, laid out for fast evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDesign {
    pub rows: Vec<DesignRow>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    fixed_dims: Vec<usize>,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl SubjectDesign {
    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn x_row(&self, row: &DesignRow) -> &[f64] {
        &self.x[row.x_start..row.x_start + self.fixed_dims[row.marker]]
    }

    #[inline]
    pub fn z_row(&self, row: &DesignRow) -> &[f64] {
        &self.z[row.z_start..row.z_start + self.sizes[row.marker]]
    }

    #[inline]
    pub fn z_offset(&self, row: &DesignRow) -> usize {
        self.offsets[row.marker]
    }

    /// Fixed part `x^T alpha_r` of a row.
    #[inline]
    pub fn fixed_part(&self, row: &DesignRow, alpha: &[Vec<f64>]) -> f64 {
        self.x_row(row).iter().zip(&alpha[row.marker]).map(|(x, a)| x * a).sum()
    }

    /// Random part `z^T b_{i,r}` of a row.
    #[inline]
    pub fn random_part(&self, row: &DesignRow, b: &[f64]) -> f64 {
        let off = self.offsets[row.marker];
        self.z_row(row).iter().enumerate().map(|(j, z)| z * b[off + j]).sum()
    }

    #[inline]
    pub fn eta(&self, row: &DesignRow, alpha: &[Vec<f64>], b: &[f64]) -> f64 {
        self.fixed_part(row, alpha) + self.random_part(row, b)
    }

    /// `sum_j log p(y_j | b)` over all rows.
    pub fn log_lik(&self, psi: &GlmmParams, b: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|row| {
                let eta = self.eta(row, &psi.alpha, b);
                row_log_density(row, eta, psi.phi[row.marker])
            })
            .sum()
    }

    /// Same covariates with different responses (used for replicate data).
    pub fn with_values(&self, ys: &[f64]) -> SubjectDesign {
        let mut out = self.clone();
        for (row, &y) in out.rows.iter_mut().zip(ys) {
            row.y = y;
            row.log_norm = response_constant(row.family, y);
        }
        out
    }
}

#[inline]
fn response_constant(family: Family, y: f64) -> f64 {
    match family {
        Family::Poisson => -ln_gamma(y + 1.0),
        _ => 0.0,
    }
}

/// Stable `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn row_log_density(row: &DesignRow, eta: f64, phi: Option<f64>) -> f64 {
    match row.family {
        Family::Gaussian => {
            let phi = phi.unwrap_or(1.0);
            let r = row.y - eta;
            -0.5 * (LN_2PI + phi.ln()) - 0.5 * r * r / phi
        }
        Family::Poisson => row.y * eta - eta.exp() + row.log_norm,
        Family::Bernoulli => {
            if row.y > 0.5 {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        }
    }
}

/// Log-density together with its first derivative and the negated second
/// derivative with respect to `eta`.
#[inline]
pub(crate) fn row_derivatives(row: &DesignRow, eta: f64, phi: Option<f64>) -> (f64, f64, f64) {
    match row.family {
        Family::Gaussian => {
            let phi = phi.unwrap_or(1.0);
            let r = row.y - eta;
            (-0.5 * (LN_2PI + phi.ln()) - 0.5 * r * r / phi, r / phi, 1.0 / phi)
        }
        Family::Poisson => {
            let mu = eta.exp();
            (row.y * eta - mu + row.log_norm, row.y - mu, mu)
        }
        Family::Bernoulli => {
            let p = logistic(eta);
            let ll = if row.y > 0.5 { -softplus(-eta) } else { -softplus(eta) };
            (ll, row.y - p, p * (1.0 - p))
        }
    }
}

/// `eta = x^T alpha_r + z^T b_{i,r}`.
pub fn linear_predictor(x: &[f64], z: &[f64], alpha_r: &[f64], b_ir: &[f64]) -> Result<f64> {
    if x.len() != alpha_r.len() || z.len() != b_ir.len() {
        return Err(Error::Dimension(format!(
            "x has {} entries for {} fixed effects, z has {} entries for {} random effects",
            x.len(),
            alpha_r.len(),
            z.len(),
            b_ir.len()
        )));
    }
    Ok(x.iter().zip(alpha_r).map(|(a, b)| a * b).sum::<f64>() + z.iter().zip(b_ir).map(|(a, b)| a * b).sum::<f64>())
}

/// `log p(y | eta, phi)` for the given family with its canonical link.
pub fn log_family_density(family: Family, y: f64, eta: f64, phi: Option<f64>) -> Result<f64> {
    family.check_value(y).map_err(Error::Validation)?;
    if !eta.is_finite() {
        return Err(Error::Numerical(format!("non-finite linear predictor {eta}")));
    }
    let phi = match family {
        Family::Gaussian => match phi {
            Some(p) if p > 0.0 && p.is_finite() => Some(p),
            _ => return Err(Error::Validation(format!("invalid gaussian dispersion {phi:?}"))),
        },
        _ => None,
    };
    let row = DesignRow {
        marker: 0,
        family,
        y,
        log_norm: response_constant(family, y),
        x_start: 0,
        z_start: 0,
    };
    Ok(row_log_density(&row, eta, phi))
}

/// Observations of one marker for one subject, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub series: Vec<MarkerSeries>,
    pub design: SubjectDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerCounts {
    pub marker: String,
    pub total: usize,
    pub min_per_subject: usize,
    pub median_per_subject: f64,
    pub max_per_subject: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_subjects: usize,
    pub n_observations: usize,
    pub per_marker: Vec<MarkerCounts>,
}

/// Dataset after domain checks, grouping and sorting. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedDataset {
    pub markers: Vec<MarkerSpec>,
    pub layout: EffectLayout,
    pub subjects: Vec<SubjectData>,
    pub attributes: BTreeMap<String, BTreeMap<String, f64>>,
    pub summary: DatasetSummary,
}

impl ValidatedDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.summary.n_observations
    }

    pub fn design(&self, i: usize) -> &SubjectDesign {
        &self.subjects[i].design
    }

    /// Back to raw long format (sorted), e.g. for re-validation or export.
    pub fn to_dataset(&self) -> Dataset {
        let mut observations = Vec::with_capacity(self.n_observations());
        for s in &self.subjects {
            for (r, series) in s.series.iter().enumerate() {
                for (&t, &v) in series.times.iter().zip(&series.values) {
                    observations.push(Observation {
                        subject: s.id.clone(),
                        marker: self.markers[r].id.clone(),
                        time: t,
                        value: v,
                    });
                }
            }
        }
        Dataset {
            markers: self.markers.clone(),
            observations,
            attributes: self.attributes.clone(),
        }
    }

    /// Restricts to the given subjects (in the given order).
    pub fn subset(&self, indices: &[usize]) -> ValidatedDataset {
        let subjects: Vec<SubjectData> = indices.iter().map(|&i| self.subjects[i].clone()).collect();
        let summary = summarize(&self.markers, &subjects);
        ValidatedDataset {
            markers: self.markers.clone(),
            layout: self.layout.clone(),
            subjects,
            attributes: self.attributes.clone(),
            summary,
        }
    }
}

/// Checks family domains and marker ids, sorts each (subject, marker) series by
/// time, and compiles the per-subject designs.
pub fn validate_dataset(raw: &Dataset) -> Result<ValidatedDataset> {
    if raw.markers.is_empty() {
        return Err(Error::Validation("at least one marker is required".into()));
    }
    for (i, m) in raw.markers.iter().enumerate() {
        m.validate()?;
        if raw.markers[..i].iter().any(|o| o.id == m.id) {
            return Err(Error::Validation(format!("duplicated marker id '{}'", m.id)));
        }
    }
    let marker_index: HashMap<&str, usize> = raw
        .markers
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id.as_str(), i))
        .collect();
    let n_markers = raw.markers.len();

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<&str, Vec<Vec<(f64, f64)>>> = HashMap::new();
    for obs in &raw.observations {
        let r = *marker_index.get(obs.marker.as_str()).ok_or_else(|| Error::Domain {
            subject: obs.subject.clone(),
            marker: obs.marker.clone(),
            detail: "unknown marker id".into(),
        })?;
        if !obs.time.is_finite() {
            return Err(Error::Domain {
                subject: obs.subject.clone(),
                marker: obs.marker.clone(),
                detail: format!("non-finite time {}", obs.time),
            });
        }
        raw.markers[r]
            .family
            .check_value(obs.value)
            .map_err(|detail| Error::Domain {
                subject: obs.subject.clone(),
                marker: obs.marker.clone(),
                detail,
            })?;
        let entry = grouped.entry(obs.subject.as_str()).or_insert_with(|| {
            order.push(obs.subject.clone());
            vec![Vec::new(); n_markers]
        });
        entry[r].push((obs.time, obs.value));
    }

    let layout = EffectLayout::from_markers(&raw.markers);
    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let mut per_marker = grouped.remove(id.as_str()).expect("grouped subject");
        let attrs = raw.attributes.get(id);
        let mut series = Vec::with_capacity(n_markers);
        for obs in per_marker.iter_mut() {
            // stable sort keeps the input order of tied times
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            series.push(MarkerSeries {
                times: obs.iter().map(|o| o.0).collect(),
                values: obs.iter().map(|o| o.1).collect(),
            });
        }
        let design = build_design(id, &raw.markers, &layout, &series, attrs)?;
        subjects.push(SubjectData {
            id: id.clone(),
            series,
            design,
        });
    }
    let summary = summarize(&raw.markers, &subjects);
    Ok(ValidatedDataset {
        markers: raw.markers.clone(),
        layout,
        subjects,
        attributes: raw.attributes.clone(),
        summary,
    })
}

fn build_design(
    id: &str,
    markers: &[MarkerSpec],
    layout: &EffectLayout,
    series: &[MarkerSeries],
    attrs: Option<&BTreeMap<String, f64>>,
) -> Result<SubjectDesign> {
    let mut rows = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    for (r, (spec, s)) in markers.iter().zip(series).enumerate() {
        for (&t, &y) in s.times.iter().zip(&s.values) {
            let x_start = x.len();
            let z_start = z.len();
            for (list, out) in [(&spec.fixed, &mut x), (&spec.random, &mut z)] {
                for c in list {
                    let v = c.evaluate(t, attrs).ok_or_else(|| Error::Domain {
                        subject: id.to_string(),
                        marker: spec.id.clone(),
                        detail: format!("missing subject attribute for covariate '{}'", c.label()),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Domain {
                            subject: id.to_string(),
                            marker: spec.id.clone(),
                            detail: format!("covariate '{}' is not finite at t={t}", c.label()),
                        });
                    }
                    out.push(v);
                }
            }
            rows.push(DesignRow {
                marker: r,
                family: spec.family,
                y,
                log_norm: response_constant(spec.family, y),
                x_start,
                z_start,
            });
        }
    }
    Ok(SubjectDesign {
        rows,
        x,
        z,
        fixed_dims: layout.fixed_dims.clone(),
        offsets: layout.offsets.clone(),
        sizes: layout.sizes.clone(),
    })
}

fn summarize(markers: &[MarkerSpec], subjects: &[SubjectData]) -> DatasetSummary {
    let per_marker = markers
        .iter()
        .enumerate()
        .map(|(r, m)| {
            let mut counts: Vec<usize> = subjects.iter().map(|s| s.series[r].times.len()).collect();
            counts.sort_unstable();
            let median = if counts.is_empty() {
                0.0
            } else if counts.len() % 2 == 1 {
                counts[counts.len() / 2] as f64
            } else {
                (counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64 / 2.0
            };
            MarkerCounts {
                marker: m.id.clone(),
                total: counts.iter().sum(),
                min_per_subject: counts.first().copied().unwrap_or(0),
                median_per_subject: median,
                max_per_subject: counts.last().copied().unwrap_or(0),
            }
        })
        .collect::<Vec<_>>();
    DatasetSummary {
        n_subjects: subjects.len(),
        n_observations: per_marker.iter().map(|m| m.total).sum(),
        per_marker,
    }
}
