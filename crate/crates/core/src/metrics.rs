//! Feature-level usefulness checks and per-paradigm / cross-paradigm scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{project, Norm};
use crate::data::{DatasetKind, Provenance};
use crate::error::{Error, Result};
use crate::paradigms::Paradigm;
use crate::tensor::Tensor;

/// `E[y f(x)]` over paired feature values and ±1 labels.
pub fn rho_usefulness(feature_values: &[f64], labels: &[f64]) -> Result<f64> {
    check_pm1(feature_values.len(), labels)?;
    let s: f64 = feature_values.iter().zip(labels).map(|(f, y)| f * y).sum();
    Ok(s / labels.len() as f64)
}

fn check_pm1(n: usize, labels: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("usefulness needs at least one sample".into()));
    }
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "usefulness labels".into(),
            expected: n.to_string(),
            found: labels.len().to_string(),
        });
    }
    if let Some(y) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidConfig(format!("labels must be +1 or -1, found {y}")));
    }
    Ok(())
}

/// A scalar feature of a flattened input.
pub enum Feature<'a> {
    /// `w . x + b`; the worst case over a norm ball has a closed form.
    Affine { w: &'a [f64], b: f64 },
    /// Returns `(f(x), grad f(x))`.
    Differentiable(&'a (dyn Fn(&[f64]) -> (f64, Vec<f64>) + Sync)),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaBudget {
    pub steps: usize,
    /// Defaults to `epsilon / 4` for Linf and `2.5 epsilon / steps` for L2.
    pub step_size: Option<f64>,
}

impl Default for GammaBudget {
    fn default() -> Self {
        Self { steps: 50, step_size: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// True for the closed form. A descent estimate is an upper bound on the true infimum.
    pub exact: bool,
}

/// `E[inf_{|delta| <= eps} y f(x + delta)]` over rows of `xs`. The ball is not
/// intersected with the unit box.
pub fn gamma_robust_usefulness(
    feature: &Feature,
    xs: &Tensor,
    labels: &[f64],
    epsilon: f64,
    norm: Norm,
    budget: &GammaBudget,
) -> Result<GammaEstimate> {
    let n = xs.dim0();
    check_pm1(n, labels)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be finite and non-negative")));
    }
    let dim = xs.row_len();
    match feature {
        Feature::Affine { w, b } => {
            if w.len() != dim {
                return Err(Error::ShapeMismatch { context: "affine feature".into(), expected: dim.to_string(), found: w.len().to_string() });
            }
            let dual = match norm {
                Norm::Linf => w.iter().map(|v| v.abs()).sum::<f64>(),
                Norm::L2 => w.iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            let total: f64 = (0..n)
                .map(|i| {
                    let f: f64 = xs.row(i).iter().zip(w.iter()).map(|(x, w)| x * w).sum::<f64>() + b;
                    labels[i] * f - epsilon * dual
                })
                .sum();
            Ok(GammaEstimate { gamma: total / n as f64, exact: true })
        }
        Feature::Differentiable(f) => {
            let alpha = budget.step_size.unwrap_or(match norm {
                Norm::Linf => epsilon / 4.0,
                Norm::L2 => 2.5 * epsilon / budget.steps.max(1) as f64,
            });
            let mut total = 0.0;
            for i in 0..n {
                let x = xs.row(i);
                let y = labels[i];
                let (f0, _) = f(x);
                let mut best = y * f0;
                if epsilon > 0.0 {
                    let mut delta = Tensor::zeros(&[dim]);
                    for _ in 0..budget.steps {
                        let xd: Vec<f64> = x.iter().zip(delta.data()).map(|(a, d)| a + d).collect();
                        let (_, g) = f(&xd);
                        if g.len() != dim || g.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite("feature gradient".into()));
                        }
                        let step: Vec<f64> = match norm {
                            Norm::Linf => g.iter().map(|&v| if v == 0.0 { 0.0 } else { alpha * y * v.signum() }).collect(),
                            Norm::L2 => {
                                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                                if gn == 0.0 {
                                    break;
                                }
                                g.iter().map(|v| alpha * y * v / gn).collect()
                            }
                        };
                        let moved = Tensor::new(vec![dim], delta.data().iter().zip(&step).map(|(d, s)| d - s).collect());
                        delta = project(&moved, norm, epsilon);
                        let xd: Vec<f64> = x.iter().zip(delta.data()).map(|(a, d)| a + d).collect();
                        best = best.min(y * f(&xd).0);
                    }
                }
                total += best;
            }
            Ok(GammaEstimate { gamma: total / n as f64, exact: false })
        }
    }
}

/// `value / raw_denominator`, unclamped.
pub fn relative_score(value: f64, raw_denominator: f64, paradigm: Paradigm) -> Result<f64> {
    if !(raw_denominator > 0.0) {
        return Err(Error::ZeroDenominator(paradigm.to_string()));
    }
    Ok(value / raw_denominator)
}

/// Minimum over `declared`, ties broken by the order MIM < CL < DM < SL.
pub fn cross_min(scores: &BTreeMap<Paradigm, f64>, declared: &[Paradigm]) -> Result<(f64, Paradigm)> {
    if declared.is_empty() {
        return Err(Error::InvalidConfig("empty paradigm set".into()));
    }
    let mut set = declared.to_vec();
    set.sort();
    set.dedup();
    let mut best: Option<(f64, Paradigm)> = None;
    for p in set {
        let v = *scores.get(&p).ok_or_else(|| Error::MissingParadigm(p.to_string()))?;
        if v.is_nan() {
            return Err(Error::NonFinite(format!("{p} score")));
        }
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, p));
        }
    }
    Ok(best.unwrap())
}

/// A printed cross value checked against the definitional minimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub printed: f64,
    pub computed: f64,
    pub argmin: Paradigm,
    pub consistent: bool,
}

pub fn check_printed_cross(scores: &BTreeMap<Paradigm, f64>, printed: f64) -> Result<CrossCheck> {
    let declared: Vec<Paradigm> = scores.keys().copied().collect();
    let (computed, argmin) = cross_min(scores, &declared)?;
    Ok(CrossCheck { printed, computed, argmin, consistent: computed == printed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadigmScore {
    pub paradigm: Paradigm,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "U_raw")]
    pub u_raw: f64,
    #[serde(rename = "R_raw")]
    pub r_raw: f64,
    /// Undefined when the raw baseline is zero.
    #[serde(rename = "RU")]
    pub ru: Option<f64>,
    #[serde(rename = "RR")]
    pub rr: Option<f64>,
}

impl ParadigmScore {
    /// `u_raw` and `r_raw` are the scores of the same paradigm on the natural dataset.
    pub fn new(paradigm: Paradigm, u: f64, r: f64, u_raw: f64, r_raw: f64) -> Result<Self> {
        for (name, v) in [("U", u), ("R", r), ("U_raw", u_raw), ("R_raw", r_raw)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{paradigm} {name} = {v} outside [0,1]")));
            }
        }
        Ok(Self {
            paradigm,
            u,
            r,
            u_raw,
            r_raw,
            ru: if u_raw > 0.0 { Some(relative_score(u, u_raw, paradigm)?) } else { None },
            rr: if r_raw > 0.0 { Some(relative_score(r, r_raw, paradigm)?) } else { None },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argmin {
    pub cu: Paradigm,
    pub cr: Paradigm,
    pub cru: Option<Paradigm>,
    pub crr: Option<Paradigm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossParadigmReport {
    pub paradigm_scores: BTreeMap<Paradigm, ParadigmScore>,
    pub cu: f64,
    pub cr: f64,
    /// Undefined when any paradigm's relative score is.
    pub cru: Option<f64>,
    pub crr: Option<f64>,
    pub argmin: Argmin,
    pub paradigm_set: Vec<Paradigm>,
    pub dataset_provenance: Provenance,
}

impl CrossParadigmReport {
    /// Paradigms whose robust accuracy exceeds their clean accuracy.
    pub fn warnings(&self) -> Vec<String> {
        self.paradigm_scores
            .values()
            .filter(|s| s.r > s.u)
            .map(|s| format!("{}: robust accuracy {} exceeds clean accuracy {}", s.paradigm, s.r, s.u))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParadigmSet {
    Full,
    Reduced(Vec<Paradigm>),
}

impl ParadigmSet {
    pub fn paradigms(&self) -> Vec<Paradigm> {
        match self {
            ParadigmSet::Full => Paradigm::ALL.to_vec(),
            ParadigmSet::Reduced(v) => {
                let mut v = v.clone();
                v.sort();
                v.dedup();
                v
            }
        }
    }
}

/// Assembles a report from per-paradigm scores that share one dataset provenance.
pub fn build_report(entries: &[(ParadigmScore, Provenance)], set: &ParadigmSet) -> Result<CrossParadigmReport> {
    let declared = set.paradigms();
    if declared.is_empty() {
        return Err(Error::InvalidConfig("empty paradigm set".into()));
    }
    let Some((_, prov)) = entries.first() else {
        return Err(Error::MissingParadigm(declared[0].to_string()));
    };
    let mut scores = BTreeMap::new();
    for (s, p) in entries {
        if p != prov {
            return Err(Error::Provenance(format!("{} was scored on a different dataset", s.paradigm)));
        }
        if !declared.contains(&s.paradigm) {
            return Err(Error::InvalidConfig(format!("{} is not in the declared paradigm set", s.paradigm)));
        }
        if scores.insert(s.paradigm, s.clone()).is_some() {
            return Err(Error::InvalidConfig(format!("{} scored twice", s.paradigm)));
        }
    }
    let pick = |f: fn(&ParadigmScore) -> Option<f64>| -> Result<Option<(f64, Paradigm)>> {
        let mut m = BTreeMap::new();
        for p in &declared {
            let s = scores.get(p).ok_or_else(|| Error::MissingParadigm(p.to_string()))?;
            match f(s) {
                Some(v) => m.insert(*p, v),
                None => return Ok(None),
            };
        }
        cross_min(&m, &declared).map(Some)
    };
    let (cu, a_cu) = pick(|s| Some(s.u))?.unwrap();
    let (cr, a_cr) = pick(|s| Some(s.r))?.unwrap();
    let cru = pick(|s| s.ru)?;
    let crr = pick(|s| s.rr)?;
    Ok(CrossParadigmReport {
        paradigm_scores: scores,
        cu,
        cr,
        cru: cru.map(|c| c.0),
        crr: crr.map(|c| c.0),
        argmin: Argmin { cu: a_cu, cr: a_cr, cru: cru.map(|c| c.1), crr: crr.map(|c| c.1) },
        paradigm_set: declared,
        dataset_provenance: prov.clone(),
    })
}

/// Which score a table shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableMetric {
    /// Relative usefulness per paradigm with CRU as the cross column.
    RelativeUsefulness,
    /// Absolute robustness per paradigm with CR as the cross column.
    Robustness,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.header.join(" | "));
        writeln!(s, "|{}", "---|".repeat(self.header.len())).unwrap();
        for r in &self.rows {
            writeln!(s, "| {} |", r.join(" | ")).unwrap();
        }
        s
    }
}

fn row_label(p: &Provenance) -> String {
    match &p.source_encoder {
        Some(src) if p.kind != DatasetKind::Natural => format!("{} ({})", p.kind.as_str(), &src[..src.len().min(12)]),
        _ => p.kind.as_str().to_string(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

/// Dataset rows in the order natural, robust, non-robust with paradigm
/// columns `[MIM, CL, DM, SL, Cross]`. Paradigms outside a reduced set show `-`
/// and undefined ratios `n/a`.
pub fn render_table(reports: &[CrossParadigmReport], metric: TableMetric) -> Table {
    let mut header = vec!["Dataset".to_string()];
    header.extend(Paradigm::ALL.iter().map(|p| p.to_string()));
    header.push("Cross".into());
    let mut sorted: Vec<&CrossParadigmReport> = reports.iter().collect();
    sorted.sort_by_key(|r| match r.dataset_provenance.kind {
        DatasetKind::Natural => 0,
        DatasetKind::Robust => 1,
        DatasetKind::NonRobust => 2,
    });
    let rows = sorted
        .into_iter()
        .map(|r| {
            let mut row = vec![row_label(&r.dataset_provenance)];
            for p in Paradigm::ALL {
                row.push(match r.paradigm_scores.get(&p) {
                    Some(s) => cell(match metric {
                        TableMetric::RelativeUsefulness => s.ru,
                        TableMetric::Robustness => Some(s.r),
                    }),
                    None => "-".into(),
                });
            }
            row.push(cell(match metric {
                TableMetric::RelativeUsefulness => r.cru,
                TableMetric::Robustness => Some(r.cr),
            }));
            row
        })
        .collect();
    Table { header, rows }
}
