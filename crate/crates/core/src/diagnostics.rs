//! Post-hoc routing statistics over a serialized trace: per-expert dominant
//! scene route, routing entropy, utilization histograms, and per-expert,
//! per-instance-type task loss.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::utilization;
use crate::numerics::entropy;
use crate::routing::{RoutingTrace, TraceRecord};

/// How an assignment is credited to one of its batch's selected routes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// The selected route whose expert subset contains the chosen expert;
    /// the highest-probability one when several do.
    #[default]
    ContainingRoute,
    /// The batch's highest-probability selected route.
    TopRoute,
}

impl std::str::FromStr for Attribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "containing_route" => Ok(Attribution::ContainingRoute),
            "top_route" => Ok(Attribution::TopRoute),
            _ => Err(Error::Config(format!(
                "unknown attribution `{s}` (expected containing_route or top_route)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRouteProfile {
    pub expert: usize,
    /// Assignments credited to each scene route.
    pub counts: Vec<u64>,
    pub total: u64,
    /// `None` for an expert that was never selected.
    pub dominant_route: Option<usize>,
    pub dominant_label: Option<String>,
    /// Dominant count over this expert's own total.
    pub dominant_share: Option<f64>,
}

fn attribute(rec: &TraceRecord, expert: usize, route_map: &[Vec<usize>], mode: Attribution) -> Option<usize> {
    let top = rec.routes.first().copied();
    match mode {
        Attribution::TopRoute => top,
        Attribution::ContainingRoute => {
            let mut best: Option<usize> = None;
            for &r in &rec.routes {
                if !route_map.get(r).is_some_and(|m| m.contains(&expert)) {
                    continue;
                }
                let gr = rec.g.get(r).copied().unwrap_or(0.0);
                // `routes` is already in descending g, so the first hit wins ties
                if best.is_none_or(|b| gr > rec.g.get(b).copied().unwrap_or(0.0)) {
                    best = Some(r);
                }
            }
            best.or(top)
        }
    }
}

pub fn route_profile(
    trace: &RoutingTrace,
    labels: &[String],
    route_map: &[Vec<usize>],
    mode: Attribution,
) -> Result<Vec<ExpertRouteProfile>> {
    if trace.is_empty() {
        return Err(Error::Empty("routing trace".into()));
    }
    let n_routes = labels.len();
    let mut counts = vec![vec![0u64; n_routes]; trace.n_experts()];
    for rec in trace.records() {
        if rec.routes.is_empty() {
            return Err(Error::Input(format!(
                "record (batch {}, query {}) carries no selected scene routes",
                rec.batch, rec.query
            )));
        }
        for &k in &rec.experts {
            let r = attribute(rec, k, route_map, mode).expect("non-empty routes");
            if r >= n_routes {
                return Err(Error::Input(format!("route {r} has no label ({n_routes} labels)")));
            }
            counts[k][r] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(expert, c)| {
            let total: u64 = c.iter().sum();
            let (dominant_route, dominant_share) = if total == 0 {
                (None, None)
            } else {
                let mut best = 0;
                for (r, &v) in c.iter().enumerate() {
                    if v > c[best] {
                        best = r;
                    }
                }
                (Some(best), Some(c[best] as f64 / total as f64))
            };
            ExpertRouteProfile {
                expert,
                total,
                dominant_label: dominant_route.map(|r| labels[r].clone()),
                dominant_route,
                dominant_share,
                counts: c,
            }
        })
        .collect())
}

fn record_entropy(rec: &TraceRecord) -> f64 {
    entropy(&rec.pool_distribution())
}

/// Mean over records of the entropy (nats) of the pool-renormalized routing distribution.
pub fn routing_entropy(trace: &RoutingTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Empty("routing trace".into()));
    }
    Ok(trace.records().iter().map(record_entropy).sum::<f64>() / trace.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub batch: u64,
    pub entropy: f64,
}

/// Mean routing entropy per batch id, in ascending batch order.
pub fn entropy_series(trace: &RoutingTrace) -> Vec<EntropyPoint> {
    trace
        .batches()
        .into_iter()
        .map(|(batch, recs)| EntropyPoint {
            batch,
            entropy: recs.iter().map(|r| record_entropy(r)).sum::<f64>() / recs.len() as f64,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationHistogram {
    pub counts: Vec<u64>,
    pub f: Vec<f64>,
    pub total: u64,
}

pub fn utilization_histogram(trace: &RoutingTrace) -> Result<UtilizationHistogram> {
    let u = utilization(trace)?;
    Ok(UtilizationHistogram {
        total: u.counts.iter().sum(),
        counts: u.counts,
        f: u.f,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub expert: usize,
    /// Mean task loss per instance type; `None` where the expert saw no query of that type.
    pub cells: Vec<Option<f64>>,
    pub counts: Vec<u64>,
    pub profile: Option<ExpertRouteProfile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationReport {
    pub type_labels: Vec<String>,
    pub experts: Vec<ExpertRow>,
    /// Unweighted mean of the present per-expert cells, per type.
    pub average: Vec<Option<f64>>,
}

/// Per-expert mean task loss by instance type, read from labelled trace records.
pub fn specialization_report(
    trace: &RoutingTrace,
    type_labels: &[String],
    profiles: Option<&[ExpertRouteProfile]>,
) -> Result<SpecializationReport> {
    let n_types = type_labels.len();
    let ne = trace.n_experts();
    let mut sums = vec![vec![0.0; n_types]; ne];
    let mut counts = vec![vec![0u64; n_types]; ne];
    let mut labelled = 0usize;
    for rec in trace.records() {
        let (Some(t), Some(loss)) = (rec.itype, rec.loss) else {
            continue;
        };
        if t >= n_types {
            return Err(Error::Input(format!("instance type {t} has no label ({n_types} labels)")));
        }
        labelled += 1;
        for &k in &rec.experts {
            sums[k][t] += loss;
            counts[k][t] += 1;
        }
    }
    if labelled == 0 {
        return Err(Error::Input("trace has no records labelled with instance type and loss".into()));
    }
    let experts: Vec<ExpertRow> = (0..ne)
        .map(|k| ExpertRow {
            expert: k,
            cells: (0..n_types)
                .map(|t| (counts[k][t] > 0).then(|| sums[k][t] / counts[k][t] as f64))
                .collect(),
            counts: counts[k].clone(),
            profile: profiles.and_then(|p| p.get(k).cloned()),
        })
        .collect();
    let average = (0..n_types)
        .map(|t| {
            let present: Vec<f64> = experts.iter().filter_map(|r| r.cells[t]).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect();
    Ok(SpecializationReport {
        type_labels: type_labels.to_vec(),
        experts,
        average,
    })
}

/// Everything `diagnose` derives from one trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Always `SHARE_NORMALIZATION`: shares are never summed across experts.
    pub share_normalization: String,
    pub attribution: Attribution,
    pub route_labels: Vec<String>,
    pub profiles: Option<Vec<ExpertRouteProfile>>,
    pub entropy: f64,
    pub entropy_series: Vec<EntropyPoint>,
    pub utilization: UtilizationHistogram,
    pub specialization: Option<SpecializationReport>,
}

/// Dominant-route shares divide by each expert's own assignment count.
pub const SHARE_NORMALIZATION: &str = "per_expert";

pub const REPORT_CSV_COLUMNS: [&str; 7] = [
    "expert",
    "type",
    "mean_loss",
    "count",
    "dominant_route",
    "dominant_share",
    "utilization",
];

pub fn diagnose(
    trace: &RoutingTrace,
    route_labels: &[String],
    route_map: &[Vec<usize>],
    type_labels: &[String],
    mode: Attribution,
) -> Result<DiagnosticsReport> {
    if trace.is_empty() {
        return Err(Error::Empty("routing trace".into()));
    }
    let has_routes = trace.records().iter().all(|r| !r.routes.is_empty());
    let profiles = if has_routes {
        Some(route_profile(trace, route_labels, route_map, mode)?)
    } else {
        None
    };
    let labelled = trace.records().iter().any(|r| r.itype.is_some() && r.loss.is_some());
    let specialization = if labelled {
        Some(specialization_report(trace, type_labels, profiles.as_deref())?)
    } else {
        None
    };
    Ok(DiagnosticsReport {
        share_normalization: SHARE_NORMALIZATION.into(),
        attribution: mode,
        route_labels: route_labels.to_vec(),
        profiles,
        entropy: routing_entropy(trace)?,
        entropy_series: entropy_series(trace),
        utilization: utilization_histogram(trace)?,
        specialization,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl DiagnosticsReport {
    /// One row per (expert, type) cell, then one `avg` row per type. Without
    /// labelled records, one row per expert with an empty type.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_CSV_COLUMNS)?;
        let ne = self.utilization.counts.len();
        let profile = |k: usize| self.profiles.as_ref().and_then(|p| p.get(k));
        let dom = |k: usize| {
            let p = profile(k);
            (
                opt(p.and_then(|p| p.dominant_label.clone())),
                opt(p.and_then(|p| p.dominant_share)),
            )
        };
        match &self.specialization {
            Some(rep) => {
                for row in &rep.experts {
                    let (route, share) = dom(row.expert);
                    for (t, label) in rep.type_labels.iter().enumerate() {
                        out.write_record([
                            row.expert.to_string(),
                            label.clone(),
                            opt(row.cells[t]),
                            row.counts[t].to_string(),
                            route.clone(),
                            share.clone(),
                            self.utilization.f[row.expert].to_string(),
                        ])?;
                    }
                }
                for (t, label) in rep.type_labels.iter().enumerate() {
                    let count: u64 = rep.experts.iter().map(|r| r.counts[t]).sum();
                    out.write_record([
                        "avg".to_string(),
                        label.clone(),
                        opt(rep.average[t]),
                        count.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ])?;
                }
            }
            None => {
                for k in 0..ne {
                    let (route, share) = dom(k);
                    out.write_record([
                        k.to_string(),
                        String::new(),
                        String::new(),
                        self.utilization.counts[k].to_string(),
                        route,
                        share,
                        self.utilization.f[k].to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `report.json`, `report.csv`, `profiles.csv`, `entropy.csv` and `utilization.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        self.write_csv(fs::File::create(dir.join("report.csv"))?)?;

        let mut w = csv::Writer::from_path(dir.join("profiles.csv"))?;
        let mut header = vec!["expert".to_string(), "total".into(), "dominant_route".into(), "dominant_share".into()];
        header.extend(self.route_labels.iter().cloned());
        w.write_record(&header)?;
        for p in self.profiles.iter().flatten() {
            let mut row = vec![
                p.expert.to_string(),
                p.total.to_string(),
                opt(p.dominant_label.clone()),
                opt(p.dominant_share),
            ];
            row.extend(p.counts.iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("entropy.csv"))?;
        w.write_record(["batch", "entropy"])?;
        for e in &self.entropy_series {
            w.write_record([e.batch.to_string(), e.entropy.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("utilization.csv"))?;
        w.write_record(["expert", "count", "f"])?;
        for (k, (c, f)) in self.utilization.counts.iter().zip(&self.utilization.f).enumerate() {
            w.write_record([k.to_string(), c.to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
