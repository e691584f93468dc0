//! LASSO regularization path on standardized features with the 0/1 label as
//! a regression target, solved by covariance-update coordinate descent.
//!
//! Objective per grid point: `(1/2n) ||y - ybar - Z w||^2 + lambda ||w||_1`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Matrix, Standardizer};
use crate::error::{Error, Result};
use crate::features::is_attention_column;

/// Name of the pseudo-feature that stands for all attention heads.
pub const ATTENTION_FEATURE: &str = "A";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub n_lambdas: usize,
    /// Smallest penalty as a fraction of the largest.
    pub eps: f64,
    /// Explicit descending penalty grid; replaces the automatic one.
    pub lambdas: Option<Vec<f64>>,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            n_lambdas: 100,
            eps: 1e-4,
            lambdas: None,
            tol: 1e-10,
            max_sweeps: 100_000,
        }
    }
}

/// Attention heads folded into one pseudo-feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPath {
    pub features: Vec<String>,
    /// Per grid point, per aggregated feature; heads contribute their max |coef|.
    pub abs_coefs: Vec<Vec<f64>>,
    pub entry: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub columns: Vec<String>,
    pub lambdas: Vec<f64>,
    pub lambda_max: f64,
    /// Per grid point, per column, in standardized units.
    pub coefs: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// First grid index where each column's coefficient is nonzero.
    pub entry: Vec<Option<usize>>,
    pub aggregated: AggregatedPath,
    pub fit_intercept: bool,
    /// Largest `|c_j - (G w)_j| - lambda` seen over the path.
    pub max_kkt_violation: f64,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Correlations, Gram matrix and target mean of the standardized problem.
struct Moments {
    corr: Vec<f64>,
    gram: Vec<Vec<f64>>,
    y_mean: f64,
}

fn moments(x: &Matrix, y: &[bool]) -> Result<Moments> {
    let rows: Vec<&[f64]> = x.rows().collect();
    let st = Standardizer::fit(&rows)?;
    let n = x.n_rows as f64;
    let d = x.n_cols;
    let z: Vec<Vec<f64>> = st.transform_all(&rows);
    let y_mean = y.iter().filter(|&&v| v).count() as f64 / n;
    let yc: Vec<f64> = y.iter().map(|&v| f64::from(u8::from(v)) - y_mean).collect();
    let mut corr = vec![0.0; d];
    let mut gram = vec![vec![0.0; d]; d];
    for (zi, &yi) in z.iter().zip(&yc) {
        for j in 0..d {
            corr[j] += zi[j] * yi;
            for k in j..d {
                gram[j][k] += zi[j] * zi[k];
            }
        }
    }
    for j in 0..d {
        corr[j] /= n;
        for k in j..d {
            gram[j][k] /= n;
            gram[k][j] = gram[j][k];
        }
    }
    if (0..d).all(|j| st.is_constant(j)) {
        return Err(Error::Degenerate("every feature column is constant".into()));
    }
    Ok(Moments { corr, gram, y_mean })
}

pub fn lasso_path(x: &Matrix, y: &[bool], columns: &[String], cfg: &LassoConfig) -> Result<LassoPath> {
    if x.n_rows != y.len() || columns.len() != x.n_cols {
        return Err(Error::InvalidInput("lasso inputs differ in shape".into()));
    }
    let m = moments(x, y)?;
    let d = x.n_cols;
    let lambda_max = m.corr.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let lambdas = match &cfg.lambdas {
        Some(l) => {
            if l.is_empty() || l.iter().any(|v| !(*v >= 0.0)) || l.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Config("lambda grid must be nonempty, >= 0 and descending".into()));
            }
            l.clone()
        }
        None => {
            if cfg.n_lambdas < 2 || !(cfg.eps > 0.0 && cfg.eps < 1.0) {
                return Err(Error::Config("lasso needs n_lambdas >= 2 and eps in (0, 1)".into()));
            }
            let k = (cfg.n_lambdas - 1) as f64;
            (0..cfg.n_lambdas)
                .map(|i| lambda_max * cfg.eps.powf(i as f64 / k))
                .collect()
        }
    };

    let mut w = vec![0.0; d];
    // q = G w, kept in sync with every coordinate update.
    let mut q = vec![0.0; d];
    let mut coefs = Vec::with_capacity(lambdas.len());
    let mut max_kkt_violation = 0.0f64;
    for &lam in &lambdas {
        for _ in 0..cfg.max_sweeps {
            let mut max_change = 0.0f64;
            for j in 0..d {
                let gjj = m.gram[j][j];
                if gjj <= 0.0 {
                    continue;
                }
                let rho = m.corr[j] - q[j] + gjj * w[j];
                let new = soft_threshold(rho, lam) / gjj;
                let delta = new - w[j];
                if delta != 0.0 {
                    for (qk, gk) in q.iter_mut().zip(&m.gram[j]) {
                        *qk += delta * gk;
                    }
                    w[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < cfg.tol {
                break;
            }
        }
        for j in 0..d {
            max_kkt_violation = max_kkt_violation.max((m.corr[j] - q[j]).abs() - lam);
        }
        coefs.push(w.clone());
    }

    let entry: Vec<Option<usize>> = (0..d)
        .map(|j| coefs.iter().position(|c| c[j] != 0.0))
        .collect();
    let aggregated = aggregate(columns, &coefs, &entry);
    Ok(LassoPath {
        columns: columns.to_vec(),
        intercepts: vec![m.y_mean; lambdas.len()],
        lambdas,
        lambda_max,
        coefs,
        entry,
        aggregated,
        fit_intercept: true,
        max_kkt_violation,
    })
}

fn aggregate(columns: &[String], coefs: &[Vec<f64>], entry: &[Option<usize>]) -> AggregatedPath {
    // Aggregated feature for each column, in canonical order with "A" where the heads start.
    let mut features: Vec<String> = Vec::new();
    let mut group = Vec::with_capacity(columns.len());
    for c in columns {
        let name = if is_attention_column(c) { ATTENTION_FEATURE } else { c.as_str() };
        let g = match features.iter().position(|f| f == name) {
            Some(g) => g,
            None => {
                features.push(name.to_string());
                features.len() - 1
            }
        };
        group.push(g);
    }
    let abs_coefs = coefs
        .iter()
        .map(|row| {
            let mut out = vec![0.0f64; features.len()];
            for (v, &g) in row.iter().zip(&group) {
                out[g] = out[g].max(v.abs());
            }
            out
        })
        .collect();
    let mut agg_entry: Vec<Option<usize>> = vec![None; features.len()];
    for (e, &g) in entry.iter().zip(&group) {
        if let Some(e) = *e {
            agg_entry[g] = Some(agg_entry[g].map_or(e, |a: usize| a.min(e)));
        }
    }
    AggregatedPath {
        features,
        abs_coefs,
        entry: agg_entry,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub feature: String,
    pub rank: usize,
    pub entry_index: Option<usize>,
    pub abs_coef_at_entry: f64,
    pub selected: bool,
}

/// Orders aggregated features by entry index, then |coef| at entry (larger
/// first), then canonical order. Features that never enter share the last rank.
pub fn rank_features(path: &LassoPath) -> Vec<RankEntry> {
    let agg = &path.aggregated;
    let k = agg.features.len();
    let at_entry = |g: usize| agg.entry[g].map_or(0.0, |e| agg.abs_coefs[e][g]);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| match (agg.entry[a], agg.entry[b]) {
        (Some(ea), Some(eb)) => ea
            .cmp(&eb)
            .then(at_entry(b).total_cmp(&at_entry(a)))
            .then(a.cmp(&b)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    order
        .iter()
        .enumerate()
        .map(|(pos, &g)| RankEntry {
            feature: agg.features[g].clone(),
            rank: if agg.entry[g].is_some() { pos + 1 } else { k },
            entry_index: agg.entry[g],
            abs_coef_at_entry: at_entry(g),
            selected: agg.entry[g].is_some(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRank {
    pub feature: String,
    pub mean_rank: f64,
    pub selected_in: usize,
}

/// Mean rank per feature over several rankings of the same feature set.
pub fn average_ranks(rankings: &[Vec<RankEntry>]) -> Result<Vec<AverageRank>> {
    let first = rankings
        .first()
        .ok_or_else(|| Error::EmptyInput("no rankings to average".into()))?;
    let mut names: Vec<&str> = first.iter().map(|r| r.feature.as_str()).collect();
    names.sort_unstable();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let mut sum = 0.0;
        let mut selected_in = 0;
        for ranking in rankings {
            let r = ranking.iter().find(|r| r.feature == *name).ok_or_else(|| {
                Error::InvalidInput(format!("feature `{name}` missing from a ranking"))
            })?;
            sum += r.rank as f64;
            selected_in += usize::from(r.selected);
        }
        if rankings.iter().any(|r| r.len() != names.len()) {
            return Err(Error::InvalidInput("rankings cover different feature sets".into()));
        }
        out.push(AverageRank {
            feature: name.to_string(),
            mean_rank: sum / rankings.len() as f64,
            selected_in,
        });
    }
    out.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank).then_with(|| a.feature.cmp(&b.feature)));
    Ok(out)
}
