//! Design columns and penalties: thin-plate regression spline bases for
//! time-varying effects, indicator bases with identity penalties for random
//! effects, and assembly of the penalized design from a case-control dataset.
//!
//! The design never gets an intercept column: the sampled likelihood is a
//! no-intercept binary regression on covariate differences.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RowMatrix;
use crate::sampling::CaseControlDataset;

/// Knot cap; unique years beyond this are thinned by quantiles.
pub const MAX_KNOTS: usize = 200;

/// Low-rank thin-plate spline basis on one dimension (time).
///
/// Construction: unique knot years, radial kernel |t - t'|^3 / 12 on the
/// knots (years mapped affinely to [0,1] for conditioning), spectral
/// truncation to the k - 2 eigenvectors of largest magnitude compatible with
/// the affine constraint, plus the unpenalized affine null space. The
/// evaluator reproduces the truncated interpolant exactly at the knots and is
/// defined for every t.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TprsBasis {
    /// knots on the normalized scale, ascending
    knots_u: Vec<f64>,
    t_min: f64,
    t_range: f64,
    u_mean: f64,
    k: usize,
    /// n_knots x (k-2) projection (U_k Z_k), row-major
    proj: Vec<f64>,
    /// k x k penalty, row-major; zero on the trailing 2x2 null block
    penalty: Vec<f64>,
    window: (f64, f64),
}

fn tps_kernel(r: f64) -> f64 {
    r.abs().powi(3) / 12.0
}

/// Thin the (sorted, distinct) values down to at most `cap` by quantiles.
fn quantile_thin(sorted: &[f64], cap: usize) -> Vec<f64> {
    if sorted.len() <= cap {
        return sorted.to_vec();
    }
    let n = sorted.len();
    let mut out: Vec<f64> = (0..cap)
        .map(|i| {
            let pos = (i as f64) * ((n - 1) as f64) / ((cap - 1) as f64);
            sorted[pos.round() as usize]
        })
        .collect();
    out.dedup();
    out
}

impl TprsBasis {
    /// Build the basis from event years. Requires at least k distinct years
    /// and k >= 3.
    pub fn new(event_years: &[f64], k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::Spec(format!("time-varying basis needs k >= 3, got {k}")));
        }
        let mut years: Vec<f64> = event_years.to_vec();
        years.sort_by(|a, b| a.partial_cmp(b).unwrap());
        years.dedup();
        if years.len() < k {
            return Err(Error::BasisRank {
                distinct: years.len(),
                k,
            });
        }
        let knots_t = quantile_thin(&years, MAX_KNOTS);
        let n = knots_t.len();
        let t_min = knots_t[0];
        let t_range = (knots_t[n - 1] - knots_t[0]).max(1.0);
        let knots_u: Vec<f64> = knots_t.iter().map(|t| (t - t_min) / t_range).collect();
        let u_mean = knots_u.iter().sum::<f64>() / n as f64;

        // kernel matrix on the knots
        let mut e = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                e[(i, j)] = tps_kernel(knots_u[i] - knots_u[j]);
            }
        }
        let eig = e.clone().symmetric_eigen();
        // keep the k eigenpairs of largest magnitude
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .partial_cmp(&eig.eigenvalues[a].abs())
                .unwrap()
        });
        let kept = &order[..k];
        let mut uk = DMatrix::<f64>::zeros(n, k);
        let mut dk = DVector::<f64>::zeros(k);
        for (col, &idx) in kept.iter().enumerate() {
            uk.set_column(col, &eig.eigenvectors.column(idx));
            dk[col] = eig.eigenvalues[idx];
        }

        // affine null space T = [1, u - u_mean]
        let mut t_mat = DMatrix::<f64>::zeros(n, 2);
        for i in 0..n {
            t_mat[(i, 0)] = 1.0;
            t_mat[(i, 1)] = knots_u[i] - u_mean;
        }

        // Z_k: orthonormal basis of the null space of (T' U_k), via the
        // projector onto the orthogonal complement of A = U_k' T
        let a = uk.transpose() * &t_mat; // k x 2
        let ata = a.transpose() * &a;
        let ata_inv = ata
            .try_inverse()
            .ok_or_else(|| Error::Numerical("degenerate affine constraint in tprs".into()))?;
        let p = DMatrix::<f64>::identity(k, k) - &a * ata_inv * a.transpose();
        let peig = p.symmetric_eigen();
        let mut z_cols: Vec<usize> = (0..k).filter(|&i| peig.eigenvalues[i] > 0.5).collect();
        if z_cols.len() != k - 2 {
            return Err(Error::Numerical(format!(
                "tprs constraint rank {} != 2",
                k - z_cols.len()
            )));
        }
        // deterministic column order: sort by first significant component
        z_cols.sort();
        let mut zk = DMatrix::<f64>::zeros(k, k - 2);
        for (col, &idx) in z_cols.iter().enumerate() {
            zk.set_column(col, &peig.eigenvectors.column(idx));
        }

        // projection applied to kernel rows: U_k Z_k (n x (k-2))
        let ukzk = &uk * &zk;
        // penalty on the range coefficients: Z_k' D_k Z_k
        let dz = DMatrix::from_fn(k, k - 2, |i, j| dk[i] * zk[(i, j)]);
        let mut s_range = zk.transpose() * dz;
        // symmetrize and clip the tiny negative round-off the constrained
        // kernel can leave behind
        for i in 0..k - 2 {
            for j in 0..i {
                let avg = 0.5 * (s_range[(i, j)] + s_range[(j, i)]);
                s_range[(i, j)] = avg;
                s_range[(j, i)] = avg;
            }
        }
        let seig = s_range.clone().symmetric_eigen();
        let smax = seig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        if seig.eigenvalues.iter().any(|&v| v < -1e-10 * smax.max(1.0)) {
            return Err(Error::Numerical(
                "tprs penalty is not positive semi-definite".into(),
            ));
        }

        let mut penalty = vec![0.0; k * k];
        for i in 0..k - 2 {
            for j in 0..k - 2 {
                penalty[i * k + j] = s_range[(i, j)];
            }
        }
        let mut proj = vec![0.0; n * (k - 2)];
        for i in 0..n {
            for j in 0..k - 2 {
                proj[i * (k - 2) + j] = ukzk[(i, j)];
            }
        }
        Ok(TprsBasis {
            knots_u,
            t_min,
            t_range,
            u_mean,
            k,
            proj,
            penalty,
            window: (years[0], years[years.len() - 1]),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_knots(&self) -> usize {
        self.knots_u.len()
    }

    pub fn null_space_dim(&self) -> usize {
        2
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    /// k x k penalty matrix (rank k - 2).
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| self.penalty[i * self.k + j])
    }

    /// Basis vector at year t: k - 2 penalized range functions followed by
    /// the unpenalized constant and linear directions.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let u = (t - self.t_min) / self.t_range;
        let kr = self.k - 2;
        let mut out = vec![0.0; self.k];
        for (i, &ku) in self.knots_u.iter().enumerate() {
            let e = tps_kernel(u - ku);
            if e == 0.0 {
                continue;
            }
            let row = &self.proj[i * kr..(i + 1) * kr];
            for (o, &p) in out[..kr].iter_mut().zip(row) {
                *o += e * p;
            }
        }
        out[kr] = 1.0;
        out[kr + 1] = u - self.u_mean;
        out
    }
}

/// Where a random-effect term reads its level label from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSource {
    Sender,
    Receiver,
    /// index into the dataset's label columns
    Label(usize),
}

/// One model term as specified by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TermKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TermKind {
    Linear {
        covariate: String,
    },
    TimeVarying {
        covariate: String,
        #[serde(default = "default_k")]
        k: usize,
    },
    RandomEffect {
        /// "sender", "receiver", or the name of a label covariate
        factor: String,
        #[serde(default)]
        heteroscedastic_by_stratum: bool,
    },
}

fn default_k() -> usize {
    10
}

/// Fitted layout of one term inside the assembled design.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TermLayout {
    Linear {
        name: String,
        x_index: usize,
        col: usize,
    },
    TimeVarying {
        name: String,
        x_index: usize,
        col_start: usize,
        col_end: usize,
        basis: TprsBasis,
    },
    RandomEffect {
        name: String,
        factor: FactorSource,
        col_start: usize,
        col_end: usize,
        levels: Vec<String>,
        level_cols: BTreeMap<String, usize>,
    },
}

impl TermLayout {
    pub fn name(&self) -> &str {
        match self {
            TermLayout::Linear { name, .. } => name,
            TermLayout::TimeVarying { name, .. } => name,
            TermLayout::RandomEffect { name, .. } => name,
        }
    }

    pub fn cols(&self) -> Range<usize> {
        match self {
            TermLayout::Linear { col, .. } => *col..*col + 1,
            TermLayout::TimeVarying { col_start, col_end, .. } => *col_start..*col_end,
            TermLayout::RandomEffect { col_start, col_end, .. } => *col_start..*col_end,
        }
    }
}

/// Penalty block: a column range and the PSD matrix acting on it.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub cols: Range<usize>,
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub label: String,
    pub is_random_effect: bool,
}

/// Serializable description of penalty blocks (without matrices).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockInfo {
    pub label: String,
    pub col_start: usize,
    pub col_end: usize,
    pub rank: usize,
    pub is_random_effect: bool,
}

/// Everything needed to interpret a coefficient vector after fitting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelLayout {
    pub col_names: Vec<String>,
    pub terms: Vec<TermLayout>,
    pub blocks: Vec<BlockInfo>,
    pub x_names: Vec<String>,
    pub d: usize,
}

impl ModelLayout {
    pub fn term(&self, name: &str) -> Option<&TermLayout> {
        self.terms.iter().find(|t| t.name() == name)
    }

    /// Linear predictor for one dyad's absolute covariates at `year`.
    /// Random-effect levels unseen at fit time contribute 0.
    pub fn eta_absolute(
        &self,
        gamma: &[f64],
        year: f64,
        x_abs: &[f64],
        sender: &str,
        receiver: &str,
        labels: &[String],
    ) -> f64 {
        let mut eta = 0.0;
        for term in &self.terms {
            match term {
                TermLayout::Linear { x_index, col, .. } => {
                    eta += gamma[*col] * x_abs[*x_index];
                }
                TermLayout::TimeVarying { x_index, col_start, basis, .. } => {
                    let b = basis.eval(year);
                    let x = x_abs[*x_index];
                    for (h, bh) in b.iter().enumerate() {
                        eta += gamma[col_start + h] * bh * x;
                    }
                }
                TermLayout::RandomEffect { factor, level_cols, .. } => {
                    let label = match factor {
                        FactorSource::Sender => sender,
                        FactorSource::Receiver => receiver,
                        FactorSource::Label(i) => labels[*i].as_str(),
                    };
                    if let Some(&c) = level_cols.get(label) {
                        eta += gamma[c];
                    }
                }
            }
        }
        eta
    }
}

/// The assembled penalized design.
#[derive(Debug, Clone)]
pub struct DesignAssembly {
    pub x: RowMatrix,
    pub weights: Vec<f64>,
    pub penalties: Vec<PenaltyBlock>,
    pub layout: ModelLayout,
    pub n_events: usize,
}

fn factor_labels<'a>(
    dataset: &'a CaseControlDataset,
    factor: &FactorSource,
    row: usize,
) -> (&'a str, &'a str) {
    let r = &dataset.rows[row];
    match factor {
        FactorSource::Sender => (&r.case_sender, &r.ctrl_sender),
        FactorSource::Receiver => (&r.case_receiver, &r.ctrl_receiver),
        FactorSource::Label(i) => (&r.case_labels[*i], &r.ctrl_labels[*i]),
    }
}

fn resolve_factor(dataset: &CaseControlDataset, factor: &str) -> Result<FactorSource> {
    match factor {
        "sender" => Ok(FactorSource::Sender),
        "receiver" => Ok(FactorSource::Receiver),
        other => dataset
            .label_names
            .iter()
            .position(|n| n == other)
            .map(FactorSource::Label)
            .ok_or_else(|| {
                Error::Spec(format!(
                    "random-effect factor '{other}' is not a label column (have: sender, receiver, {})",
                    dataset.label_names.join(", ")
                ))
            }),
    }
}

/// Build the design matrix, penalty blocks, and layout from the dataset and
/// term specifications.
pub fn assemble_design(
    dataset: &CaseControlDataset,
    term_specs: &[TermSpec],
) -> Result<DesignAssembly> {
    if dataset.rows.is_empty() {
        return Err(Error::Spec("cannot assemble a design from an empty dataset".into()));
    }
    let x_index = |cov: &str| -> Result<usize> {
        dataset
            .x_names
            .iter()
            .position(|n| n == cov)
            .ok_or_else(|| Error::Spec(format!("term references missing covariate '{cov}'")))
    };

    // first pass: sizes, bases, levels
    enum Prepared {
        Linear { xi: usize },
        Tv { xi: usize, basis: TprsBasis },
        Re {
            factor: FactorSource,
            levels: Vec<String>,
            /// (stratum or empty, start offset within the term, level count)
            groups: Vec<(String, usize, usize)>,
        },
    }
    let years: Vec<f64> = dataset.rows.iter().map(|r| r.year as f64).collect();
    let mut prepared = Vec::with_capacity(term_specs.len());
    for spec in term_specs {
        let p = match &spec.kind {
            TermKind::Linear { covariate } => Prepared::Linear { xi: x_index(covariate)? },
            TermKind::TimeVarying { covariate, k } => Prepared::Tv {
                xi: x_index(covariate)?,
                basis: TprsBasis::new(&years, *k)?,
            },
            TermKind::RandomEffect { factor, heteroscedastic_by_stratum } => {
                let factor = resolve_factor(dataset, factor)?;
                if *heteroscedastic_by_stratum && factor != FactorSource::Sender {
                    return Err(Error::Spec(format!(
                        "term '{}': stratum heteroscedasticity needs a sender factor",
                        spec.name
                    )));
                }
                let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
                for row in 0..dataset.rows.len() {
                    let (c, t) = factor_labels(dataset, &factor, row);
                    seen.insert(c.to_string());
                    seen.insert(t.to_string());
                }
                let (levels, groups) = if *heteroscedastic_by_stratum {
                    // group levels by sender stratum; sorted stratum names,
                    // sorted levels inside each
                    let mut by_stratum: BTreeMap<String, Vec<String>> = BTreeMap::new();
                    for level in &seen {
                        let stratum = dataset.sender_strata.get(level).ok_or_else(|| {
                            Error::Spec(format!(
                                "term '{}': sender '{level}' has no recorded stratum",
                                spec.name
                            ))
                        })?;
                        by_stratum.entry(stratum.clone()).or_default().push(level.clone());
                    }
                    let mut ordered = Vec::new();
                    let mut groups = Vec::new();
                    for (stratum, lv) in by_stratum {
                        groups.push((stratum, ordered.len(), lv.len()));
                        ordered.extend(lv);
                    }
                    (ordered, groups)
                } else {
                    let ordered: Vec<String> = seen.into_iter().collect();
                    let n = ordered.len();
                    (ordered, vec![(String::new(), 0, n)])
                };
                Prepared::Re { factor, levels, groups }
            }
        };
        prepared.push(p);
    }

    // second pass: layout
    let mut col_names = Vec::new();
    let mut terms = Vec::new();
    let mut penalties: Vec<PenaltyBlock> = Vec::new();
    let mut blocks = Vec::new();
    let mut col = 0usize;
    for (spec, p) in term_specs.iter().zip(&prepared) {
        match p {
            Prepared::Linear { xi } => {
                col_names.push(spec.name.clone());
                terms.push(TermLayout::Linear { name: spec.name.clone(), x_index: *xi, col });
                col += 1;
            }
            Prepared::Tv { xi, basis } => {
                let k = basis.k();
                for h in 0..k - 2 {
                    col_names.push(format!("{}.f{}", spec.name, h + 1));
                }
                col_names.push(format!("{}.const", spec.name));
                col_names.push(format!("{}.lin", spec.name));
                let matrix = basis.penalty_matrix();
                penalties.push(PenaltyBlock {
                    cols: col..col + k,
                    matrix,
                    rank: k - 2,
                    label: spec.name.clone(),
                    is_random_effect: false,
                });
                blocks.push(BlockInfo {
                    label: spec.name.clone(),
                    col_start: col,
                    col_end: col + k,
                    rank: k - 2,
                    is_random_effect: false,
                });
                terms.push(TermLayout::TimeVarying {
                    name: spec.name.clone(),
                    x_index: *xi,
                    col_start: col,
                    col_end: col + k,
                    basis: basis.clone(),
                });
                col += k;
            }
            Prepared::Re { factor, levels, groups } => {
                let start = col;
                let mut level_cols = BTreeMap::new();
                for level in levels {
                    col_names.push(format!("{}.{}", spec.name, level));
                    level_cols.insert(level.clone(), col);
                    col += 1;
                }
                for (stratum, offset, count) in groups {
                    let label = if stratum.is_empty() {
                        spec.name.clone()
                    } else {
                        format!("{}[{}]", spec.name, stratum)
                    };
                    penalties.push(PenaltyBlock {
                        cols: start + offset..start + offset + count,
                        matrix: DMatrix::identity(*count, *count),
                        rank: *count,
                        label: label.clone(),
                        is_random_effect: true,
                    });
                    blocks.push(BlockInfo {
                        label,
                        col_start: start + offset,
                        col_end: start + offset + count,
                        rank: *count,
                        is_random_effect: true,
                    });
                }
                terms.push(TermLayout::RandomEffect {
                    name: spec.name.clone(),
                    factor: factor.clone(),
                    col_start: start,
                    col_end: col,
                    levels: levels.clone(),
                    level_cols,
                });
            }
        }
    }

    // third pass: fill rows
    let d = col;
    let n = dataset.rows.len();
    let mut x = RowMatrix::zeros(n, d);
    for (i, r) in dataset.rows.iter().enumerate() {
        let row = x.row_mut(i);
        for term in &terms {
            match term {
                TermLayout::Linear { x_index, col, .. } => {
                    row[*col] = r.x_diff[*x_index];
                }
                TermLayout::TimeVarying { x_index, col_start, basis, .. } => {
                    let b = basis.eval(r.year as f64);
                    let xv = r.x_diff[*x_index];
                    for (h, bh) in b.iter().enumerate() {
                        row[col_start + h] = bh * xv;
                    }
                }
                TermLayout::RandomEffect { factor, level_cols, .. } => {
                    let (c, t) = factor_labels(dataset, factor, i);
                    if c != t {
                        row[level_cols[c]] += 1.0;
                        row[level_cols[t]] -= 1.0;
                    }
                }
            }
        }
    }

    let weights = dataset.rows.iter().map(|r| r.weight).collect();
    Ok(DesignAssembly {
        x,
        weights,
        penalties,
        layout: ModelLayout {
            col_names,
            terms,
            blocks,
            x_names: dataset.x_names.clone(),
            d,
        },
        n_events: dataset.n_events,
    })
}
