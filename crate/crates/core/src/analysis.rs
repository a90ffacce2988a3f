//! Cosine-similarity analysis of generated representations and codebooks.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use kodama::{linkage, Method};

use crate::error::{Error, Result};
use crate::fwm::Variant;
use crate::graph::Mode;
use crate::kernels;
use crate::model::SarModel;
use crate::rng::{self, Domain};
use crate::sar::{Phase, SarEpisode};
use crate::Tensor;
use crate::Real;

/// Norm below which a vector counts as zero in [`cosine_matrix`].
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major `rows x cols`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    /// `P M P^T` where row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.cols();
        let mut values = Vec::with_capacity(self.values.len());
        for &i in order {
            for &j in order {
                values.push(self.values[i * n + j]);
            }
        }
        Self {
            row_labels: order.iter().map(|&i| self.row_labels[i].clone()).collect(),
            col_labels: order.iter().map(|&j| self.col_labels[j].clone()).collect(),
            values,
        }
    }

    /// Mean of the diagonal.
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.rows().min(self.cols());
        (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64
    }

    /// Mean absolute value off the diagonal.
    pub fn off_diagonal_abs_mean(&self) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                if i != j {
                    sum += self.get(i, j).abs();
                    count += 1;
                }
            }
        }
        sum / count.max(1) as f64
    }

    /// Labels in the first row and column, cells with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("label");
        for l in &self.col_labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (i, l) in self.row_labels.iter().enumerate() {
            s.push_str(l);
            for j in 0..self.cols() {
                s.push_str(&format!(",{:.8e}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::config(format!("similarity CSV: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let col_labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let (mut row_labels, mut values) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.is_empty()) {
            let mut cells = line.split(',');
            row_labels.push(cells.next().unwrap_or_default().to_string());
            let row: Vec<f64> = cells
                .map(|c| c.parse().map_err(|_| bad(&format!("cannot parse {c:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != col_labels.len() {
                return Err(bad("ragged row"));
            }
            values.extend(row);
        }
        Ok(Self { row_labels, col_labels, values })
    }

    /// Binary PPM, one pixel per cell, row 0 at the top.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.cols(), self.rows()).into_bytes();
        for &v in &self.values {
            out.extend(diverging_color(v));
        }
        out
    }

    pub fn render_heatmap(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// -1 blue, 0 white, +1 red, linear in between.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

/// `M[i][j] = <a_i, b_j> / (|a_i| |b_j|)`. Entries involving a zero vector are
/// set to 0; the second value counts them.
pub fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(SimilarityMatrix, usize)> {
    let labels = |n: usize| (0..n).map(|i| i.to_string()).collect();
    cosine_matrix_labeled(a, b, labels(a.len()), labels(b.len()))
}

pub fn cosine_matrix_labeled(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    row_labels: Vec<String>,
    col_labels: Vec<String>,
) -> Result<(SimilarityMatrix, usize)> {
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Dimension("cosine_matrix: vectors differ in length".into()));
    }
    if row_labels.len() != a.len() || col_labels.len() != b.len() {
        return Err(Error::Dimension("cosine_matrix: label count mismatch".into()));
    }
    let an: Vec<f64> = a.iter().map(|v| kernels::norm(v)).collect();
    let bn: Vec<f64> = b.iter().map(|v| kernels::norm(v)).collect();
    let mut zeros = 0;
    let mut values = Vec::with_capacity(a.len() * b.len());
    for (x, &nx) in a.iter().zip(&an) {
        for (y, &ny) in b.iter().zip(&bn) {
            if nx < ZERO_NORM || ny < ZERO_NORM {
                zeros += 1;
                values.push(0.0);
            } else {
                values.push(kernels::dot(x, y) / (nx * ny));
            }
        }
    }
    Ok((SimilarityMatrix { row_labels, col_labels, values }, zeros))
}

/// Leaf order of the average-linkage dendrogram over `1 - cos` distances.
pub fn cluster_order(sim: &SimilarityMatrix) -> Vec<usize> {
    let n = sim.rows();
    if n < 2 {
        return (0..n).collect();
    }
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            condensed.push((1.0 - sim.get(i, j)).max(0.0));
        }
    }
    let dendrogram = linkage(&mut condensed, n, Method::Average);
    // Cluster ids: leaves are 0..n, step s creates cluster n + s.
    let steps = dendrogram.steps();
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![n + steps.len() - 1];
    while let Some(c) = stack.pop() {
        if c < n {
            order.push(c);
        } else {
            let step = &steps[c - n];
            let (l, r) = (step.cluster1.min(step.cluster2), step.cluster1.max(step.cluster2));
            stack.push(r);
            stack.push(l);
        }
    }
    order
}

#[derive(Clone, Debug)]
pub struct CodebookSimilarity {
    pub keys: SimilarityMatrix,
    pub values: SimilarityMatrix,
    /// Applied to rows and columns of both matrices.
    pub order: Vec<usize>,
}

/// Key-key and value-value cosine matrices, both reordered by the key clustering.
pub fn codebook_similarity(keys: &Tensor, values: &Tensor) -> Result<CodebookSimilarity> {
    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    let (k, v) = (rows(keys), rows(values));
    if k.len() != v.len() {
        return Err(Error::Dimension("codebook keys and values differ in count".into()));
    }
    let (key_sim, _) = cosine_matrix(&k, &k)?;
    let (value_sim, _) = cosine_matrix(&v, &v)?;
    let order = cluster_order(&key_sim);
    Ok(CodebookSimilarity { keys: key_sim.permuted(&order), values: value_sim.permuted(&order), order })
}

/// Representation recorded by a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probed {
    Query,
    Code,
    Role,
    Unbind,
}

impl FromStr for Probed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Probed::Query),
            "code" => Ok(Probed::Code),
            "role" => Ok(Probed::Role),
            "unbind" => Ok(Probed::Unbind),
            _ => Err(Error::config(format!("unknown representation {s:?}"))),
        }
    }
}

/// Which role/unbind pair of the binding: `role1`/`unbind1` or `role2`/`unbind2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    First,
    Second,
}

/// Probe-episode construction.
#[derive(Clone, Debug)]
pub struct ProbeSpec {
    /// Distinct x-ids from `X1`, in presentation order.
    pub xs: Vec<usize>,
    /// The fixed y, from `Y2`.
    pub y: usize,
}

impl ProbeSpec {
    /// The first `min(n, V)` ids of `X1` with the first id of `Y2`.
    pub fn desk(v: usize, n: usize) -> Self {
        Self { xs: (0..n.min(v)).collect(), y: v }
    }

    /// One episode binding every probe x to the fixed y, queried in the same order.
    pub fn episode(&self) -> SarEpisode {
        SarEpisode {
            discovery: self.xs.iter().map(|&x| (x, self.y)).collect(),
            inference: self.xs.clone(),
            targets: vec![self.y; self.xs.len()],
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.xs.iter().map(|x| format!("x{x}")).collect()
    }
}

/// Component index inside the D3 layer for `slot` of the role or unbind pair.
fn d3_component(variant: Variant, unbind: bool, slot: Slot) -> usize {
    let s = usize::from(slot == Slot::Second);
    match (variant, unbind) {
        (_, false) => s,
        (Variant::D3WithFiller, true) => 3 + s,
        (_, true) => 2 + s,
    }
}

/// One vector per probe x, taken at that x's discovery step (`Phase::Discovery`)
/// or inference step. `Query`/`Code` read the D3 path of the role (discovery)
/// or unbinding operator (inference) in `slot`; `Role`/`Unbind` read the
/// vectors handed to the memory.
pub fn probe_representations(
    model: &SarModel<Real>,
    spec: &ProbeSpec,
    which: Probed,
    phase: Phase,
    slot: Slot,
) -> Result<Vec<Vec<f64>>> {
    let episode = spec.episode();
    let n = episode.len();
    let dropout = rng::stream(0, Domain::Probe, 0);
    let run = model.run(std::slice::from_ref(&episode), Mode::Eval, dropout, true)?;
    let offset = if phase == Phase::Discovery { 0 } else { n };
    let g = &run.cx.graph;
    let mut out = Vec::with_capacity(n);
    for step in &run.steps[offset..offset + n] {
        let c = &step.components;
        let var = match which {
            Probed::Role => match slot {
                Slot::First => c.role1,
                Slot::Second => c.role2,
            },
            Probed::Unbind => match slot {
                Slot::First => c.unbind1,
                Slot::Second => c.unbind2,
            },
            Probed::Query | Probed::Code => {
                if !model.variant().uses_d3() {
                    return Err(Error::config("query and code probes need a D3 variant"));
                }
                let j = d3_component(model.variant(), phase == Phase::Inference, slot);
                let trace = &c.traces[j];
                match which {
                    Probed::Query => trace.query,
                    _ => trace
                        .code
                        .ok_or_else(|| Error::config("code probe needs use_codebook=true"))?,
                }
            }
        };
        out.push(g.data(var).to_vec());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct OrthogonalityReport {
    pub slot: Slot,
    /// Mean |off-diagonal| of role-role cosines.
    pub role_off_diagonal: f64,
    /// Mean diagonal of role-unbind cosines.
    pub role_unbind_diagonal: f64,
    /// Mean |off-diagonal| of role-unbind cosines.
    pub role_unbind_off_diagonal: f64,
    pub role_role: SimilarityMatrix,
    pub role_unbind: SimilarityMatrix,
}

impl OrthogonalityReport {
    pub fn from_matrices(slot: Slot, role_role: SimilarityMatrix, role_unbind: SimilarityMatrix) -> Self {
        Self {
            slot,
            role_off_diagonal: role_role.off_diagonal_abs_mean(),
            role_unbind_diagonal: role_unbind.diagonal_mean(),
            role_unbind_off_diagonal: role_unbind.off_diagonal_abs_mean(),
            role_role,
            role_unbind,
        }
    }

    /// Distinct roles less aligned than a role with itself, and each role
    /// closer to its own unbinding operator than to the others.
    pub fn satisfies_tpr_conditions(&self) -> bool {
        self.role_unbind_diagonal > self.role_unbind_off_diagonal && self.role_off_diagonal < self.role_role.diagonal_mean()
    }
}

/// Roles from the discovery phase against roles and against unbinding
/// operators from the inference phase, for one slot.
pub fn orthogonality_report(model: &SarModel<Real>, spec: &ProbeSpec, slot: Slot) -> Result<OrthogonalityReport> {
    let roles = probe_representations(model, spec, Probed::Role, Phase::Discovery, slot)?;
    let unbinds = probe_representations(model, spec, Probed::Unbind, Phase::Inference, slot)?;
    let labels = spec.labels();
    let (rr, _) = cosine_matrix_labeled(&roles, &roles, labels.clone(), labels.clone())?;
    let (ru, _) = cosine_matrix_labeled(&roles, &unbinds, labels.clone(), labels)?;
    Ok(OrthogonalityReport::from_matrices(slot, rr, ru))
}

/// CSV summary of one or more reports.
pub fn orthogonality_csv(reports: &[OrthogonalityReport]) -> String {
    let mut s = String::from("slot,role_offdiag_abs_mean,role_unbind_diag_mean,role_unbind_offdiag_abs_mean\n");
    for r in reports {
        let slot = if r.slot == Slot::First { 1 } else { 2 };
        s.push_str(&format!(
            "{slot},{:.8e},{:.8e},{:.8e}\n",
            r.role_off_diagonal, r.role_unbind_diagonal, r.role_unbind_off_diagonal
        ));
    }
    s
}

/// Writes `<stem>.csv` and `<stem>.ppm` into `dir`.
pub fn write_matrix(dir: &Path, stem: &str, m: &SimilarityMatrix) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), m.to_csv())?;
    m.render_heatmap(&dir.join(format!("{stem}.ppm")))
}
