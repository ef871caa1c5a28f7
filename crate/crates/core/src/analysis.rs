//! Representation-discrepancy analysis: linear CKA, Spearman correlation,
//! language centroids, PCA projection and the transfer gap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::{pair_representations, Model};

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Linear CKA `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)` on column-centred inputs.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape("cka", format!("{} vs {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::invalid("cka needs at least two rows"));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("cka"));
    }
    let xc = centered(&to_matrix(x));
    let yc = centered(&to_matrix(y));
    let xx = (xc.transpose() * &xc).norm();
    let yy = (yc.transpose() * &yc).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::invalid("cka is undefined for zero-variance input"));
    }
    let cross = (yc.transpose() * &xc).norm_squared();
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", "length mismatch"));
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("spearman is undefined for a constant sequence"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Column mean.
pub fn language_centroid(reps: &Tensor) -> Result<Vec<f64>> {
    if reps.is_empty() {
        return Err(Error::invalid("empty representation matrix"));
    }
    let m = to_matrix(reps);
    Ok(m.row_mean().iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `[n × k]` coordinates.
    pub coords: Tensor,
    /// `[k × d]` principal directions, largest variance first.
    pub components: Tensor,
    /// Variance along each direction.
    pub variances: Vec<f64>,
    /// Each direction's share of the total variance.
    pub explained_variance_ratio: Vec<f64>,
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Projection onto the top-`k` principal directions of the centred rows.
/// Each direction is signed so that its largest-magnitude loading is positive.
pub fn pca_project(reps: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = (reps.rows(), reps.cols());
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(format!("k = {k} outside [1, {}]", n.min(d))));
    }
    if n < 2 {
        return Err(Error::invalid("pca needs at least two rows"));
    }
    let xc = centered(&to_matrix(reps));
    let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]];
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > RANK_TOLERANCE * top.max(f64::MIN_POSITIVE)).count();
    if total <= 0.0 || k > rank {
        return Err(Error::invalid(format!("k = {k} exceeds the rank {rank} of the data")));
    }
    let mut components = DMatrix::zeros(k, d);
    let mut variances = Vec::with_capacity(k);
    for (r, &i) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        components.set_row(r, &v.transpose());
        variances.push(eig.eigenvalues[i].max(0.0));
    }
    let coords = &xc * components.transpose();
    let ratio = variances.iter().map(|v| v / total).collect();
    Ok(Pca {
        coords: Tensor::matrix(n, k, coords.transpose().as_slice().to_vec())?,
        components: Tensor::matrix(k, d, components.transpose().as_slice().to_vec())?,
        variances,
        explained_variance_ratio: ratio,
    })
}

/// Source score minus the mean score of every other language.
pub fn transfer_gap(scores: &BTreeMap<String, f64>, source: &str) -> Result<f64> {
    let src = *scores
        .get(source)
        .ok_or_else(|| Error::invalid(format!("source language `{source}` has no score")))?;
    let others: Vec<f64> = scores.iter().filter(|(k, _)| k.as_str() != source).map(|(_, &v)| v).collect();
    if others.is_empty() {
        return Err(Error::invalid("transfer gap needs at least one target language"));
    }
    Ok(src - others.iter().sum::<f64>() / others.len() as f64)
}

/// Row-aligned sequence representations per language.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationTable {
    languages: BTreeMap<String, Tensor>,
}

impl RepresentationTable {
    pub fn new(languages: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut rows = languages.values().map(Tensor::rows);
        if let Some(first) = rows.next() {
            if rows.any(|r| r != first) {
                return Err(Error::shape("representation table", "languages have different row counts"));
            }
        }
        Ok(RepresentationTable { languages })
    }

    pub fn get(&self, lang: &str) -> Option<&Tensor> {
        self.languages.get(lang)
    }

    pub fn languages(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.languages.iter()
    }
}

pub const SOURCE_LANG: &str = "source";
pub const TARGET_LANG: &str = "target";

/// Source and target representations of parallel examples.
pub fn representation_table(model: &Model, examples: &[ParallelExample], with_mixup: bool) -> Result<RepresentationTable> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to analyse"));
    }
    let d = model.config.encoder.d_model;
    let (mut src, mut tgt) = (Vec::with_capacity(examples.len() * d), Vec::with_capacity(examples.len() * d));
    for ex in examples {
        let (s, t) = pair_representations(model, &ex.src, &ex.tgt, with_mixup)?;
        src.extend(s);
        tgt.extend(t);
    }
    let n = examples.len();
    RepresentationTable::new(BTreeMap::from([
        (SOURCE_LANG.to_string(), Tensor::matrix(n, d, src)?),
        (TARGET_LANG.to_string(), Tensor::matrix(n, d, tgt)?),
    ]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaRow {
    pub variant: String,
    pub lang_a: String,
    pub lang_b: String,
    pub cka: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidRow {
    pub variant: String,
    pub lang: String,
    pub centroid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub variant: String,
    pub lang: String,
    pub example: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// CKA for every language pair, centroids, and a shared 2-D PCA of all
/// representations, computed both without mixing ("raw") and with the
/// target stream mixed ("mixup").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub cka: Vec<CkaRow>,
    pub centroids: Vec<CentroidRow>,
    pub pca: Vec<PcaRow>,
}

impl DiscrepancyReport {
    pub fn cka_between(&self, variant: &str, a: &str, b: &str) -> Option<f64> {
        self.cka
            .iter()
            .find(|r| r.variant == variant && r.lang_a == a && r.lang_b == b)
            .map(|r| r.cka)
    }
}

fn add_variant(report: &mut DiscrepancyReport, variant: &str, table: &RepresentationTable) -> Result<()> {
    let langs: Vec<(&String, &Tensor)> = table.languages().collect();
    for (a, ta) in &langs {
        for (b, tb) in &langs {
            report.cka.push(CkaRow {
                variant: variant.to_string(),
                lang_a: a.to_string(),
                lang_b: b.to_string(),
                cka: cka(ta, tb)?,
            });
        }
        report.centroids.push(CentroidRow {
            variant: variant.to_string(),
            lang: a.to_string(),
            centroid: language_centroid(ta)?,
        });
    }
    let n = langs[0].1.rows();
    let d = langs[0].1.cols();
    let stacked: Vec<f64> = langs.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
    let all = Tensor::matrix(n * langs.len(), d, stacked)?;
    let pca = pca_project(&all, 2.min(d))?;
    for (li, (lang, _)) in langs.iter().enumerate() {
        for i in 0..n {
            let row = pca.coords.row(li * n + i);
            report.pca.push(PcaRow {
                variant: variant.to_string(),
                lang: lang.to_string(),
                example: i,
                pc1: row[0],
                pc2: row.get(1).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(())
}

pub fn discrepancy_report(model: &Model, examples: &[ParallelExample]) -> Result<DiscrepancyReport> {
    let mut report = DiscrepancyReport {
        cka: vec![],
        centroids: vec![],
        pca: vec![],
    };
    add_variant(&mut report, "raw", &representation_table(model, examples, false)?)?;
    if model.config.toggles.use_mixup && model.config.mixup.mix_layer.is_some() {
        add_variant(&mut report, "mixup", &representation_table(model, examples, true)?)?;
    }
    Ok(report)
}

/// Writes `cka.csv`, `centroids.csv` and `pca.csv` into `dir`.
pub fn write_report(report: &DiscrepancyReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cka_csv = String::from("variant,lang_a,lang_b,cka\n");
    for r in &report.cka {
        let _ = writeln!(cka_csv, "{},{},{},{}", r.variant, r.lang_a, r.lang_b, r.cka);
    }
    let mut cen_csv = String::from("variant,lang,dim,value\n");
    for r in &report.centroids {
        for (i, v) in r.centroid.iter().enumerate() {
            let _ = writeln!(cen_csv, "{},{},{},{}", r.variant, r.lang, i, v);
        }
    }
    let mut pca_csv = String::from("variant,lang,example,pc1,pc2\n");
    for r in &report.pca {
        let _ = writeln!(pca_csv, "{},{},{},{},{}", r.variant, r.lang, r.example, r.pc1, r.pc2);
    }
    for (name, text) in [("cka.csv", cka_csv), ("centroids.csv", cen_csv), ("pca.csv", pca_csv)] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
