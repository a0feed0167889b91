//! PCA of latent vectors and exact nearest-neighbour search.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv_with};
use crate::matrix::Matrix;
use crate::tabular::{parse_ber, BerLevel};

/// Eigen-decomposition of a symmetric `d×d` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the matching
/// unit eigenvectors.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != d * d {
        return Err(Error::Shape(format!("{} entries for a {d}x{d} matrix", a.len())));
    }
    let mut a = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..d).map(|k| v[k * d + i]).collect())
        .collect();
    Ok((values, vectors))
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Top-`k` principal axes from the sample covariance (divide by `N−1`).
pub fn pca_fit(vectors: &Matrix, k: usize) -> Result<PcaBasis> {
    let (n, d) = (vectors.n_rows(), vectors.n_cols());
    if n < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::Config(format!("cannot keep {k} components of {d} dimensions")));
    }
    let mut mean = vec![0.0; d];
    for r in vectors.rows() {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in vectors.rows() {
        centered.iter_mut().zip(r.iter().zip(&mean)).for_each(|(c, (x, m))| *c = x - m);
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (values, mut vecs) = symmetric_eigen(&cov, d)?;
    let trace: f64 = values.iter().sum();
    vecs.truncate(k);
    vecs.iter_mut().for_each(|v| fix_sign(v));
    let eigenvalues: Vec<f64> = values[..k].to_vec();
    let explained_variance_ratio = eigenvalues
        .iter()
        .map(|l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(PcaBasis {
        mean,
        components: vecs,
        eigenvalues,
        explained_variance_ratio,
    })
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `(x − mean) · componentsᵀ`.
    pub fn project(&self, vectors: &Matrix) -> Result<Matrix> {
        if vectors.n_cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "vectors have {} columns, basis expects {}",
                vectors.n_cols(),
                self.mean.len()
            )));
        }
        let k = self.k();
        let mut out = Matrix::zeros(vectors.n_rows(), k);
        for (r, x) in vectors.rows().enumerate() {
            for (c, comp) in self.components.iter().enumerate() {
                let v: f64 = x.iter().zip(&self.mean).zip(comp).map(|((x, m), w)| (x - m) * w).sum();
                out.set(r, c, v);
            }
        }
        out.with_col_names((0..k).map(|i| format!("p{i}")).collect())
    }

    /// Map projections back to the input space.
    pub fn reconstruct(&self, projected: &Matrix) -> Result<Matrix> {
        if projected.n_cols() != self.k() {
            return Err(Error::Shape(format!(
                "projection has {} columns, basis has {}",
                projected.n_cols(),
                self.k()
            )));
        }
        let d = self.mean.len();
        let mut out = Matrix::zeros(projected.n_rows(), d);
        for (r, p) in projected.rows().enumerate() {
            let row = out.row_mut(r);
            row.copy_from_slice(&self.mean);
            for (coef, comp) in p.iter().zip(&self.components) {
                row.iter_mut().zip(comp).for_each(|(o, w)| *o += coef * w);
            }
        }
        Ok(out)
    }
}

pub fn pca_project(basis: &PcaBasis, vectors: &Matrix) -> Result<Matrix> {
    basis.project(vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`; zero vectors have cosine 0.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

/// Latent vectors indexed by record id, with optional levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    vectors: Matrix,
    labels: Vec<Option<BerLevel>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub position: usize,
    pub distance: f64,
}

pub const DEFAULT_K: usize = 10;

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, vectors: Matrix, labels: Option<Vec<Option<BerLevel>>>) -> Result<Self> {
        if ids.len() != vectors.n_rows() {
            return Err(Error::Shape(format!("{} ids for {} vectors", ids.len(), vectors.n_rows())));
        }
        let labels = labels.unwrap_or_else(|| vec![None; ids.len()]);
        if labels.len() != ids.len() {
            return Err(Error::Shape(format!("{} labels for {} ids", labels.len(), ids.len())));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite("embedding vectors".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingStore {
            ids,
            vectors,
            labels,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn labels(&self) -> &[Option<BerLevel>] {
        &self.labels
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn label(&self, pos: usize) -> Option<BerLevel> {
        self.labels[pos]
    }

    /// Exact k nearest neighbours of `query_id`, excluding itself, among rows
    /// accepted by `keep`. Sorted by distance, then id.
    pub fn knn_where<F>(&self, query_id: &str, k: usize, metric: Metric, keep: F) -> Result<Vec<Neighbor>>
    where
        F: Fn(usize) -> bool,
    {
        let q = self.position(query_id)?;
        let query = self.vectors.row(q);
        let mut cands: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| i != q && keep(i))
            .map(|i| (metric.distance(query, self.vectors.row(i)), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        let k = k.min(cands.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < cands.len() {
            cands.select_nth_unstable_by(k - 1, cmp);
            cands.truncate(k);
        }
        cands.sort_by(cmp);
        Ok(cands
            .into_iter()
            .map(|(distance, position)| Neighbor {
                id: self.ids[position].clone(),
                position,
                distance,
            })
            .collect())
    }

    /// Exact k nearest neighbours; requires `k < N`.
    pub fn knn(&self, query_id: &str, k: usize, metric: Metric) -> Result<Vec<Neighbor>> {
        if k == 0 || k >= self.len() {
            return Err(Error::Config(format!(
                "k must lie in 1..{} for a store of {} vectors, got {k}",
                self.len(),
                self.len()
            )));
        }
        self.knn_where(query_id, k, metric, |_| true)
    }

    /// `id,e0..e{d-1}[,label]`; the label column appears when any row is labeled.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let labeled = self.has_labels();
        write_csv_with(path, |w| {
            let mut header = vec!["id".to_string()];
            header.extend((0..self.vectors.n_cols()).map(|i| format!("e{i}")));
            if labeled {
                header.push("label".into());
            }
            w.write_record(&header)?;
            for (i, id) in self.ids.iter().enumerate() {
                let mut rec = vec![id.clone()];
                rec.extend(self.vectors.row(i).iter().map(|&v| fmt_f64(v)));
                if labeled {
                    rec.push(self.labels[i].map(|l| l.fine().to_string()).unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("id") {
            return Err(Error::Schema("embeddings CSV must start with an id column".into()));
        }
        let labeled = header.iter().next_back() == Some("label");
        let dim = header.len() - 1 - usize::from(labeled);
        for (i, h) in header.iter().skip(1).take(dim).enumerate() {
            if h != format!("e{i}") {
                return Err(Error::Schema(format!("unexpected embeddings column {h:?}")));
            }
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for f in rec.iter().skip(1).take(dim) {
                values.push(f.parse::<f64>().map_err(|_| Error::Row {
                    row: row + 1,
                    msg: format!("{f:?} is not a number"),
                })?);
            }
            if labeled {
                let l = &rec[dim + 1];
                labels.push(if l.is_empty() {
                    None
                } else {
                    Some(parse_ber(l).map_err(|e| Error::Row {
                        row: row + 1,
                        msg: e.to_string(),
                    })?)
                });
            }
        }
        let n = ids.len();
        let m = Matrix::from_vec(n, dim, values)?;
        EmbeddingStore::new(ids, m, labeled.then_some(labels))
    }
}

pub fn knn(store: &EmbeddingStore, query_id: &str, k: usize, metric: Metric) -> Result<Vec<Neighbor>> {
    store.knn(query_id, k, metric)
}

/// `id,p0,p1[,p2],label` rows for scatter plots.
pub fn write_projection_csv(path: &Path, store: &EmbeddingStore, projected: &Matrix) -> Result<()> {
    if projected.n_rows() != store.len() {
        return Err(Error::Shape(format!(
            "{} projected rows for {} ids",
            projected.n_rows(),
            store.len()
        )));
    }
    write_csv_with(path, |w| {
        let mut header = vec!["id".to_string()];
        header.extend((0..projected.n_cols()).map(|i| format!("p{i}")));
        header.push("label".into());
        w.write_record(&header)?;
        for (i, id) in store.ids().iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(projected.row(i).iter().map(|&v| fmt_f64(v)));
            rec.push(store.label(i).map(|l| l.fine().to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        Ok(())
    })
}
