//! Metric reports and embedding projections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ktele_core::metrics::{mean, ClassificationMetrics, RankingSummary};
use ktele_core::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Per-fold and mean values of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub encoder: String,
    pub seed: u64,
    pub folds: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
}

pub fn ranking_values(s: &RankingSummary, max_rank: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::from([
        ("mr".to_string(), s.mr),
        ("mrr".to_string(), s.mrr),
        ("max_rank".to_string(), max_rank as f64),
    ]);
    for (k, v) in &s.hits {
        m.insert(format!("hits@{k}"), *v);
    }
    m
}

pub fn classification_values(prefix: &str, c: &ClassificationMetrics) -> BTreeMap<String, f64> {
    let p = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}_{k}")
        }
    };
    BTreeMap::from([
        (p("accuracy"), c.accuracy),
        (p("precision"), c.precision),
        (p("recall"), c.recall),
        (p("f1"), c.f1),
    ])
}

fn hits_ks(m: &BTreeMap<String, f64>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = m
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("hits@").and_then(|n| n.parse().ok()).map(|n| (n, *v)))
        .collect();
    out.sort_by_key(|(k, _)| *k);
    out
}

fn is_probability(key: &str) -> bool {
    ["accuracy", "precision", "recall", "f1"]
        .iter()
        .any(|s| key.ends_with(s))
        || key.starts_with("hits@")
}

impl MetricsReport {
    /// Means are taken key by key over folds; every fold must carry the same keys.
    pub fn from_folds(task: &str, encoder: &str, seed: u64, folds: Vec<BTreeMap<String, f64>>) -> Result<Self> {
        let Some(first) = folds.first() else {
            return Err(Error::InvalidArgument("report needs at least one fold".into()));
        };
        if folds.iter().any(|f| f.keys().ne(first.keys())) {
            return Err(Error::InvalidArgument("folds report different metrics".into()));
        }
        let mean = first
            .keys()
            .map(|k| (k.clone(), mean(&folds.iter().map(|f| f[k]).collect::<Vec<_>>())))
            .collect();
        let report = Self {
            task: task.into(),
            encoder: encoder.into(),
            seed,
            folds,
            mean,
        };
        report.validate()?;
        Ok(report)
    }

    /// Hits@k non-decreasing in k, MRR in `[1/max_rank, 1]`, rates in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for m in self.folds.iter().chain(std::iter::once(&self.mean)) {
            let hits = hits_ks(m);
            if hits.windows(2).any(|w| w[1].1 < w[0].1) {
                return Err(Error::InvalidArgument(format!("{}: Hits@k decreases in k", self.task)));
            }
            if let Some(&mrr) = m.get("mrr") {
                let floor = m.get("max_rank").map_or(0.0, |r| 1.0 / r);
                if !(mrr > 0.0 && mrr >= floor - 1e-12 && mrr <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: MRR {mrr} outside [{floor}, 1]",
                        self.task
                    )));
                }
            }
            for (k, v) in m {
                if is_probability(k) && !(0.0..=1.0).contains(v) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: {k} = {v} outside [0, 1]",
                        self.task
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Plain-text table: one row per fold plus the mean.
    pub fn table(&self) -> String {
        let keys: Vec<&String> = self.mean.keys().collect();
        let width = keys.iter().map(|k| k.len()).max().unwrap_or(0).max(10);
        let mut out = format!("{} ({})\n{:<6}", self.task, self.encoder, "fold");
        for k in &keys {
            let _ = write!(out, " {k:>width$}");
        }
        out.push('\n');
        let rows = self.folds.iter().enumerate().map(|(i, f)| (format!("{}", i + 1), f));
        for (label, m) in rows.chain(std::iter::once(("mean".to_string(), &self.mean))) {
            let _ = write!(out, "{label:<6}");
            for k in &keys {
                let _ = write!(out, " {:>width$.4}", m[*k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Principal-component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[n][k]` coordinates of the centred inputs.
    pub coords: Vec<Vec<f64>>,
    /// `[k][d]` unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

/// PCA via the covariance eigendecomposition. Each direction is signed so
/// its largest-magnitude entry (the first on ties) is positive.
pub fn pca(vectors: &[Vec<f64>], k: usize) -> Result<Projection> {
    let n = vectors.len();
    let Some(d) = vectors.first().map(Vec::len) else {
        return Err(Error::InvalidArgument("no vectors to project".into()));
    };
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("vectors must share a positive dimension".into()));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "cannot project {d}-dim vectors onto {k} components"
        )));
    }
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let centre = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - centre[j]);
    let cov = (centred.transpose() * &centred) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, w)| centred[(i, j)] * w).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        variances: order[..k].iter().map(|&c| eig.eigenvalues[c]).collect(),
        components,
    })
}

/// Blue for the lowest value through red for the highest.
fn colour(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb([
        (255.0 * t) as u8,
        (80.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8,
        (255.0 * (1.0 - t)) as u8,
    ])
}

/// Writes `<stem>.csv` (x, y, value) and a `<stem>.png` scatter coloured by
/// value. Returns both paths.
pub fn export_embedding_report(vectors: &[Vec<f64>], values: &[f64], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if vectors.len() != values.len() {
        return Err(Error::InvalidArgument("one value per vector is required".into()));
    }
    let proj = pca(vectors, 2.min(vectors[0].len()))?;
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let csv_path = stem.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["x", "y", "value"]).map_err(|e| Error::Io(e.into()))?;
    for (c, v) in proj.coords.iter().zip(values) {
        let y = c.get(1).copied().unwrap_or(0.0);
        w.write_record([c[0].to_string(), y.to_string(), v.to_string()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;

    const SIZE: u32 = 480;
    const PAD: f64 = 20.0;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let bounds = |axis: usize| {
        let it = proj.coords.iter().map(|c| c.get(axis).copied().unwrap_or(0.0));
        let lo = it.clone().fold(f64::INFINITY, f64::min);
        let hi = it.fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (bounds(0), bounds(1));
    let vlo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let vhi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = SIZE as f64 - 2.0 * PAD;
    for (c, v) in proj.coords.iter().zip(values) {
        let px = PAD + (c[0] - x0) / xs * span;
        let py = SIZE as f64 - PAD - (c.get(1).copied().unwrap_or(0.0) - y0) / ys * span;
        let col = colour(if vhi > vlo { (v - vlo) / (vhi - vlo) } else { 0.5 });
        for dx in -2i64..=2 {
            for dy in -2i64..=2 {
                let (x, y) = (px as i64 + dx, py as i64 + dy);
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, col);
                }
            }
        }
    }
    let png_path = stem.with_extension("png");
    img.save(&png_path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok((csv_path, png_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..d).map(|j| 3.0 / (j as f64 + 1.0)).collect();
        (0..n)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0) + 0.3).collect())
            .collect()
    }

    /// Top eigenvectors by power iteration with deflation; independent of the
    /// library eigensolver.
    fn power_oracle(vectors: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
        let n = vectors.len();
        let d = vectors[0].len();
        let mu: Vec<f64> = (0..d)
            .map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![vec![0.0; d]; d];
        for v in vectors {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (v[a] - mu[a]) * (v[b] - mu[b]) / (n - 1) as f64;
                }
            }
        }
        let mut out = Vec::new();
        for _ in 0..k {
            let mut x: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.01).collect();
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let y: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a][b] * x[b]).sum()).collect();
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                lambda = norm;
                x = y.into_iter().map(|v| v / norm).collect();
            }
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] -= lambda * x[a] * x[b];
                }
            }
            out.push(x);
        }
        out
    }

    #[test]
    fn matches_power_iteration_oracle() {
        let v = cloud(1, 200, 6);
        let p = pca(&v, 2).unwrap();
        for (got, want) in p.components.iter().zip(power_oracle(&v, 2)) {
            let dot: f64 = got.iter().zip(&want).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-8, "{dot}");
        }
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn coordinates_are_centred_projections() {
        let v = cloud(2, 50, 4);
        let p = pca(&v, 2).unwrap();
        for axis in 0..2 {
            let m: f64 = p.coords.iter().map(|c| c[axis]).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-10);
            let var: f64 = p.coords.iter().map(|c| c[axis] * c[axis]).sum::<f64>() / 49.0;
            assert!((var - p.variances[axis]).abs() < 1e-8);
        }
    }

    #[test]
    fn export_writes_one_row_per_input_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let v = cloud(3, 30, 5);
        let values: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let (csv_a, png) = export_embedding_report(&v, &values, &dir.path().join("a")).unwrap();
        let (csv_b, _) = export_embedding_report(&v, &values, &dir.path().join("b")).unwrap();
        let text = std::fs::read_to_string(&csv_a).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert_eq!(text, std::fs::read_to_string(csv_b).unwrap());
        assert!(png.exists());
    }

    proptest! {
        #[test]
        fn sign_convention_is_fixed(seed in 0u64..500, flip in proptest::bool::ANY) {
            let v = cloud(seed, 20, 3);
            let p = pca(&v, 2).unwrap();
            for c in &p.components {
                let pivot = c.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
                prop_assert!(pivot > 0.0);
            }
            // Negation keeps the covariance, so directions must not change.
            let w: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|x| if flip { -x } else { *x }).collect()).collect();
            let q = pca(&w, 2).unwrap();
            for (a, b) in p.components.iter().zip(&q.components) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn report_invariants() {
        let fold = |h1: f64, h3: f64| {
            BTreeMap::from([
                ("hits@1".to_string(), h1),
                ("hits@3".to_string(), h3),
                ("mrr".to_string(), 0.5),
                ("max_rank".to_string(), 10.0),
            ])
        };
        let r = MetricsReport::from_folds("rca", "random", 1, vec![fold(0.2, 0.4), fold(0.4, 0.6)]).unwrap();
        assert!((r.mean["hits@1"] - 0.3).abs() < 1e-12);
        assert!(r.table().contains("mean"));
        assert!(MetricsReport::from_folds("rca", "random", 1, vec![fold(0.5, 0.4)]).is_err());
        let mut bad = fold(0.1, 0.2);
        bad.insert("mrr".into(), 0.05);
        assert!(MetricsReport::from_folds("rca", "random", 1, vec![bad]).is_err());
    }
}
