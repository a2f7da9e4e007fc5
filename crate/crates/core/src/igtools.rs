//! Embedding analysis: how well density clusters of a 2-D projection
//! explain categorical tags (information gain) or real targets (variance
//! reduction).

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Shannon entropy in bits of the empirical distribution of `tags`.
pub fn entropy<T: Ord>(tags: &[T]) -> Result<f64> {
    if tags.is_empty() {
        return Err(Error::InvalidInput("entropy of an empty multiset".into()));
    }
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for t in tags {
        *counts.entry(t).or_default() += 1;
    }
    let n = tags.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Reserved cluster id for points that belong to no dense cluster.
pub const OUTLIER: i64 = -1;

/// Cluster id per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition(Vec<i64>);

impl Partition {
    pub fn new(ids: Vec<i64>) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&c| c < OUTLIER) {
            return Err(Error::InvalidInput(format!("cluster id {bad} is below the outlier id")));
        }
        Ok(Self(ids))
    }

    pub fn single(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn singletons(n: usize) -> Self {
        Self((0..n as i64).collect())
    }

    pub fn ids(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Non-outlier clusters.
    pub fn num_clusters(&self) -> usize {
        let mut ids: Vec<i64> = self.0.iter().copied().filter(|&c| c != OUTLIER).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn outlier_fraction(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|&&c| c == OUTLIER).count() as f64 / self.0.len() as f64
    }

    /// Row indices per cluster, in ascending id order (outliers first when present).
    fn groups(&self) -> Vec<Vec<usize>> {
        let mut g: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.0.iter().enumerate() {
            g.entry(c).or_default().push(i);
        }
        g.into_values().collect()
    }

    fn covers(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.0.len() });
        }
        Ok(())
    }
}

/// Whether the outlier cluster takes part in clustered statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Outliers form one more cluster.
    #[default]
    Include,
    /// Outlier rows are dropped from both the base and clustered terms.
    Exclude,
}

fn restrict<'a, T>(items: &'a [T], part: &Partition, mode: OutlierMode) -> (Vec<&'a T>, Partition) {
    match mode {
        OutlierMode::Include => (items.iter().collect(), part.clone()),
        OutlierMode::Exclude => {
            let keep: Vec<usize> = (0..items.len()).filter(|&i| part.0[i] != OUTLIER).collect();
            (keep.iter().map(|&i| &items[i]).collect(), Partition(keep.iter().map(|&i| part.0[i]).collect()))
        }
    }
}

/// Size-weighted mean of within-cluster entropies.
pub fn clustered_entropy<T: Ord>(tags: &[T], part: &Partition) -> Result<f64> {
    part.covers(tags.len())?;
    if tags.is_empty() {
        return Err(Error::InvalidInput("entropy of an empty multiset".into()));
    }
    let n = tags.len() as f64;
    let mut h = 0.0;
    for g in part.groups() {
        let members: Vec<&T> = g.iter().map(|&i| &tags[i]).collect();
        h += g.len() as f64 / n * entropy(&members)?;
    }
    Ok(h)
}

/// `H(T) - H_C(P)`, in `[0, H(T)]`.
pub fn information_gain<T: Ord>(tags: &[T], part: &Partition) -> Result<f64> {
    let h = entropy(tags)?;
    let hc = clustered_entropy(tags, part)?;
    Ok((h - hc).max(0.0))
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReduction {
    pub base: f64,
    pub clustered: f64,
    pub reduction: f64,
}

/// Population variances; `reduction` is non-negative up to rounding.
pub fn variance_reduction(values: &[f64], part: &Partition) -> Result<VarianceReduction> {
    part.covers(values.len())?;
    if values.is_empty() {
        return Err(Error::InvalidInput("variance of an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("target values".into()));
    }
    let n = values.len() as f64;
    let base = population_variance(values);
    let clustered: f64 = part
        .groups()
        .iter()
        .map(|g| {
            let vs: Vec<f64> = g.iter().map(|&i| values[i]).collect();
            g.len() as f64 / n * population_variance(&vs)
        })
        .sum();
    Ok(VarianceReduction { base, clustered, reduction: base - clustered })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// Defaults to n / 12 when absent.
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) after every iteration, with exaggeration removed.
    pub kl: Vec<f64>,
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities of row `i` whose entropy matches `ln(perplexity)`.
fn row_affinities(d: &[f64], n: usize, i: usize, target: f64, out: &mut [f64]) {
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    let row = &d[i * n..(i + 1) * n];
    // shift by the nearest distance so exp never underflows everywhere
    let dmin = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
    for _ in 0..100 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            out[j] = if j == i { 0.0 } else { (-(row[j] - dmin) * beta).exp() };
            sum += out[j];
            weighted += out[j] * (row[j] - dmin);
        }
        let h = sum.ln() + beta * weighted / sum;
        for v in out.iter_mut() {
            *v /= sum;
        }
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
}

fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        row_affinities(&d, n, i, target, &mut cond[i * n..(i + 1) * n]);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

/// Exact t-SNE to two dimensions. Output is centered at the origin.
pub fn project_2d(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Projection> {
    let n = x.len();
    if !(cfg.perplexity > 0.0) || (n as f64) <= 3.0 * cfg.perplexity {
        return Err(Error::InvalidSpec(format!(
            "perplexity {} needs more than {} points, got {n}",
            cfg.perplexity,
            3.0 * cfg.perplexity
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("embedding rows differ in length".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let lr = cfg.learning_rate.unwrap_or(n as f64 / 12.0);
    let p = joint_affinities(x, cfg.perplexity);

    let mut r = rng::seeded(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-2 * r.sample::<f64, _>(StandardNormal), 1e-2 * r.sample::<f64, _>(StandardNormal)])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let exaggerating = it < cfg.exaggeration_iterations;
        let ex = if exaggerating { cfg.exaggeration } else { 1.0 };
        let momentum = if exaggerating { 0.5 } else { 0.8 };

        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / z).max(1e-12);
                kl += pij * (pij / qij).ln();
                let m = 4.0 * (ex * pij - qij) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = g;
        }
        kl_trace.push(kl);

        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(0.01);
                update[i][k] = momentum * update[i][k] - lr * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |a, v| (a.0 + v[0], a.1 + v[1]));
        for v in y.iter_mut() {
            v[0] -= mx / n as f64;
            v[1] -= my / n as f64;
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE diverged".into()));
    }
    Ok(Projection { coords: y, kl: kl_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub min_cluster_size: usize,
    /// Neighbors (self included) needed for a core point.
    pub min_samples: usize,
    /// Neighborhood radius; when absent, the 90th percentile of distances
    /// to each point's 10th nearest neighbor.
    pub radius: Option<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { min_cluster_size: 10, min_samples: 5, radius: None }
    }
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// 90th percentile of k-th nearest neighbor distances (self excluded).
pub fn auto_radius(coords: &[[f64; 2]], k: usize) -> f64 {
    let n = coords.len();
    if n < 2 {
        return 0.0;
    }
    let k = k.min(n - 1);
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(&coords[i], &coords[j])).collect();
            ds.sort_by(f64::total_cmp);
            ds[k - 1]
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let idx = ((0.9 * (n - 1) as f64).round() as usize).min(n - 1);
    kth[idx]
}

/// DBSCAN followed by dissolving clusters smaller than
/// `min_cluster_size` into the outlier cluster. Cluster ids are assigned
/// in order of each cluster's lowest row index.
pub fn density_cluster(coords: &[[f64; 2]], cfg: &ClusterConfig) -> Result<Partition> {
    let n = coords.len();
    if n < cfg.min_cluster_size.max(1) {
        return Ok(Partition(vec![OUTLIER; n]));
    }
    let eps = match cfg.radius {
        Some(r) if r.is_finite() && r >= 0.0 => r,
        Some(r) => return Err(Error::InvalidSpec(format!("radius {r} must be finite and non-negative"))),
        None => auto_radius(coords, 10),
    };
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| dist(&coords[i], &coords[j]) <= eps).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= cfg.min_samples).collect();

    let mut label = vec![OUTLIER; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != OUTLIER || !core[start] {
            continue;
        }
        label[start] = next;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if label[j] == OUTLIER {
                    label[j] = next;
                    if core[j] {
                        stack.push(j);
                    }
                }
            }
        }
        next += 1;
    }

    let mut sizes = vec![0usize; next as usize];
    for &c in &label {
        if c != OUTLIER {
            sizes[c as usize] += 1;
        }
    }
    let mut remap = BTreeMap::new();
    let mut ids = Vec::with_capacity(n);
    for &c in &label {
        if c == OUTLIER || sizes[c as usize] < cfg.min_cluster_size {
            ids.push(OUTLIER);
        } else {
            let fresh = remap.len() as i64;
            ids.push(*remap.entry(c).or_insert(fresh));
        }
    }
    Ok(Partition(ids))
}

/// Mean silhouette over points whose own cluster has another member.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if coords.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: coords.len(), got: labels.len() });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for i in 0..coords.len() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..coords.len() {
            if i != j {
                sums[labels[j]] += dist(&coords[i], &coords[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a: f64 = sums[own] / counts[own] as f64;
        let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidInput("silhouette needs two non-trivial clusters".into()));
    }
    Ok(total / counted as f64)
}

/// Embeddings with optional per-row tag and target.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub model: String,
    pub rows: Vec<Vec<f64>>,
    pub tags: Option<Vec<String>>,
    pub targets: Option<Vec<f64>>,
}

const BINARY_MAGIC: &[u8; 8] = b"RLEMBED1";

impl EmbeddingSet {
    pub fn new(model: impl Into<String>, rows: Vec<Vec<f64>>, tags: Option<Vec<String>>, targets: Option<Vec<f64>>) -> Result<Self> {
        let set = Self { model: model.into(), rows, tags, targets };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        let d = self.dim();
        if self.rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("embedding rows differ in length".into()));
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        if let Some(t) = &self.tags {
            if t.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: t.len() });
            }
        }
        if let Some(t) = &self.targets {
            if t.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: t.len() });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("targets".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// `tag,target,e0,...`; either of the first two fields may be empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.dim()).map(|i| format!("e{i}")).collect();
        writeln!(w, "tag,target,{}", cols.join(","))?;
        for (i, row) in self.rows.iter().enumerate() {
            let tag = self.tags.as_ref().map_or("", |t| t[i].as_str());
            let target = self.targets.as_ref().map_or(String::new(), |t| format!("{:?}", t[i]));
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{tag},{target},{}", vals.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, path: &Path, model: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() < 3 || fields[0] != "tag" || fields[1] != "target" {
            return Err(parse_err(1, "header must start with tag,target".into()));
        }
        let d = fields.len() - 2;
        let (mut rows, mut tags, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let line = line?;
            let lineno = k + 2;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 2 {
                return Err(parse_err(lineno, format!("expected {} fields, got {}", d + 2, f.len())));
            }
            tags.push((!f[0].is_empty()).then(|| f[0].to_string()));
            let target = if f[1].is_empty() {
                None
            } else {
                Some(f[1].parse::<f64>().map_err(|e| parse_err(lineno, format!("target: {e}")))?)
            };
            targets.push(target);
            let row = f[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(lineno, format!("embedding: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let tags = column(tags).map_err(|m| parse_err(0, format!("tag column {m}")))?;
        let targets = column(targets).map_err(|m| parse_err(0, format!("target column {m}")))?;
        Self::new(model, rows, tags, targets)
    }

    /// Header (magic, n, d, tag vocabulary, per-row tag indices, optional
    /// f64 targets) followed by row-major little-endian f32 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        let vocab: Vec<&String> = match &self.tags {
            Some(t) => {
                let mut v: Vec<&String> = t.iter().collect();
                v.sort();
                v.dedup();
                v
            }
            None => Vec::new(),
        };
        w.write_all(&(vocab.len() as u64).to_le_bytes())?;
        for tag in &vocab {
            w.write_all(&(tag.len() as u32).to_le_bytes())?;
            w.write_all(tag.as_bytes())?;
        }
        if let Some(t) = &self.tags {
            for tag in t {
                let idx = vocab.binary_search(&tag).expect("tag in vocabulary") as u32;
                w.write_all(&idx.to_le_bytes())?;
            }
        }
        w.write_all(&[self.targets.is_some() as u8])?;
        if let Some(t) = &self.targets {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.rows.iter().flatten() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, model: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("embedding file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let vocab_len = read_u64(&mut r)? as usize;
        let mut vocab = Vec::with_capacity(vocab_len.min(1 << 16));
        for _ in 0..vocab_len {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut buf)?;
            vocab.push(String::from_utf8(buf).map_err(|_| bad("tag is not UTF-8"))?);
        }
        let tags = if vocab_len > 0 {
            let mut t = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                let idx = u32::from_le_bytes(b) as usize;
                t.push(vocab.get(idx).ok_or_else(|| bad("tag index out of range"))?.clone());
            }
            Some(t)
        } else {
            None
        };
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let targets = match flag[0] {
            0 => None,
            1 => Some((0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<f64>>>()?),
            _ => return Err(bad("bad target flag")),
        };
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                row.push(f32::from_le_bytes(b) as f64);
            }
            rows.push(row);
        }
        Self::new(model, rows, tags, targets)
    }

    /// Picks the reader by extension: `.csv` or anything else as binary.
    /// The model name is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let model = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let file = std::fs::File::open(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::read_csv(std::io::BufReader::new(file), path, &model)
        } else {
            Self::read_binary(std::io::BufReader::new(file), &model)
        }
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// All present or all absent.
fn column<T>(vals: Vec<Option<T>>) -> std::result::Result<Option<Vec<T>>, &'static str> {
    if vals.iter().all(Option::is_none) {
        return Ok(None);
    }
    vals.into_iter().collect::<Option<Vec<T>>>().map(Some).ok_or("is only partly filled")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgTask {
    /// Real targets, scored by variance reduction.
    Movement,
    /// Tags, scored by information gain.
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tsne: TsneConfig,
    pub cluster: ClusterConfig,
    pub outliers: OutlierMode,
}

/// Scores under one outlier mode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IgScores {
    pub base_entropy: Option<f64>,
    pub clustered_entropy: Option<f64>,
    pub information_gain: Option<f64>,
    pub base_variance: Option<f64>,
    pub clustered_variance: Option<f64>,
    pub variance_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgReport {
    pub model: String,
    pub task: IgTask,
    pub n: usize,
    pub clusters: usize,
    pub outlier_fraction: f64,
    /// Scores under the configured outlier mode.
    #[serde(flatten)]
    pub scores: IgScores,
    /// Scores under the other mode.
    pub alternate: IgScores,
    pub outliers: OutlierMode,
}

/// Scores for a given partition; exposed so callers can bypass projection.
pub fn score_partition(set: &EmbeddingSet, task: IgTask, part: &Partition, mode: OutlierMode) -> Result<IgScores> {
    part.covers(set.len())?;
    let mut s = IgScores::default();
    match task {
        IgTask::Categorical => {
            let tags = set.tags.as_ref().ok_or_else(|| Error::InvalidInput("categorical task needs tags".into()))?;
            let (t, p) = restrict(tags, part, mode);
            if t.is_empty() {
                return Ok(s);
            }
            let h = entropy(&t)?;
            let hc = clustered_entropy(&t, &p)?;
            s.base_entropy = Some(h);
            s.clustered_entropy = Some(hc);
            s.information_gain = Some((h - hc).max(0.0));
        }
        IgTask::Movement => {
            let targets = set.targets.as_ref().ok_or_else(|| Error::InvalidInput("movement task needs targets".into()))?;
            let (t, p) = restrict(targets, part, mode);
            if t.is_empty() {
                return Ok(s);
            }
            let vals: Vec<f64> = t.into_iter().copied().collect();
            let vr = variance_reduction(&vals, &p)?;
            s.base_variance = Some(vr.base);
            s.clustered_variance = Some(vr.clustered);
            s.variance_reduction = Some(vr.reduction);
        }
    }
    Ok(s)
}

/// Projection, clustering and scoring in one pass.
pub fn ig_report(set: &EmbeddingSet, task: IgTask, cfg: &PipelineConfig) -> Result<IgReport> {
    set.validate()?;
    match task {
        IgTask::Categorical if set.tags.is_none() => {
            return Err(Error::InvalidInput("categorical task needs tags".into()))
        }
        IgTask::Movement if set.targets.is_none() => {
            return Err(Error::InvalidInput("movement task needs targets".into()))
        }
        _ => {}
    }
    let proj = project_2d(&set.rows, &cfg.tsne)?;
    let part = density_cluster(&proj.coords, &cfg.cluster)?;
    let other = match cfg.outliers {
        OutlierMode::Include => OutlierMode::Exclude,
        OutlierMode::Exclude => OutlierMode::Include,
    };
    Ok(IgReport {
        model: set.model.clone(),
        task,
        n: set.len(),
        clusters: part.num_clusters(),
        outlier_fraction: part.outlier_fraction(),
        scores: score_partition(set, task, &part, cfg.outliers)?,
        alternate: score_partition(set, task, &part, other)?,
        outliers: cfg.outliers,
    })
}
