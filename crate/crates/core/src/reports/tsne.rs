//! Two-dimensional t-SNE exports of NP embeddings and their type vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::OpenKg;
use crate::error::{Error, Result};
use crate::model::{rng_stream, OkgitModel, Stream};

pub const TSNE_ITERATIONS: usize = 2000;
pub const TSNE_PERPLEXITY: f64 = 15.0;
/// NPs noted per category while scanning the shuffled list.
pub const SCAN_PER_CATEGORY: usize = 15;
/// NPs kept per category for the plot.
pub const PICK_PER_CATEGORY: usize = 5;

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the initial momentum.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: TSNE_PERPLEXITY,
            iterations: TSNE_ITERATIONS,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional affinities `p_{j|i}` whose entropy matches `ln(perplexity)`,
/// found by bisection on the Gaussian precision of each row.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-d[[i, j]] * beta).exp() };
                sum += row[j];
                weighted += d[[i, j]] * row[j];
            }
            let sum = sum.max(f64::MIN_POSITIVE);
            let entropy = sum.ln() + beta * weighted / sum;
            row.iter_mut().for_each(|v| *v /= sum);
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        p.row_mut(i).iter_mut().zip(&row).for_each(|(a, &b)| *a = b);
    }
    p
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: ArrayView2<f64>, opts: &TsneOptions) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("t-SNE needs at least 2 points, got {n}")));
    }
    if !(opts.perplexity > 0.0) || opts.perplexity >= n as f64 {
        return Err(Error::Invalid(format!(
            "perplexity {} needs more than {} points, got {n}; lower the perplexity or annotate more NPs",
            opts.perplexity, opts.perplexity
        )));
    }
    let cond = conditional_affinities(&squared_distances(x), opts.perplexity);
    let mut p = &cond + &cond.t();
    let total = p.sum();
    p.mapv_inplace(|v| (v / total).max(1e-12) * opts.early_exaggeration);

    let mut rng = rng_stream(opts.seed, Stream::Baseline);
    let normal = Normal::new(0.0, 1e-4).expect("finite scale");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    for it in 0..opts.iterations {
        if it == opts.exaggeration_iterations {
            p.mapv_inplace(|v| v / opts.early_exaggeration);
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let (dx, dy) = (y[[i, 0]] - y[[j, 0]], y[[i, 1]] - y[[j, 1]]);
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[[i, j]] = v;
                sum += v;
            }
        }
        let momentum = if it < opts.exaggeration_iterations {
            opts.initial_momentum
        } else {
            opts.final_momentum
        };
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                let q = (num[[i, j]] / sum).max(1e-12);
                let w = 4.0 * (p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += w * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += w * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
            *gain = gain.max(0.01);
            *u = momentum * *u - opts.learning_rate * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("nonempty");
        y -= &mean;
    }
    Ok(y)
}

/// Mean silhouette coefficient of `points` under `labels` (Euclidean).
/// Points alone in their label score 0.
pub fn silhouette_score(points: ArrayView2<f64>, labels: &[String]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} points", labels.len())));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    if groups.len() < 2 || groups.len() >= n {
        return Err(Error::Invalid(format!(
            "silhouette needs 2 to {} distinct labels, got {}",
            n.saturating_sub(1),
            groups.len()
        )));
    }
    let dist = squared_distances(points).mapv(f64::sqrt);
    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[labels[i].as_str()];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().map(|&j| dist[[i, j]]).sum::<f64>() / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, m)| m.iter().map(|&j| dist[[i, j]]).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Which vectors to project.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// NP encodings `t`.
    Np,
    /// Projected type vectors `P t`.
    Type,
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "np" => Ok(Space::Np),
            "type" => Ok(Space::Type),
            other => Err(Error::Config(format!("unknown space `{other}` (expected np or type)"))),
        }
    }
}

/// One NP with its category label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub np: u32,
    pub label: String,
}

/// Parses `np<TAB>label` lines, resolving each NP phrase against `kg`.
pub fn parse_annotations(kg: &OpenKg, text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (np, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Invalid(format!("annotation line {}: expected `np<TAB>label`", i + 1)))?;
        out.push(Annotation {
            np: super::dump::resolve_phrase(&kg.nps, np)?,
            label: label.trim().to_string(),
        });
    }
    Ok(out)
}

/// Every NP id in a seeded random order, the list scanned by annotators.
pub fn shuffled_nps(kg: &OpenKg, seed: u64) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..kg.num_nps() as u32).collect();
    ids.shuffle(&mut rng_stream(seed, Stream::Baseline));
    ids
}

/// Keeps the first `scan` annotations of each label in file order, then
/// samples `pick` of them per label. Labels appear in order of first
/// occurrence and sampled NPs in scan order.
pub fn select_annotated(annotations: &[Annotation], scan: usize, pick: usize, seed: u64) -> Vec<Annotation> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in annotations {
        let g = groups.entry(a.label.as_str()).or_insert_with(|| {
            order.push(a.label.as_str());
            Vec::new()
        });
        if g.len() < scan {
            g.push(a);
        }
    }
    let mut rng = rng_stream(seed, Stream::Baseline);
    let mut out = Vec::new();
    for label in order {
        let g = &groups[label];
        let mut chosen: Vec<usize> = (0..g.len()).collect::<Vec<_>>().choose_multiple(&mut rng, pick.min(g.len())).copied().collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| g[i].clone()));
    }
    out
}

/// A projected NP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsnePoint {
    pub id: u32,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Vectors of the annotated NPs in `space`.
pub fn space_vectors(model: &OkgitModel, annotated: &[Annotation], space: Space) -> Result<Array2<f64>> {
    let all = match space {
        Space::Np => model.np_encodings(),
        Space::Type => model.np_type_vectors()?,
    };
    let ids: Vec<usize> = annotated
        .iter()
        .map(|a| {
            if (a.np as usize) < all.nrows() {
                Ok(a.np as usize)
            } else {
                Err(Error::Invalid(format!("NP id {} out of range", a.np)))
            }
        })
        .collect::<Result<_>>()?;
    Ok(all.select(Axis(0), &ids))
}

/// t-SNE of the annotated NPs in `space`.
pub fn export_tsne(model: &OkgitModel, annotated: &[Annotation], space: Space, opts: &TsneOptions) -> Result<Vec<TsnePoint>> {
    if annotated.is_empty() {
        return Err(Error::Invalid("no annotated NPs to project".into()));
    }
    let y = tsne(space_vectors(model, annotated, space)?.view(), opts)?;
    Ok(annotated
        .iter()
        .zip(y.rows())
        .map(|(a, r)| TsnePoint {
            id: a.np,
            label: a.label.clone(),
            x: r[0],
            y: r[1],
        })
        .collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with header `id,label,x,y`.
pub fn tsne_csv(points: &[TsnePoint]) -> String {
    let mut out = String::from("id,label,x,y\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.id, csv_field(&p.label), p.x, p.y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn blobs() -> (Array2<f64>, Vec<String>) {
        let mut rng = rng_stream(4, Stream::Baseline);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let x = Array2::from_shape_fn((18, 5), |(i, j)| (if j == i % 3 { 5.0 } else { 0.0 }) + normal.sample(&mut rng));
        let labels = (0..18).map(|i| format!("c{}", i % 3)).collect();
        (x, labels)
    }

    #[test]
    fn affinity_rows_hit_the_target_perplexity() {
        let (x, _) = blobs();
        let p = conditional_affinities(&squared_distances(x.view()), 5.0);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            assert!((h.exp() - 5.0).abs() < 1e-3, "perplexity {}", h.exp());
        }
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (x, labels) = blobs();
        let opts = TsneOptions {
            perplexity: 5.0,
            iterations: 500,
            ..TsneOptions::default()
        };
        let y = tsne(x.view(), &opts).unwrap();
        assert!(silhouette_score(y.view(), &labels).unwrap() > 0.5);
        assert_eq!(y, tsne(x.view(), &opts).unwrap());
    }

    #[test]
    fn perplexity_must_be_below_point_count() {
        let x = Array2::zeros((15, 3));
        let err = tsne(x.view(), &TsneOptions::default()).unwrap_err();
        assert!(err.to_string().contains("lower the perplexity"), "{err}");
    }

    #[test]
    fn silhouette_hand_example() {
        // Two tight pairs 10 apart: a = 1, b ≈ 10 for every point.
        let x = array![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let s = silhouette_score(x.view(), &labels).unwrap();
        let per = [(10.5 - 1.0) / 10.5, (9.5 - 1.0) / 9.5, (9.5 - 1.0) / 9.5, (10.5 - 1.0) / 10.5];
        assert!((s - per.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn selection_scans_then_samples() {
        let ann: Vec<Annotation> = (0..40)
            .map(|i| Annotation {
                np: i,
                label: ["person", "location"][(i % 2) as usize].to_string(),
            })
            .collect();
        let picked = select_annotated(&ann, 15, 5, 9);
        assert_eq!(picked.len(), 10);
        assert!(picked[..5].iter().all(|a| a.label == "person" && a.np < 30));
        assert!(picked[5..].iter().all(|a| a.label == "location" && a.np < 30));
        assert_eq!(picked, select_annotated(&ann, 15, 5, 9));
    }

    #[test]
    fn csv_quotes_awkward_labels() {
        let p = TsnePoint {
            id: 3,
            label: "a,b".into(),
            x: 0.5,
            y: -1.0,
        };
        assert_eq!(tsne_csv(&[p]), "id,label,x,y\n3,\"a,b\",0.5,-1\n");
    }
}
