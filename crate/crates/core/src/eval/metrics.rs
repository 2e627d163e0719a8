use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::seed;

/// Mean per-frame cosine similarity between two equally shaped sequences.
pub fn semantic_retention(a: &FrameMatrix, b: &FrameMatrix) -> Result<f64> {
    if a.frames() != b.frames() || a.dim() != b.dim() {
        return Err(Error::data(format!(
            "retention needs equal shapes, got {}x{} and {}x{}",
            a.frames(),
            a.dim(),
            b.frames(),
            b.dim()
        )));
    }
    if a.frames() == 0 {
        return Err(Error::data("retention of empty sequences"));
    }
    let mut total = 0.0;
    for (t, (ra, rb)) in a.rows().zip(b.rows()).enumerate() {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&x, &y) in ra.iter().zip(rb) {
            let (x, y) = (f64::from(x), f64::from(y));
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::numeric(format!("zero-norm frame {t} in retention")));
        }
        total += (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    }
    Ok(total / a.frames() as f64)
}

/// Mean-pools each run of identical labels into one vector.
pub fn segment_pool(frames: &FrameMatrix, classes: &[usize]) -> Result<Vec<(Vec<f64>, usize)>> {
    let n = frames.frames().min(classes.len());
    if n == 0 {
        return Err(Error::data("nothing to pool"));
    }
    if frames.frames().abs_diff(classes.len()) > 2 {
        return Err(Error::data(format!(
            "{} frames against {} labels",
            frames.frames(),
            classes.len()
        )));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=n {
        if t == n || classes[t] != classes[start] {
            out.push((frames.mean_pool(start, t), classes[start]));
            start = t;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
}

/// Fraction of items held out by [`linear_probe`].
pub const PROBE_TEST_FRACTION: f64 = 0.3;
const PROBE_L2: f64 = 1e-3;
const PROBE_MAX_ITERS: usize = 3000;

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s = row.sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter().map(|r| r.transpose().argmax().0).collect()
}

/// Multinomial logistic regression on standardized features, trained by
/// accelerated gradient descent with a step from the curvature bound.
/// Returns held-out accuracy on a seeded split.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ProbeOutcome> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::data("probe needs one label per feature vector"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::data("probe needs at least two classes"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::data("probe features differ in width"));
    }
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_test = ((features.len() as f64 * PROBE_TEST_FRACTION).round() as usize).clamp(1, features.len() - 1);
    let (test, train) = idx.split_at(n_test);

    let build = |ids: &[usize]| DMatrix::from_fn(ids.len(), d, |r, c| features[ids[r]][c]);
    let mut xtr = build(train);
    let mut xte = build(test);
    for c in 0..d {
        let col = xtr.column(c);
        let mean = col.mean();
        let sd = (col.map(|v| (v - mean).powi(2)).sum() / col.len() as f64).sqrt().max(1e-12);
        xtr.column_mut(c).iter_mut().for_each(|v| *v = (*v - mean) / sd);
        xte.column_mut(c).iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    let add_bias = |x: DMatrix<f64>| x.insert_column(d, 1.0);
    let (xtr, xte) = (add_bias(xtr), add_bias(xte));
    let n = train.len() as f64;
    let mut y = DMatrix::zeros(train.len(), k);
    for (r, &i) in train.iter().enumerate() {
        y[(r, labels[i])] = 1.0;
    }

    // Softmax cross-entropy curvature is at most half the largest eigenvalue
    // of X^T X / n.
    let gram = xtr.transpose() * &xtr / n;
    let mut v = DMatrix::from_element(d + 1, 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = &gram * &v;
        lambda = w.norm() / v.norm();
        v = w.normalize();
    }
    let step = 1.0 / (0.5 * lambda + PROBE_L2);

    let grad = |w: &DMatrix<f64>| {
        let p = softmax_rows(&(&xtr * w));
        xtr.transpose() * (p - &y) / n + w * PROBE_L2
    };
    let mut w = DMatrix::zeros(d + 1, k);
    let mut prev = w.clone();
    for it in 0..PROBE_MAX_ITERS {
        let momentum = it as f64 / (it as f64 + 3.0);
        let look = &w + (&w - &prev) * momentum;
        let g = grad(&look);
        prev = w;
        w = look - g.clone() * step;
        if g.norm() < 1e-7 {
            break;
        }
    }
    let acc = |x: &DMatrix<f64>, ids: &[usize]| {
        let pred = argmax_rows(&(x * &w));
        pred.iter().zip(ids).filter(|(p, &i)| **p == labels[i]).count() as f64 / ids.len() as f64
    };
    Ok(ProbeOutcome {
        accuracy: acc(&xte, test),
        train_accuracy: acc(&xtr, train),
        n_train: train.len(),
        n_test: test.len(),
        classes: distinct,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. A point whose
/// intra- and nearest-cluster distances are both zero scores 0; input where
/// every point does so (all points identical) is a data error.
pub fn silhouette(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if vectors.len() != labels.len() {
        return Err(Error::data("silhouette needs one label per vector"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::data("silhouette needs at least two classes"));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::data(format!("class {l} has fewer than two members")));
    }
    let mut total = 0.0;
    let mut degenerate = 0;
    for (i, vi) in vectors.iter().enumerate() {
        let mut sums = std::collections::BTreeMap::new();
        for (j, vj) in vectors.iter().enumerate() {
            if i != j {
                *sums.entry(labels[j]).or_insert(0.0) += dist(vi, vj);
            }
        }
        let own = labels[i];
        let a = sums.get(&own).copied().unwrap_or(0.0) / (counts[&own] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != own)
            .map(|(l, s)| s / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 {
            degenerate += 1;
        } else {
            total += (b - a) / m;
        }
    }
    if degenerate == vectors.len() {
        return Err(Error::data("all points coincide; silhouette undefined"));
    }
    Ok(total / vectors.len() as f64)
}

/// First two principal components of a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2d {
    pub coords: Vec<[f64; 2]>,
    /// Unit loading vectors; the largest-magnitude entry of each is positive.
    pub components: [Vec<f64>; 2],
    /// Variance along each component (population normalization).
    pub variance: [f64; 2],
}

/// PCA projection onto two dimensions via the SVD of the centred data.
/// Missing components (rank below two) come out as zeros.
pub fn embed_2d(vectors: &[Vec<f64>]) -> Result<Embedding2d> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::data(format!("embedding needs at least 3 points, got {n}")));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::data("embedding inputs differ in width"));
    }
    let mut x = DMatrix::from_fn(n, d, |r, c| vectors[r][c]);
    for c in 0..d {
        let m = x.column(c).mean();
        x.column_mut(c).iter_mut().for_each(|v| *v -= m);
    }
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::internal("SVD did not return right vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut variance = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let sv = svd.singular_values[k];
        // Directions with no spread are left at zero.
        if sv <= 1e-12 * svd.singular_values[order[0]].max(1e-300) {
            continue;
        }
        let mut c: Vec<f64> = vt.row(k).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        variance[slot] = sv * sv / n as f64;
        components[slot] = c;
    }
    let coords = (0..n)
        .map(|r| {
            let row = x.row(r);
            let p = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Embedding2d {
        coords,
        components,
        variance,
    })
}

/// Plot data, one `id x y label` line per point.
pub fn plot_data(ids: &[String], e: &Embedding2d, labels: &[usize]) -> String {
    ids.iter()
        .zip(&e.coords)
        .zip(labels)
        .map(|((id, [x, y]), l)| format!("{id} {x:.9} {y:.9} {l}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fm(rows: &[Vec<f32>]) -> FrameMatrix {
        FrameMatrix::from_rows(rows, 50).unwrap()
    }

    #[test]
    fn retention_identities() {
        let a = fm(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let neg = fm(&[vec![-1.0, -2.0], vec![3.0, -0.5]]);
        assert!((semantic_retention(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((semantic_retention(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let z = fm(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert!(matches!(semantic_retention(&a, &z), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn retention_matches_loop_and_is_symmetric(v in prop::collection::vec(0.1f32..2.0, 12), w in prop::collection::vec(-2.0f32..2.0, 12)) {
            let a = fm(&v.chunks(3).map(<[f32]>::to_vec).collect::<Vec<_>>());
            let b = fm(&w.iter().map(|x| x + 2.5).collect::<Vec<_>>().chunks(3).map(<[f32]>::to_vec).collect::<Vec<_>>());
            let mut oracle = 0.0;
            for t in 0..4 {
                let (ra, rb) = (a.row(t), b.row(t));
                let dot: f64 = (0..3).map(|i| f64::from(ra[i]) * f64::from(rb[i])).sum();
                let na: f64 = (0..3).map(|i| f64::from(ra[i]).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = (0..3).map(|i| f64::from(rb[i]).powi(2)).sum::<f64>().sqrt();
                oracle += dot / na / nb / 4.0;
            }
            let r = semantic_retention(&a, &b).unwrap();
            prop_assert!((r - oracle).abs() <= 1e-6 * oracle.abs().max(1e-12));
            prop_assert_eq!(r, semantic_retention(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn segment_pooling_follows_label_runs() {
        let m = fm(&[vec![1.0], vec![3.0], vec![10.0], vec![4.0]]);
        let p = segment_pool(&m, &[0, 0, 2, 0]).unwrap();
        assert_eq!(p, vec![(vec![2.0], 0), (vec![10.0], 2), (vec![4.0], 0)]);
    }

    #[test]
    fn separable_probe_is_perfect() {
        let mut rng = seed::rng(1);
        let (mut f, mut l) = (Vec::new(), Vec::new());
        for i in 0..120 {
            let c = i % 2;
            let off = if c == 0 { -3.0 } else { 3.0 };
            f.push(vec![off + rng.random_range(-1.0..1.0), rng.random_range(-5.0..5.0)]);
            l.push(c);
        }
        assert_eq!(linear_probe(&f, &l, 0).unwrap().accuracy, 1.0);
        assert!(matches!(linear_probe(&f, &vec![1; 120], 0), Err(Error::Data(_))));
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = seed::rng(2);
        let n = 600;
        let k = 4;
        let f: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let mut l: Vec<usize> = (0..n).map(|i| i % k).collect();
        l.shuffle(&mut rng);
        let out = linear_probe(&f, &l, 3).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / out.n_test as f64).sqrt();
        assert!((out.accuracy - p).abs() <= 3.0 * sigma, "accuracy {}", out.accuracy);
    }

    #[test]
    fn silhouette_cases() {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..20 {
            let c = i % 2;
            f.push(vec![c as f64 * 100.0 + (i as f64) * 0.01, 0.0]);
            l.push(c);
        }
        assert!(silhouette(&f, &l).unwrap() >= 0.9);
        assert!(matches!(silhouette(&vec![vec![1.0, 1.0]; 6], &[0, 0, 0, 1, 1, 1]), Err(Error::Data(_))));
        assert!(matches!(silhouette(&f[..3], &[0, 1, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn silhouette_of_random_labels_is_near_zero() {
        for s in 0..10 {
            let mut rng = seed::rng(100 + s);
            let f: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let l: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
            assert!(silhouette(&f, &l).unwrap().abs() <= 0.05);
        }
    }

    /// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i][i]).collect(), v)
    }

    fn pca_oracle(x: &[Vec<f64>]) -> ([Vec<f64>; 2], [f64; 2]) {
        let n = x.len();
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n as f64).collect())
            .collect();
        let (vals, vecs) = jacobi_eigen(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let pick = |k: usize| {
            let mut c: Vec<f64> = (0..d).map(|r| vecs[r][k]).collect();
            let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        };
        ([pick(order[0]), pick(order[1])], [vals[order[0]], vals[order[1]]])
    }

    #[test]
    fn pca_matches_covariance_eigenvectors() {
        let mut rng = seed::rng(7);
        let scales = [5.0, 2.0, 1.0, 0.3, 0.1];
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| scales.iter().map(|s| { let z: f64 = StandardNormal.sample(&mut rng); s * z }).collect::<Vec<f64>>())
            .map(|r| vec![r[0] + r[1], r[0] - r[1], r[2], r[3] + 0.5 * r[0], r[4]])
            .collect();
        let e = embed_2d(&x).unwrap();
        let (comps, vars) = pca_oracle(&x);
        for k in 0..2 {
            for (a, b) in e.components[k].iter().zip(&comps[k]) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((e.variance[k] - vars[k]).abs() < 1e-6 * vars[k]);
        }
        assert!(e.variance[0] >= e.variance[1]);
    }

    #[test]
    fn planar_points_reconstruct_exactly_and_order_does_not_matter() {
        let x: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let (a, b) = (i as f64, ((i * 7) % 5) as f64);
                vec![a + b, 2.0 * a - b, 0.5 * b, 1.0]
            })
            .collect();
        let e = embed_2d(&x).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / 10.0).collect();
        for (r, [p, q]) in x.iter().zip(&e.coords) {
            for c in 0..4 {
                let rec = mean[c] + p * e.components[0][c] + q * e.components[1][c];
                assert!((rec - r[c]).abs() < 1e-9);
            }
        }
        let mut rev = x.clone();
        rev.reverse();
        let er = embed_2d(&rev).unwrap();
        for (a, b) in e.coords.iter().zip(er.coords.iter().rev()) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_one_input_has_zero_second_component() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let e = embed_2d(&x).unwrap();
        assert!(e.coords.iter().all(|c| c[1] == 0.0));
        assert!(matches!(embed_2d(&x[..2]), Err(Error::Data(_))));
    }
}
