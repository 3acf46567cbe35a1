//! Contrastive objective and the triplet ordering audit.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math;
use crate::rng;
use crate::tensor::Tensor;

/// Above this many embeddings, triplet queries are reservoir-sampled.
pub const TRIPLET_EXACT_LIMIT: usize = 1000;
const TRIPLET_SAMPLE_SEED: u64 = 0x7269_706c;

fn log_softmax_positive_mean(scores: &[f64], positive: impl Fn(usize) -> bool, probs: &mut [f64]) -> (f64, usize) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &s) in probs.iter_mut().zip(scores) {
        *p = math::exp(s - max);
        z += *p;
    }
    let lz = math::ln(z) + max;
    let mut sum = 0.0;
    let mut count = 0;
    for (j, p) in probs.iter_mut().enumerate() {
        *p /= z;
        if positive(j) {
            sum += scores[j] - lz;
            count += 1;
        }
    }
    (-sum / count.max(1) as f64, count)
}

/// Symmetric multi-positive InfoNCE over `a: [Na, d]`, `b: [Nb, d]` and
/// its gradients with respect to both inputs.
///
/// With `S = a b^T / tau`, row `i` contributes the mean negative
/// log-softmax of `S_i.` over its positives, column `j` likewise over
/// `S_.j`; the loss is the average of the row mean and the column mean.
pub fn info_nce_with_grad(
    a: &Tensor,
    b: &Tensor,
    labels_a: &[u64],
    labels_b: &[u64],
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let (na, nb, d) = (a.rows(), b.rows(), a.cols());
    if b.cols() != d {
        return Err(Error::DimMismatch { expected: d, got: b.cols() });
    }
    if labels_a.len() != na || labels_b.len() != nb {
        return Err(Error::ShapeMismatch("one label per embedding row is required".into()));
    }
    if na == 0 || nb == 0 {
        return Err(Error::EmptyInput);
    }
    let mut s = vec![0.0; na * nb];
    for i in 0..na {
        for j in 0..nb {
            s[i * nb + j] = math::dot(a.row(i), b.row(j)) / tau;
        }
    }
    // dL/dS
    let mut gs = vec![0.0; na * nb];
    let mut row_loss = 0.0;
    let mut probs = vec![0.0; nb.max(na)];
    for i in 0..na {
        let (l, count) = log_softmax_positive_mean(&s[i * nb..(i + 1) * nb], |j| labels_b[j] == labels_a[i], &mut probs[..nb]);
        if count == 0 {
            return Err(Error::NoPositive(i));
        }
        row_loss += l;
        for j in 0..nb {
            let y = if labels_b[j] == labels_a[i] { 1.0 / count as f64 } else { 0.0 };
            gs[i * nb + j] += 0.5 * (probs[j] - y) / na as f64;
        }
    }
    let mut col_loss = 0.0;
    let mut col = vec![0.0; na];
    for j in 0..nb {
        for i in 0..na {
            col[i] = s[i * nb + j];
        }
        let (l, count) = log_softmax_positive_mean(&col, |i| labels_a[i] == labels_b[j], &mut probs[..na]);
        if count == 0 {
            return Err(Error::NoPositive(j));
        }
        col_loss += l;
        for i in 0..na {
            let y = if labels_a[i] == labels_b[j] { 1.0 / count as f64 } else { 0.0 };
            gs[i * nb + j] += 0.5 * (probs[i] - y) / nb as f64;
        }
    }
    let loss = 0.5 * (row_loss / na as f64 + col_loss / nb as f64);
    for g in &mut gs {
        *g /= tau;
    }
    let mut grad_a = vec![0.0; na * d];
    math::matmul_acc(&gs, b.data(), &mut grad_a, na, nb, d);
    let mut grad_b = vec![0.0; nb * d];
    math::matmul_at_b_acc(&gs, a.data(), &mut grad_b, na, nb, d);
    Ok((loss.max(0.0), grad_a, grad_b))
}

/// InfoNCE between two views sharing one label list.
pub fn info_nce(a: &Tensor, b: &Tensor, labels: &[u64], tau: f64) -> Result<f64> {
    info_nce_with_grad(a, b, labels, labels, tau).map(|r| r.0)
}

/// Fraction of triplets `(q, g, n)` with `label(g) = label(q) != label(n)`
/// and `cos(q, g) > cos(q, n)`; ties are violations.
///
/// With `modality_tags`, positives must carry a different tag than the
/// query (cross-modal triplets only). Up to [`TRIPLET_EXACT_LIMIT`]
/// embeddings every triplet is enumerated; above it the queries are a fixed
/// seed reservoir sample of that size while positives and negatives still
/// range over all embeddings.
pub fn triplet_satisfaction(embeddings: &[Vec<f64>], labels: &[u64], modality_tags: Option<&[u8]>) -> Result<f64> {
    let n = embeddings.len();
    if labels.len() != n || modality_tags.is_some_and(|t| t.len() != n) {
        return Err(Error::ShapeMismatch("labels and tags must match the embeddings".into()));
    }
    let mut distinct: Vec<u64> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientClasses);
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| math::norm(e)).collect();
    let cos = |i: usize, j: usize| {
        let d = norms[i] * norms[j];
        if d == 0.0 {
            0.0
        } else {
            math::dot(&embeddings[i], &embeddings[j]) / d
        }
    };
    let queries: Vec<usize> = if n <= TRIPLET_EXACT_LIMIT {
        (0..n).collect()
    } else {
        let mut r = rng::stream(TRIPLET_SAMPLE_SEED, &[n as u64]);
        let mut res: Vec<usize> = (0..TRIPLET_EXACT_LIMIT).collect();
        for i in TRIPLET_EXACT_LIMIT..n {
            let j = r.gen_range(0..=i);
            if j < TRIPLET_EXACT_LIMIT {
                res[j] = i;
            }
        }
        res.sort_unstable();
        res
    };
    let (mut good, mut total) = (0u64, 0u64);
    let mut neg = Vec::with_capacity(n);
    for &q in &queries {
        neg.clear();
        neg.extend((0..n).filter(|&j| labels[j] != labels[q]).map(|j| cos(q, j)));
        neg.sort_by(f64::total_cmp);
        for g in 0..n {
            if g == q || labels[g] != labels[q] {
                continue;
            }
            if let Some(tags) = modality_tags {
                if tags[g] == tags[q] {
                    continue;
                }
            }
            let s = cos(q, g);
            good += neg.partition_point(|&x| x < s) as u64;
            total += neg.len() as u64;
        }
    }
    if total == 0 {
        return Err(Error::InsufficientClasses);
    }
    Ok(good as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_vec(&[rows.len(), rows[0].len()], rows.iter().flat_map(|r| r.to_vec()).collect())
    }

    #[test]
    fn orthonormal_pair_value() {
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = info_nce(&a, &a, &[0, 1], 1.0).unwrap();
        let expected = libm::log(1.0 + libm::exp(-1.0));
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_embeddings_give_log_b() {
        for b in [2usize, 4, 8] {
            let rows = [0.6, 0.8].repeat(b);
            let a = Tensor::from_vec(&[b, 2], rows);
            let labels: Vec<u64> = (0..b as u64).collect();
            let l = info_nce(&a, &a, &labels, 1.0).unwrap();
            assert!((l - libm::log(b as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_positive_is_reported() {
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(info_nce_with_grad(&a, &a, &[0, 1], &[0, 2], 1.0).unwrap_err(), Error::NoPositive(1));
    }

    #[test]
    fn gradient_matches_differences() {
        let a = t(&[&[0.3, -0.2, 0.9], &[0.5, 0.5, -0.1], &[-0.7, 0.1, 0.2]]);
        let b = t(&[&[0.1, 0.4, 0.3], &[0.2, -0.6, 0.8], &[0.9, 0.0, -0.3], &[0.0, 0.3, 0.3]]);
        let (la, lb) = ([1u64, 2, 1], [2u64, 1, 1, 2]);
        let (_, ga, gb) = info_nce_with_grad(&a, &b, &la, &lb, 0.3).unwrap();
        let eps = 1e-6;
        let f = |a: &Tensor, b: &Tensor| info_nce_with_grad(a, b, &la, &lb, 0.3).unwrap().0;
        for i in 0..a.numel() {
            let (mut p, mut m) = (a.clone(), a.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            assert!(((f(&p, &b) - f(&m, &b)) / (2.0 * eps) - ga[i]).abs() < 1e-7);
        }
        for i in 0..b.numel() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            assert!(((f(&a, &p) - f(&a, &m)) / (2.0 * eps) - gb[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn triplet_examples() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(triplet_satisfaction(&e, &[0, 0, 1, 1], None).unwrap(), 1.0);
        let same = vec![vec![0.5, 0.5]; 4];
        assert_eq!(triplet_satisfaction(&same, &[0, 0, 1, 1], None).unwrap(), 0.0);
        assert_eq!(triplet_satisfaction(&same, &[3, 3, 3, 3], None), Err(Error::InsufficientClasses));
    }

    #[test]
    fn single_triplet_from_cosines() {
        let q = vec![1.0, 0.0, 0.0];
        let g = vec![0.9, libm::sqrt(1.0 - 0.81), 0.0];
        let n = vec![0.1, 0.0, libm::sqrt(1.0 - 0.01)];
        // only q's triplet counts: the other two have no valid pairing of labels
        let frac = triplet_satisfaction(&[q, g, n], &[0, 0, 1], Some(&[0, 1, 2])).unwrap();
        // q->(g, n): 0.9 > 0.1; g->(q, n): cos(g,q)=0.9 > cos(g,n)=0.09
        assert_eq!(frac, 1.0);
    }
}
