//! Embedding-space diagnostics: anisotropy (mean pairwise cosine) and
//! mutual-kNN kernel alignment between paired feature sets.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::toymodel::{Inputs, LoraAdapter, ToyModel};

/// Row embeddings of one modality with unique identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub modality: String,
    pub ids: Vec<u64>,
    pub vectors: Matrix,
}

impl EmbeddingSet {
    pub fn new(modality: &str, ids: Vec<u64>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(shape(format!("{} ids for {} vectors", ids.len(), vectors.rows())));
        }
        let unique: BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(invalid("embedding ids are not unique"));
        }
        Ok(Self { modality: modality.to_string(), ids, vectors })
    }

    /// Ids `0..n`.
    pub fn from_matrix(modality: &str, vectors: Matrix) -> Self {
        let ids = (0..vectors.rows() as u64).collect();
        Self { modality: modality.to_string(), ids, vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

fn unit_rows(m: &Matrix, what: &str) -> Result<Matrix> {
    m.normalize_rows().map_err(|e| match e {
        Error::ZeroNorm(row) => Error::ZeroNorm(format!("{what}: {row}")),
        other => other,
    })
}

/// Mean cosine similarity over all unordered pairs.
pub fn anisotropy(set: &EmbeddingSet) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(invalid("anisotropy needs at least 2 embeddings"));
    }
    let u = unit_rows(&set.vectors, &set.modality)?;
    let mut sum = 0.0;
    for i in 0..n {
        let ui = u.row(i);
        let mut row_sum = 0.0;
        for j in i + 1..n {
            row_sum += dot(ui, u.row(j));
        }
        sum += row_sum;
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((sum / pairs).clamp(-1.0, 1.0))
}

/// Same quantity via `(‖Σ ûᵢ‖² − n) / (n(n−1))`, linear in `n`.
pub fn anisotropy_streaming(set: &EmbeddingSet) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(invalid("anisotropy needs at least 2 embeddings"));
    }
    let u = unit_rows(&set.vectors, &set.modality)?;
    let total = u.col_sums();
    let self_sum: f64 = u.row_iter().map(|r| dot(r, r)).sum();
    let cross = dot(&total, &total) - self_sum;
    Ok((cross / (n * (n - 1)) as f64).clamp(-1.0, 1.0))
}

/// Indices of the `k` nearest rows to each row by cosine distance,
/// excluding the row itself. Ties go to the lower index.
pub fn knn_sets(vectors: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = vectors.rows();
    if k == 0 || k >= n {
        return Err(invalid(format!("k = {k} out of range for {n} points")));
    }
    let u = unit_rows(vectors, "knn input")?;
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        let ui = u.row(i);
        for j in (0..n).filter(|&j| j != i) {
            order.push((1.0 - dot(ui, u.row(j)), j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        order.select_nth_unstable_by(k - 1, cmp);
        let mut top: Vec<(f64, usize)> = order[..k].to_vec();
        top.sort_by(cmp);
        out.push(top.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// Mean over rows of `|S(φᵢ) ∩ S(ψᵢ)| / k`, where row `i` of `phi` is paired
/// with row `i` of `psi`.
pub fn mutual_knn(phi: &EmbeddingSet, psi: &EmbeddingSet, k: usize) -> Result<f64> {
    mutual_knn_matrices(&phi.vectors, &psi.vectors, k)
}

pub fn mutual_knn_matrices(phi: &Matrix, psi: &Matrix, k: usize) -> Result<f64> {
    if phi.rows() != psi.rows() {
        return Err(shape(format!("paired sets of sizes {} and {}", phi.rows(), psi.rows())));
    }
    let a = knn_sets(phi, k)?;
    let b = knn_sets(psi, k)?;
    let mut total = 0.0;
    let mut mark = vec![false; phi.rows()];
    for (sa, sb) in a.iter().zip(&b) {
        sa.iter().for_each(|&j| mark[j] = true);
        let shared = sb.iter().filter(|&&j| mark[j]).count();
        sa.iter().for_each(|&j| mark[j] = false);
        total += shared as f64 / k as f64;
    }
    Ok(total / phi.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentCurve {
    /// 0 is the trunk input, `t + 1` the output of trunk layer `t`.
    pub layers: Vec<usize>,
    pub scores: Vec<f64>,
    pub k: usize,
    pub batch: usize,
}

/// Mutual-kNN alignment between two paired modalities at every trunk layer.
pub fn layerwise_alignment(
    model: &ToyModel,
    adapter: Option<&LoraAdapter>,
    (mod_a, in_a): (&str, Inputs<'_>),
    (mod_b, in_b): (&str, Inputs<'_>),
    k: usize,
) -> Result<AlignmentCurve> {
    let fa = model.forward(mod_a, in_a, adapter)?;
    let fb = model.forward(mod_b, in_b, adapter)?;
    let b = fa.embedding().rows();
    if b <= k {
        return Err(invalid(format!("alignment batch {b} must exceed k = {k}")));
    }
    let mut layers = Vec::new();
    let mut scores = Vec::new();
    for (t, (la, lb)) in fa.layers().iter().zip(fb.layers()).enumerate() {
        layers.push(t);
        scores.push(mutual_knn_matrices(la, lb, k)?);
    }
    Ok(AlignmentCurve { layers, scores, k, batch: b })
}

/// Cosine similarity matrix between the rows of `a` and `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    unit_rows(a, "left")?.matmul_t(&unit_rows(b, "right")?)
}

/// L2 norms of every row.
pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_matrix("x", Matrix::from_rows(rows).unwrap())
    }

    fn naive_anisotropy(m: &Matrix) -> f64 {
        let n = m.rows();
        let mut s = 0.0;
        let mut c = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    s += crate::numerics::cosine(m.row(i), m.row(j)).unwrap();
                    c += 1.0;
                }
            }
        }
        s / c
    }

    #[test]
    fn anisotropy_identical_vectors() {
        let s = set(&vec![vec![0.3, -1.0, 2.0]; 5]);
        assert!((anisotropy(&s).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anisotropy_orthonormal() {
        let s = EmbeddingSet::from_matrix("x", Matrix::identity(4));
        assert_eq!(anisotropy(&s).unwrap(), 0.0);
    }

    #[test]
    fn anisotropy_hand_instance() {
        let r = 1.0 / 2f64.sqrt();
        let s = set(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![r, r]]);
        let v = anisotropy(&s).unwrap();
        assert!((v - (0.0 + r + r) / 3.0).abs() < 1e-15);
        assert!((v - 0.47140).abs() < 1e-5);
    }

    #[test]
    fn anisotropy_errors() {
        assert!(anisotropy(&set(&[vec![1.0, 0.0]])).is_err());
        assert!(matches!(
            anisotropy(&set(&[vec![1.0, 0.0], vec![0.0, 0.0]])),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn streaming_matches_double_loop() {
        let mut rng = Rng::new(4);
        for n in [2, 3, 17, 200] {
            let m = rng.normal_matrix(n, 6, 1.0).map(|v| v + 0.3);
            let s = EmbeddingSet::from_matrix("x", m.clone());
            let naive = naive_anisotropy(&m);
            assert!((anisotropy(&s).unwrap() - naive).abs() < 1e-12);
            assert!((anisotropy_streaming(&s).unwrap() - naive).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn anisotropy_row_scaling_and_range(seed in 0u64..1000, exp in -8i32..8, row in 0usize..10) {
            let mut rng = Rng::new(seed);
            let m = rng.normal_matrix(10, 4, 1.0);
            let base = anisotropy(&EmbeddingSet::from_matrix("x", m.clone())).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));
            let mut scaled = m.clone();
            let f = 2f64.powi(exp);
            scaled.row_mut(row).iter_mut().for_each(|v| *v *= f);
            let after = anisotropy(&EmbeddingSet::from_matrix("x", scaled)).unwrap();
            prop_assert_eq!(base, after);
        }

        #[test]
        fn anisotropy_arbitrary_positive_scaling(seed in 0u64..1000, f in 1e-3f64..1e3) {
            let mut rng = Rng::new(seed);
            let m = rng.normal_matrix(8, 5, 1.0);
            let base = anisotropy(&EmbeddingSet::from_matrix("x", m.clone())).unwrap();
            let mut scaled = m;
            scaled.row_mut(0).iter_mut().for_each(|v| *v *= f);
            let after = anisotropy(&EmbeddingSet::from_matrix("x", scaled)).unwrap();
            prop_assert!((base - after).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_knn_identical() {
        let m = Rng::new(1).normal_matrix(30, 5, 1.0);
        let s = EmbeddingSet::from_matrix("x", m);
        for k in [1, 5, 29] {
            assert_eq!(mutual_knn(&s, &s, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn mutual_knn_four_point_instance() {
        let phi = set(&[vec![0.0, 0.01], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]);
        let psi = set(&[vec![0.0, 0.01], vec![10.0, 0.0], vec![0.0, 1.0], vec![10.0, 1.0]]);
        // exhaustive enumeration: S(φ) = {1},{0},{3},{2}; S(ψ) = {2},{3},{0},{1}
        assert_eq!(knn_sets(&phi.vectors, 1).unwrap(), vec![vec![1], vec![0], vec![3], vec![2]]);
        assert_eq!(knn_sets(&psi.vectors, 1).unwrap(), vec![vec![2], vec![3], vec![0], vec![1]]);
        assert_eq!(mutual_knn(&phi, &psi, 1).unwrap(), 0.0);
    }

    #[test]
    fn mutual_knn_errors() {
        let a = EmbeddingSet::from_matrix("x", Matrix::identity(4));
        let b = EmbeddingSet::from_matrix("x", Matrix::identity(3));
        assert!(matches!(mutual_knn(&a, &b, 1), Err(Error::Shape(_))));
        assert!(mutual_knn(&a, &a, 0).is_err());
        assert!(mutual_knn(&a, &a, 4).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(knn_sets(&m, 1).unwrap()[2], vec![0]);
        assert_eq!(knn_sets(&m, 2).unwrap()[0], vec![1, 2]);
    }

    #[test]
    fn unpaired_sets_are_at_chance() {
        // permutation baseline: E[score] = k / (n - 1)
        let (n, k) = (200, 10);
        let scores: Vec<f64> = (0..100)
            .map(|seed| {
                let mut rng = Rng::new(seed);
                let a = rng.normal_matrix(n, 8, 1.0);
                let b = rng.normal_matrix(n, 8, 1.0);
                mutual_knn_matrices(&a, &b, k).unwrap()
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (scores.len() - 1) as f64;
        let se = (var / scores.len() as f64).sqrt();
        let chance = k as f64 / (n - 1) as f64;
        assert!((mean - chance).abs() < 3.0 * se, "mean {mean} chance {chance} se {se}");
    }

    #[test]
    fn mutual_knn_symmetric_and_rotation_invariant() {
        let mut rng = Rng::new(12);
        for _ in 0..5 {
            let a = rng.normal_matrix(40, 4, 1.0);
            let b = a.add(&rng.normal_matrix(40, 4, 0.7)).unwrap();
            let ab = mutual_knn_matrices(&a, &b, 5).unwrap();
            assert_eq!(ab, mutual_knn_matrices(&b, &a, 5).unwrap());
            let q = random_rotation(4, &mut rng);
            let rotated = b.matmul(&q).unwrap();
            assert!((ab - mutual_knn_matrices(&a, &rotated, 5).unwrap()).abs() < 1e-9);
        }
    }

    /// Orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
    fn random_rotation(d: usize, rng: &mut Rng) -> Matrix {
        let g = rng.normal_matrix(d, d, 1.0);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = g.row(i).to_vec();
            for u in &q {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = norm(&v);
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        Matrix::from_rows(&q).unwrap()
    }
}
