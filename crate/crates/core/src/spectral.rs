//! Covariance eigen-spectra of layer activations.
//!
//! A component's activations are mean-centred per feature row, turned into
//! a `D×D` empirical covariance and diagonalised with cyclic Jacobi
//! rotations. The top `k` eigenvalues form the component's spectral
//! signature; signatures are concatenated in layout order into the
//! meta-feature vector fed to the boosted trees.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{ActivationMatrix, ComponentId, Layout};

/// Jacobi stops once the off-diagonal Frobenius norm falls below this
/// fraction of the matrix norm.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;
/// Relative asymmetry accepted by [`eig_sym`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Negative eigenvalues no larger than this fraction of `λ_max` are
/// round-off and get clamped to zero in signatures.
pub const PSD_CLAMP: f64 = 1e-10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpectralError {
    #[error("covariance needs at least 2 columns, got {0}")]
    DegenerateSampleCount(usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Jacobi did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("expected a square matrix with {expected} entries, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("signature length k must be at least 1")]
    InvalidK,
    #[error("no signature for component {0}")]
    MissingComponent(String),
    #[error("signature for {component} has k={found}, expected {expected}")]
    InconsistentK {
        component: String,
        expected: usize,
        found: usize,
    },
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self, SpectralError> {
        if data.len() != n * n {
            return Err(SpectralError::DimensionMismatch {
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    let v = self.get(i, j);
                    s += v * v;
                }
            }
        }
        s.sqrt()
    }
}

/// Eigenvalues in descending order with matching unit eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[k]` belongs to `eigenvalues[k]`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

/// Top-k eigenvalues of one component's covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSignature {
    pub component: ComponentId,
    pub values: Vec<f64>,
}

impl SpectralSignature {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Concatenated signatures in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureVector {
    pub k: usize,
    pub values: Vec<f64>,
}

impl MetaFeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Subtracts each row's mean.
pub fn center(a: &ActivationMatrix) -> ActivationMatrix {
    let cols = a.cols();
    let mut out = Vec::with_capacity(a.values().len());
    for r in 0..a.rows() {
        let row = a.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        out.extend(row.iter().map(|v| v - mean));
    }
    ActivationMatrix::new(a.component().clone(), a.rows(), cols, out)
        .expect("centering preserves shape and finiteness")
}

/// `Ā Āᵀ / (N−1)` for an already-centred matrix. Only the upper triangle
/// is computed; the lower one is mirrored so the result is exactly
/// symmetric.
pub fn covariance(centered: &ActivationMatrix) -> Result<SquareMatrix, SpectralError> {
    let n = centered.cols();
    if n < 2 {
        return Err(SpectralError::DegenerateSampleCount(n));
    }
    let d = centered.rows();
    let scale = 1.0 / (n - 1) as f64;
    let mut c = SquareMatrix::zeros(d);
    for i in 0..d {
        let ri = centered.row(i);
        for j in i..d {
            let rj = centered.row(j);
            let v = ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>() * scale;
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

fn check_symmetric(c: &SquareMatrix) -> Result<(), SpectralError> {
    if c.data.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let tol = SYMMETRY_TOLERANCE * c.frobenius_norm();
    let mut worst = 0.0f64;
    for i in 0..c.n {
        for j in i + 1..c.n {
            worst = worst.max((c.get(i, j) - c.get(j, i)).abs());
        }
    }
    if worst > tol {
        return Err(SpectralError::NotSymmetric(worst));
    }
    Ok(())
}

fn rotate(m: &mut SquareMatrix, p: usize, q: usize, c: f64, s: f64, rows_too: bool) {
    let n = m.n;
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m.set(k, p, c * mkp - s * mkq);
        m.set(k, q, s * mkp + c * mkq);
    }
    if rows_too {
        for k in 0..n {
            let mpk = m.get(p, k);
            let mqk = m.get(q, k);
            m.set(p, k, c * mpk - s * mqk);
            m.set(q, k, s * mpk + c * mqk);
        }
    }
}

/// Cyclic Jacobi. Returns the diagonalised matrix, optional accumulated
/// rotations, and the number of sweeps used.
fn jacobi(
    c: &SquareMatrix,
    with_vectors: bool,
) -> Result<(SquareMatrix, Option<SquareMatrix>, usize), SpectralError> {
    check_symmetric(c)?;
    let n = c.n;
    let mut a = c.clone();
    // symmetrize so rotations act on an exactly symmetric matrix
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = with_vectors.then(|| SquareMatrix::identity(n));
    let target = JACOBI_TOLERANCE * a.frobenius_norm();

    for sweep in 0..=MAX_SWEEPS {
        if a.off_diagonal_norm() <= target {
            return Ok((a, v, sweep));
        }
        if sweep == MAX_SWEEPS {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                rotate(&mut a, p, q, cs, sn, true);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                if let Some(v) = v.as_mut() {
                    rotate(v, p, q, cs, sn, false);
                }
            }
        }
    }
    Err(SpectralError::NoConvergence(MAX_SWEEPS))
}

/// Descending order; equal values keep their original index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx
}

/// Symmetric eigendecomposition with eigenvectors.
pub fn eig_sym(c: &SquareMatrix) -> Result<EigenDecomposition, SpectralError> {
    let (a, v, sweeps) = jacobi(c, true)?;
    let v = v.expect("vectors requested");
    let n = c.n;
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let order = descending_order(&diag);
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = order
        .iter()
        .map(|&col| (0..n).map(|r| v.get(r, col)).collect())
        .collect();
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
        sweeps,
    })
}

/// Eigenvalues only, descending. Same rotations as [`eig_sym`] without
/// accumulating eigenvectors.
pub fn eigenvalues_sym(c: &SquareMatrix) -> Result<Vec<f64>, SpectralError> {
    let (a, _, _) = jacobi(c, false)?;
    let diag: Vec<f64> = (0..c.n).map(|i| a.get(i, i)).collect();
    Ok(descending_order(&diag)
        .into_iter()
        .map(|i| diag[i])
        .collect())
}

/// Top-`k` signature from descending eigenvalues: round-off negatives are
/// clamped, missing entries are zero-padded.
pub fn signature_from_eigenvalues(
    component: ComponentId,
    eigenvalues: &[f64],
    k: usize,
) -> Result<SpectralSignature, SpectralError> {
    if k == 0 {
        return Err(SpectralError::InvalidK);
    }
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let floor = -PSD_CLAMP * lambda_max;
    let mut values: Vec<f64> = eigenvalues
        .iter()
        .take(k)
        .map(|&l| if l <= 0.0 && l >= floor { 0.0 } else { l })
        .collect();
    values.resize(k, 0.0);
    Ok(SpectralSignature { component, values })
}

/// center → covariance → eigenvalues → top-k.
pub fn signature(a: &ActivationMatrix, k: usize) -> Result<SpectralSignature, SpectralError> {
    if k == 0 {
        return Err(SpectralError::InvalidK);
    }
    let c = covariance(&center(a))?;
    let ev = eigenvalues_sym(&c)?;
    signature_from_eigenvalues(a.component().clone(), &ev, k)
}

/// Concatenates signatures in layout component order.
pub fn meta_vector(
    signatures: &HashMap<ComponentId, SpectralSignature>,
    layout: &Layout,
) -> Result<MetaFeatureVector, SpectralError> {
    let mut k = None;
    let mut values = Vec::new();
    for id in layout.component_ids() {
        let sig = signatures
            .get(&id)
            .ok_or_else(|| SpectralError::MissingComponent(id.to_string()))?;
        let expected = *k.get_or_insert(sig.k());
        if sig.k() != expected {
            return Err(SpectralError::InconsistentK {
                component: id.to_string(),
                expected,
                found: sig.k(),
            });
        }
        values.extend_from_slice(&sig.values);
    }
    Ok(MetaFeatureVector {
        k: k.unwrap_or(0),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{LayoutComponent, Role};

    fn cid() -> ComponentId {
        ComponentId::new("B0", Role::Hsgal1)
    }

    fn mat(rows: usize, cols: usize, v: &[f64]) -> ActivationMatrix {
        ActivationMatrix::new(cid(), rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn center_examples() {
        assert_eq!(center(&mat(2, 3, &[5.0; 6])).values(), &[0.0; 6]);
        assert_eq!(center(&mat(1, 2, &[1.0, 3.0])).values(), &[-1.0, 1.0]);
        assert_eq!(
            center(&mat(2, 2, &[1.0, 3.0, 2.0, 2.0])).values(),
            &[-1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn covariance_examples() {
        let c = covariance(&mat(2, 2, &[-1.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 0.0, 0.0, 0.0]);
        let z = covariance(&mat(3, 4, &[0.0; 12])).unwrap();
        assert_eq!(z, SquareMatrix::zeros(3));
        assert_eq!(
            covariance(&mat(2, 1, &[1.0, 2.0])),
            Err(SpectralError::DegenerateSampleCount(1))
        );
    }

    #[test]
    fn eig_examples() {
        let e = eig_sym(&SquareMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        let e = eig_sym(&SquareMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 2.0, 1.0]);
        assert_eq!(e.eigenvectors[0], vec![1.0, 0.0, 0.0]);
        let m = SquareMatrix::from_row_major(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = eig_sym(&m).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn asymmetric_and_non_finite_rejected() {
        let m = SquareMatrix::from_row_major(2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(eig_sym(&m), Err(SpectralError::NotSymmetric(_))));
        let m = SquareMatrix::from_row_major(1, vec![f64::NAN]).unwrap();
        assert_eq!(eig_sym(&m), Err(SpectralError::NonFinite));
    }

    #[test]
    fn signature_examples() {
        let s = signature(&mat(2, 2, &[1.0, 3.0, 2.0, 2.0]), 3).unwrap();
        assert_eq!(s.values, vec![2.0, 0.0, 0.0]);
        let s = signature(&mat(2, 4, &[1.5; 8]), 5).unwrap();
        assert_eq!(s.values, vec![0.0; 5]);
        assert_eq!(
            signature(&mat(1, 2, &[1.0, 2.0]), 0),
            Err(SpectralError::InvalidK)
        );
        assert_eq!(
            signature(&mat(3, 1, &[1.0, 2.0, 3.0]), 2),
            Err(SpectralError::DegenerateSampleCount(1))
        );
    }

    #[test]
    fn clamp_only_touches_round_off() {
        let s = signature_from_eigenvalues(cid(), &[4.0, -1e-12, -1.0], 3).unwrap();
        assert_eq!(s.values, vec![4.0, 0.0, -1.0]);
    }

    fn two_component_layout() -> Layout {
        Layout::new(
            vec!["B0".into(), "B1".into()],
            vec![
                LayoutComponent {
                    block: "B0".into(),
                    role: Role::Hsgal1,
                    axis: Default::default(),
                },
                LayoutComponent {
                    block: "B1".into(),
                    role: Role::Pool,
                    axis: Default::default(),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn meta_vector_concatenates_in_layout_order() {
        let layout = two_component_layout();
        let a = ComponentId::new("B0", Role::Hsgal1);
        let b = ComponentId::new("B1", Role::Pool);
        let mut sigs = HashMap::new();
        sigs.insert(
            b.clone(),
            SpectralSignature {
                component: b.clone(),
                values: vec![3.0, 4.0],
            },
        );
        assert_eq!(
            meta_vector(&sigs, &layout),
            Err(SpectralError::MissingComponent("B0.HSGAL1".into()))
        );
        sigs.insert(
            a.clone(),
            SpectralSignature {
                component: a.clone(),
                values: vec![1.0, 2.0],
            },
        );
        assert_eq!(
            meta_vector(&sigs, &layout).unwrap().values,
            vec![1.0, 2.0, 3.0, 4.0]
        );
        sigs.get_mut(&a).unwrap().values.push(0.0);
        assert!(matches!(
            meta_vector(&sigs, &layout),
            Err(SpectralError::InconsistentK { .. })
        ));
    }

    #[test]
    fn canonical_meta_vector_has_140_entries() {
        let layout = Layout::canonical();
        let sigs: HashMap<_, _> = layout
            .component_ids()
            .map(|id| {
                let s = SpectralSignature {
                    component: id.clone(),
                    values: vec![1.0; 10],
                };
                (id, s)
            })
            .collect();
        assert_eq!(meta_vector(&sigs, &layout).unwrap().len(), 140);
    }
}
