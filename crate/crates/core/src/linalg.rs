//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues at or above this (negative) level are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Relative singular-value cutoff used for numerical rank.
pub const RANK_RELATIVE_CUTOFF: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// tr(M * Psi) without forming the product.
pub fn trace_product(m: &DMatrix<f64>, psi: &DMatrix<f64>) -> f64 {
    m.component_mul(&psi.transpose()).sum()
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(sym)).eigenvalues.min()
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Number of singular values above `max(rows, cols) * s_max * 1e-12`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let s_max = sv.max();
    if s_max == 0.0 {
        return 0;
    }
    let cutoff = m.nrows().max(m.ncols()) as f64 * s_max * RANK_RELATIVE_CUTOFF;
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Symmetric square root of a PSD matrix; eigenvalues within the tolerance
/// band below zero are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Rebuild a symmetric matrix with eigenvalues in [-tol, 0) set to zero.
/// Returns `None` if any eigenvalue is below `-tol`.
pub fn clip_psd(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.nrows() == 0 {
        return Some(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return None;
    }
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Some(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    Some(symmetrize(
        &(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()),
    ))
}

/// `[b, Ab, ..., A^(d-1) b]`
pub fn krylov(a: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let mut out = DMatrix::zeros(d, d);
    let mut col = b.clone();
    for k in 0..d {
        out.set_column(k, &col);
        col = a * col;
    }
    out
}

/// Stacks `C, CA, ..., CA^(d-1)`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(p * d, d);
    let mut block = c.clone();
    for k in 0..d {
        out.view_mut((k * p, 0), (p, d)).copy_from(&block);
        block = &block * a;
    }
    out
}

/// Evenly spaced in log10 between `10^lo` and `10^hi`, inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![10f64.powf(lo)],
        _ => (0..n)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

pub fn geomspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    logspace(start.log10(), stop.log10(), n)
}
