//! Spectral decomposition of pretrained weights and construction of
//! SVD-initialized low-rank experts.
//!
//! A pretrained weight `W⁰ = U S Vᵀ` is cut into contiguous blocks of singular
//! triples. Each expert receives one block `(U′, S′, V′)` and is initialized as
//! `B = √(1/(sρ)) U′ S′^{1/2}`, `A = √(1/(sρ)) S′^{1/2} V′ᵀ`, so that
//! `s·B·A = U′S′V′ᵀ / ρ` regardless of the scale `s`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Thin SVD `w = u · diag(s) · vᵀ` with `s` sorted in descending order.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    /// Number of singular triples, `h = min(m, n)`.
    pub fn rank_dim(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        linalg::compose(&self.u, &self.s, &self.v)
    }
}

/// Thin SVD with descending singular values.
pub fn svd_decompose(w: &Matrix) -> Result<SvdFactors> {
    if w.nrows() == 0 || w.ncols() == 0 {
        return Err(Error::invalid("cannot decompose an empty matrix"));
    }
    linalg::ensure_finite(w, "weight matrix")?;

    let h = w.nrows().min(w.ncols());
    let svd = w
        .clone()
        .try_svd(true, true, f64::EPSILON, 1000 * h.max(10))
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    let u = Matrix::from_fn(w.nrows(), h, |r, c| u[(r, order[c])]);
    let v = Matrix::from_fn(w.ncols(), h, |r, c| v_t[(order[c], r)]);
    let s = Vector::from_fn(h, |i, _| s[order[i]].max(0.0));

    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure(
            "SVD produced non-finite singular values".into(),
        ));
    }
    Ok(SvdFactors { u, s, v })
}

/// How expert segments are placed along the singular spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentScheme {
    /// Evenly spread: expert `j` starts at `j·h/N`.
    Original,
    /// Packed at the top of the spectrum.
    Principal,
    /// Packed at the bottom of the spectrum, first expert lowest.
    Minor,
    /// Distinct width-aligned blocks drawn without replacement.
    Random { seed: u64 },
}

/// Start index of each expert's segment, in expert order.
pub fn segment_starts(
    scheme: SegmentScheme,
    h: usize,
    n_experts: usize,
    width: usize,
) -> Result<Vec<usize>> {
    if n_experts == 0 || width == 0 {
        return Err(Error::invalid("expert count and segment width must be positive"));
    }
    let needed = n_experts * width;
    if needed > h {
        return Err(Error::InsufficientRank {
            needed,
            available: h,
        });
    }
    let starts = match scheme {
        SegmentScheme::Original => {
            if !h.is_multiple_of(n_experts) {
                return Err(Error::invalid(format!(
                    "original scheme needs h divisible by N (h={h}, N={n_experts})"
                )));
            }
            let stride = h / n_experts;
            (0..n_experts).map(|j| j * stride).collect()
        }
        SegmentScheme::Principal => (0..n_experts).map(|j| j * width).collect(),
        SegmentScheme::Minor => (1..=n_experts).map(|j| h - j * width).collect(),
        SegmentScheme::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks = h / width;
            index::sample(&mut rng, blocks, n_experts)
                .into_iter()
                .map(|t| t * width)
                .collect()
        }
    };
    Ok(starts)
}

/// A contiguous block of singular triples.
#[derive(Debug, Clone)]
pub struct SpectralSegment {
    pub start: usize,
    pub width: usize,
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
    /// Sum of the block's singular values.
    pub spectral_mass: f64,
}

impl SpectralSegment {
    /// `U′ S′ V′ᵀ`.
    pub fn product(&self) -> Matrix {
        linalg::compose(&self.u, &self.s, &self.v)
    }

    pub fn info(&self) -> SegmentInfo {
        SegmentInfo {
            start: self.start,
            width: self.width,
            spectral_mass: self.spectral_mass,
        }
    }
}

pub fn extract_segment(factors: &SvdFactors, start: usize, width: usize) -> Result<SpectralSegment> {
    let h = factors.rank_dim();
    if width == 0 || start + width > h {
        return Err(Error::invalid(format!(
            "segment [{start}, {}) out of range for h={h}",
            start + width
        )));
    }
    let u = factors.u.columns(start, width).into_owned();
    let v = factors.v.columns(start, width).into_owned();
    let s = factors.s.rows(start, width).into_owned();
    let spectral_mass = s.sum();
    Ok(SpectralSegment {
        start,
        width,
        u,
        s,
        v,
        spectral_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub start: usize,
    pub width: usize,
    pub spectral_mass: f64,
}

/// Where an adapter's initial factors came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterOrigin {
    Spectral(SegmentInfo),
    ZeroInit,
}

/// One expert's low-rank pair: `b` is `m×d`, `a` is `d×n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAdapter {
    pub b: Matrix,
    pub a: Matrix,
    pub origin: AdapterOrigin,
    pub scale: f64,
}

impl ExpertAdapter {
    pub fn width(&self) -> usize {
        self.b.ncols()
    }

    /// `b · a` without the scale.
    pub fn product(&self) -> Matrix {
        &self.b * &self.a
    }

    /// `scale · b · a`.
    pub fn delta(&self) -> Matrix {
        self.product() * self.scale
    }

    pub fn parameter_count(&self) -> usize {
        self.b.len() + self.a.len()
    }
}

fn split_sqrt(segment: &SpectralSegment, coef: f64) -> (Matrix, Matrix) {
    let root = segment.s.map(f64::sqrt);
    let mut b = segment.u.clone();
    for (j, r) in root.iter().enumerate() {
        b.column_mut(j).scale_mut(coef * r);
    }
    let mut a = segment.v.transpose();
    for (j, r) in root.iter().enumerate() {
        a.row_mut(j).scale_mut(coef * r);
    }
    (b, a)
}

/// Damped spectral expert: `s·b·a = U′S′V′ᵀ / ρ`.
pub fn build_expert(segment: &SpectralSegment, scale: f64, rho: f64) -> Result<ExpertAdapter> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("damping must be positive, got {rho}")));
    }
    let (b, a) = split_sqrt(segment, (1.0 / (scale * rho)).sqrt());
    Ok(ExpertAdapter {
        b,
        a,
        origin: AdapterOrigin::Spectral(segment.info()),
        scale,
    })
}

/// Single undamped SVD adapter (PiSSA when `start = 0`, MiLoRA when
/// `start = h − width`): `s·B·A` reproduces the segment.
pub fn single_lora_init(
    factors: &SvdFactors,
    start: usize,
    width: usize,
    scale: f64,
) -> Result<ExpertAdapter> {
    let segment = extract_segment(factors, start, width)?;
    build_expert(&segment, scale, 1.0)
}

/// Standard zero-initialized adapter: `b = 0`, `a` uniform on `±1/√n`
/// (entry variance `1/(3n)`).
pub fn zero_init_expert<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    width: usize,
    scale: f64,
    rng: &mut R,
) -> ExpertAdapter {
    ExpertAdapter {
        b: Matrix::zeros(m, width),
        a: linalg::uniform_matrix(width, n, zero_init_bound(n), rng),
        origin: AdapterOrigin::ZeroInit,
        scale,
    }
}

/// Half-width of the uniform distribution used for zero-init `A` factors.
pub fn zero_init_bound(n: usize) -> f64 {
    (1.0 / n as f64).sqrt()
}

/// `W_res⁺ = (s/N) Σ bᵢ aᵢ`.
pub fn residual_compensation(experts: &[ExpertAdapter], scale: f64, n_experts: usize) -> Result<Matrix> {
    let first = experts
        .first()
        .ok_or_else(|| Error::invalid("residual compensation needs at least one expert"))?;
    if n_experts == 0 {
        return Err(Error::invalid("expert count must be positive"));
    }
    let (m, n) = (first.b.nrows(), first.a.ncols());
    let mut acc = Matrix::zeros(m, n);
    for (i, e) in experts.iter().enumerate() {
        if e.b.nrows() != m || e.a.ncols() != n || e.b.ncols() != e.a.nrows() {
            return Err(Error::invalid(format!("expert {i} has inconsistent shape")));
        }
        acc += e.product();
    }
    Ok(acc * (scale / n_experts as f64))
}

/// `(1/N) Σ sᵢ bᵢ aᵢ` using each expert's own scale. Reduces to
/// [`residual_compensation`] when all scales are equal.
pub fn residual_from_expert_scales(experts: &[ExpertAdapter]) -> Result<Matrix> {
    let first = experts
        .first()
        .ok_or_else(|| Error::invalid("residual compensation needs at least one expert"))?;
    let mut acc = Matrix::zeros(first.b.nrows(), first.a.ncols());
    for e in experts {
        if e.b.nrows() != acc.nrows() || e.a.ncols() != acc.ncols() {
            return Err(Error::invalid("experts have inconsistent shapes"));
        }
        acc += e.delta();
    }
    Ok(acc / experts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, rel_frobenius};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn assert_orthonormal(q: &Matrix) {
        let gram = q.transpose() * q;
        let eye = Matrix::identity(gram.nrows(), gram.ncols());
        assert!(linalg::max_abs(&(gram - eye)) <= 1e-10);
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd_decompose(&Matrix::identity(4, 4)).unwrap();
        assert!(f.s.iter().all(|&x| (x - 1.0).abs() < 1e-14));
        // Equal singular values: compare the product, not the raw columns.
        assert!(rel_frobenius(&(&f.u * f.v.transpose()), &Matrix::identity(4, 4)) < 1e-12);
    }

    #[test]
    fn diagonal_spectrum_is_sorted() {
        let w = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0, 2.0]));
        let f = svd_decompose(&w).unwrap();
        assert_eq!(f.s.as_slice().len(), 3);
        for (got, want) in f.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn gaussian_reconstruction_and_orthonormality() {
        for (m, n) in [(8, 6), (6, 8), (16, 16), (1, 5)] {
            let w = gaussian_matrix(m, n, 1.0, &mut rng(m as u64 * 31 + n as u64));
            let f = svd_decompose(&w).unwrap();
            assert_eq!(f.rank_dim(), m.min(n));
            assert!(rel_frobenius(&f.reconstruct(), &w) <= 1e-10);
            assert_orthonormal(&f.u);
            assert_orthonormal(&f.v);
            assert!(f.s.as_slice().windows(2).all(|p| p[0] >= p[1]));
            assert!(f.s.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut w = Matrix::identity(3, 3);
        w[(1, 2)] = f64::NAN;
        assert!(matches!(svd_decompose(&w), Err(Error::InvalidInput(_))));
        assert!(matches!(
            svd_decompose(&Matrix::zeros(0, 3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn scheme_starts() {
        assert_eq!(
            segment_starts(SegmentScheme::Original, 64, 4, 4).unwrap(),
            vec![0, 16, 32, 48]
        );
        assert_eq!(
            segment_starts(SegmentScheme::Principal, 64, 4, 4).unwrap(),
            vec![0, 4, 8, 12]
        );
        assert_eq!(
            segment_starts(SegmentScheme::Minor, 64, 4, 4).unwrap(),
            vec![60, 56, 52, 48]
        );
        let a = segment_starts(SegmentScheme::Random { seed: 3 }, 64, 4, 4).unwrap();
        let b = segment_starts(SegmentScheme::Random { seed: 3 }, 64, 4, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s % 4 == 0 && s + 4 <= 64));
    }

    #[test]
    fn scheme_errors() {
        assert!(matches!(
            segment_starts(SegmentScheme::Principal, 8, 4, 3),
            Err(Error::InsufficientRank { needed: 12, available: 8 })
        ));
        assert!(matches!(
            segment_starts(SegmentScheme::Original, 10, 4, 2),
            Err(Error::InvalidInput(_))
        ));
        assert!(segment_starts(SegmentScheme::Principal, 10, 4, 2).is_ok());
    }

    #[test]
    fn segment_slices_of_diagonal() {
        let w = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 2.0, 1.0]));
        let f = svd_decompose(&w).unwrap();
        let head = extract_segment(&f, 0, 1).unwrap();
        assert!((head.spectral_mass - 3.0).abs() < 1e-13);
        let tail = extract_segment(&f, 1, 2).unwrap();
        assert!((tail.s[0] - 2.0).abs() < 1e-13 && (tail.s[1] - 1.0).abs() < 1e-13);
        assert!((tail.spectral_mass - 3.0).abs() < 1e-13);
        assert!(matches!(extract_segment(&f, 2, 2), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn segments_reassemble_full_matrix() {
        let w = gaussian_matrix(16, 16, 1.0, &mut rng(11));
        let f = svd_decompose(&w).unwrap();
        let mut acc = Matrix::zeros(16, 16);
        for start in [0, 4, 8, 12] {
            acc += extract_segment(&f, start, 4).unwrap().product();
        }
        assert!(rel_frobenius(&acc, &w) <= 1e-10);
    }

    #[test]
    fn undamped_expert_of_diag4() {
        let w = Matrix::from_diagonal(&Vector::from_vec(vec![4.0]));
        let f = svd_decompose(&w).unwrap();
        let seg = extract_segment(&f, 0, 1).unwrap();
        let e = build_expert(&seg, 1.0, 1.0).unwrap();
        assert!((e.product()[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn damping_and_scale_invariance() {
        let w = gaussian_matrix(12, 10, 1.0, &mut rng(5));
        let f = svd_decompose(&w).unwrap();
        let seg = extract_segment(&f, 2, 3).unwrap();
        let target = seg.product() / 10.0;
        let reference = build_expert(&seg, 4.0, 10.0).unwrap().delta();
        assert!(rel_frobenius(&reference, &target) <= 1e-12);
        for s in [1.0, 8.0, 16.0] {
            let e = build_expert(&seg, s, 10.0).unwrap();
            assert!(rel_frobenius(&e.delta(), &reference) <= 1e-12);
        }
        assert!(build_expert(&seg, 0.0, 1.0).is_err());
        assert!(build_expert(&seg, 1.0, -2.0).is_err());
    }

    #[test]
    fn residual_single_expert_and_zero_init() {
        let w = gaussian_matrix(6, 5, 1.0, &mut rng(8));
        let f = svd_decompose(&w).unwrap();
        let e = build_expert(&extract_segment(&f, 0, 2).unwrap(), 3.0, 1.0).unwrap();
        let res = residual_compensation(std::slice::from_ref(&e), 3.0, 1).unwrap();
        assert!(rel_frobenius(&res, &e.delta()) < 1e-15);

        let z = zero_init_expert(6, 5, 2, 3.0, &mut rng(1));
        let res = residual_compensation(&[z.clone(), z], 3.0, 2).unwrap();
        assert_eq!(linalg::max_abs(&res), 0.0);
        assert!(residual_compensation(&[], 1.0, 1).is_err());
    }

    #[test]
    fn residual_two_rank_one_experts_against_accumulation() {
        let e1 = ExpertAdapter {
            b: Matrix::from_column_slice(3, 1, &[1.0, 2.0, 0.5]),
            a: Matrix::from_row_slice(1, 2, &[-1.0, 4.0]),
            origin: AdapterOrigin::ZeroInit,
            scale: 2.5,
        };
        let e2 = ExpertAdapter {
            b: Matrix::from_column_slice(3, 1, &[0.0, -3.0, 1.0]),
            a: Matrix::from_row_slice(1, 2, &[2.0, 0.25]),
            origin: AdapterOrigin::ZeroInit,
            scale: 2.5,
        };
        let got = residual_compensation(&[e1.clone(), e2.clone()], 2.5, 2).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mut want = 0.0;
                for e in [&e1, &e2] {
                    want += e.b[(r, 0)] * e.a[(0, c)];
                }
                want *= 2.5 / 2.0;
                assert!((got[(r, c)] - want).abs() < 1e-15);
            }
        }
        // Doubling one expert's b doubles its contribution.
        let mut e1d = e1.clone();
        e1d.b *= 2.0;
        let doubled = residual_compensation(&[e1d, e2.clone()], 2.5, 2).unwrap();
        let single = residual_compensation(&[e1, e2], 2.5, 2).unwrap();
        let e1_only = &doubled - &single;
        let want = Matrix::from_fn(3, 2, |r, c| 1.25 * [1.0, 2.0, 0.5][r] * [-1.0, 4.0][c]);
        assert!(rel_frobenius(&e1_only, &want) < 1e-14);
    }

    #[test]
    fn single_lora_reconstructs_segment() {
        let w = gaussian_matrix(10, 8, 1.0, &mut rng(21));
        let f = svd_decompose(&w).unwrap();
        for start in [0, 8 - 3] {
            let seg = extract_segment(&f, start, 3).unwrap();
            let e = single_lora_init(&f, start, 3, 7.0).unwrap();
            assert!(rel_frobenius(&e.delta(), &seg.product()) <= 1e-12);
        }
    }
}
