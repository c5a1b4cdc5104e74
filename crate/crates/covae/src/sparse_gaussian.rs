//! Structured Gaussian N(mean, (L Lᵀ)⁻¹) with a sparse lower-triangular
//! precision factor L.
//!
//! L is stored as per-pixel weight channels over a fixed causal neighborhood:
//! channel `c` at pixel `i` holds the entry L[i, j] where `j` is the pixel at
//! offset `pattern.offsets[c]` from `i`. All offsets strictly precede the
//! center pixel in raster (row-major) order, so the induced matrix support is
//! lower-triangular and the usual triangular solves apply without any dense
//! materialization.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Causal neighborhood over which the precision factor has support.
///
/// Offsets are `(dy, dx)` pairs; every non-center offset satisfies
/// `dy < 0 || (dy == 0 && dx < 0)`, the center `(0, 0)` comes last.
/// Offsets that fall outside the image for a given pixel contribute no
/// matrix entry (boundary truncation, no wraparound).
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    height: usize,
    width: usize,
    offsets: Vec<(i32, i32)>,
}

impl SparsityPattern {
    pub fn new(height: usize, width: usize, offsets: Vec<(i32, i32)>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config("pattern dimensions must be nonzero".into()));
        }
        if offsets.is_empty() || *offsets.last().unwrap() != (0, 0) {
            return Err(Error::Config(
                "neighborhood must list the center offset (0, 0) last".into(),
            ));
        }
        for &(dy, dx) in &offsets[..offsets.len() - 1] {
            if !(dy < 0 || (dy == 0 && dx < 0)) {
                return Err(Error::Config(format!(
                    "offset ({dy}, {dx}) does not precede the center in raster order"
                )));
            }
        }
        let mut seen = offsets.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != offsets.len() {
            return Err(Error::Config("duplicate neighborhood offsets".into()));
        }
        Ok(Self { height, width, offsets })
    }

    /// Causal half of a 3x3 window plus the center: 5 channels.
    pub fn causal_3x3(height: usize, width: usize) -> Self {
        let offsets = vec![(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0)];
        Self::new(height, width, offsets).expect("static offsets are valid")
    }

    /// Causal half of a 5x5 window plus the center: 13 channels.
    pub fn causal_5x5(height: usize, width: usize) -> Self {
        let mut offsets = Vec::new();
        for dy in -2..=0i32 {
            for dx in -2..=2i32 {
                if dy < 0 || (dy == 0 && dx < 0) {
                    offsets.push((dy, dx));
                }
            }
        }
        offsets.push((0, 0));
        Self::new(height, width, offsets).expect("static offsets are valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.offsets.len()
    }

    /// Index of the center `(0, 0)` channel (always the last one).
    pub fn center_channel(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

}

/// Sparse lower-triangular factor L of a precision matrix Σ⁻¹ = L Lᵀ.
///
/// The center channel holds the diagonal of L; construction through
/// [`CholFactor::from_raw_channels`] bounds it to `[exp(-s), exp(s)]`,
/// which keeps L Lᵀ symmetric positive definite.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pattern: SparsityPattern,
    weights: Array3<f64>,
    diag_bound: f64,
}

/// Diagonal activation used by [`CholFactor::from_raw_channels`]:
/// `diag = exp(bound * tanh(raw))`.
pub fn diag_activation(raw: f64, bound: f64) -> f64 {
    (bound * raw.tanh()).exp()
}

/// Derivative of [`diag_activation`] with respect to `raw`.
pub fn diag_activation_grad(raw: f64, bound: f64) -> f64 {
    let t = raw.tanh();
    bound * (1.0 - t * t) * (bound * t).exp()
}

impl CholFactor {
    /// Builds a factor from raw network output channels.
    ///
    /// Off-diagonal channels are copied verbatim; the center channel is
    /// mapped through `exp(diag_bound * tanh(raw))` so diagonals stay in
    /// `[exp(-diag_bound), exp(diag_bound)]`.
    pub fn from_raw_channels(
        raw: &Array3<f64>,
        pattern: SparsityPattern,
        diag_bound: f64,
    ) -> Result<Self> {
        let (h, w, c) = raw.dim();
        if h != pattern.height || w != pattern.width {
            return Err(Error::ShapeMismatch(format!(
                "raw channels are {h}x{w}, pattern expects {}x{}",
                pattern.height, pattern.width
            )));
        }
        if c != pattern.channels() {
            return Err(Error::Config(format!(
                "raw channel count {c} does not match neighborhood size {}",
                pattern.channels()
            )));
        }
        if diag_bound <= 0.0 {
            return Err(Error::Config("diag_bound must be positive".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite raw channel values".into()));
        }
        let center = pattern.center_channel();
        let mut weights = raw.clone();
        for v in weights.slice_mut(ndarray::s![.., .., center]) {
            *v = diag_activation(*v, diag_bound);
        }
        Ok(Self { pattern, weights, diag_bound })
    }

    /// Identity factor: diagonal 1, all off-diagonals 0.
    pub fn identity(pattern: SparsityPattern) -> Self {
        Self::scaled_identity(pattern, 1.0)
    }

    /// Diagonal factor with constant value `diag` (> 0). `L = diag * I`
    /// corresponds to the isotropic covariance `Σ = diag⁻² I`.
    pub fn scaled_identity(pattern: SparsityPattern, diag: f64) -> Self {
        assert!(diag > 0.0, "diagonal must be positive");
        let mut weights = Array3::zeros((pattern.height, pattern.width, pattern.channels()));
        weights
            .slice_mut(ndarray::s![.., .., pattern.center_channel()])
            .fill(diag);
        Self { pattern, weights, diag_bound: f64::INFINITY }
    }

    /// Builds a factor directly from already-transformed weights.
    /// The center channel must be strictly positive.
    pub fn from_weights(weights: Array3<f64>, pattern: SparsityPattern, diag_bound: f64) -> Result<Self> {
        let (h, w, c) = weights.dim();
        if h != pattern.height || w != pattern.width || c != pattern.channels() {
            return Err(Error::ShapeMismatch("weights do not match pattern".into()));
        }
        let center = pattern.center_channel();
        if weights
            .slice(ndarray::s![.., .., center])
            .iter()
            .any(|&d| !(d > 0.0))
        {
            return Err(Error::Invariant("non-positive diagonal entry".into()));
        }
        Ok(Self { pattern, weights, diag_bound })
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn diag_bound(&self) -> f64 {
        self.diag_bound
    }

    pub fn height(&self) -> usize {
        self.pattern.height
    }

    pub fn width(&self) -> usize {
        self.pattern.width
    }

    /// Zeroes every off-diagonal channel, keeping the diagonal.
    pub fn diagonal_restriction(&self) -> CholFactor {
        let mut weights = Array3::zeros(self.weights.dim());
        let center = self.pattern.center_channel();
        weights
            .slice_mut(ndarray::s![.., .., center])
            .assign(&self.weights.slice(ndarray::s![.., .., center]));
        CholFactor { pattern: self.pattern.clone(), weights, diag_bound: self.diag_bound }
    }

    fn check_shape(&self, v: &Array2<f64>) -> Result<()> {
        if v.dim() != (self.pattern.height, self.pattern.width) {
            return Err(Error::ShapeMismatch(format!(
                "array is {:?}, factor expects {}x{}",
                v.dim(),
                self.pattern.height,
                self.pattern.width
            )));
        }
        Ok(())
    }

    /// L · vec(v), reshaped back to image shape. Linear in `v`.
    pub fn apply(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(v)?;
        let (h, w) = (self.pattern.height as i32, self.pattern.width as i32);
        let mut out = Array2::zeros(v.raw_dim());
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (c, &(dy, dx)) in self.pattern.offsets.iter().enumerate() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && nx < w {
                        acc += self.weights[(y as usize, x as usize, c)]
                            * v[(ny as usize, nx as usize)];
                    }
                }
                out[(y as usize, x as usize)] = acc;
            }
        }
        Ok(out)
    }

    /// Lᵀ · vec(v), reshaped back to image shape.
    pub fn apply_transpose(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(v)?;
        let (h, w) = (self.pattern.height as i32, self.pattern.width as i32);
        let mut out = Array2::zeros(v.raw_dim());
        for y in 0..h {
            for x in 0..w {
                let vi = v[(y as usize, x as usize)];
                for (c, &(dy, dx)) in self.pattern.offsets.iter().enumerate() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && nx < w {
                        out[(ny as usize, nx as usize)] +=
                            self.weights[(y as usize, x as usize, c)] * vi;
                    }
                }
            }
        }
        Ok(out)
    }

    /// log|Σ| = -2 Σᵢ log L_ii. The log-determinant of the covariance is a
    /// plain summation over the diagonal channel.
    pub fn log_det_sigma(&self) -> Result<f64> {
        let center = self.pattern.center_channel();
        let mut acc = 0.0;
        for &d in self.weights.slice(ndarray::s![.., .., center]) {
            if !(d > 0.0) {
                return Err(Error::Invariant(format!("non-positive diagonal entry {d}")));
            }
            acc += d.ln();
        }
        Ok(-2.0 * acc)
    }

    /// Forward substitution: solves L a = b along raster order.
    pub fn solve_l(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(b)?;
        let (h, w) = (self.pattern.height as i32, self.pattern.width as i32);
        let center = self.pattern.center_channel();
        let mut a = Array2::zeros(b.raw_dim());
        for y in 0..h {
            for x in 0..w {
                let mut acc = b[(y as usize, x as usize)];
                for (c, &(dy, dx)) in self.pattern.offsets[..center].iter().enumerate() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && nx < w {
                        acc -= self.weights[(y as usize, x as usize, c)]
                            * a[(ny as usize, nx as usize)];
                    }
                }
                let d = self.weights[(y as usize, x as usize, center)];
                if d == 0.0 {
                    return Err(Error::Invariant("zero diagonal in solve".into()));
                }
                a[(y as usize, x as usize)] = acc / d;
            }
        }
        Ok(a)
    }

    /// Back substitution: solves Lᵀ r = u in reverse raster order.
    pub fn solve_lt(&self, u: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(u)?;
        let (h, w) = (self.pattern.height as i32, self.pattern.width as i32);
        let center = self.pattern.center_channel();
        let mut r = Array2::zeros(u.raw_dim());
        for y in (0..h).rev() {
            for x in (0..w).rev() {
                let mut acc = u[(y as usize, x as usize)];
                // Rows i of L with j = i + offset landing on this pixel.
                for (c, &(dy, dx)) in self.pattern.offsets[..center].iter().enumerate() {
                    let (iy, ix) = (y - dy, x - dx);
                    if iy < h && ix >= 0 && ix < w {
                        acc -= self.weights[(iy as usize, ix as usize, c)]
                            * r[(iy as usize, ix as usize)];
                    }
                }
                let d = self.weights[(y as usize, x as usize, center)];
                if d == 0.0 {
                    return Err(Error::Invariant("zero diagonal in solve".into()));
                }
                r[(y as usize, x as usize)] = acc / d;
            }
        }
        Ok(r)
    }

    /// Draws a residual with covariance (L Lᵀ)⁻¹ from a standard-normal
    /// input: r = (Lᵀ)⁻¹ u.
    pub fn sample_residual(&self, u: &Array2<f64>) -> Result<Array2<f64>> {
        self.solve_lt(u)
    }

    /// Row `pixel` of Σ = (L Lᵀ)⁻¹, reshaped to image shape, computed by a
    /// forward then a backward sparse solve. Never materializes Σ.
    pub fn covariance_row(&self, pixel: (usize, usize)) -> Result<Array2<f64>> {
        let (py, px) = pixel;
        if py >= self.pattern.height || px >= self.pattern.width {
            return Err(Error::IndexOutOfRange(format!(
                "pixel ({py}, {px}) outside {}x{} image",
                self.pattern.height, self.pattern.width
            )));
        }
        let mut e = Array2::zeros((self.pattern.height, self.pattern.width));
        e[(py, px)] = 1.0;
        let w = self.solve_l(&e)?;
        self.solve_lt(&w)
    }
}

/// Negative log-likelihood of `x` under N(mean, (L Lᵀ)⁻¹), constants
/// omitted: -2 Σ log L_ii + ½ (x - mean)ᵀ (L Lᵀ) (x - mean).
pub fn nll(x: &Array2<f64>, mean: &Array2<f64>, factor: &CholFactor) -> Result<f64> {
    if x.dim() != mean.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x is {:?}, mean is {:?}",
            x.dim(),
            mean.dim()
        )));
    }
    let ltr = factor.apply_transpose(&(x - mean))?;
    Ok(factor.log_det_sigma()? + 0.5 * ltr.iter().map(|v| v * v).sum::<f64>())
}

/// Gradient of [`nll`] with respect to `x`: L Lᵀ (x - mean). The gradient
/// with respect to `mean` is its negation.
pub fn nll_grad_x(
    x: &Array2<f64>,
    mean: &Array2<f64>,
    factor: &CholFactor,
) -> Result<Array2<f64>> {
    let ltr = factor.apply_transpose(&(x - mean))?;
    factor.apply(&ltr)
}

/// Gradient of [`nll`] with respect to `mean`: -L Lᵀ (x - mean).
pub fn nll_grad_mean(
    x: &Array2<f64>,
    mean: &Array2<f64>,
    factor: &CholFactor,
) -> Result<Array2<f64>> {
    Ok(-nll_grad_x(x, mean, factor)?)
}

/// Gradient of [`nll`] with respect to the factor weight channels.
///
/// With u = Lᵀ r the quadratic term ½‖u‖² contributes r[i] * u[j(i, c)] at
/// every in-bounds channel entry L[i, j]; the log-determinant contributes
/// -2 / L_ii on the center channel.
pub fn nll_grad_weights(
    x: &Array2<f64>,
    mean: &Array2<f64>,
    factor: &CholFactor,
) -> Result<Array3<f64>> {
    let r = x - mean;
    let u = factor.apply_transpose(&r)?;
    let pat = factor.pattern();
    let (h, w) = (pat.height() as i32, pat.width() as i32);
    let center = pat.center_channel();
    let mut grad = Array3::zeros(factor.weights().dim());
    for y in 0..h {
        for x_ in 0..w {
            let ri = r[(y as usize, x_ as usize)];
            for (c, &(dy, dx)) in pat.offsets().iter().enumerate() {
                let (ny, nx) = (y + dy, x_ + dx);
                if ny >= 0 && nx >= 0 && nx < w {
                    grad[(y as usize, x_ as usize, c)] = ri * u[(ny as usize, nx as usize)];
                }
            }
            grad[(y as usize, x_ as usize, center)] -=
                2.0 / factor.weights()[(y as usize, x_ as usize, center)];
        }
    }
    Ok(grad)
}

/// Dense verification helpers. Only intended for tests and oracle checks on
/// small images; everything in the crate proper goes through the sparse path.
#[doc(hidden)]
pub mod dense {
    use super::CholFactor;
    use ndarray::Array2;

    /// Scatters the factor's weight channels into a dense d x d
    /// lower-triangular matrix under raster ordering.
    pub fn dense_lower(factor: &CholFactor) -> Array2<f64> {
        let pat = factor.pattern();
        let (h, w) = (pat.height() as i32, pat.width() as i32);
        let d = (h * w) as usize;
        let mut m = Array2::zeros((d, d));
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                for (c, &(dy, dx)) in pat.offsets().iter().enumerate() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && nx < w {
                        let j = (ny * w + nx) as usize;
                        m[(i, j)] = factor.weights()[(y as usize, x as usize, c)];
                    }
                }
            }
        }
        m
    }

    pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a.dot(b)
    }

    /// Dense Cholesky factorization of an SPD matrix; returns the lower
    /// factor or None when the matrix is not positive definite.
    pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
        let n = a.nrows();
        let mut l: Array2<f64> = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return None;
                    }
                    l[(i, j)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Some(l)
    }

    /// Solves L y = b for lower-triangular L.
    pub fn solve_lower(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
        let n = l.nrows();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// Solves Lᵀ x = b for lower-triangular L.
    pub fn solve_upper_t(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
        let n = l.nrows();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= l[(j, i)] * x[j];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    /// Inverse of an SPD matrix through its dense Cholesky factorization.
    pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
        let l = cholesky(a)?;
        let n = a.nrows();
        let mut inv = Array2::zeros((n, n));
        for col in 0..n {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            let y = solve_lower(&l, &e);
            let x = solve_upper_t(&l, &y);
            for row in 0..n {
                inv[(row, col)] = x[row];
            }
        }
        Some(inv)
    }

    /// log det of an SPD matrix through dense Cholesky.
    pub fn spd_log_det(a: &Array2<f64>) -> Option<f64> {
        let l = cholesky(a)?;
        Some(2.0 * (0..a.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::dense::*;
    use super::*;
    use ndarray::{Array1, Array2, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_raw(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((h, w, c), || rng.sample::<f64, _>(StandardNormal) * 0.5)
    }

    fn random_factor(h: usize, w: usize, seed: u64) -> CholFactor {
        let pattern = SparsityPattern::causal_3x3(h, w);
        let raw = random_raw(h, w, pattern.channels(), seed);
        CholFactor::from_raw_channels(&raw, pattern, 3.0).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.sample(StandardNormal))
    }

    fn flat(v: &Array2<f64>) -> Vec<f64> {
        v.iter().copied().collect()
    }

    #[test]
    fn zero_raw_center_gives_unit_diagonal() {
        let pattern = SparsityPattern::causal_3x3(4, 4);
        let raw = Array3::zeros((4, 4, 5));
        for &bound in &[0.5, 3.0, 10.0] {
            let f = CholFactor::from_raw_channels(&raw, pattern.clone(), bound).unwrap();
            let center = f.pattern().center_channel();
            for &d in f.weights().slice(ndarray::s![.., .., center]) {
                assert_eq!(d, 1.0);
            }
        }
    }

    #[test]
    fn diagonal_saturates_at_exp_bound() {
        let pattern = SparsityPattern::causal_3x3(2, 2);
        let mut raw = Array3::zeros((2, 2, 5));
        raw.slice_mut(ndarray::s![.., .., 4]).fill(100.0);
        let f = CholFactor::from_raw_channels(&raw, pattern, 3.0).unwrap();
        let center = f.pattern().center_channel();
        for &d in f.weights().slice(ndarray::s![.., .., center]) {
            assert!((d - 3.0f64.exp()).abs() < 1e-3, "diag {d} vs exp(3) = 20.0855");
            assert!(d <= 3.0f64.exp());
        }
    }

    #[test]
    fn channel_count_mismatch_is_config_error() {
        let pattern = SparsityPattern::causal_3x3(4, 4);
        let raw = Array3::zeros((4, 4, 4));
        match CholFactor::from_raw_channels(&raw, pattern, 3.0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_raw_is_numeric_error() {
        let pattern = SparsityPattern::causal_3x3(4, 4);
        let mut raw = Array3::zeros((4, 4, 5));
        raw[(1, 1, 2)] = f64::NAN;
        match CholFactor::from_raw_channels(&raw, pattern, 3.0) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn dense_scatter_matches_brute_force() {
        // Hand scatter of the same weights into a 16x16 lower-triangular
        // matrix, independent of dense_lower's indexing.
        let f = random_factor(4, 4, 0);
        let m = dense_lower(&f);
        assert_eq!(m.dim(), (16, 16));
        let mut brute = Array2::zeros((16, 16));
        for y in 0..4usize {
            for x in 0..4usize {
                let i = y * 4 + x;
                for (c, &(dy, dx)) in f.pattern().offsets().iter().enumerate() {
                    let ny = y as i32 + dy;
                    let nx = x as i32 + dx;
                    if ny >= 0 && nx >= 0 && nx < 4 {
                        brute[(i, (ny * 4 + nx) as usize)] = f.weights()[(y, x, c)];
                    }
                }
            }
        }
        assert_eq!(m, brute);
        // Lower-triangular support.
        for i in 0..16 {
            for j in i + 1..16 {
                assert_eq!(m[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn apply_matches_dense_matvec() {
        let f = random_factor(4, 4, 0);
        let m = dense_lower(&f);
        let v = Array2::ones((4, 4));
        let sparse = f.apply(&v).unwrap();
        let dense_out = m.dot(&Array1::from_vec(flat(&v)));
        for (i, &s) in sparse.iter().enumerate() {
            assert!((s - dense_out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_identity_and_zero() {
        let f = CholFactor::identity(SparsityPattern::causal_3x3(4, 4));
        let v = random_image(4, 4, 7);
        assert_eq!(f.apply(&v).unwrap(), v);
        let z = Array2::zeros((4, 4));
        let g = random_factor(4, 4, 3);
        assert_eq!(g.apply(&z).unwrap(), z);
    }

    #[test]
    fn apply_transpose_matches_dense() {
        let f = random_factor(4, 4, 5);
        let m = dense_lower(&f);
        let v = random_image(4, 4, 9);
        let sparse = f.apply_transpose(&v).unwrap();
        let dense_out = m.t().dot(&Array1::from_vec(flat(&v)));
        for (i, &s) in sparse.iter().enumerate() {
            assert!((s - dense_out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn log_det_identity_is_zero() {
        let f = CholFactor::identity(SparsityPattern::causal_3x3(4, 4));
        assert_eq!(f.log_det_sigma().unwrap(), 0.0);
    }

    #[test]
    fn log_det_closed_form_diag_two() {
        let f = CholFactor::scaled_identity(SparsityPattern::causal_3x3(2, 2), 2.0);
        let expected = -8.0 * 2.0f64.ln();
        assert!((f.log_det_sigma().unwrap() - expected).abs() < 1e-12);
        assert!((expected + 5.5452).abs() < 1e-4);
    }

    #[test]
    fn log_det_matches_dense_oracle() {
        let f = random_factor(4, 4, 0);
        let m = dense_lower(&f);
        let llt = matmul(&m, &m.t().to_owned());
        // log|Σ| = -log|L Lᵀ| through an independent dense Cholesky.
        let dense_val = -spd_log_det(&llt).expect("LLt is SPD");
        let sparse_val = f.log_det_sigma().unwrap();
        assert!(
            (sparse_val - dense_val).abs() <= 1e-8 * dense_val.abs().max(1.0),
            "sparse {sparse_val} dense {dense_val}"
        );
    }

    #[test]
    fn nll_identity_small_residual() {
        let f = CholFactor::identity(SparsityPattern::causal_3x3(4, 4));
        let mean = Array2::zeros((4, 4));
        let mut x = Array2::zeros((4, 4));
        x[(0, 0)] = 1.0;
        x[(2, 3)] = 2.0;
        let v = nll(&x, &mean, &f).unwrap();
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn nll_at_mean_is_log_det() {
        let f = random_factor(4, 4, 11);
        let x = random_image(4, 4, 2);
        let v = nll(&x, &x, &f).unwrap();
        assert_eq!(v, f.log_det_sigma().unwrap());
    }

    #[test]
    fn nll_matches_dense_quadratic_form() {
        let f = random_factor(4, 4, 13);
        let x = random_image(4, 4, 1);
        let mean = random_image(4, 4, 2);
        let m = dense_lower(&f);
        // Quadratic form through the precision L Lᵀ.
        let llt = matmul(&m, &m.t().to_owned());
        let r = Array1::from_vec(flat(&(&x - &mean)));
        let quad = 0.5 * r.dot(&llt.dot(&r));
        let dense_val = -spd_log_det(&llt).unwrap() + quad;
        let sparse_val = nll(&x, &mean, &f).unwrap();
        assert!((sparse_val - dense_val).abs() <= 1e-8 * dense_val.abs().max(1.0));
    }

    #[test]
    fn nll_grads_match_finite_differences() {
        let f = random_factor(4, 4, 17);
        let x = random_image(4, 4, 3);
        let mean = random_image(4, 4, 4);
        let gm = nll_grad_mean(&x, &mean, &f).unwrap();
        let eps = 1e-6;
        for idx in [(0usize, 0usize), (1, 2), (3, 3)] {
            let mut mp = mean.clone();
            mp[idx] += eps;
            let mut mm = mean.clone();
            mm[idx] -= eps;
            let fd = (nll(&x, &mp, &f).unwrap() - nll(&x, &mm, &f).unwrap()) / (2.0 * eps);
            assert!((gm[idx] - fd).abs() < 1e-6, "mean grad {} vs fd {}", gm[idx], fd);
        }
        let gw = nll_grad_weights(&x, &mean, &f).unwrap();
        for idx in [(0usize, 0usize, 4usize), (2, 2, 0), (3, 1, 3), (1, 3, 4)] {
            let mut wp = f.weights().clone();
            wp[idx] += eps;
            let fp =
                CholFactor::from_weights(wp, f.pattern().clone(), f.diag_bound()).unwrap();
            let mut wm = f.weights().clone();
            wm[idx] -= eps;
            let fm =
                CholFactor::from_weights(wm, f.pattern().clone(), f.diag_bound()).unwrap();
            let fd = (nll(&x, &mean, &fp).unwrap() - nll(&x, &mean, &fm).unwrap()) / (2.0 * eps);
            assert!((gw[idx] - fd).abs() < 1e-5, "weight grad {} vs fd {}", gw[idx], fd);
        }
    }

    #[test]
    fn sample_residual_identity_and_scaled() {
        let u = random_image(4, 4, 21);
        let f = CholFactor::identity(SparsityPattern::causal_3x3(4, 4));
        assert_eq!(f.sample_residual(&u).unwrap(), u);
        let g = CholFactor::scaled_identity(SparsityPattern::causal_3x3(4, 4), 2.0);
        let r = g.sample_residual(&u).unwrap();
        for (a, b) in r.iter().zip(u.iter()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn solve_lt_matches_dense_solve() {
        let f = random_factor(4, 4, 23);
        let u = random_image(4, 4, 6);
        let r = f.solve_lt(&u).unwrap();
        let m = dense_lower(&f);
        // Verify Lᵀ r = u against the dense scatter.
        let back = m.t().dot(&Array1::from_vec(flat(&r)));
        for (i, &b) in Array1::from_vec(flat(&u)).iter().enumerate() {
            assert!((back[i] - b).abs() < 1e-10);
        }
    }

    #[test]
    fn covariance_row_identity_and_scaled() {
        let f = CholFactor::identity(SparsityPattern::causal_3x3(4, 4));
        let row = f.covariance_row((1, 1)).unwrap();
        let mut e = Array2::zeros((4, 4));
        e[(1, 1)] = 1.0;
        assert_eq!(row, e);

        let g = CholFactor::scaled_identity(SparsityPattern::causal_3x3(4, 4), 2.0);
        let row = g.covariance_row((0, 0)).unwrap();
        assert!((row[(0, 0)] - 0.25).abs() < 1e-15);
        assert!(row.iter().skip(1).all(|&v| v == 0.0));
    }

    #[test]
    fn covariance_row_matches_dense_inverse() {
        let f = random_factor(4, 4, 29);
        let m = dense_lower(&f);
        let llt = matmul(&m, &m.t().to_owned());
        let sigma = spd_inverse(&llt).unwrap();
        for &(py, px) in &[(0usize, 0usize), (1, 2), (3, 3)] {
            let row = f.covariance_row((py, px)).unwrap();
            let i = py * 4 + px;
            for (j, &v) in row.iter().enumerate() {
                assert!(
                    (v - sigma[(i, j)]).abs() <= 1e-8 * sigma[(i, j)].abs().max(1.0),
                    "row entry {v} vs dense {}",
                    sigma[(i, j)]
                );
            }
        }
    }

    #[test]
    fn covariance_row_symmetry() {
        let f = random_factor(4, 4, 31);
        let a = f.covariance_row((1, 2)).unwrap();
        let b = f.covariance_row((3, 0)).unwrap();
        assert!((a[(3, 0)] - b[(1, 2)]).abs() < 1e-10);
    }

    #[test]
    fn covariance_row_out_of_range() {
        let f = random_factor(4, 4, 1);
        assert!(matches!(f.covariance_row((4, 0)), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn dense_sigma_is_positive_definite() {
        for seed in 0..5 {
            let f = random_factor(4, 4, seed);
            let m = dense_lower(&f);
            let llt = matmul(&m, &m.t().to_owned());
            assert!(cholesky(&llt).is_some(), "LLt not SPD for seed {seed}");
        }
    }

    #[test]
    fn apply_is_linear() {
        let f = random_factor(4, 4, 37);
        let v = random_image(4, 4, 8);
        let w = random_image(4, 4, 9);
        let (a, b) = (1.7, -0.3);
        let lhs = f.apply(&(a * &v + b * &w)).unwrap();
        let rhs = a * &f.apply(&v).unwrap() + b * &f.apply(&w).unwrap();
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn causal_5x5_has_13_channels() {
        let p = SparsityPattern::causal_5x5(8, 8);
        assert_eq!(p.channels(), 13);
        assert_eq!(p.offsets()[p.center_channel()], (0, 0));
    }

    #[test]
    fn empirical_sample_covariance_matches_dense_inverse() {
        // Monte-Carlo convergence at the 1/sqrt(N) rate; 5% relative
        // Frobenius tolerance at N = 1e5 on an 8x8 image.
        let f = random_factor(8, 8, 41);
        let d = 64;
        let m = dense_lower(&f);
        let llt = matmul(&m, &m.t().to_owned());
        let sigma = spd_inverse(&llt).unwrap();

        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut acc = Array2::<f64>::zeros((d, d));
        for _ in 0..n {
            let u = Array2::from_shape_simple_fn((8, 8), || rng.sample(StandardNormal));
            let r = f.sample_residual(&u).unwrap();
            let rf = flat(&r);
            for i in 0..d {
                for j in 0..=i {
                    acc[(i, j)] += rf[i] * rf[j];
                }
            }
        }
        let mut emp = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..=i {
                let v = acc[(i, j)] / n as f64;
                emp[(i, j)] = v;
                emp[(j, i)] = v;
            }
        }
        let num: f64 = (&emp - &sigma).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 0.05, "relative Frobenius error {}", num / den);
    }
}
