//! Angular-delay transform, truncation, normalization, and NMSE.
//!
//! The delay transform uses the kernel `exp(+j2πkn/Ñ)/√Ñ` and the angular
//! transform the conjugate-transposed kernel, so a path delayed by `k`
//! subcarrier periods lands in delay row `k` and both transforms are unitary.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Sentinel reported in place of −∞ dB for a perfect reconstruction.
pub const NEG_INF_DB: f64 = -1e9;

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} matrix with {} entries", data.len()),
            ));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        ComplexMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.energy().sqrt()
    }

    pub fn scale(&self, k: f64) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * k).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn matmul(&self, other: &ComplexMatrix) -> ComplexMatrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    fn conj_transpose(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }
}

/// Unitary delay (`Ñ_c × Ñ_c`) and angular (`N_t × N_t`) DFT matrices.
#[derive(Clone, Debug)]
pub struct DftPair {
    delay: ComplexMatrix,
    angle: ComplexMatrix,
    delay_inv: ComplexMatrix,
    angle_conj_t: ComplexMatrix,
}

fn dft_matrix(n: usize) -> ComplexMatrix {
    let norm = 1.0 / (n as f64).sqrt();
    ComplexMatrix::from_fn(n, n, |k, m| {
        let phase = 2.0 * std::f64::consts::PI * ((k * m) % n) as f64 / n as f64;
        Complex64::from_polar(norm, phase)
    })
}

impl DftPair {
    pub fn new(subcarriers: usize, antennas: usize) -> Self {
        let delay = dft_matrix(subcarriers);
        let angle = dft_matrix(antennas);
        DftPair {
            delay_inv: delay.conj_transpose(),
            angle_conj_t: angle.conj_transpose(),
            delay,
            angle,
        }
    }

    pub fn subcarriers(&self) -> usize {
        self.delay.rows
    }

    pub fn antennas(&self) -> usize {
        self.angle.rows
    }

    pub fn delay_matrix(&self) -> &ComplexMatrix {
        &self.delay
    }

    pub fn angle_matrix(&self) -> &ComplexMatrix {
        &self.angle
    }

    fn check(&self, h: &ComplexMatrix) -> Result<()> {
        if h.rows != self.subcarriers() || h.cols != self.antennas() {
            return Err(Error::shape(
                "angular-delay transform",
                format!(
                    "expected {}x{}, got {}x{}",
                    self.subcarriers(),
                    self.antennas(),
                    h.rows,
                    h.cols
                ),
            ));
        }
        Ok(())
    }

    /// `F_d · H̃ · F_aᴴ`.
    pub fn to_angular_delay(&self, h: &ComplexMatrix) -> Result<ComplexMatrix> {
        self.check(h)?;
        Ok(self.delay.matmul(h).matmul(&self.angle_conj_t))
    }

    /// `F_dᴴ · H · F_a`, the inverse of [`DftPair::to_angular_delay`].
    pub fn from_angular_delay(&self, h: &ComplexMatrix) -> Result<ComplexMatrix> {
        self.check(h)?;
        Ok(self.delay_inv.matmul(h).matmul(&self.angle))
    }
}

/// Keeps the first `rows` delay rows.
pub fn truncate(h: &ComplexMatrix, rows: usize) -> Result<ComplexMatrix> {
    if rows == 0 || rows > h.rows {
        return Err(Error::Bounds(format!(
            "truncation to {rows} rows of a {}-row matrix",
            h.rows
        )));
    }
    Ok(ComplexMatrix {
        rows,
        cols: h.cols,
        data: h.data[..rows * h.cols].to_vec(),
    })
}

/// Fraction of total energy in the first `rows` delay rows.
pub fn energy_ratio(h: &ComplexMatrix, rows: usize) -> Result<f64> {
    let kept = truncate(h, rows)?.energy();
    let total = h.energy();
    if total == 0.0 {
        return Err(Error::ZeroNorm { index: 0 });
    }
    Ok((kept / total).min(1.0))
}

/// Affine map `x ↦ x / (2S) + 0.5` into the network range `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    scale: f64,
}

impl Normalizer {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::DegenerateScale);
        }
        Ok(Normalizer { scale })
    }

    /// `S` = max absolute real/imag component over `samples`.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a ComplexMatrix>) -> Result<Self> {
        let scale = samples
            .into_iter()
            .flat_map(|m| m.data.iter())
            .fold(0.0f64, |acc, z| acc.max(z.re.abs()).max(z.im.abs()));
        Self::new(scale)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Two planes (real, imag) of `[0, 1]` values. Components outside
    /// `[-S, S]` are clamped and counted.
    pub fn normalize(&self, h: &ComplexMatrix) -> AngularDelayCsi {
        let plane = h.rows * h.cols;
        let mut data = vec![0.0f32; 2 * plane];
        let mut clamped = 0;
        let mut map = |x: f64| {
            let y = x / (2.0 * self.scale) + 0.5;
            if !(0.0..=1.0).contains(&y) {
                clamped += 1;
            }
            y.clamp(0.0, 1.0) as f32
        };
        for (i, z) in h.data.iter().enumerate() {
            data[i] = map(z.re);
            data[plane + i] = map(z.im);
        }
        AngularDelayCsi {
            tensor: Tensor::new(vec![2, h.rows, h.cols], data).expect("dims match data"),
            scale: self.scale,
            clamped,
        }
    }

    /// Inverse of [`Normalizer::normalize`] for a `2 × rows × cols` slice.
    pub fn denormalize(&self, planes: &[f32], rows: usize, cols: usize) -> Result<ComplexMatrix> {
        let plane = rows * cols;
        if planes.len() != 2 * plane {
            return Err(Error::shape(
                "denormalize",
                format!("{} values for a 2x{rows}x{cols} tensor", planes.len()),
            ));
        }
        let inv = |y: f32| (y as f64 - 0.5) * 2.0 * self.scale;
        Ok(ComplexMatrix {
            rows,
            cols,
            data: (0..plane)
                .map(|i| Complex64::new(inv(planes[i]), inv(planes[plane + i])))
                .collect(),
        })
    }
}

/// Network-ready CSI: `2 × N_c × N_t` real tensor with its normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularDelayCsi {
    pub tensor: Tensor,
    pub scale: f64,
    /// Components that fell outside `[-S, S]`.
    pub clamped: usize,
}

impl AngularDelayCsi {
    pub fn denormalize(&self) -> ComplexMatrix {
        let d = self.tensor.dims();
        Normalizer { scale: self.scale }
            .denormalize(self.tensor.data(), d[1], d[2])
            .expect("tensor dims are 2 x rows x cols")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nmse {
    pub linear: f64,
    /// `10 log10(linear)`, or [`NEG_INF_DB`] when `linear == 0`.
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        let db = if linear == 0.0 {
            NEG_INF_DB
        } else {
            10.0 * linear.log10()
        };
        Nmse { linear, db }
    }
}

/// Per-sample squared error over squared reference norm, averaged over the
/// batch. Samples are reduced in index order.
pub fn nmse(reference: &[ComplexMatrix], estimate: &[ComplexMatrix]) -> Result<Nmse> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::shape(
            "nmse",
            format!("{} references vs {} estimates", reference.len(), estimate.len()),
        ));
    }
    let mut total = 0.0;
    for (i, (h, e)) in reference.iter().zip(estimate).enumerate() {
        total += sample_ratio(i, h, e)?;
    }
    Ok(Nmse::from_linear(total / reference.len() as f64))
}

pub(crate) fn sample_ratio(index: usize, h: &ComplexMatrix, e: &ComplexMatrix) -> Result<f64> {
    if h.rows != e.rows || h.cols != e.cols {
        return Err(Error::shape(
            "nmse",
            format!("sample {index}: {}x{} vs {}x{}", h.rows, h.cols, e.rows, e.cols),
        ));
    }
    let denom = h.energy();
    if denom == 0.0 {
        return Err(Error::ZeroNorm { index });
    }
    let num: f64 = h.data.iter().zip(&e.data).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(num / denom)
}

/// NMSE between normalized network tensors `[batch, 2, rows, cols]`, computed
/// on the denormalized complex matrices.
pub fn nmse_normalized(norm: &Normalizer, reference: &Tensor, estimate: &Tensor) -> Result<Nmse> {
    if reference.dims() != estimate.dims() || reference.dims().len() != 4 || reference.dims()[1] != 2 {
        return Err(Error::shape(
            "nmse",
            format!("reference {:?} vs estimate {:?}", reference.dims(), estimate.dims()),
        ));
    }
    let (rows, cols) = (reference.dims()[2], reference.dims()[3]);
    let mut total = 0.0;
    for i in 0..reference.batch() {
        let h = norm.denormalize(reference.sample(i), rows, cols)?;
        let e = norm.denormalize(estimate.sample(i), rows, cols)?;
        total += sample_ratio(i, &h, &e)?;
    }
    Ok(Nmse::from_linear(total / reference.batch() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn constant_maps_to_dc() {
        let (nc, nt) = (8, 4);
        let dft = DftPair::new(nc, nt);
        let ones = ComplexMatrix::from_fn(nc, nt, |_, _| Complex64::new(1.0, 0.0));
        let h = dft.to_angular_delay(&ones).unwrap();
        let expect = (nc * nt) as f64 / ((nc * nt) as f64).sqrt();
        assert!((h.get(0, 0) - Complex64::new(expect, 0.0)).norm() < 1e-9);
        let rest: f64 = h.data().iter().skip(1).map(|z| z.norm()).sum();
        assert!(rest < 1e-9);
    }

    #[test]
    fn dft_is_unitary() {
        let dft = DftPair::new(12, 6);
        for m in [dft.delay_matrix(), dft.angle_matrix()] {
            let p = m.matmul(&m.conj_transpose());
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((p.get(r, c) - Complex64::new(expect, 0.0)).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let dft = DftPair::new(8, 4);
        assert!(matches!(
            dft.to_angular_delay(&ComplexMatrix::zeros(4, 8)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn truncation_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row0 = ComplexMatrix::from_fn(8, 4, |r, _| {
            if r == 0 {
                Complex64::new(rng.random_range(0.5..1.0), 0.3)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        for n in 1..=8 {
            assert_eq!(energy_ratio(&row0, n).unwrap(), 1.0);
        }
        let uniform = ComplexMatrix::from_fn(8, 4, |_, _| Complex64::new(1.0, -1.0));
        assert!((energy_ratio(&uniform, 4).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(truncate(&uniform, 0), Err(Error::Bounds(_))));
        assert!(matches!(truncate(&uniform, 9), Err(Error::Bounds(_))));
    }

    #[test]
    fn normalize_maps_range_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(4, 4, &mut rng);
        let norm = Normalizer::fit([&h]).unwrap();
        let csi = norm.normalize(&h);
        assert!(csi.tensor.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(csi.clamped, 0);
        let back = csi.denormalize();
        for (a, b) in h.data().iter().zip(back.data()) {
            assert!((a - b).norm() <= 1e-6 * a.norm().max(1.0));
        }
    }

    #[test]
    fn zero_scale_is_degenerate() {
        let zero = ComplexMatrix::zeros(2, 2);
        assert!(matches!(Normalizer::fit([&zero]), Err(Error::DegenerateScale)));
    }

    #[test]
    fn midpoint_and_clamp_accounting() {
        let norm = Normalizer::new(2.0).unwrap();
        let h = ComplexMatrix::new(
            1,
            2,
            vec![Complex64::new(0.0, 2.0), Complex64::new(2.4, -2.4)],
        )
        .unwrap();
        let csi = norm.normalize(&h);
        // planes: re = [0, 1.2S], im = [S, -1.2S]
        assert_eq!(csi.tensor.data(), &[0.5, 1.0, 1.0, 0.0]);
        assert_eq!(csi.clamped, 2);
    }

    #[test]
    fn nmse_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hs: Vec<_> = (0..4).map(|_| random_matrix(4, 4, &mut rng)).collect();
        let same = nmse(&hs, &hs).unwrap();
        assert_eq!(same.linear, 0.0);
        assert_eq!(same.db, NEG_INF_DB);
        let zeros: Vec<_> = hs.iter().map(|_| ComplexMatrix::zeros(4, 4)).collect();
        let z = nmse(&hs, &zeros).unwrap();
        assert_eq!(z.linear, 1.0);
        assert_eq!(z.db, 0.0);
    }

    #[test]
    fn nmse_zero_reference_names_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hs = vec![random_matrix(2, 2, &mut rng), ComplexMatrix::zeros(2, 2)];
        let err = nmse(&hs, &hs.clone()).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm { index: 1 }));
    }
}
