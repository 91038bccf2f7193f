//! Smooth spectral bases tying per-wavelength gains to shared coefficients.

use nalgebra::{DMatrix, DVector, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CVec, C64, SPEED_OF_LIGHT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// `((f − f0)/f0)^(k−1)`
    #[serde(rename = "freq-poly")]
    FrequencyPolynomial,
    /// `(λ/λ0)^(k−1)`
    #[serde(rename = "wl-power")]
    WavelengthPowerLaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub kind: BasisKind,
    pub order: usize,
    pub reference_frequency: f64,
}

impl Basis {
    pub fn new(kind: BasisKind, order: usize, reference_frequency: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("basis order must be at least 1"));
        }
        if !(reference_frequency > 0.0) {
            return Err(Error::invalid("reference frequency must be positive"));
        }
        Ok(Self { kind, order, reference_frequency })
    }

    fn variable(&self, wavelength: f64) -> f64 {
        match self.kind {
            BasisKind::FrequencyPolynomial => {
                let f = SPEED_OF_LIGHT / wavelength;
                (f - self.reference_frequency) / self.reference_frequency
            }
            BasisKind::WavelengthPowerLaw => wavelength * self.reference_frequency / SPEED_OF_LIGHT,
        }
    }

    /// Basis row `b_λ`; the first entry is always 1 (`0^0 = 1`).
    pub fn vector(&self, wavelength: f64) -> Result<DVector<f64>> {
        if !(wavelength > 0.0) {
            return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        let x = self.variable(wavelength);
        Ok(DVector::from_fn(self.order, |k, _| x.powi(k as i32)))
    }

    /// `J × K` matrix whose rows are the basis vectors of `wavelengths`.
    pub fn stack(&self, wavelengths: &[f64]) -> Result<DMatrix<f64>> {
        if wavelengths.is_empty() {
            return Err(Error::EmptyInput("wavelength subset"));
        }
        let mut out = DMatrix::zeros(wavelengths.len(), self.order);
        for (j, &w) in wavelengths.iter().enumerate() {
            out.set_row(j, &self.vector(w)?.transpose());
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub gain: Basis,
    pub directional: Basis,
}

impl BasisConfig {
    pub fn new(gain_order: usize, directional_order: usize, reference_frequency: f64) -> Result<Self> {
        Ok(Self {
            gain: Basis::new(BasisKind::FrequencyPolynomial, gain_order, reference_frequency)?,
            directional: Basis::new(BasisKind::WavelengthPowerLaw, directional_order, reference_frequency)?,
        })
    }
}

/// Concatenated per-entity coefficient blocks of equal length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusVector<T: Scalar> {
    data: DVector<T>,
    order: usize,
}

impl<T: Scalar + Copy> ConsensusVector<T> {
    pub fn new(data: DVector<T>, order: usize) -> Result<Self> {
        if order == 0 || !data.len().is_multiple_of(order) {
            return Err(Error::invalid(format!(
                "consensus vector of length {} is not divisible into blocks of {order}",
                data.len()
            )));
        }
        Ok(Self { data, order })
    }

    pub fn from_blocks(blocks: &[Vec<T>]) -> Result<Self> {
        let order = blocks.first().map(Vec::len).ok_or(Error::EmptyInput("consensus blocks"))?;
        let mut flat = Vec::with_capacity(order * blocks.len());
        for b in blocks {
            Error::check_len("consensus block", order, b.len())?;
            flat.extend_from_slice(b);
        }
        Self::new(DVector::from_vec(flat), order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_blocks(&self) -> usize {
        self.data.len() / self.order
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.data
    }

    pub fn as_vector_mut(&mut self) -> &mut DVector<T> {
        &mut self.data
    }

    pub fn into_vector(self) -> DVector<T> {
        self.data
    }

    pub fn block(&self, entity: usize) -> &[T] {
        &self.data.as_slice()[entity * self.order..(entity + 1) * self.order]
    }

    pub fn block_mut(&mut self, entity: usize) -> &mut [T] {
        let k = self.order;
        &mut self.data.as_mut_slice()[entity * k..(entity + 1) * k]
    }
}

fn project<T>(alpha: &ConsensusVector<T>, b: &DVector<f64>) -> Vec<T>
where
    T: Scalar + Copy + std::ops::Mul<f64, Output = T> + std::iter::Sum,
{
    (0..alpha.num_blocks())
        .map(|p| alpha.block(p).iter().zip(b.iter()).map(|(a, bk)| *a * *bk).sum())
        .collect()
}

/// `g_λ = (I_P ⊗ b_λ^T) α`.
pub fn project_gains(alpha: &ConsensusVector<C64>, wavelength: f64, basis: &Basis) -> Result<CVec> {
    Error::check_len("gain basis order", basis.order, alpha.order())?;
    let b = basis.vector(wavelength)?;
    Ok(CVec::from_vec(project(alpha, &b)))
}

/// `m_λ = (I_Q ⊗ b_{m,λ}^T) α_m`.
pub fn project_directional(alpha_m: &ConsensusVector<f64>, wavelength: f64, basis: &Basis) -> Result<Vec<f64>> {
    Error::check_len("directional basis order", basis.order, alpha_m.order())?;
    let b = basis.vector(wavelength)?;
    Ok(project(alpha_m, &b))
}

#[cfg(test)]
mod tests {
    use super::*;

    const F0: f64 = 30e6;

    fn wl(f: f64) -> f64 {
        SPEED_OF_LIGHT / f
    }

    #[test]
    fn basis_at_reference_frequency() {
        let b = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
        let v = b.vector(wl(F0)).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
        let b1 = Basis::new(BasisKind::FrequencyPolynomial, 1, F0).unwrap();
        assert_eq!(b1.vector(wl(27e6)).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn basis_ten_percent_offset() {
        let b = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
        let v = b.vector(wl(1.1 * F0)).unwrap();
        for (got, want) in v.iter().zip([1.0, 0.1, 0.01]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn power_law_basis() {
        let b = Basis::new(BasisKind::WavelengthPowerLaw, 3, F0).unwrap();
        let v = b.vector(2.0 * wl(F0)).unwrap();
        for (got, want) in v.iter().zip([1.0, 2.0, 4.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_rejects_bad_input() {
        assert!(Basis::new(BasisKind::FrequencyPolynomial, 0, F0).is_err());
        let b = Basis::new(BasisKind::FrequencyPolynomial, 2, F0).unwrap();
        assert!(b.vector(0.0).is_err());
        assert!(b.stack(&[]).is_err());
    }

    #[test]
    fn constant_model_projects_to_constant_gains() {
        let c = C64::new(0.7, -0.2);
        let blocks: Vec<Vec<C64>> = (0..4).map(|_| vec![c, C64::new(0.0, 0.0), C64::new(0.0, 0.0)]).collect();
        let alpha = ConsensusVector::from_blocks(&blocks).unwrap();
        let basis = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
        for f in [25e6, 30e6, 33e6] {
            let g = project_gains(&alpha, wl(f), &basis).unwrap();
            assert!(g.iter().all(|v| (*v - c).norm() < 1e-15));
        }
        let zero = ConsensusVector::new(CVec::zeros(12), 3).unwrap();
        assert!(project_gains(&zero, wl(28e6), &basis).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn projection_matches_dot_products() {
        let basis = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
        let data: Vec<C64> = (0..9).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos())).collect();
        let alpha = ConsensusVector::new(CVec::from_vec(data.clone()), 3).unwrap();
        for f in [29e6, 31.5e6] {
            let x = (f - F0) / F0;
            let g = project_gains(&alpha, wl(f), &basis).unwrap();
            for p in 0..3 {
                let want = data[3 * p] + data[3 * p + 1] * x + data[3 * p + 2] * x * x;
                assert!((g[p] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn directional_projection() {
        let basis = Basis::new(BasisKind::WavelengthPowerLaw, 2, F0).unwrap();
        let am = ConsensusVector::from_blocks(&[vec![2.0, 0.0], vec![1.0, 0.5]]).unwrap();
        let lam = 1.5 * wl(F0);
        let m = project_directional(&am, lam, &basis).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-12);
        assert!((m[1] - 1.75).abs() < 1e-12);
        let zero = ConsensusVector::new(DVector::zeros(4), 2).unwrap();
        assert_eq!(project_directional(&zero, lam, &basis).unwrap(), vec![0.0, 0.0]);
        assert!(project_directional(&am, lam, &Basis::new(BasisKind::WavelengthPowerLaw, 3, F0).unwrap()).is_err());
    }

    #[test]
    fn consensus_vector_rejects_ragged_length() {
        assert!(ConsensusVector::new(CVec::zeros(7), 3).is_err());
        assert!(ConsensusVector::<f64>::from_blocks(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    fn rank(mut m: DMatrix<f64>) -> usize {
        // Gaussian elimination with partial pivoting.
        let (rows, cols) = m.shape();
        let mut r = 0;
        for c in 0..cols {
            let Some(piv) = (r..rows).max_by(|&a, &b| m[(a, c)].abs().total_cmp(&m[(b, c)].abs())) else {
                break;
            };
            if m[(piv, c)].abs() < 1e-12 {
                continue;
            }
            m.swap_rows(r, piv);
            for i in (r + 1)..rows {
                let f = m[(i, c)] / m[(r, c)];
                for j in c..cols {
                    m[(i, j)] -= f * m[(r, j)];
                }
            }
            r += 1;
        }
        r
    }

    #[test]
    fn stacked_basis_structure() {
        let basis = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
        let single = basis.stack(&[wl(31e6)]).unwrap();
        assert_eq!(single.row(0).transpose(), basis.vector(wl(31e6)).unwrap());
        let same = basis.stack(&[wl(F0); 3]).unwrap();
        assert_eq!(same.row(0), same.row(2));
        let vander = basis.stack(&[wl(27e6), wl(30e6), wl(34e6)]).unwrap();
        assert_eq!(rank(vander), 3);
    }

    #[test]
    fn exact_representability() {
        let basis = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
        let lams: Vec<f64> = [27e6, 29e6, 31e6, 33e6].iter().map(|f| wl(*f)).collect();
        let truth = [C64::new(1.0, 0.2), C64::new(-0.5, 0.3), C64::new(2.0, -1.0)];
        let alpha = ConsensusVector::new(CVec::from_row_slice(&truth), 3).unwrap();
        let g: Vec<C64> = lams.iter().map(|l| project_gains(&alpha, *l, &basis).unwrap()[0]).collect();
        let b = basis.stack(&lams).unwrap().map(|v| C64::new(v, 0.0));
        let rhs = CVec::from_vec(g);
        let normal = b.adjoint() * &b;
        let fit = normal.cholesky().unwrap().solve(&(b.adjoint() * &rhs));
        let resid = (&b * &fit - &rhs).norm();
        assert!(resid < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn projection_is_linear(
            re in proptest::collection::vec(-2.0f64..2.0, 12),
            im in proptest::collection::vec(-2.0f64..2.0, 12),
            ar in -2.0f64..2.0, ai in -2.0f64..2.0,
            f in 20e6f64..40e6,
        ) {
            let basis = Basis::new(BasisKind::FrequencyPolynomial, 3, F0).unwrap();
            let a1 = CVec::from_fn(6, |i, _| C64::new(re[i], im[i]));
            let a2 = CVec::from_fn(6, |i, _| C64::new(re[i + 6], im[i + 6]));
            let a = C64::new(ar, ai);
            let combo = ConsensusVector::new(&a1 * a + &a2, 3).unwrap();
            let lhs = project_gains(&combo, wl(f), &basis).unwrap();
            let g1 = project_gains(&ConsensusVector::new(a1, 3).unwrap(), wl(f), &basis).unwrap();
            let g2 = project_gains(&ConsensusVector::new(a2, 3).unwrap(), wl(f), &basis).unwrap();
            proptest::prop_assert!((lhs - (g1 * a + g2)).norm() < 1e-10);
        }
    }
}
