use crate::tensor::{norm, Tensor};

/// Norms below this fall back to straight-through semantics.
pub const ROTATION_EPS: f64 = 1e-9;

/// Scale and Householder direction that carry `z` onto `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationFactors {
    pub rho: f64,
    pub r: Vec<f64>,
    pub z_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
    antiparallel: bool,
}

impl RotationFactors {
    /// `None` when either vector is shorter than [`ROTATION_EPS`].
    pub fn new(z: &[f64], c: &[f64]) -> Option<Self> {
        let (nz, nc) = (norm(z), norm(c));
        if nz < ROTATION_EPS || nc < ROTATION_EPS {
            return None;
        }
        let z_bar: Vec<f64> = z.iter().map(|v| v / nz).collect();
        let c_bar: Vec<f64> = c.iter().map(|v| v / nc).collect();
        let sum: Vec<f64> = z_bar.iter().zip(&c_bar).map(|(a, b)| a + b).collect();
        let ns = norm(&sum);
        let antiparallel = ns < ROTATION_EPS;
        let r = if antiparallel {
            // R degenerates to the reflection I - 2 c_bar c_bar^T
            c_bar.clone()
        } else {
            sum.iter().map(|v| v / ns).collect()
        };
        Some(RotationFactors {
            rho: nc / nz,
            r,
            z_bar,
            c_bar,
            antiparallel,
        })
    }

    /// `R = I - 2 r r^T + 2 c_bar z_bar^T`, row-major `D x D`.
    pub fn rotation(&self) -> Tensor {
        let d = self.r.len();
        let mut m = Tensor::identity(d);
        let data = m.data_mut();
        for i in 0..d {
            for j in 0..d {
                data[i * d + j] -= 2.0 * self.r[i] * self.r[j];
                if !self.antiparallel {
                    data[i * d + j] += 2.0 * self.c_bar[i] * self.z_bar[j];
                }
            }
        }
        m
    }

    /// `rho R`, the frozen linear map applied to `z`.
    pub fn scaled_rotation(&self) -> Tensor {
        let mut m = self.rotation();
        m.data_mut().iter_mut().for_each(|v| *v *= self.rho);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(m: &Tensor, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..d).map(|i| (0..d).map(|j| m.data()[i * d + j] * z[j]).sum()).collect()
    }

    #[test]
    fn parallel_vectors_give_identity() {
        let f = RotationFactors::new(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        let r = f.rotation();
        for (a, b) in r.data().iter().zip(Tensor::identity(2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((f.rho - 2.0).abs() < 1e-12);
    }

    #[test]
    fn maps_z_onto_c() {
        let f = RotationFactors::new(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        let out = apply(&f.scaled_rotation(), &[0.0, 1.0]);
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);
        assert!((norm(&f.r) - 1.0).abs() < 1e-9);
        assert!((norm(&f.z_bar) - 1.0).abs() < 1e-9);
        assert!((norm(&f.c_bar) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn antiparallel_vectors_are_handled() {
        let f = RotationFactors::new(&[1.0, 1.0, 0.0], &[-2.0, -2.0, 0.0]).unwrap();
        let out = apply(&f.scaled_rotation(), &[1.0, 1.0, 0.0]);
        assert!((out[0] + 2.0).abs() < 1e-12 && (out[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn short_vectors_have_no_rotation() {
        assert!(RotationFactors::new(&[0.0, 0.0], &[1.0, 0.0]).is_none());
        assert!(RotationFactors::new(&[1.0, 0.0], &[1e-12, 0.0]).is_none());
    }
}
