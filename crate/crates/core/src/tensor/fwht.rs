use super::DenseTensor;
use crate::error::{Error, Result};

/// Orthonormal fast Walsh-Hadamard transform, in place.
///
/// Every butterfly stage is scaled by 1/sqrt(2), so the transform is
/// symmetric, orthogonal and its own inverse.
pub fn fwht_in_place(data: &mut [f64]) -> Result<()> {
    let n = data.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    let norm = std::f64::consts::FRAC_1_SQRT_2;
    let mut half = 1;
    while half < n {
        for block in data.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = (x + y) * norm;
                *b = (x - y) * norm;
            }
        }
        half *= 2;
    }
    Ok(())
}

pub fn fwht(v: &DenseTensor) -> Result<DenseTensor> {
    if v.shape().order() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "fwht needs a 1-D tensor, got {}",
            v.shape()
        )));
    }
    let mut data = v.data().to_vec();
    fwht_in_place(&mut data)?;
    Ok(DenseTensor::vector(data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_impulse_gives_flat_half() {
        let out = fwht(&DenseTensor::vector(vec![1., 0., 0., 0.])).unwrap();
        for v in out.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(
            fwht_in_place(&mut [1.0, 2.0, 3.0]),
            Err(Error::NotPowerOfTwo { len: 3 })
        ));
        assert!(fwht_in_place(&mut []).is_err());
    }

    #[test]
    fn matches_sylvester_matrix() {
        // H[i][j] = (-1)^popcount(i & j) / sqrt(n)
        let n = 16;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let mut y = x.clone();
        fwht_in_place(&mut y).unwrap();
        for (i, yi) in y.iter().enumerate() {
            let direct: f64 = x
                .iter()
                .enumerate()
                .map(|(j, xj)| {
                    if (i & j).count_ones() % 2 == 0 {
                        *xj
                    } else {
                        -xj
                    }
                })
                .sum::<f64>()
                / (n as f64).sqrt();
            assert!((yi - direct).abs() < 1e-12);
        }
    }
}
