use super::tensor::Tensor;
use crate::error::{contract, Result};

/// `size x size` Gaussian low-pass taps with standard deviation `sigma`,
/// renormalised so the taps sum to one.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(contract!("gaussian kernel size must be odd and positive, got {size}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(contract!("gaussian sigma must be positive, got {sigma}"));
    }
    let half = (size / 2) as f64;
    let two_var = 2.0 * sigma * sigma;
    let norm = 1.0 / (std::f64::consts::PI * two_var);
    let mut k = Tensor::from_fn(&[size, size], |idx| {
        let u = (idx / size) as f64 - half;
        let v = (idx % size) as f64 - half;
        norm * (-(u * u + v * v) / two_var).exp()
    });
    let total = k.sum();
    for x in k.data_mut() {
        *x /= total;
    }
    // Fold the rounding residue of the division into the centre tap.
    let centre = (size * size) / 2;
    for _ in 0..2 {
        let residue = 1.0 - k.sum();
        k.data_mut()[centre] += residue;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tap() {
        assert_eq!(gaussian_kernel(1, 0.3).unwrap().data(), &[1.0]);
    }

    #[test]
    fn three_by_three_unit_sigma() {
        // raw taps 1, e^-1/2, e^-1 over the 9-tap sum 1 + 4e^-1/2 + 4e^-1
        let k = gaussian_kernel(3, 1.0).unwrap();
        let s = 1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp();
        assert!((k.at2(1, 1) - 1.0 / s).abs() < 1e-15);
        assert!((k.at2(0, 1) - (-0.5f64).exp() / s).abs() < 1e-15);
        assert!((k.at2(0, 0) - (-1.0f64).exp() / s).abs() < 1e-15);
        assert!((k.at2(1, 1) - 0.2042).abs() < 1e-4);
        assert!((k.at2(1, 0) - 0.1238).abs() < 1e-4);
        assert!((k.at2(2, 2) - 0.0751).abs() < 1e-4);
    }

    #[test]
    fn normalised_and_symmetric() {
        for &size in &[1usize, 3, 5, 7, 9, 11] {
            for &sigma in &[0.3, 0.5, 1.0, 1.5, 4.0] {
                let k = gaussian_kernel(size, sigma).unwrap();
                assert!((k.sum() - 1.0).abs() <= 1e-15, "K={size} sigma={sigma}");
                for i in 0..size {
                    for j in 0..size {
                        let v = k.at2(i, j);
                        assert!(v > 0.0);
                        assert_eq!(v, k.at2(size - 1 - i, j));
                        assert_eq!(v, k.at2(i, size - 1 - j));
                        assert_eq!(v, k.at2(j, i));
                    }
                }
            }
        }
    }

    #[test]
    fn default_low_pass_size() {
        let k = gaussian_kernel(7, 1.0).unwrap();
        assert_eq!(k.len(), 49);
        assert!((k.sum() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn invalid_arguments() {
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(0, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
        assert!(gaussian_kernel(3, -2.0).is_err());
    }
}
