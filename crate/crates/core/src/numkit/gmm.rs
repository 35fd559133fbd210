use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Matrix, RngStream};

/// A d×m text-embedding stand-in: one column per token.
pub type Embedding = Matrix;

/// One mode of an isotropic Gaussian mixture over embeddings.
#[derive(Clone, Debug)]
pub struct GmmMode {
    pub weight: f64,
    pub mean: Matrix,
    pub sigma: f64,
}

/// Isotropic Gaussian-mixture specification for one concept.
#[derive(Clone, Debug)]
pub struct GmmSpec {
    pub modes: Vec<GmmMode>,
}

/// Serializable shape/weight part of a [`GmmSpec`]; the mode means travel as
/// binary blobs next to this descriptor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmDescriptor {
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl GmmSpec {
    pub fn single(mean: Matrix, sigma: f64) -> Self {
        GmmSpec {
            modes: vec![GmmMode {
                weight: 1.0,
                mean,
                sigma,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::invalid_input("GmmSpec: no modes"));
        }
        let (d, m) = self.modes[0].mean.shape();
        let mut total = 0.0;
        for mode in &self.modes {
            if mode.mean.shape() != (d, m) {
                return Err(Error::invalid_input("GmmSpec: inconsistent mean shapes"));
            }
            if !mode.mean.is_finite() || !mode.weight.is_finite() || !mode.sigma.is_finite() {
                return Err(Error::invalid_input("GmmSpec: non-finite entries"));
            }
            if mode.weight < 0.0 {
                return Err(Error::invalid_input("GmmSpec: negative weight"));
            }
            if mode.sigma < 0.0 {
                return Err(Error::invalid_input("GmmSpec: negative sigma"));
            }
            total += mode.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid_input(format!(
                "GmmSpec: weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.modes[0].mean.shape()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Weight-averaged mean matrix, used for cosine comparisons between
    /// concepts.
    pub fn pooled_mean(&self) -> Matrix {
        let (d, m) = self.dims();
        let mut out = Matrix::zeros(d, m);
        for mode in &self.modes {
            out.add_assign_scaled(&mode.mean, mode.weight);
        }
        out
    }

    pub fn descriptor(&self) -> GmmDescriptor {
        GmmDescriptor {
            weights: self.modes.iter().map(|m| m.weight).collect(),
            sigmas: self.modes.iter().map(|m| m.sigma).collect(),
        }
    }

    pub fn from_descriptor(desc: &GmmDescriptor, means: Vec<Matrix>) -> Result<Self> {
        if desc.weights.len() != desc.sigmas.len() || desc.weights.len() != means.len() {
            return Err(Error::Format(
                "GMM descriptor and mean count disagree".into(),
            ));
        }
        let spec = GmmSpec {
            modes: desc
                .weights
                .iter()
                .zip(&desc.sigmas)
                .zip(means)
                .map(|((&weight, &sigma), mean)| GmmMode {
                    weight,
                    mean,
                    sigma,
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws one embedding: a single mode index `r ~ π` for the whole matrix,
/// then `μ_r + σ_r·ξ` with ξ i.i.d. standard normal per entry.
///
/// A shared mode per embedding keeps concept samples coherent; the per-token
/// mixture construction used by the certification module lives there.
pub fn sample_gmm(spec: &GmmSpec, rng: &mut RngStream) -> Result<Embedding> {
    spec.validate()?;
    let weights = spec.weights();
    let r = rng.weighted_index(&weights);
    let mode = &spec.modes[r];
    let (d, m) = mode.mean.shape();
    let mut out = mode.mean.clone();
    if mode.sigma > 0.0 {
        for v in out.data_mut() {
            *v += mode.sigma * rng.standard_normal();
        }
    } else {
        // Keep the stream advancing identically regardless of sigma so that
        // downstream draws do not depend on which mode was hit.
        for _ in 0..d * m {
            rng.standard_normal();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_returns_mean_exactly() {
        let mean = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.5]]);
        let spec = GmmSpec::single(mean.clone(), 0.0);
        let mut rng = RngStream::new(1, 0);
        let e = sample_gmm(&spec, &mut rng).unwrap();
        assert_eq!(e.data(), mean.data());
    }

    #[test]
    fn standard_normal_frobenius_expectation() {
        // E ||E||_F^2 = d*m for a zero-mean unit-variance draw.
        let spec = GmmSpec::single(Matrix::zeros(2, 3), 1.0);
        let mut rng = RngStream::new(7, 0);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e = sample_gmm(&spec, &mut rng).unwrap();
            acc += e.data().iter().map(|x| x * x).sum::<f64>();
        }
        let mean = acc / n as f64;
        assert!((mean - 6.0).abs() < 0.06, "mean {mean}");
    }

    #[test]
    fn rejects_bad_weights() {
        let spec = GmmSpec {
            modes: vec![
                GmmMode {
                    weight: 0.5,
                    mean: Matrix::zeros(2, 2),
                    sigma: 1.0,
                },
                GmmMode {
                    weight: 0.4,
                    mean: Matrix::zeros(2, 2),
                    sigma: 1.0,
                },
            ],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let spec = GmmSpec {
            modes: vec![
                GmmMode {
                    weight: 0.3,
                    mean: Matrix::zeros(3, 2),
                    sigma: 0.7,
                },
                GmmMode {
                    weight: 0.7,
                    mean: Matrix::identity(3).matmul(&Matrix::from_vec(3, 2, vec![1.0; 6])),
                    sigma: 0.1,
                },
            ],
        };
        let mut a = RngStream::new(9, 3);
        let mut b = RngStream::new(9, 3);
        for _ in 0..32 {
            let ea = sample_gmm(&spec, &mut a).unwrap();
            let eb = sample_gmm(&spec, &mut b).unwrap();
            let same = ea
                .data()
                .iter()
                .zip(eb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }
}
