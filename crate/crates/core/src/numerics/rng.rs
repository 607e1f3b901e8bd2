use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Counter-based random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha20: the seed selects the key and the stream id selects the
/// nonce, so distinct ids never share keystream blocks.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A new stream with the same seed and a different id.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian_tensor(&mut self, shape: &[usize], sigma: f64) -> Tensor {
        Tensor::from_fn(shape, |_| sigma * self.normal())
    }
}

/// I.i.d. `N(0, sigma^2)` entries drawn from `stream`.
pub fn sample_gaussian(stream: &mut RandomStream, shape: &[usize], sigma: f64) -> crate::Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(crate::error::contract!(
            "sample_gaussian: sigma must be positive, got {sigma}"
        ));
    }
    if shape.contains(&0) {
        return Err(crate::error::contract!("sample_gaussian: empty shape {:?}", shape));
    }
    Ok(stream.gaussian_tensor(shape, sigma))
}
