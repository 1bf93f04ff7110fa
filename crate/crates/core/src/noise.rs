//! Seeded noise for reparameterized sampling.
//!
//! All stochasticity in inference flows through a [`Noise`] value, so two
//! runs that start from the same state draw bit-identical samples.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Noise {
    rng: ChaCha8Rng,
    dtype: DType,
}

/// Serializable position of a [`Noise`] stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl Noise {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn normal(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Standard logistic samples `log u - log(1 - u)`, u ~ U(0, 1).
    pub fn logistic(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = self.rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                u.ln() - (-u).ln_1p()
            })
            .collect();
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn state(&self) -> NoiseState {
        NoiseState {
            seed: hex::encode(self.rng.get_seed()),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &NoiseState, dtype: DType) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("noise state: {m}"));
        let bytes = hex::decode(&state.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let word_pos: u128 = state.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(word_pos);
        Ok(Self { rng, dtype })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trip_continues_stream() {
        let mut a = Noise::new(9, DType::F64);
        a.normal(&[7]).unwrap();
        let saved = a.state();
        let next = a.normal(&[5]).unwrap().to_vec1::<f64>().unwrap();
        let mut b = Noise::from_state(&saved, DType::F64).unwrap();
        assert_eq!(b.normal(&[5]).unwrap().to_vec1::<f64>().unwrap(), next);
    }

    #[test]
    fn logistic_is_finite() {
        let mut n = Noise::new(1, DType::F32);
        let v = n.logistic(&[1000]).unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
