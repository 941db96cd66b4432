//! Interleaving several data sources by sampling ratio.
//!
//! Each draw picks source `s` with probability `ratio_s / Σ ratio`, then a
//! frame of that source uniformly. Source size does not enter the source
//! probability, so a ratio directly sets a source's share of the stream. A
//! single source is passed through in order, cycling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A frame reference: (source, index within source).
pub type Draw = (usize, usize);

#[derive(Clone, Debug)]
pub struct DatasetMix {
    sizes: Vec<usize>,
    ratios: Vec<f64>,
    weights: Option<WeightedIndex<f64>>,
}

impl DatasetMix {
    pub fn new(sizes: Vec<usize>, ratios: Vec<f64>) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != ratios.len() {
            return Err(Error::invalid(format!("{} sources with {} ratios", sizes.len(), ratios.len())));
        }
        if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("ratios must be finite and >= 0"));
        }
        if ratios.iter().all(|&r| r == 0.0) {
            return Err(Error::invalid("ratios are all zero"));
        }
        if let Some(s) = (0..sizes.len()).find(|&s| sizes[s] == 0 && ratios[s] > 0.0) {
            return Err(Error::Degenerate(format!("source {s} is empty but has ratio {}", ratios[s])));
        }
        let weights = if sizes.len() > 1 {
            Some(WeightedIndex::new(&ratios).map_err(|e| Error::invalid(e.to_string()))?)
        } else {
            None
        };
        Ok(DatasetMix { sizes, ratios, weights })
    }

    /// Equal ratios over every source.
    pub fn uniform(sizes: Vec<usize>) -> Result<Self> {
        let n = sizes.len();
        Self::new(sizes, vec![1.0; n])
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// Frames drawn by sources with a positive ratio.
    pub fn active_frames(&self) -> usize {
        (0..self.sizes.len()).filter(|&s| self.ratios[s] > 0.0).map(|s| self.sizes[s]).sum()
    }

    /// The `count` draws of block `block`. Blocks are independent streams,
    /// so any block can be regenerated without replaying earlier ones.
    pub fn block(&self, seed: u64, block: u64, count: usize) -> Vec<Draw> {
        match &self.weights {
            None => {
                let n = self.sizes[0] as u64;
                (0..count as u64).map(|i| (0, ((block * count as u64 + i) % n) as usize)).collect()
            }
            Some(w) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(block);
                (0..count)
                    .map(|_| {
                        let s = w.sample(&mut rng);
                        (s, rng.random_range(0..self.sizes[s]))
                    })
                    .collect()
            }
        }
    }
}
