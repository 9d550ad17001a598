use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mix_seed;
use super::scene::{Inventory, Scene};
use crate::error::{Error, Result};

/// A still image (one frame) or a clip (several frames) as feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionItem {
    pub frames: Vec<Vec<f32>>,
}

impl VisionItem {
    pub fn new(frames: Vec<Vec<f32>>) -> Result<Self> {
        let item = VisionItem { frames };
        item.validate(None)?;
        Ok(item)
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, v_dim: Option<usize>) -> Result<()> {
        let dim = self.dim();
        if self.frames.is_empty() || dim == 0 {
            return Err(Error::invalid("vision item needs at least one non-empty frame"));
        }
        if let Some(want) = v_dim {
            if dim != want {
                return Err(Error::Shape {
                    op: "vision frame",
                    left: vec![dim],
                    right: vec![want],
                });
            }
        }
        if self.frames.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("vision frames differ in length"));
        }
        if self.frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vision item has non-finite values"));
        }
        Ok(())
    }
}

/// Projects a scene's multi-hot attribute vector through one fixed random
/// matrix, then jitters each frame.
#[derive(Debug, Clone)]
pub struct VisionRenderer {
    projection: Vec<f32>,
    v_dim: usize,
    inventory: Inventory,
}

impl VisionRenderer {
    pub fn new(seed: u64, v_dim: usize) -> Result<Self> {
        if v_dim == 0 {
            return Err(Error::invalid("v_dim must be positive"));
        }
        let inventory = Inventory::DEFAULT;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7669_7369));
        // four active attributes; std 0.5 gives unit-variance features
        let normal = Normal::new(0.0f32, 0.5).unwrap();
        let projection = (0..inventory.attributes() * v_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            projection,
            v_dim,
            inventory,
        })
    }

    pub fn v_dim(&self) -> usize {
        self.v_dim
    }

    pub fn render(&self, s: &Scene, frames: usize, jitter: f32, seed: u64) -> Result<VisionItem> {
        if frames == 0 {
            return Err(Error::invalid("render_vision needs at least one frame"));
        }
        if !(jitter >= 0.0) {
            return Err(Error::invalid(format!("jitter must be non-negative, got {jitter}")));
        }
        let mut base = vec![0.0f32; self.v_dim];
        for a in s.attribute_indices(&self.inventory) {
            let row = &self.projection[a * self.v_dim..(a + 1) * self.v_dim];
            base.iter_mut().zip(row).for_each(|(b, r)| *b += r);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = (0..frames)
            .map(|_| {
                if jitter == 0.0 {
                    return base.clone();
                }
                let noise = Normal::new(0.0f32, jitter).unwrap();
                base.iter().map(|b| b + noise.sample(&mut rng)).collect()
            })
            .collect();
        Ok(VisionItem { frames: out })
    }
}
