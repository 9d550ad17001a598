use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of the four attribute inventories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inventory {
    pub agents: usize,
    pub actions: usize,
    pub objects: usize,
    pub modifiers: usize,
}

impl Inventory {
    pub const DEFAULT: Inventory = Inventory {
        agents: 12,
        actions: 8,
        objects: 12,
        modifiers: 6,
    };

    pub fn combinations(&self) -> usize {
        self.agents * self.actions * self.objects * self.modifiers
    }

    /// Length of the multi-hot attribute vector.
    pub fn attributes(&self) -> usize {
        self.agents + self.actions + self.objects + self.modifiers
    }
}

/// The meaning shared by every rendering of an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scene {
    pub agent: u8,
    pub action: u8,
    pub object: u8,
    pub modifier: u8,
}

impl Scene {
    fn from_index(mut i: usize, inv: &Inventory) -> Self {
        let agent = i % inv.agents;
        i /= inv.agents;
        let action = i % inv.actions;
        i /= inv.actions;
        let object = i % inv.objects;
        i /= inv.objects;
        Scene {
            agent: agent as u8,
            action: action as u8,
            object: object as u8,
            modifier: i as u8,
        }
    }

    pub fn is_valid(&self, inv: &Inventory) -> bool {
        (self.agent as usize) < inv.agents
            && (self.action as usize) < inv.actions
            && (self.object as usize) < inv.objects
            && (self.modifier as usize) < inv.modifiers
    }

    /// Offsets of the active entries of the multi-hot attribute vector.
    pub fn attribute_indices(&self, inv: &Inventory) -> [usize; 4] {
        [
            self.agent as usize,
            inv.agents + self.action as usize,
            inv.agents + inv.actions + self.object as usize,
            inv.agents + inv.actions + inv.objects + self.modifier as usize,
        ]
    }
}

/// `n` distinct scenes drawn without replacement, fully determined by `seed`.
pub fn gen_scenes(seed: u64, n: usize) -> Result<Vec<Scene>> {
    let inv = Inventory::DEFAULT;
    if n < 4 {
        return Err(Error::invalid(format!(
            "gen_scenes: need at least 4 scenes for the four pair sets, got {n}"
        )));
    }
    if n > inv.combinations() {
        return Err(Error::invalid(format!(
            "gen_scenes: {n} scenes requested but only {} distinct scenes exist",
            inv.combinations()
        )));
    }
    let mut all: Vec<usize> = (0..inv.combinations()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = all.partial_shuffle(&mut rng, n);
    Ok(picked.iter().map(|&i| Scene::from_index(i, &inv)).collect())
}
