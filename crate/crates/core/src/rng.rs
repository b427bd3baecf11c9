//! Seed discipline: one 64-bit run seed fans out into independent named
//! streams, so adding or reordering consumers never shifts anyone else's
//! random numbers.
//!
//! A stream named `name` under seed `s` is a ChaCha8 generator seeded with
//! `splitmix64(s ^ fnv1a64(name))`. Child trees concatenate names with `/`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
    prefix: String,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            prefix: String::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree {
            seed: self.seed,
            prefix: self.path(name),
        }
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a64(&self.path(name))))
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
