//! Named parameter registry. Every trainable array lives here; layers hold
//! [`ParamId`]s, which makes weight sharing a matter of two layers holding
//! the same id.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};

/// SplitMix64 step; used to derive independent sub-seeds from one master
/// seed so that re-runs and resumed runs consume identical random streams.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p.wrapping_mul(0xbf58476d1ce4e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

pub fn seeded_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is, which decides its initializer and whether AdamW
/// weight decay applies (norm gains/biases, plain biases and τ are exempt).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Matrix,
    Bias,
    NormGain,
    NormBias,
    Embedding,
    Memory,
    ConvKernel,
    Tau,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Matrix | ParamKind::Embedding | ParamKind::Memory | ParamKind::ConvKernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Uniform in ±sqrt(6/(fan_in+fan_out)), for projection matrices.
    FanUniform,
    Zeros,
    Ones,
    /// normal(0, 0.02) for embeddings, memory and conv kernels.
    SmallNormal,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InitSpec {
    pub kind: InitKind,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<E: Elem> {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<E>,
    pub kind: ParamKind,
    pub init: InitSpec,
    pub trainable: bool,
}

impl<E: Elem> Parameter<E> {
    pub fn shape2(&self) -> (usize, usize) {
        (self.shape[0], self.shape[1])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn init_values<E: Elem>(kind: InitKind, seed: u64, rows: usize, cols: usize) -> Vec<E> {
    let n = rows * cols;
    match kind {
        InitKind::Zeros => vec![E::zero(); n],
        InitKind::Ones => vec![E::one(); n],
        InitKind::FanUniform => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| E::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * limit))
                .collect()
        }
        InitKind::SmallNormal => {
            let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| E::from_f64(dist.sample(&mut rng))).collect()
        }
    }
}

impl ParamKind {
    fn default_init(self) -> InitKind {
        match self {
            ParamKind::Matrix => InitKind::FanUniform,
            ParamKind::Bias | ParamKind::NormBias | ParamKind::Tau => InitKind::Zeros,
            ParamKind::NormGain => InitKind::Ones,
            ParamKind::Embedding | ParamKind::Memory | ParamKind::ConvKernel => InitKind::SmallNormal,
        }
    }
}

pub struct Parameters<E: Elem> {
    items: Vec<Parameter<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Elem> Default for Parameters<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Parameters<E> {
    pub fn new() -> Self {
        Parameters { items: Vec::new(), by_name: HashMap::new() }
    }

    /// Register a parameter and initialize it from a sub-seed derived from
    /// (master_seed, registration index); re-initialization is bit-identical.
    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        kind: ParamKind,
        master_seed: u64,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name: {name}")));
        }
        let index = self.items.len();
        let init = InitSpec {
            kind: kind.default_init(),
            seed: mix_seed(master_seed, &[0x5eed, index as u64]),
        };
        let data = init_values(init.kind, init.seed, rows, cols);
        self.items.push(Parameter {
            name: name.to_string(),
            shape: [rows, cols],
            data,
            kind,
            init,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), index);
        Ok(ParamId(index))
    }

    pub fn reinit(&mut self, id: ParamId) {
        let p = &mut self.items[id.0];
        p.data = init_values(p.init.kind, p.init.seed, p.shape[0], p.shape[1]);
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.items[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.items.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| p.numel()).sum()
    }

    /// One zeroed gradient buffer per parameter, indexed by [`ParamId`].
    pub fn zeroed_grads(&self) -> Vec<Vec<E>> {
        self.items.iter().map(|p| vec![E::zero(); p.numel()]).collect()
    }
}
