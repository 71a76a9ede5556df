//! Seeded random streams, class-pair quadruples and Beta mixing coefficients.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named, independently seeded ChaCha8 stream.
///
/// The key is `SHA-256(seed ‖ stream_id)`, so distinct stream ids never share
/// a sequence and consumers of one stream cannot perturb another.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream_id: String,
    rng: ChaCha8Rng,
}

/// Serializable position of a [`RandomStream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream_id: String,
    /// ChaCha word position, decimal encoded (it is a `u128`).
    pub word_pos: String,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(stream_id.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            stream_id: stream_id.to_owned(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            stream_id: self.stream_id.clone(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(state: &StreamState) -> Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad stream position {:?}", state.word_pos)))?;
        let mut stream = Self::new(state.seed, &state.stream_id);
        stream.rng.set_word_pos(pos);
        Ok(stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.rng.gen::<bool>()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Four raw samples from two distinct classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruple {
    pub c1: Tensor,
    pub c2: Tensor,
    pub d1: Tensor,
    pub d2: Tensor,
    pub class_c: usize,
    pub class_d: usize,
    /// Dataset item indices of `(c1, c2, d1, d2)`.
    pub items: [usize; 4],
}

impl Quadruple {
    pub fn new(c: [Tensor; 2], d: [Tensor; 2], class_c: usize, class_d: usize) -> Result<Self> {
        if class_c == class_d {
            return Err(Error::Protocol(format!("quadruple classes must differ, both are {class_c}")));
        }
        let [c1, c2] = c;
        let [d1, d2] = d;
        for t in [&c2, &d1, &d2] {
            t.ensure_shape(c1.shape())?;
        }
        Ok(Self {
            c1,
            c2,
            d1,
            d2,
            class_c,
            class_d,
            items: [0, 1, 2, 3],
        })
    }

    pub fn image_shape(&self) -> &[usize] {
        self.c1.shape()
    }
}

/// Two distinct classes, uniform over unordered pairs.
pub fn sample_class_pair(rng: &mut RandomStream, num_classes: usize) -> Result<(usize, usize)> {
    if num_classes < 2 {
        return Err(Error::InvalidDataset(format!(
            "class pairs need at least 2 classes, dataset has {num_classes}"
        )));
    }
    let a = rng.below(num_classes);
    let mut b = rng.below(num_classes - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

fn distinct_pair(rng: &mut RandomStream, class: usize, members: &[usize]) -> Result<(usize, usize)> {
    if members.len() < 2 {
        return Err(Error::InsufficientSamples {
            class,
            available: members.len(),
            required: 2,
        });
    }
    let i = rng.below(members.len());
    let mut j = rng.below(members.len() - 1);
    if j >= i {
        j += 1;
    }
    Ok((members[i], members[j]))
}

pub fn draw_quadruple(rng: &mut RandomStream, dataset: &Dataset, class_c: usize, class_d: usize) -> Result<Quadruple> {
    if class_c == class_d {
        return Err(Error::Protocol(format!("quadruple classes must differ, both are {class_c}")));
    }
    let (c1, c2) = distinct_pair(rng, class_c, dataset.class_members(class_c)?)?;
    let (d1, d2) = distinct_pair(rng, class_d, dataset.class_members(class_d)?)?;
    Ok(Quadruple {
        c1: dataset.image(c1),
        c2: dataset.image(c2),
        d1: dataset.image(d1),
        d2: dataset.image(d2),
        class_c,
        class_d,
        items: [c1, c2, d1, d2],
    })
}

/// One draw from `Beta(alpha, alpha)`.
pub fn sample_beta(rng: &mut RandomStream, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidHyperparameter {
            name: "alpha",
            value: alpha,
            reason: "Beta concentration must be positive and finite",
        });
    }
    let dist = Beta::new(alpha, alpha).map_err(|_| Error::InvalidHyperparameter {
        name: "alpha",
        value: alpha,
        reason: "rejected by the Beta sampler",
    })?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

/// A batch of `batch_size / 4` quadruples with independently drawn class
/// pairs.
pub fn sample_batch(rng: &mut RandomStream, dataset: &Dataset, batch_size: usize) -> Result<Vec<Quadruple>> {
    if batch_size == 0 || !batch_size.is_multiple_of(4) {
        return Err(Error::Config(format!("batch size {batch_size} must be a positive multiple of 4")));
    }
    (0..batch_size / 4)
        .map(|_| {
            let (c, d) = sample_class_pair(rng, dataset.num_classes())?;
            draw_quadruple(rng, dataset, c, d)
        })
        .collect()
}
