#![allow(dead_code)]

use pccl::dataset::Prepared;
use pccl_core::data::{preprocess, Sample};
use pccl_core::image::Image;
use pccl_core::phantom::{generate, PhantomConfig};
use pccl_core::{MaskMap, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 32;

/// Desk models at 32 px, one epoch, everything else at its default.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.input_size = SIZE;
    c.epochs = 1;
    c.seed = seed;
    c
}

pub fn phantoms(n: usize, seed: u64, prefix: &str) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = generate(SIZE, &PhantomConfig::default(), &mut rng);
            let image = Image::from_u8_interleaved(1, SIZE, SIZE, &p.image).unwrap();
            let mask = MaskMap::binary(SIZE, SIZE, p.mask).unwrap();
            let s = Sample::new(format!("{prefix}{i:03}"), image, Some(mask)).unwrap();
            preprocess(&s, SIZE).unwrap()
        })
        .collect()
}

pub fn unlabelled(samples: Vec<Sample>) -> Vec<Sample> {
    samples.into_iter().map(|s| Sample { mask: None, ..s }).collect()
}

/// Two labelled, eight unlabelled, two validation and three test images.
pub fn tiny_data(seed: u64) -> Prepared {
    Prepared {
        labelled: phantoms(2, seed, "l"),
        unlabelled: unlabelled(phantoms(8, seed + 1, "u")),
        val: phantoms(2, seed + 2, "v"),
        test: phantoms(3, seed + 3, "t"),
    }
}
