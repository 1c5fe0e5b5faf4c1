//! Few-shot training sets: seeded selection of `k` normals per category,
//! expanded by rotations, flips and small translations.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Rotation, then flips, then translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub shift: (i32, i32),
}

impl ViewTransform {
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        img.rotate90(self.quarter_turns)
            .flip(self.flip_horizontal, self.flip_vertical)
            .translate(self.shift.0, self.shift.1)
    }

    /// Undoes [`apply`](Self::apply) everywhere except the `|shift|`-wide
    /// border lost to edge replication.
    pub fn invert(&self, img: &ImageTensor) -> ImageTensor {
        img.translate(-self.shift.0, -self.shift.1)
            .flip(self.flip_horizontal, self.flip_vertical)
            .rotate90((4 - self.quarter_turns % 4) % 4)
    }

    fn random(rng: &mut ChaCha8Rng, max_shift: i32) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4),
            flip_horizontal: rng.random(),
            flip_vertical: rng.random(),
            shift: (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)),
        }
    }
}

/// `k` samples chosen without replacement, kept in their original order.
pub fn select_shots(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k == 0 || k > samples.len() {
        return Err(Error::InvalidArgument(format!("{k} shots requested from {} normals", samples.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, samples.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
}

/// `expansion` views of every image; the first view of each is the original.
pub fn augment(images: &[ImageTensor], expansion: usize, max_shift: i32, seed: u64) -> Vec<(ImageTensor, ViewTransform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len() * expansion);
    for img in images {
        for v in 0..expansion {
            let t = if v == 0 { ViewTransform::default() } else { ViewTransform::random(&mut rng, max_shift) };
            let id = format!("{}#{v}", img.id.as_deref().unwrap_or("view"));
            out.push((t.apply(img).with_id(id), t));
        }
    }
    out
}
