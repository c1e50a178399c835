//! Seeded procedural images (gradients, band-limited noise, polygons, checkers)
//! with per-pixel palette targets.

use std::f32::consts::TAU;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pipelines::{palette_targets, LATENT_STRIDE};
use crate::tensor::{Array4, Shape4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Gradient,
    BandLimitedNoise,
    Polygons,
    Checkers,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Gradient, Texture::BandLimitedNoise, Texture::Polygons, Texture::Checkers];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub count: usize,
    pub crop_size: usize,
}

/// One training example: a `1×3×S×S` image, its palette classes and, for
/// enhancement training, the decoded base latent.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Array4,
    pub targets: Arc<[u8]>,
    pub base_latent: Option<Array4>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub examples: Vec<Example>,
    pub textures: Vec<Texture>,
}

type Rgb = [f32; 3];

const SPLIT_SALT: u64 = 0x05ee_d0f5_1017;

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn render(texture: Texture, size: usize, rng: &mut ChaCha8Rng) -> Array4 {
    let s = size as f32;
    let shape = Shape4::new(1, 3, size, size);
    match texture {
        Texture::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let theta = rng.gen_range(0.0..TAU);
            let (cx, cy) = (theta.cos(), theta.sin());
            let span = (cx.abs() + cy.abs()) * s;
            let offset = cx.min(0.0) * s + cy.min(0.0) * s;
            Array4::from_fn(shape, |_, c, y, x| {
                let t = ((x as f32 * cx + y as f32 * cy - offset) / span).clamp(0.0, 1.0);
                a[c] + (b[c] - a[c]) * t
            })
        }
        Texture::BandLimitedNoise => {
            let mut waves = [[(0.0f32, 0.0f32, 0.0f32, 0.0f32); 4]; 3];
            let base = color(rng);
            for ch in waves.iter_mut() {
                for w in ch.iter_mut() {
                    *w = (
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-2i32..=2) as f32,
                        rng.gen_range(-2i32..=2) as f32,
                        rng.gen_range(0.0..TAU),
                    );
                }
            }
            Array4::from_fn(shape, |_, c, y, x| {
                let v = waves[c]
                    .iter()
                    .map(|&(amp, fx, fy, ph)| amp * (TAU * (fx * x as f32 + fy * y as f32) / s + ph).sin())
                    .sum::<f32>();
                base[c] + v
            })
        }
        Texture::Polygons => {
            let background = color(rng);
            let shapes: Vec<(Vec<(f32, f32)>, Rgb)> = (0..rng.gen_range(1..=4))
                .map(|_| {
                    let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                    let r = rng.gen_range(0.15..0.5) * s;
                    let mut angles: Vec<f32> = (0..rng.gen_range(3..=6)).map(|_| rng.gen_range(0.0..TAU)).collect();
                    angles.sort_by(f32::total_cmp);
                    let verts = angles
                        .iter()
                        .map(|a| {
                            let rr = r * rng.gen_range(0.6..1.0);
                            (cx + rr * a.cos(), cy + rr * a.sin())
                        })
                        .collect();
                    (verts, color(rng))
                })
                .collect();
            let mut img = Array4::from_fn(shape, |_, c, _, _| background[c]);
            for (verts, col) in &shapes {
                for y in 0..size {
                    for x in 0..size {
                        if inside(verts, x as f32 + 0.5, y as f32 + 0.5) {
                            for (c, &v) in col.iter().enumerate() {
                                img.set(0, c, y, x, v);
                            }
                        }
                    }
                }
            }
            img
        }
        Texture::Checkers => {
            let (a, b) = (color(rng), color(rng));
            let cell = s / [8.0f32, 4.0, 2.0][rng.gen_range(0..3)];
            let theta = rng.gen_range(0.0..TAU);
            let (ct, st) = (theta.cos(), theta.sin());
            Array4::from_fn(shape, |_, c, y, x| {
                let (u, v) = (x as f32 * ct - y as f32 * st, x as f32 * st + y as f32 * ct);
                let parity = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
                if parity < 1.0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
    }
}

/// Even-odd crossing test.
fn inside(verts: &[(f32, f32)], px: f32, py: f32) -> bool {
    let mut hit = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let ((xi, yi), (xj, yj)) = (verts[i], verts[j]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn distinct_classes(targets: &[u8]) -> usize {
    let mut seen = [false; 256];
    targets.iter().for_each(|&t| seen[t as usize] = true);
    seen.iter().filter(|&&b| b).count()
}

/// Deterministic image set. Each image draws a texture family; draws whose palette
/// map has a single class are replaced by the next draw from the same stream.
pub fn generate_dataset(spec: DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.crop_size == 0 || spec.crop_size % LATENT_STRIDE != 0 {
        return Err(Error::Contract(format!(
            "crop size {} must be a positive multiple of {LATENT_STRIDE}",
            spec.crop_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(spec.count);
    let mut textures = Vec::with_capacity(spec.count);
    while examples.len() < spec.count {
        let texture = Texture::ALL[rng.gen_range(0..Texture::ALL.len())];
        let image = render(texture, spec.crop_size, &mut rng).map(|v| v.clamp(0.0, 1.0));
        let targets = palette_targets(&image)?;
        if distinct_classes(&targets) < 2 {
            continue;
        }
        textures.push(texture);
        examples.push(Example {
            image,
            targets: targets.into(),
            base_latent: None,
        });
    }
    Ok(SyntheticDataset {
        spec,
        examples,
        textures,
    })
}

impl SyntheticDataset {
    /// Seeded split into (training, validation) with `⌈count / 10⌉` validation items
    /// (none when the set has fewer than two images).
    pub fn split(&self, seed: u64) -> (Vec<Example>, Vec<Example>) {
        let n = self.examples.len();
        let n_val = if n < 2 { 0 } else { n.div_ceil(10) };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let val = order[..n_val].iter().map(|&i| self.examples[i].clone()).collect();
        let mut train_idx = order[n_val..].to_vec();
        train_idx.sort_unstable();
        let train = train_idx.into_iter().map(|i| self.examples[i].clone()).collect();
        (train, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checksum(a: &Array4) -> u64 {
        a.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3))
    }

    #[test]
    fn reproducible_and_in_range() {
        let spec = DatasetSpec { count: 24, crop_size: 32 };
        let a = generate_dataset(spec, 11).unwrap();
        let b = generate_dataset(spec, 11).unwrap();
        let c = generate_dataset(spec, 12).unwrap();
        assert_eq!(checksum(&a.examples[0].image), checksum(&b.examples[0].image));
        assert_ne!(checksum(&a.examples[0].image), checksum(&c.examples[0].image));
        for e in &a.examples {
            assert!(e.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(distinct_classes(&e.targets) >= 2);
            assert_eq!(e.targets.len(), 32 * 32);
        }
    }

    #[test]
    fn all_families_appear() {
        let d = generate_dataset(DatasetSpec { count: 64, crop_size: 16 }, 3).unwrap();
        for t in Texture::ALL {
            assert!(d.textures.contains(&t), "{t:?}");
        }
    }

    #[test]
    fn split_sizes() {
        let d = generate_dataset(DatasetSpec { count: 25, crop_size: 16 }, 1).unwrap();
        let (train, val) = d.split(4);
        assert_eq!((train.len(), val.len()), (22, 3));
        let (t2, v2) = d.split(4);
        assert_eq!(checksum(&val[0].image), checksum(&v2[0].image));
        assert_eq!(checksum(&train[5].image), checksum(&t2[5].image));
        assert!(generate_dataset(DatasetSpec { count: 1, crop_size: 20 }, 0).is_err());
    }

    #[test]
    fn polygon_membership() {
        let square = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
        assert!(inside(&square, 2.0, 2.0));
        assert!(!inside(&square, 5.0, 2.0));
    }
}
