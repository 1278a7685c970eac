//! Training-time augmentation: horizontal flip and random erasing.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly.
    pub erase_area: (f64, f64),
    /// Height-to-width ratio of the erased rectangle, sampled uniformly.
    pub erase_aspect: (f64, f64),
    /// Placement attempts before erasing is skipped.
    pub erase_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
            erase_attempts: 100,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

/// A placed erasing rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// What one call to [`augment`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentInfo {
    pub flipped: bool,
    pub erased: Option<Rect>,
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for (src, dst) in image.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        for (d, v) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *v;
        }
    }
    out
}

/// Rectangle for an area fraction `f` and aspect `r = height / width`:
/// `A = ceil(f * H * W)`, `height = round(sqrt(A * r))`, `width = ceil(A / height)`.
/// Returns `None` when it does not fit.
pub fn erase_extent(h: usize, w: usize, fraction: f64, aspect: f64) -> Option<(usize, usize)> {
    let area = (fraction * (h * w) as f64).ceil() as usize;
    let eh = ((area as f64 * aspect).sqrt().round() as usize).max(1);
    let ew = area.div_ceil(eh);
    (area > 0 && eh <= h && ew <= w).then_some((eh, ew))
}

/// Overwrites `rect` in every channel of `[C, H, W]` with uniform noise.
pub fn erase<R: Rng>(image: &mut Tensor, rect: Rect, rng: &mut R) {
    let s = image.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let data = image.data_mut();
    for plane in data.chunks_mut(h * w) {
        for r in rect.top..rect.top + rect.height {
            for v in &mut plane[r * w + rect.left..r * w + rect.left + rect.width] {
                *v = rng.random::<f64>();
            }
        }
    }
}

/// Applies flip then random erasing to a `[3, H, W]` image. Labels are
/// unaffected by either transform.
pub fn augment<R: Rng>(image: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> (Tensor, AugmentInfo) {
    let flipped = rng.random::<f64>() < cfg.flip_prob;
    let mut out = if flipped { flip_horizontal(image) } else { image.clone() };
    let mut erased = None;
    if rng.random::<f64>() < cfg.erase_prob {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        for _ in 0..cfg.erase_attempts {
            let f = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
            let r = rng.random_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
            if let Some((eh, ew)) = erase_extent(h, w, f, r) {
                let rect = Rect {
                    top: rng.random_range(0..=h - eh),
                    left: rng.random_range(0..=w - ew),
                    height: eh,
                    width: ew,
                };
                erase(&mut out, rect, rng);
                erased = Some(rect);
                break;
            }
        }
    }
    (out, AugmentInfo { flipped, erased })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, 8, 6], (0..144).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = image(1);
        let once = flip_horizontal(&img);
        assert_ne!(once, img);
        assert_eq!(flip_horizontal(&once), img);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            erase_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, _) = augment(&img, &cfg, &mut rng);
        let (b, info) = augment(&a, &cfg, &mut rng);
        assert!(info.flipped && info.erased.is_none());
        assert_eq!(b, img);
    }

    #[test]
    fn erase_touches_exactly_the_rectangle() {
        // 10x10 grid, f = 0.25, r = 1 -> 5x5
        assert_eq!(erase_extent(10, 10, 0.25, 1.0), Some((5, 5)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::new(&[3, 10, 10], (0..300).map(|_| rng.random()).collect()).unwrap();
        let rect = Rect {
            top: 2,
            left: 4,
            height: 5,
            width: 5,
        };
        let mut out = img.clone();
        erase(&mut out, rect, &mut rng);
        for c in 0..3 {
            let mut changed = 0;
            for r in 0..10 {
                for col in 0..10 {
                    let i = c * 100 + r * 10 + col;
                    let inside = (2..7).contains(&r) && (4..9).contains(&col);
                    if img.data()[i] != out.data()[i] {
                        assert!(inside);
                        changed += 1;
                    } else {
                        assert!(!inside);
                    }
                }
            }
            assert_eq!(changed, (0.25f64 * 100.0).ceil() as usize);
        }
    }

    #[test]
    fn erase_extent_covers_requested_area() {
        for (f, r) in [(0.02, 0.3), (0.4, 3.33), (0.1, 1.0), (0.33, 1.5)] {
            let (eh, ew) = erase_extent(96, 48, f, r).unwrap();
            let area = (f * 96.0 * 48.0).ceil() as usize;
            assert!(eh * ew >= area && eh * ew < area + eh);
        }
        assert_eq!(erase_extent(4, 4, 0.4, 30.0), None);
    }

    #[test]
    fn augmentation_is_seed_deterministic_and_shape_preserving() {
        let img = image(4);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let (a, ia) = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let (b, ib) = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            assert_eq!(ia, ib);
            assert_eq!(a.shape(), img.shape());
            assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn disabled_config_is_identity() {
        let img = image(5);
        let (out, info) = augment(&img, &AugmentConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out, img);
        assert_eq!(
            info,
            AugmentInfo {
                flipped: false,
                erased: None
            }
        );
    }
}
