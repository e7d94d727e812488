use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};

/// Mirrors one `C × H × W` image left to right.
pub fn flip_horizontal(img: &mut [f64], (c, h, w): (usize, usize, usize)) {
    for ch in 0..c {
        for y in 0..h {
            img[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
        }
    }
}

/// Mirrors one `C × H × W` image top to bottom.
pub fn flip_vertical(img: &mut [f64], (c, h, w): (usize, usize, usize)) {
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

/// Adds `U(0, 1/256)` dequantisation noise and flips each spatial axis of
/// each image independently with probability 1/2. `x` is `B × (C·H·W)`.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, image: (usize, usize, usize), rng: &mut R) -> Result<Tensor> {
    let per = image.0 * image.1 * image.2;
    if !x.numel().is_multiple_of(per) {
        return Err(shape_err(
            "augment",
            format!("{:?} is not a batch of {image:?} images", x.shape()),
        ));
    }
    let mut out = x.clone();
    for img in out.data_mut().chunks_mut(per) {
        for v in img.iter_mut() {
            *v += rng.random::<f64>() / 256.0;
        }
        if rng.random::<bool>() {
            flip_horizontal(img, image);
        }
        if rng.random::<bool>() {
            flip_vertical(img, image);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn flips_are_involutions() {
        let shape = (2, 3, 4);
        let orig: Vec<f64> = (0..24).map(f64::from).collect();
        let mut img = orig.clone();
        flip_horizontal(&mut img, shape);
        assert_eq!(&img[..4], &[3.0, 2.0, 1.0, 0.0]);
        flip_horizontal(&mut img, shape);
        assert_eq!(img, orig);
        flip_vertical(&mut img, shape);
        assert_eq!(&img[..4], &[8.0, 9.0, 10.0, 11.0]);
        flip_vertical(&mut img, shape);
        assert_eq!(img, orig);
    }

    #[test]
    fn dequantisation_mean_shift() {
        let x = Tensor::zeros(&[64, 3 * 8 * 8]);
        let y = augment(&x, (3, 8, 8), &mut seeded(0)).unwrap();
        assert!((y.mean() - 1.0 / 512.0).abs() < 2e-5);
        assert!(y.data().iter().all(|&v| (0.0..1.0 / 256.0).contains(&v)));
    }
}
