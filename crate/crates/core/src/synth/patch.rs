use alloc::vec;

use super::scene::{ImageLatent, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits an image into row-major `patch`×`patch` blocks. Each vector is laid out
/// (dy, dx, channel), giving `[n_patches, patch·patch·3]`.
pub fn patchify(img: &ImageLatent, patch: usize) -> Result<Tensor<f32>> {
    if patch == 0 || !IMAGE_SIZE.is_multiple_of(patch) {
        return Err(Error::dim("patchify", &[IMAGE_SIZE, IMAGE_SIZE], &[patch, patch]));
    }
    let per_side = IMAGE_SIZE / patch;
    let dim = patch * patch * CHANNELS;
    let mut out = vec![0.0f32; per_side * per_side * dim];
    for py in 0..per_side {
        for px in 0..per_side {
            let base = (py * per_side + px) * dim;
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..CHANNELS {
                        out[base + (dy * patch + dx) * CHANNELS + c] =
                            img.get(c, py * patch + dy, px * patch + dx);
                    }
                }
            }
        }
    }
    Tensor::new(&[per_side * per_side, dim], out)
}

pub fn unpatchify(patches: &Tensor<f32>, patch: usize) -> Result<ImageLatent> {
    let per_side = IMAGE_SIZE.checked_div(patch).unwrap_or(0);
    let dim = patch * patch * CHANNELS;
    if patch == 0 || !IMAGE_SIZE.is_multiple_of(patch) || patches.shape() != [per_side * per_side, dim] {
        return Err(Error::dim("unpatchify", patches.shape(), &[per_side * per_side, dim]));
    }
    let mut img = ImageLatent::blank();
    let data = patches.data();
    for py in 0..per_side {
        for px in 0..per_side {
            let base = (py * per_side + px) * dim;
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..CHANNELS {
                        img.set(
                            c,
                            py * patch + dy,
                            px * patch + dx,
                            data[base + (dy * patch + dx) * CHANNELS + c],
                        );
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn shapes() {
        let p = patchify(&ImageLatent::blank(), 2).unwrap();
        assert_eq!(p.shape(), &[64, 12]);
        assert!(patchify(&ImageLatent::blank(), 3).is_err());
        assert!(patchify(&ImageLatent::blank(), 0).is_err());
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = ImageLatent::from_pixels(vec![0.25; ImageLatent::LEN]).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = RngStream::new(11);
        let img = ImageLatent::from_pixels(rng.normal_vec::<f32>(ImageLatent::LEN, 0.5)).unwrap();
        for patch in [1, 2, 4, 8] {
            assert_eq!(unpatchify(&patchify(&img, patch).unwrap(), patch).unwrap(), img);
        }
    }

    #[test]
    fn row_major_patch_order() {
        let mut img = ImageLatent::blank();
        img.set(1, 2, 6, 0.5); // patch (1, 3), dy 0, dx 0, channel 1
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(8 + 3)[1], 0.5);
    }
}
