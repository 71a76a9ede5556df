//! Local (patch) mixing of image pairs and the interpolation used for global
//! mixing of hidden representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{Quadruple, RandomStream};
use crate::tensor::Tensor;

/// A rectangular binary mask placed fully inside the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixMask {
    pub top: usize,
    pub left: usize,
    pub mask_h: usize,
    pub mask_w: usize,
    pub lambda1: f64,
    pub image_h: usize,
    pub image_w: usize,
}

impl MixMask {
    pub fn area(&self) -> usize {
        self.mask_h * self.mask_w
    }

    pub fn area_ratio(&self) -> f64 {
        self.area() as f64 / (self.image_h * self.image_w) as f64
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.mask_h && x >= self.left && x < self.left + self.mask_w
    }

    /// The mask that selects the whole image (`λ₁ = 1`).
    pub fn full(image_h: usize, image_w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            mask_h: image_h,
            mask_w: image_w,
            lambda1: 1.0,
            image_h,
            image_w,
        }
    }
}

/// Side of a mask: `round(√λ₁ · side)` with halves rounded up.
pub fn mask_side(lambda1: f64, side: usize) -> usize {
    ((lambda1.sqrt() * side as f64 + 0.5).floor() as usize).min(side)
}

pub fn make_mask(rng: &mut RandomStream, lambda1: f64, image_h: usize, image_w: usize) -> Result<MixMask> {
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(Error::InvalidCoefficient(lambda1));
    }
    if image_h == 0 || image_w == 0 {
        return Err(Error::shape(&[1, 1], &[image_h, image_w]));
    }
    let mask_h = mask_side(lambda1, image_h);
    let mask_w = mask_side(lambda1, image_w);
    let top = rng.below(image_h - mask_h + 1);
    let left = rng.below(image_w - mask_w + 1);
    Ok(MixMask {
        top,
        left,
        mask_h,
        mask_w,
        lambda1,
        image_h,
        image_w,
    })
}

/// Two locally mixed images sharing one mask and one soft label.
#[derive(Clone, Debug, PartialEq)]
pub struct LocallyMixedPair {
    pub m1: Tensor,
    pub m2: Tensor,
    pub soft_label: Vec<f64>,
    pub lambda1: f64,
}

/// `M ⊙ a + (1 − M) ⊙ b` for `c×h×w` images.
pub fn paste(mask: &MixMask, inside: &Tensor, outside: &Tensor) -> Result<Tensor> {
    outside.ensure_shape(inside.shape())?;
    let (h, w) = match inside.shape() {
        &[_, h, w] => (h, w),
        other => return Err(Error::shape(&[0, mask.image_h, mask.image_w], other)),
    };
    if (h, w) != (mask.image_h, mask.image_w) {
        return Err(Error::shape(&[inside.shape()[0], mask.image_h, mask.image_w], inside.shape()));
    }
    let mut out = outside.clone();
    let plane = h * w;
    for (ch_out, ch_in) in out.data_mut().chunks_mut(plane).zip(inside.data().chunks(plane)) {
        for y in mask.top..mask.top + mask.mask_h {
            let row = y * w;
            ch_out[row + mask.left..row + mask.left + mask.mask_w]
                .copy_from_slice(&ch_in[row + mask.left..row + mask.left + mask.mask_w]);
        }
    }
    Ok(out)
}

pub fn soft_label(lambda1: f64, class_c: usize, class_d: usize, num_classes: usize) -> Result<Vec<f64>> {
    if class_c >= num_classes || class_d >= num_classes {
        return Err(Error::InvalidDataset(format!(
            "classes ({class_c}, {class_d}) outside 0..{num_classes}"
        )));
    }
    let mut label = vec![0.0; num_classes];
    label[class_c] += lambda1;
    label[class_d] += 1.0 - lambda1;
    Ok(label)
}

pub fn local_mix(quad: &Quadruple, mask: &MixMask, num_classes: usize) -> Result<LocallyMixedPair> {
    Ok(LocallyMixedPair {
        m1: paste(mask, &quad.c1, &quad.d1)?,
        m2: paste(mask, &quad.c2, &quad.d2)?,
        soft_label: soft_label(mask.lambda1, quad.class_c, quad.class_d, num_classes)?,
        lambda1: mask.lambda1,
    })
}

/// `λ₂·h1 + (1 − λ₂)·h2`.
pub fn global_mix(h1: &Tensor, h2: &Tensor, lambda2: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda2) {
        return Err(Error::InvalidCoefficient(lambda2));
    }
    h2.ensure_shape(h1.shape())?;
    Ok(h1.zip(h2, |a, b| lambda2 * a + (1.0 - lambda2) * b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(c: f64, d: f64, shape: &[usize]) -> Quadruple {
        Quadruple::new(
            [Tensor::full(shape, c), Tensor::full(shape, c + 0.5)],
            [Tensor::full(shape, d), Tensor::full(shape, d + 0.5)],
            0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn full_mask_at_lambda_one() {
        let mut rng = RandomStream::new(0, "mask");
        let m = make_mask(&mut rng, 1.0, 32, 32).unwrap();
        assert_eq!((m.mask_h, m.mask_w, m.top, m.left), (32, 32, 0, 0));
    }

    #[test]
    fn quarter_lambda_gives_half_side() {
        let mut rng = RandomStream::new(0, "mask");
        let m = make_mask(&mut rng, 0.25, 32, 32).unwrap();
        assert_eq!((m.mask_h, m.mask_w), (16, 16));
        assert!(m.top <= 16 && m.left <= 16);
    }

    #[test]
    fn zero_lambda_gives_empty_mask() {
        let mut rng = RandomStream::new(0, "mask");
        let m = make_mask(&mut rng, 0.0, 32, 32).unwrap();
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn out_of_range_lambda_is_rejected() {
        let mut rng = RandomStream::new(0, "mask");
        assert!(matches!(make_mask(&mut rng, 1.5, 8, 8), Err(Error::InvalidCoefficient(_))));
        assert!(matches!(make_mask(&mut rng, -0.1, 8, 8), Err(Error::InvalidCoefficient(_))));
    }

    #[test]
    fn endpoints_copy_inputs() {
        let q = quad(1.0, -1.0, &[3, 4, 4]);
        let full = MixMask::full(4, 4);
        let p = local_mix(&q, &full, 3).unwrap();
        assert_eq!((p.m1.clone(), p.m2.clone()), (q.c1.clone(), q.c2.clone()));
        assert_eq!(p.soft_label, vec![1.0, 0.0, 0.0]);

        let mut rng = RandomStream::new(0, "mask");
        let empty = make_mask(&mut rng, 0.0, 4, 4).unwrap();
        let p = local_mix(&q, &empty, 3).unwrap();
        assert_eq!((p.m1, p.m2), (q.d1, q.d2));
        assert_eq!(p.soft_label, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_hand_example() {
        let q = Quadruple::new(
            [Tensor::full(&[1, 2, 2], 1.0), Tensor::full(&[1, 2, 2], 1.0)],
            [Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 2, 2])],
            0,
            1,
        )
        .unwrap();
        let mask = MixMask {
            top: 0,
            left: 0,
            mask_h: 1,
            mask_w: 1,
            lambda1: 0.25,
            image_h: 2,
            image_w: 2,
        };
        let p = local_mix(&q, &mask, 2).unwrap();
        assert_eq!(p.m1.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.soft_label, vec![0.25, 0.75]);
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let q = quad(1.0, 0.0, &[1, 4, 4]);
        assert!(matches!(local_mix(&q, &MixMask::full(5, 4), 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn global_mix_examples() {
        let a = Tensor::full(&[2, 3], 2.0);
        let b = Tensor::full(&[2, 3], 4.0);
        assert_eq!(global_mix(&a, &b, 1.0).unwrap(), a);
        assert_eq!(global_mix(&a, &b, 0.0).unwrap(), b);
        assert!(global_mix(&a, &b, 0.5).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(global_mix(&a, &Tensor::zeros(&[3, 2]), 0.5).is_err());
    }
}
