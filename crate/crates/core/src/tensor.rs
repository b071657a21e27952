//! Image tensors and the flat vector algebra used throughout the sampler.

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A `C x H x W` image (or feature map) in row-major channel-first layout.
pub type Image = Array3<f64>;

pub fn shape_of(x: &Image) -> [usize; 3] {
    let (c, h, w) = x.dim();
    [c, h, w]
}

pub fn ensure_same_shape(expected: &Image, actual: &Image) -> Result<()> {
    let (e, a) = (shape_of(expected), shape_of(actual));
    if e == a {
        Ok(())
    } else {
        Err(Error::Shape {
            expected: e,
            actual: a,
        })
    }
}

/// Inner product over the whole flattened tensor.
pub fn dot(a: &Image, b: &Image) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

pub fn norm_sq(a: &Image) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn norm(a: &Image) -> f64 {
    norm_sq(a).sqrt()
}

/// `out += k * v`
pub fn axpy(out: &mut Image, k: f64, v: &Image) {
    Zip::from(out).and(v).for_each(|o, &x| *o += k * x);
}

pub fn standard_normal<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Image {
    Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || {
        rng.sample::<f64, _>(StandardNormal)
    })
}
