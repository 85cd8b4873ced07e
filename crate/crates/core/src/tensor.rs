//! Dense row-major `f32` tensor and the reductions the relevance pipeline needs.
//!
//! Activations are stored channel-first without a batch axis (`[C, H, W]`).
//! Reductions accumulate in `f64` and round once at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a tensor by rounding `f64` values to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Shape(format!("expected [C,H,W], got {:?}", other))),
        }
    }

    pub fn channel(&self, c: usize) -> Result<&[f32]> {
        let (channels, h, w) = self.chw()?;
        if c >= channels {
            return Err(Error::Shape(format!(
                "channel {} out of range for {} channels",
                c, channels
            )));
        }
        Ok(&self.data[c * h * w..(c + 1) * h * w])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-channel spatial maximum with its first row-major position.
///
/// Returns `(values, argmax)` where `argmax[c] = (h, w)`.
pub fn reduce_max_spatial(t: &Tensor) -> Result<(Vec<f32>, Vec<(usize, usize)>)> {
    let (channels, h, w) = t.chw()?;
    if h == 0 || w == 0 {
        return Err(Error::EmptyTensor(format!(
            "spatial extent {}x{} has no elements",
            h, w
        )));
    }
    let plane = h * w;
    let mut values = Vec::with_capacity(channels);
    let mut argmax = Vec::with_capacity(channels);
    for c in 0..channels {
        let slice = &t.data[c * plane..(c + 1) * plane];
        let mut best = 0;
        for (i, &v) in slice.iter().enumerate().skip(1) {
            // strict comparison keeps the first maximum in scan order
            if v > slice[best] {
                best = i;
            }
        }
        values.push(slice[best]);
        argmax.push((best / w, best % w));
    }
    Ok((values, argmax))
}

pub fn sum_abs(t: &Tensor) -> f64 {
    t.data.iter().map(|&v| (v as f64).abs()).sum()
}

pub fn relu_clip(t: &Tensor) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chw(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn max_spatial_unique() {
        let t = chw(1, 2, 2, vec![1.0, 2.0, 3.0, 0.0]);
        let (v, a) = reduce_max_spatial(&t).unwrap();
        assert_eq!(v, vec![3.0]);
        assert_eq!(a, vec![(1, 0)]);
    }

    #[test]
    fn max_spatial_tie_takes_first() {
        let t = Tensor::filled(&[1, 3, 3], 5.0);
        let (v, a) = reduce_max_spatial(&t).unwrap();
        assert_eq!(v, vec![5.0]);
        assert_eq!(a, vec![(0, 0)]);
    }

    #[test]
    fn max_spatial_empty() {
        let t = Tensor::zeros(&[2, 0, 3]);
        let err = reduce_max_spatial(&t).unwrap_err();
        assert!(err.to_string().contains("empty tensor"));
    }

    #[test]
    fn sum_abs_and_relu_examples() {
        let t = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(sum_abs(&t), 6.0);
        assert_eq!(sum_abs(&Tensor::zeros(&[4])), 0.0);
        let r = relu_clip(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let neg = relu_clip(&Tensor::filled(&[2, 2], -3.0));
        assert!(neg.data().iter().all(|&v| v == 0.0));
    }

    fn arb_chw() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(-10.0f32..10.0, c * h * w)
                .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn max_spatial_matches_scan(t in arb_chw()) {
            let (c, h, w) = t.chw().unwrap();
            let (values, argmax) = reduce_max_spatial(&t).unwrap();
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut pos = (0, 0);
                for y in 0..h {
                    for x in 0..w {
                        let v = t.data()[ch * h * w + y * w + x];
                        if v > best {
                            best = v;
                            pos = (y, x);
                        }
                    }
                }
                prop_assert_eq!(values[ch], best);
                prop_assert_eq!(argmax[ch], pos);
                prop_assert!(t.channel(ch).unwrap().iter().all(|&v| v <= values[ch]));
            }
        }

        #[test]
        fn sum_abs_matches_loop(t in arb_chw()) {
            let mut acc = 0.0f64;
            for &v in t.data() {
                acc += if v < 0.0 { -(v as f64) } else { v as f64 };
            }
            prop_assert_eq!(sum_abs(&t), acc);
            prop_assert!(sum_abs(&t) >= 0.0);
            prop_assert_eq!(sum_abs(&t) == 0.0, t.data().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn relu_matches_loop_and_is_idempotent(t in arb_chw()) {
            let r = relu_clip(&t);
            for (a, b) in t.data().iter().zip(r.data()) {
                prop_assert_eq!(*b, if *a > 0.0 { *a } else { 0.0 });
            }
            prop_assert_eq!(relu_clip(&r), r);
        }
    }
}
