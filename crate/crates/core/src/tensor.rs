//! Dense 4-D tensors in (batch, channel, height, width) order and integer
//! label maps in (batch, height, width) order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Pixels per channel plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per batch item.
    pub fn item(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Row-major 4-D tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    track_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return shape_err(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            track_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
            track_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Marks the tensor as a gradient-tracked leaf.
    pub fn tracked(mut self) -> Self {
        self.track_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn track_grad(&self) -> bool {
        self.track_grad
    }

    pub fn set_track_grad(&mut self, on: bool) {
        self.track_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on tensor of shape {}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((b * s.channels + c) * s.height + y) * s.width + x]
    }

    /// Batch items `start..start + len` as a new tensor.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape.batch {
            return shape_err(format!(
                "batch range {start}..{} exceeds batch extent {}",
                start + len,
                self.shape.batch
            ));
        }
        let item = self.shape.item();
        let shape = Shape {
            batch: len,
            ..self.shape
        };
        Self::from_vec(
            shape,
            self.data[start * item..(start + len) * item].to_vec(),
        )
    }

    /// Stacks tensors along the batch axis.
    pub fn cat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cat of zero tensors".into()))?;
        let mut shape = first.shape;
        shape.batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if (p.shape.channels, p.shape.height, p.shape.width)
                != (shape.channels, shape.height, shape.width)
            {
                return shape_err(format!(
                    "cannot batch-concat {} with {}",
                    first.shape, p.shape
                ));
            }
            shape.batch += p.shape.batch;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
            grad: None,
            track_grad: self.track_grad,
        }
    }
}

/// Integer class map of extents (batch, height, width).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return shape_err(format!(
                "label data length {} does not match ({batch}, {height}, {width})",
                data.len()
            ));
        }
        Ok(LabelMap {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            batch,
            height,
            width,
            data: vec![class; batch * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Errors if any label is `>= classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as usize,
                classes,
            }),
            None => Ok(()),
        }
    }

    /// True when the label grid matches the (batch, height, width) of `shape`.
    pub fn matches(&self, shape: Shape) -> bool {
        (self.batch, self.height, self.width) == (shape.batch, shape.height, shape.width)
    }

    pub fn cat_batch(parts: &[&LabelMap]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cat of zero label maps".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return shape_err("label maps differ in spatial extents");
            }
            batch += p.batch;
            data.extend_from_slice(&p.data);
        }
        LabelMap::new(batch, first.height, first.width, data)
    }
}

/// Single-channel intensity image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "image data length {} does not match {height}x{width}",
                data.len()
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Stacks images into a (N, 1, H, W) tensor.
    pub fn stack<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("stack of zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width) != (first.height, first.width) {
                return shape_err("images differ in extents");
            }
            data.extend(im.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::from_vec(Shape::new(images.len(), 1, first.height, first.width), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn narrow_and_cat_are_inverse() {
        let t = Tensor::<f32>::from_vec(Shape::new(3, 1, 1, 2), (0..6).map(|v| v as f32).collect())
            .unwrap();
        let a = t.narrow_batch(0, 1).unwrap();
        let b = t.narrow_batch(1, 2).unwrap();
        assert_eq!(b.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(Tensor::cat_batch(&[&a, &b]).unwrap(), t);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2)).tracked();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn label_range_check() {
        let l = LabelMap::new(1, 1, 2, vec![0, 9]).unwrap();
        assert!(l.check_range(10).is_ok());
        assert!(matches!(
            l.check_range(9),
            Err(Error::LabelOutOfRange {
                label: 9,
                classes: 9
            })
        ));
    }
}
