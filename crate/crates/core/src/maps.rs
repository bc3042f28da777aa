//! Per-pixel maps: raw class scores, class distributions and integer masks.
//!
//! All maps are stored row-major as `(batch, class, height, width)`; masks
//! drop the class axis.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the per-pixel class sum of a [`ProbMap`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, classes: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            classes,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.classes * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per image.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Pixels across the whole batch.
    pub const fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    #[inline]
    pub const fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.classes + c) * self.height + y) * self.width + x
    }

    /// Inverse of [`Shape::index`].
    pub const fn unravel(&self, index: usize) -> (usize, usize, usize, usize) {
        let x = index % self.width;
        let y = (index / self.width) % self.height;
        let c = (index / self.plane()) % self.classes;
        let b = index / (self.plane() * self.classes);
        (b, c, y, x)
    }

    pub const fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }

    fn check_len(&self, actual: usize) -> Result<()> {
        if self.len() != actual {
            return Err(Error::BufferLength {
                shape: *self,
                expected: self.len(),
                actual,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_same(&self, other: &Shape, context: &'static str) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch {
                context,
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.classes, self.height, self.width
        )
    }
}

/// Raw per-pixel class scores produced by a segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    shape: Shape,
    data: Vec<f64>,
}

impl LogitMap {
    /// Builds a map, rejecting NaN/Inf entries.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.check_len(data.len())?;
        if shape.classes < 2 {
            return Err(Error::TooFewClasses {
                min: 2,
                actual: shape.classes,
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (batch, class, y, x) = shape.unravel(index);
            return Err(Error::NonFinite {
                index,
                batch,
                class,
                y,
                x,
                value,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Shape, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies images `start..start + count` into a new map.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let shape = self.shape;
        let (data, shape) = slice_batch(&self.data, shape, start, count)?;
        Ok(Self { shape, data })
    }
}

/// Per-pixel class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    shape: Shape,
    data: Vec<f64>,
}

impl ProbMap {
    /// Builds a map after checking every entry lies in `[0, 1]` and every
    /// pixel sums to one within [`SIMPLEX_TOLERANCE`].
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.check_len(data.len())?;
        if shape.classes < 2 {
            return Err(Error::TooFewClasses {
                min: 2,
                actual: shape.classes,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                let (batch, class, y, x) = shape.unravel(index);
                return Err(Error::NonFinite {
                    index,
                    batch,
                    class,
                    y,
                    x,
                    value,
                });
            }
        }
        for b in 0..shape.batch {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let sum: f64 = (0..shape.classes)
                        .map(|c| data[shape.index(b, c, y, x)])
                        .sum();
                    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                        let index = shape.index(b, 0, y, x);
                        return Err(Error::NonFinite {
                            index,
                            batch: b,
                            class: 0,
                            y,
                            x,
                            value: sum,
                        });
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    /// Skips validation. Callers guarantee the simplex property.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(b, c, y, x)]
    }

    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let (data, shape) = slice_batch(&self.data, self.shape, start, count)?;
        Ok(Self { shape, data })
    }

    /// Joins two maps along the batch axis.
    pub fn concat(&self, other: &ProbMap) -> Result<Self> {
        self.shape
            .with_batch(0)
            .ensure_same(&other.shape.with_batch(0), "concat")?;
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            shape: self.shape.with_batch(self.shape.batch + other.shape.batch),
            data,
        })
    }
}

/// Integer class-index mask, `(batch, height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMap {
    batch: usize,
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
}

impl MaskMap {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        let shape = Shape::new(batch, 1, height, width);
        shape.check_len(data.len())?;
        if classes < 2 {
            return Err(Error::TooFewClasses {
                min: 2,
                actual: classes,
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| usize::from(v) >= classes)
        {
            return Err(Error::InvalidClass {
                index,
                value,
                classes,
            });
        }
        Ok(Self {
            batch,
            height,
            width,
            classes,
            data,
        })
    }

    /// Convenience constructor for a single binary mask.
    pub fn binary(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(1, height, width, 2, data)
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

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Shape of the one-hot expansion.
    pub fn shape(&self) -> Shape {
        Shape::new(self.batch, self.classes, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    /// One-hot expansion as a probability map (entries exactly 0 or 1).
    pub fn one_hot(&self) -> ProbMap {
        let shape = self.shape();
        let mut data = vec![0.0; shape.len()];
        for b in 0..self.batch {
            for y in 0..self.height {
                for x in 0..self.width {
                    let c = usize::from(self.get(b, y, x));
                    data[shape.index(b, c, y, x)] = 1.0;
                }
            }
        }
        ProbMap::from_raw(shape, data)
    }

    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.batch {
            return Err(Error::InvalidArgument(alloc::format!(
                "batch slice {start}..{} exceeds batch size {}",
                start + count,
                self.batch
            )));
        }
        let plane = self.height * self.width;
        Ok(Self {
            batch: count,
            data: self.data[start * plane..(start + count) * plane].to_vec(),
            ..*self
        })
    }

    /// Stacks masks of identical spatial size and class count.
    pub fn stack(masks: &[MaskMap]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero masks".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in masks {
            first.shape().with_batch(0).ensure_same(&m.shape().with_batch(0), "mask stack")?;
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        Ok(Self {
            batch,
            data,
            ..*first
        })
    }

    /// Number of pixels whose class equals `class`.
    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

fn slice_batch(data: &[f64], shape: Shape, start: usize, count: usize) -> Result<(Vec<f64>, Shape)> {
    if start + count > shape.batch {
        return Err(Error::InvalidArgument(alloc::format!(
            "batch slice {start}..{} exceeds batch size {}",
            start + count,
            shape.batch
        )));
    }
    let per = shape.classes * shape.plane();
    Ok((
        data[start * per..(start + count) * per].to_vec(),
        shape.with_batch(count),
    ))
}
