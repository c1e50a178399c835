//! Dense 4-D tensors (batch × channels × height × width) and the `TEN1` file format.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

const TEN1_MAGIC: &[u8; 4] = b"TEN1";

/// Shape of an [`Array4`]: `[n, c, h, w]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Debug for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Row-major single-precision 4-D tensor with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Array4 {
    shape: Shape4,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Array4 {
    pub fn zeros(shape: Shape4) -> Self {
        Array4 {
            shape,
            data: vec![0.0; shape.len()],
            grad: None,
        }
    }

    pub fn full(shape: Shape4, value: f32) -> Self {
        Array4 {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Array4::full(Shape4::scalar(), value)
    }

    pub fn from_vec(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim(
                "Array4::from_vec",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Array4 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Array4 {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attach a gradient buffer; it must match the value shape.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(
                "Array4::set_grad",
                format!("gradient has {} values for shape {}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    /// Reinterpret with a new shape of equal size.
    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::dim(
                "Array4::reshape",
                format!("cannot reshape {} into {shape}", self.shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copy of batch item `n` as a 1-item tensor.
    pub fn item(&self, n: usize) -> Array4 {
        let s = self.shape;
        let len = s.item();
        Array4 {
            shape: Shape4::new(1, s.c, s.h, s.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
            grad: None,
        }
    }

    /// Stack equally shaped 1-item tensors along the batch axis.
    pub fn stack(items: &[&Array4]) -> Result<Array4> {
        let Some(first) = items.first() else {
            return Ok(Array4::zeros(Shape4::default()));
        };
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for a in items {
            if (a.shape.c, a.shape.h, a.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::dim(
                    "Array4::stack",
                    format!("item {} does not match {}", a.shape, s),
                ));
            }
            data.extend_from_slice(&a.data);
            n += a.shape.n;
        }
        Array4::from_vec(Shape4::new(n, s.c, s.h, s.w), data)
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Array4 {
        Array4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Array4) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Little-endian byte image of the values, used for checksums and bit-exact comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Write as `TEN1` with rank 4.
    pub fn write_ten1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TEN1_MAGIC)?;
        w.write_all(&[4u8])?;
        for d in self.shape.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.to_le_bytes())?;
        Ok(())
    }

    /// Read a `TEN1` tensor. Ranks below 4 are left-padded with unit axes.
    pub fn read_ten1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("TEN1: missing magic".into()))?;
        if &magic != TEN1_MAGIC {
            return Err(Error::Format(format!("TEN1: bad magic {magic:?}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| Error::Format("TEN1: missing rank".into()))?;
        let rank = rank[0] as usize;
        if rank > 4 {
            return Err(Error::Format(format!("TEN1: rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("TEN1: truncated dimensions".into()))?;
            dims[4 - rank + i] = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut bytes = vec![0u8; shape.len() * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("TEN1: truncated data for shape {shape}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Array4::from_vec(shape, data)
    }
}

impl fmt::Debug for Array4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f32> = self.data.iter().take(8).copied().collect();
        write!(f, "Array4({}, {:?}{})", self.shape, head, if self.len() > 8 { "…" } else { "" })
    }
}
