//! Dense row-major f64 tensor.
//!
//! Everything in this crate computes in 64-bit floats; checkpoints narrow to
//! f32 on disk (see `data::checkpoint`).

use crate::error::{Error, Result};

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new",
                expected: format!("{} values for shape {:?}", expected, shape),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Dimension size along `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Reinterpret the value buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                context: "Tensor::reshaped",
                expected: format!("{} values for shape {:?}", expected, shape),
                found: format!("{} values", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Bilinear resize of a CHW tensor to a new spatial size.
///
/// Input adapter for cross-modal fine-tuning: a sample shaped for one modality
/// is resized to the spatial dims the encoder was built for. Channels must match.
pub fn resize_bilinear_chw(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if input.shape().len() != 3 {
        return Err(Error::Shape {
            context: "resize_bilinear_chw",
            expected: "rank-3 CHW tensor".into(),
            found: format!("{:?}", input.shape()),
        });
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if h == out_h && w == out_w {
        return Ok(input.clone());
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let scale_h = h as f64 / out_h as f64;
    let scale_w = w as f64 / out_w as f64;
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for oy in 0..out_h {
            // align-corners=false convention
            let sy = ((oy as f64 + 0.5) * scale_h - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_w - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v00 = src[(ch * h + y0) * w + x0];
                let v01 = src[(ch * h + y0) * w + x1];
                let v10 = src[(ch * h + y1) * w + x0];
                let v11 = src[(ch * h + y1) * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[(ch * out_h + oy) * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}
