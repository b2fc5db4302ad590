//! Conversions between `ndarray` maps and batched `candle` tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// Stacks `C x H x W` arrays into a `B x C x H x W` tensor.
pub fn batch3(items: &[&Array3<f32>], dtype: DType) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for a in items {
        if a.dim() != (c, h, w) {
            return Err(Error::Shape(format!("batch items {:?} vs {:?}", a.dim(), (c, h, w))));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (items.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_array4(t: &Tensor) -> Result<Array4<f32>> {
    let dims = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array4::from_shape_vec(dims, data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let dims = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec(dims, data).map_err(|e| Error::Shape(e.to_string()))
}

/// `B x H x W` tensor from 2-D maps.
pub fn batch2<T: Copy + Into<f64>>(items: &[&Array2<T>], dtype: DType) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(items.len() * h * w);
    for a in items {
        if a.dim() != (h, w) {
            return Err(Error::Shape(format!("batch items {:?} vs {:?}", a.dim(), (h, w))));
        }
        data.extend(a.iter().map(|v| (*v).into()));
    }
    Ok(Tensor::from_vec(data, (items.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
