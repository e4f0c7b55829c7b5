use crate::autodiff::Var;
use crate::error::{HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Non-overlapping `m x m` windows of an `H x W x C` map, stored as
/// `[(H/m)(W/m), m*m, C]`. Windows are in row-major tile order and tokens
/// within a window in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStack<X> {
    pub windows: X,
    pub source_h: usize,
    pub source_w: usize,
    pub m: usize,
}

impl<X> WindowStack<X> {
    pub fn count(&self) -> usize {
        (self.source_h / self.m) * (self.source_w / self.m)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.m * self.m
    }
}

fn check(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(HitError::Partition { h, w, m });
    }
    Ok(())
}

const SPLIT: [usize; 5] = [0, 2, 1, 3, 4];

pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<WindowStack<Tensor<T>>> {
    let (h, w, c) = x.hwc()?;
    check(h, w, m)?;
    let tiles = x.reshape(&[h / m, m, w / m, m, c])?;
    let windows = tensor::permute(&tiles, &SPLIT)?.reshape(&[(h / m) * (w / m), m * m, c])?;
    Ok(WindowStack {
        windows,
        source_h: h,
        source_w: w,
        m,
    })
}

pub fn window_merge<T: Scalar>(ws: &WindowStack<Tensor<T>>) -> Result<Tensor<T>> {
    let (h, w, m) = (ws.source_h, ws.source_w, ws.m);
    let c = *ws.windows.shape().last().unwrap();
    let tiles = ws.windows.reshape(&[h / m, w / m, m, m, c])?;
    tensor::permute(&tiles, &SPLIT)?.reshape(&[h, w, c])
}

pub fn window_partition_var<'t, T: Scalar>(
    x: &Var<'t, T>,
    m: usize,
) -> Result<WindowStack<Var<'t, T>>> {
    let (h, w, c) = x.value().hwc()?;
    check(h, w, m)?;
    let windows = x
        .reshape(&[h / m, m, w / m, m, c])?
        .permute(&SPLIT)?
        .reshape(&[(h / m) * (w / m), m * m, c])?;
    Ok(WindowStack {
        windows,
        source_h: h,
        source_w: w,
        m,
    })
}

pub fn window_merge_var<'t, T: Scalar>(ws: &WindowStack<Var<'t, T>>) -> Result<Var<'t, T>> {
    let (h, w, m) = (ws.source_h, ws.source_w, ws.m);
    let c = *ws.windows.shape().last().unwrap();
    ws.windows
        .reshape(&[h / m, w / m, m, m, c])?
        .permute(&SPLIT)?
        .reshape(&[h, w, c])
}
