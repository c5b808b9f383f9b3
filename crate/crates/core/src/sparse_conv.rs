//! Submanifold sparse convolution over multi-resolution maps.
//!
//! Output is computed only at active elements, so the active set and level
//! field pass through unchanged. Kernel taps are spaced by the stage dilation
//! on the base grid; a tap landing on an inactive pixel reads the value of
//! that pixel's block representative, and a tap outside the grid reads zero.

use crate::error::{Error, Result};
use crate::multires::{inactive_fill, MultiResMap};
use crate::par;
use crate::tensor::ConvLayer;

/// Convolves the active elements of `mr` with `layer`, using
/// `stage_dilation` (a power of the map's factor) as tap spacing. The layer's
/// own dilation is ignored.
pub fn multires_conv(mr: &MultiResMap, layer: &ConvLayer, stage_dilation: usize) -> Result<MultiResMap> {
    if mr.channels() != layer.in_channels() {
        return Err(Error::invalid(format!(
            "conv expects {} input channels, map has {}",
            layer.in_channels(),
            mr.channels()
        )));
    }
    if !is_power_of(stage_dilation, mr.factor()) {
        return Err(Error::invalid(format!(
            "stage dilation {stage_dilation} is not a power of {}",
            mr.factor()
        )));
    }
    let (h, w) = (mr.height(), mr.width());
    let cout = layer.out_channels();
    let mut values = vec![0.0f32; h * w * cout];
    par::for_each_chunk(&mut values, w * cout, |y, row| {
        for (x, px) in row.chunks_mut(cout).enumerate() {
            if mr.is_active(y, x) {
                layer.accumulate(stage_dilation, y, x, h, w, |iy, ix| mr.resolved(iy, ix), px);
            } else {
                px.fill(inactive_fill());
            }
        }
    });
    Ok(MultiResMap::from_parts_unchecked(
        h,
        w,
        cout,
        mr.factor(),
        mr.stages(),
        mr.levels().to_vec(),
        values,
    ))
}

/// Multiply-adds charged to `layer` when run sparsely over `mr`:
/// one full `K²·Cin·Cout` per active element.
pub fn count_active_taps(mr: &MultiResMap, layer: &ConvLayer) -> u64 {
    mr.active_count() as u64 * layer.taps()
}

fn is_power_of(mut n: usize, base: usize) -> bool {
    if n == 0 || base < 2 {
        return false;
    }
    while n % base == 0 {
        n /= base;
    }
    n == 1
}
