//! Comparison grids: one row per reconstruction state, columns
//! `input | rgb view 1..V | normals view 1..V`, separated by 2-pixel gutters.
//!
//! For `S` states, `V` views and tile size `r` the image is
//! `(1 + 2V)·r + 2·(2V + 2)` wide and `S·r + 2·(S + 1)` high.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::metrics::encode_normals;
use crate::model::{render_planes, Model, ReconstructionState};
use crate::scenekit::ViewRecord;

pub const GUTTER: usize = 2;
const GUTTER_COLOR: [u8; 3] = [96, 96, 96];

pub fn grid_size(states: usize, views: usize, tile: usize) -> (usize, usize) {
    let cols = 1 + 2 * views;
    (cols * tile + GUTTER * (cols + 1), states * tile + GUTTER * (states + 1))
}

/// Renders every state from every ground-truth camera and tiles the results.
/// The input column shows the first ground-truth view with the pass number.
pub fn compose_grid(model: &Model, states: &[ReconstructionState], gts: &[ViewRecord]) -> Result<RgbImage> {
    if states.is_empty() || gts.is_empty() {
        return Err(Error::InvalidArgument("grid needs at least one state and one view".into()));
    }
    let r = gts[0].res;
    if gts.iter().any(|g| g.res != r) {
        return Err(Error::InvalidArgument("grid views must share a resolution".into()));
    }
    let v = gts.len();
    let (w, h) = grid_size(states.len(), v, r);
    let mut img = RgbImage::new(w, h, GUTTER_COLOR);
    let origin = |row: usize, col: usize| (GUTTER + col * (r + GUTTER), GUTTER + row * (r + GUTTER));
    for (row, state) in states.iter().enumerate() {
        let (x, y) = origin(row, 0);
        img.blit(&RgbImage::from_f64(r, r, &gts[0].rgb), x, y);
        img.label(x, y, &format!("T{}", state.step + 1), 1, [255, 255, 255]);
        for (k, gt) in gts.iter().enumerate() {
            let out = render_planes(model, &state.planes, &gt.camera, r)?;
            let (x, y) = origin(row, 1 + k);
            img.blit(&RgbImage::from_f64(r, r, &out.rgb), x, y);
            let (x, y) = origin(row, 1 + v + k);
            img.blit(&RgbImage::from_f64(r, r, &encode_normals(&out.normal, &out.mask())), x, y);
        }
    }
    Ok(img)
}

pub fn emit_grid(model: &Model, states: &[ReconstructionState], gts: &[ViewRecord], path: &Path) -> Result<RgbImage> {
    let img = compose_grid(model, states, gts)?;
    img.write_png(path)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_arithmetic() {
        // 7 columns of 16 plus 8 gutters, 2 rows of 16 plus 3 gutters
        assert_eq!(grid_size(2, 3, 16), (7 * 16 + 16, 2 * 16 + 6));
    }
}
