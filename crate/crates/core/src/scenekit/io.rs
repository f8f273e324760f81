//! On-disk view files: `rgb_{k}.png`, `geo_{k}.pfm`, `cam_{k}.txt`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::RgbImage;

use super::camera::CameraPose;
use super::render::ViewRecord;

/// Five `res × res` planes stacked top to bottom (depth, nx, ny, nz, mask)
/// as a single-channel little-endian PFM. PFM rows run bottom to top.
pub fn encode_geometry_pfm(view: &ViewRecord) -> Vec<u8> {
    let res = view.res;
    let height = 5 * res;
    let mut planes = vec![0f32; res * height];
    for i in 0..res * res {
        planes[i] = view.depth[i] as f32;
        for c in 0..3 {
            planes[(1 + c) * res * res + i] = view.normal[3 * i + c] as f32;
        }
        planes[4 * res * res + i] = view.mask[i] as f32;
    }
    let mut out = format!("Pf\n{res} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &planes[row * res..(row + 1) * res] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Returns `(depth, normal, mask)` buffers.
pub fn decode_geometry_pfm(bytes: &[u8], res: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let bad = |m: &str| Error::Dataset(format!("pfm: {m}"));
    let mut lines = 0;
    let mut pos = 0;
    while lines < 3 {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += nl + 1;
        lines += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| bad("header not utf-8"))?;
    let mut it = header.split_whitespace();
    if it.next() != Some("Pf") {
        return Err(bad("expected single-channel 'Pf'"));
    }
    let w: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("width"))?;
    let h: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("height"))?;
    let scale: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("scale"))?;
    if w != res || h != 5 * res {
        return Err(bad(&format!("size {w}x{h}, expected {res}x{}", 5 * res)));
    }
    let body = &bytes[pos..];
    if body.len() != w * h * 4 {
        return Err(bad("payload size"));
    }
    let read = |k: usize| {
        let b = [body[4 * k], body[4 * k + 1], body[4 * k + 2], body[4 * k + 3]];
        if scale < 0.0 {
            f32::from_le_bytes(b) as f64
        } else {
            f32::from_be_bytes(b) as f64
        }
    };
    let mut planes = vec![0.0; w * h];
    for file_row in 0..h {
        let row = h - 1 - file_row;
        for x in 0..w {
            planes[row * w + x] = read(file_row * w + x);
        }
    }
    let n = res * res;
    let depth = planes[..n].to_vec();
    let mut normal = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            normal[3 * i + c] = planes[(1 + c) * n + i];
        }
    }
    let mask = planes[4 * n..].to_vec();
    Ok((depth, normal, mask))
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rotation (row-major, 9 lines), position (3), fov in degrees (1).
pub fn encode_camera_txt(c: &CameraPose) -> String {
    let mut s = String::new();
    for row in &c.rotation {
        for v in row {
            s.push_str(&fmt9(*v));
            s.push('\n');
        }
    }
    for v in &c.position {
        s.push_str(&fmt9(*v));
        s.push('\n');
    }
    s.push_str(&fmt9(c.fov_deg));
    s.push('\n');
    s
}

pub fn decode_camera_txt(text: &str) -> Result<CameraPose> {
    let vals: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Dataset(format!("camera value {l:?}: {e}"))))
        .collect::<Result<_>>()?;
    if vals.len() != 13 {
        return Err(Error::Dataset(format!("camera file has {} values, expected 13", vals.len())));
    }
    let r = |i: usize| [vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]];
    Ok(CameraPose { rotation: [r(0), r(1), r(2)], position: [vals[9], vals[10], vals[11]], fov_deg: vals[12] })
}

/// Writes the three files of view `k` into `dir`; returns their bytes in write order.
pub fn write_view(dir: &Path, k: usize, view: &ViewRecord) -> Result<Vec<Vec<u8>>> {
    let png = RgbImage::from_f64(view.res, view.res, &view.rgb).encode_png()?;
    let pfm = encode_geometry_pfm(view);
    let cam = encode_camera_txt(&view.camera).into_bytes();
    for (name, bytes) in [(format!("rgb_{k}.png"), &png), (format!("geo_{k}.pfm"), &pfm), (format!("cam_{k}.txt"), &cam)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(vec![png, pfm, cam])
}

pub fn read_view(dir: &Path, k: usize, res: usize) -> Result<ViewRecord> {
    let img = RgbImage::read_png(&dir.join(format!("rgb_{k}.png")))?;
    if img.width != res || img.height != res {
        return Err(Error::Dataset(format!("rgb_{k}.png is {}x{}, expected {res}", img.width, img.height)));
    }
    let gp = dir.join(format!("geo_{k}.pfm"));
    let geo = fs::read(&gp).map_err(|e| Error::io(&gp, e))?;
    let (depth, normal, mask) = decode_geometry_pfm(&geo, res)?;
    let cp = dir.join(format!("cam_{k}.txt"));
    let cam = fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
    Ok(ViewRecord { res, rgb: img.to_f64(), depth, normal, mask, camera: decode_camera_txt(&cam)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenekit::camera::sample_camera;

    #[test]
    fn camera_text_has_thirteen_lines_and_round_trips() {
        let c = sample_camera(9, 1.5, 2.2, 40.0).unwrap();
        let txt = encode_camera_txt(&c);
        assert_eq!(txt.lines().count(), 13);
        let back = decode_camera_txt(&txt).unwrap();
        assert!(back.orthonormality_error() < 1e-6);
        for (a, b) in back.position.iter().zip(&c.position) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn pfm_round_trip_preserves_planes() {
        let cam = sample_camera(1, 1.5, 2.2, 40.0).unwrap();
        let res = 16;
        let n = res * res;
        let view = ViewRecord {
            res,
            rgb: vec![1.0; 3 * n],
            depth: (0..n).map(|i| i as f64 * 0.25).collect(),
            normal: (0..3 * n).map(|i| (i % 7) as f64 - 3.0).collect(),
            mask: (0..n).map(|i| (i % 2) as f64).collect(),
            camera: cam,
        };
        let (d, nn, m) = decode_geometry_pfm(&encode_geometry_pfm(&view), res).unwrap();
        assert_eq!(d, view.depth);
        assert_eq!(nn, view.normal);
        assert_eq!(m, view.mask);
    }
}
