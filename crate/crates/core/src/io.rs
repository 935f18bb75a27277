//! Dataset directories on disk.
//!
//! ```text
//! camera.json              CameraIntrinsics
//! model.json               TrackedModel
//! params.json              Parameters (optional, partial)
//! frame_00000.depth.bin    row-major little-endian f32 meters, no header
//! frame_00000.mask.pgm     binary P5, nonzero = object
//! frame_00000.corr.json    CorrespondenceSet (optional)
//! gt_00000.csv             ground-truth vertices, one "x,y,z" row each
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{validate_model, CameraIntrinsics, CorrespondenceSet, Points, TrackedModel};

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

pub fn frame_file(root: &Path, index: usize, suffix: &str) -> PathBuf {
    root.join(format!("frame_{index:05}.{suffix}"))
}

pub fn gt_file(root: &Path, index: usize) -> PathBuf {
    root.join(format!("gt_{index:05}.csv"))
}

pub fn track_file(root: &Path, index: usize) -> PathBuf {
    root.join(format!("track_{index:05}.csv"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_depth(path: &Path, width: usize, height: usize) -> Result<Image<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != width * height * 4 {
        return Err(format_err(
            path,
            format!("{} bytes, expected {} for {width}x{height} f32", bytes.len(), width * height * 4),
        ));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Image::from_vec(width, height, data)
}

pub fn write_depth(path: &Path, depth: &Image<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(depth.data.len() * 4);
    for d in &depth.data {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Image<bool>> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token().and_then(|t| t.parse().ok()).ok_or_else(|| format_err(path, format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    if bytes.len() < start + width * height {
        return Err(format_err(path, "truncated raster"));
    }
    let data = bytes[start..start + width * height].iter().map(|&b| b != 0).collect();
    Image::from_vec(width, height, data)
}

pub fn write_mask(path: &Path, mask: &Image<bool>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.data.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Rows of `x,y,z` written with 9 significant digits.
pub fn write_points_csv(path: &Path, points: &Points) -> Result<()> {
    let mut text = String::with_capacity(points.nrows() * 48);
    for r in 0..points.nrows() {
        let _ = writeln!(text, "{:.8e},{:.8e},{:.8e}", points[(r, 0)], points[(r, 1)], points[(r, 2)]);
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Points> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?;
        if fields.len() != 3 {
            return Err(format_err(path, format!("line {}: expected 3 fields", n + 1)));
        }
        rows.push([fields[0], fields[1], fields[2]]);
    }
    Ok(crate::types::points_from_rows(&rows))
}

/// A dataset directory with its camera and model loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub camera: CameraIntrinsics,
    pub model: TrackedModel,
    pub num_frames: usize,
}

impl Dataset {
    /// The frame count is one past the highest `frame_*` index present;
    /// gaps are reported when the missing frame is read.
    pub fn open(root: &Path) -> Result<Self> {
        let camera: CameraIntrinsics = read_json(&root.join("camera.json"))?;
        camera.validate()?;
        let model: TrackedModel = read_json(&root.join("model.json"))?;
        validate_model(&model).into_result()?;
        let mut num_frames = 0;
        for entry in fs::read_dir(root)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix("frame_") {
                if let Some(Ok(i)) = rest.split('.').next().map(str::parse::<usize>) {
                    num_frames = num_frames.max(i + 1);
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), camera, model, num_frames })
    }

    pub fn read_images(&self, index: usize) -> Result<(Image<f32>, Image<bool>)> {
        let missing = |reason: String| Error::MissingFrame { index, reason };
        let depth_path = frame_file(&self.root, index, "depth.bin");
        let mask_path = frame_file(&self.root, index, "mask.pgm");
        for p in [&depth_path, &mask_path] {
            if !p.exists() {
                return Err(missing(format!("{} not found", p.display())));
            }
        }
        let depth = read_depth(&depth_path, self.camera.width, self.camera.height)
            .map_err(|e| missing(e.to_string()))?;
        let mask = read_mask(&mask_path).map_err(|e| missing(e.to_string()))?;
        if !mask.same_shape(&depth) {
            return Err(missing(format!(
                "mask is {}x{}, camera is {}x{}",
                mask.width, mask.height, self.camera.width, self.camera.height
            )));
        }
        Ok((depth, mask))
    }

    /// Empty when the frame has no `corr.json`.
    pub fn read_correspondences(&self, index: usize) -> Result<CorrespondenceSet> {
        let path = frame_file(&self.root, index, "corr.json");
        if !path.exists() {
            return Ok(CorrespondenceSet::empty());
        }
        let corr: CorrespondenceSet = read_json(&path)?;
        corr.validate(self.model.num_vertices())
            .map_err(|e| Error::MissingFrame { index, reason: e.to_string() })?;
        Ok(corr)
    }

    pub fn read_ground_truth(&self, index: usize) -> Result<Points> {
        read_points_csv(&gt_file(&self.root, index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{points_from_rows, Parameters};

    #[test]
    fn depth_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let img = Image::from_vec(3, 2, vec![1.0, f32::NAN, 0.0, 2.5, 1e-7, 3.25]).unwrap();
        write_depth(&p, &img).unwrap();
        let back = read_depth(&p, 3, 2).unwrap();
        let bits = |i: &Image<f32>| i.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&img));
        assert!(matches!(read_depth(&p, 4, 2), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask = Image::from_vec(3, 2, vec![true, false, false, true, true, false]).unwrap();
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);

        let mut bytes = b"P5 # made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend([0u8, 9]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_mask(&p).unwrap().data, vec![false, true]);

        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_mask(&p).is_err());
        fs::write(&p, b"P5\n4 4\n255\n\x00").unwrap();
        assert!(read_mask(&p).is_err());
    }

    #[test]
    fn csv_round_trip_keeps_nine_digits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        let pts = points_from_rows(&[[0.123456789123, -1.0, 2e-9], [1.0 / 3.0, 0.0, -7.5]]);
        write_points_csv(&p, &pts).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "1.23456789e-1,-1.00000000e0,2.00000000e-9");
        let back = read_points_csv(&p).unwrap();
        for (a, b) in back.iter().zip(pts.iter()) {
            assert!((a - b).abs() <= 5e-9 * b.abs().max(1e-300));
        }
        fs::write(&p, "1,2\n").unwrap();
        assert!(read_points_csv(&p).is_err());
    }

    #[test]
    fn dataset_reports_missing_frame_index() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let camera = CameraIntrinsics { fx: 10.0, fy: 10.0, cx: 2.0, cy: 2.0, width: 4, height: 4 };
        write_json(&root.join("camera.json"), &camera).unwrap();
        let model = TrackedModel::rope(nalgebra::Vector3::zeros(), nalgebra::Vector3::x(), 4);
        write_json(&root.join("model.json"), &model).unwrap();
        for i in [0usize, 2] {
            write_depth(&frame_file(root, i, "depth.bin"), &Image::filled(4, 4, 1.0)).unwrap();
            write_mask(&frame_file(root, i, "mask.pgm"), &Image::filled(4, 4, true)).unwrap();
        }
        let ds = Dataset::open(root).unwrap();
        assert_eq!(ds.num_frames, 3);
        assert!(ds.read_images(0).is_ok());
        match ds.read_images(1) {
            Err(Error::MissingFrame { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(ds.read_correspondences(0).unwrap().is_empty());

        write_json(&root.join("params.json"), &Parameters::default()).unwrap();
        let p: Parameters = read_json(&root.join("params.json")).unwrap();
        assert_eq!(p, Parameters::default());
    }
}
