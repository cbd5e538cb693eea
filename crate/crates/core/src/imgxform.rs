//! Exact image transforms: counter-clockwise quarter-turn rotations and BT.601
//! grayscale. Rotations are pure pixel permutations, never resampled.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::Serialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::par;
use crate::predstore::TransformTag;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: encode failed: {message}")]
    Encode { path: PathBuf, message: String },
}

/// Row-major, channel-interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self, TransformError> {
        if channels != 1 && channels != 3 {
            return Err(TransformError::Argument(format!("channels must be 1 or 3, got {channels}")));
        }
        if height.checked_mul(width).and_then(|p| p.checked_mul(channels)) != Some(data.len()) {
            return Err(TransformError::Argument(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Self {
                height: h as usize,
                width: w as usize,
                channels: 3,
                data: rgb.into_raw(),
            }
        } else {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            Self {
                height: h as usize,
                width: w as usize,
                channels: 1,
                data: gray.into_raw(),
            }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 3 {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.data.clone()).expect("validated dimensions"))
        } else {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.data.clone()).expect("validated dimensions"))
        }
    }
}

/// Rotates counter-clockwise by `quarter_turns · 90°`, `quarter_turns ∈ {1,2,3}`.
pub fn rotate90k(img: &ImageTensor, quarter_turns: u8) -> Result<ImageTensor, TransformError> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (out_h, out_w) = match quarter_turns {
        1 | 3 => (w, h),
        2 => (h, w),
        k => return Err(TransformError::Argument(format!("quarter turns must be 1, 2 or 3, got {k}"))),
    };
    let mut data = Vec::with_capacity(img.data.len());
    for i in 0..out_h {
        for j in 0..out_w {
            let (src_r, src_c) = match quarter_turns {
                1 => (j, w - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                _ => (h - 1 - j, i),
            };
            let at = (src_r * w + src_c) * c;
            data.extend_from_slice(&img.data[at..at + c]);
        }
    }
    Ok(ImageTensor {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// BT.601 luma with round-half-up, computed exactly in integers.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let weighted = 299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b);
    ((weighted + 500) / 1000) as u8
}

/// Replaces every RGB pixel by its luma, replicated on all three channels.
pub fn grayscale(img: &ImageTensor) -> Result<ImageTensor, TransformError> {
    if img.channels != 3 {
        return Err(TransformError::Argument("grayscale needs a 3-channel image".into()));
    }
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|px| {
            let l = luma(px[0], px[1], px[2]);
            [l, l, l]
        })
        .collect();
    Ok(ImageTensor { data, ..*img })
}

/// Applies `tag` to a single image. `Identity` returns a copy.
pub fn apply(img: &ImageTensor, tag: TransformTag) -> Result<ImageTensor, TransformError> {
    match tag {
        TransformTag::Identity => Ok(img.clone()),
        TransformTag::Grayscale => grayscale(img),
        rot => rotate90k(img, rot.quarter_turns().expect("rotation tag")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnError {
    /// Record undecodable files and carry on.
    #[default]
    Skip,
    FailFast,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TransformSummary {
    pub written: usize,
    pub skipped: Vec<SkippedFile>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .and_then(ImageFormat::from_extension)
        .is_some()
}

/// Image files under `dir`, relative to it, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, TransformError> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| TransformError::Io {
            path: e.path().unwrap_or(dir).to_path_buf(),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk loop")),
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            out.push(entry.path().strip_prefix(dir).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(out)
}

fn transform_file(input: &Path, output: &Path, tag: TransformTag) -> Result<(), TransformError> {
    let decoded = image::open(input).map_err(|e| TransformError::Decode {
        path: input.to_path_buf(),
        message: e.to_string(),
    })?;
    let tensor = ImageTensor::from_dynamic(&decoded);
    let out = apply(&tensor, tag).map_err(|e| TransformError::Decode {
        path: input.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent).map_err(|source| TransformError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    out.to_dynamic()
        .save_with_format(output, ImageFormat::Png)
        .map_err(|e| TransformError::Encode {
            path: output.to_path_buf(),
            message: e.to_string(),
        })
}

/// Transforms every image under `input` into `output`, keeping relative paths
/// (with a `.png` extension). Images are processed data-parallel; the result
/// does not depend on scheduling.
pub fn transform_dataset(
    input: &Path,
    tag: TransformTag,
    output: &Path,
    on_error: OnError,
) -> Result<TransformSummary, TransformError> {
    let files = list_images(input)?;
    let results = par::map_slice(&files, |rel| {
        transform_file(&input.join(rel), &output.join(rel).with_extension("png"), tag)
    });
    let mut summary = TransformSummary::default();
    for (rel, result) in files.iter().zip(results) {
        match result {
            Ok(()) => summary.written += 1,
            Err(e @ TransformError::Decode { .. }) if on_error == OnError::Skip => {
                summary.skipped.push(SkippedFile {
                    path: rel.clone(),
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}
