//! Decoders for the modality files found in the real dataset archives.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;

use flate2::read::ZlibDecoder;
use ndarray::{Array2, Array4};

use super::{resample_sensor, stack_channels, Reader, SensorSequence, VideoClip};
use crate::error::{Error, Result};

// MAT v5 element types.
const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// A numeric 2-D variable from a MAT-file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatVariable {
    pub name: String,
    pub values: Array2<f64>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    big_endian: bool,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Option<u32> {
        let b: [u8; 4] = self.data.get(self.pos..self.pos + 4)?.try_into().ok()?;
        self.pos += 4;
        Some(if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        })
    }

    /// Reads one element tag and body, returning (type, body).
    fn element(&mut self) -> Option<(u32, &'a [u8])> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            // small data element: size and type packed in one word
            let (ty, size) = (first & 0xffff, (first >> 16) as usize);
            let body = self.data.get(self.pos..self.pos + size)?;
            self.pos += 4;
            return Some((ty, body));
        }
        let size = self.u32()? as usize;
        let body = self.data.get(self.pos..self.pos + size)?;
        self.pos += size;
        if first != MI_COMPRESSED {
            self.pos = (self.pos + 7) & !7;
        }
        Some((first, body))
    }
}

fn numbers(ty: u32, body: &[u8], big: bool) -> Option<Vec<f64>> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            body.chunks_exact($n)
                .map(|c| {
                    let arr = c.try_into().expect("exact");
                    (if big {
                        <$t>::from_be_bytes(arr)
                    } else {
                        <$t>::from_le_bytes(arr)
                    }) as f64
                })
                .collect()
        };
    }
    Some(match ty {
        MI_INT8 => body.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 => body.iter().map(|&b| b as f64).collect(),
        MI_INT16 => conv!(i16, 2),
        MI_UINT16 => conv!(u16, 2),
        MI_INT32 => conv!(i32, 4),
        MI_UINT32 => conv!(u32, 4),
        MI_SINGLE => conv!(f32, 4),
        MI_DOUBLE => conv!(f64, 8),
        MI_INT64 => conv!(i64, 8),
        MI_UINT64 => conv!(u64, 8),
        _ => return None,
    })
}

fn parse_matrix(body: &[u8], big_endian: bool) -> Option<MatVariable> {
    let mut c = Cursor {
        data: body,
        pos: 0,
        big_endian,
    };
    let (_, _flags) = c.element()?;
    let (dty, dims) = c.element()?;
    let dims = numbers(dty, dims, big_endian)?;
    if dims.len() != 2 {
        return None;
    }
    let (rows, cols) = (dims[0] as usize, dims[1] as usize);
    let (_, name) = c.element()?;
    let (rty, real) = c.element()?;
    let values = numbers(rty, real, big_endian)?;
    if values.len() != rows * cols {
        return None;
    }
    // column-major storage
    let values = Array2::from_shape_fn((rows, cols), |(r, k)| values[k * rows + r]);
    Some(MatVariable {
        name: String::from_utf8_lossy(name).trim_end_matches('\0').to_string(),
        values,
    })
}

/// Reads every numeric 2-D variable of a level-5 MAT-file (compressed or not).
pub fn read_mat_file(path: &Path) -> Result<Vec<MatVariable>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::SampleLoad {
        sample: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 128 {
        return Err(bad("not a level-5 MAT-file"));
    }
    let big_endian = match &bytes[126..128] {
        b"IM" => false,
        b"MI" => true,
        _ => return Err(bad("missing MAT endian marker")),
    };
    let mut cursor = Cursor {
        data: &bytes,
        pos: 128,
        big_endian,
    };
    let mut vars = Vec::new();
    while cursor.pos + 8 <= bytes.len() {
        let Some((ty, body)) = cursor.element() else { break };
        match ty {
            MI_MATRIX => vars.extend(parse_matrix(body, big_endian)),
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(body)
                    .read_to_end(&mut inflated)
                    .map_err(|e| bad(&format!("corrupt compressed element: {e}")))?;
                let mut inner = Cursor {
                    data: &inflated,
                    pos: 0,
                    big_endian,
                };
                if let Some((MI_MATRIX, body)) = inner.element() {
                    vars.extend(parse_matrix(body, big_endian));
                }
            }
            _ => {}
        }
    }
    Ok(vars)
}

/// UTD-MHAD inertial file: variable `d_iner`, `[steps × 6]` at 50 Hz.
#[derive(Debug, Clone)]
pub struct MatInertialReader {
    pub path: PathBuf,
    pub variable: String,
    pub sample_rate_hz: f64,
}

impl MatInertialReader {
    pub fn utd_mhad(path: PathBuf) -> Self {
        Self {
            path,
            variable: "d_iner".into(),
            sample_rate_hz: 50.0,
        }
    }
}

impl Reader<SensorSequence> for MatInertialReader {
    fn read(&self) -> Result<SensorSequence> {
        let vars = read_mat_file(&self.path)?;
        let var = vars
            .into_iter()
            .find(|v| v.name == self.variable)
            .ok_or_else(|| Error::SampleLoad {
                sample: self.path.display().to_string(),
                reason: format!("no variable `{}`", self.variable),
            })?;
        let values = var.values.t().to_owned();
        let names = if values.nrows() == 6 {
            ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        } else {
            (0..values.nrows()).map(|i| format!("ch{i}")).collect()
        };
        SensorSequence::new(values, self.sample_rate_hz, names)
    }

    fn describe(&self) -> String {
        self.path.display().to_string()
    }
}

/// Reads CSV rows whose last `axes` fields are numeric; other lines (headers)
/// are skipped. Those columns become channels.
pub fn read_csv_axes(path: &Path, axes: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        // leading columns may hold timestamps, so only the trailing axes must parse
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() < axes {
            continue;
        }
        let tail: Option<Vec<f64>> = fields[fields.len() - axes..]
            .iter()
            .map(|f| f.trim().parse::<f64>().ok())
            .collect();
        if let Some(tail) = tail {
            rows.push(tail);
        }
    }
    if rows.is_empty() {
        return Err(Error::SampleLoad {
            sample: path.display().to_string(),
            reason: "no numeric rows".into(),
        });
    }
    Ok(Array2::from_shape_fn((axes, rows.len()), |(c, t)| rows[t][c]))
}

/// One CSV stream of a multi-rate sensor set.
#[derive(Debug, Clone)]
pub struct CsvStream {
    pub path: PathBuf,
    pub name: String,
    pub sample_rate_hz: f64,
}

/// Several CSV streams (e.g. 100 Hz accelerometer, 50 Hz gyroscope) unified
/// to one rate by linear resampling, then stacked with zero padding.
#[derive(Debug, Clone)]
pub struct MultiRateCsvReader {
    pub streams: Vec<CsvStream>,
    pub target_rate_hz: f64,
}

impl Reader<SensorSequence> for MultiRateCsvReader {
    fn read(&self) -> Result<SensorSequence> {
        let seqs = self
            .streams
            .iter()
            .map(|s| {
                let values = read_csv_axes(&s.path, 3)?;
                let names = ["x", "y", "z"].iter().map(|a| format!("{}_{a}", s.name)).collect();
                let seq = SensorSequence::new(values, s.sample_rate_hz, names)?;
                resample_sensor(&seq, self.target_rate_hz)
            })
            .collect::<Result<Vec<_>>>()?;
        stack_channels(&seqs)
    }

    fn describe(&self) -> String {
        self.streams
            .iter()
            .map(|s| s.path.display().to_string())
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

/// A directory of extracted frames (`*.png` / `*.jpg`), sorted by name.
#[derive(Debug, Clone)]
pub struct FrameDirReader {
    pub dir: PathBuf,
    pub frame_rate_hz: f64,
}

impl Reader<VideoClip> for FrameDirReader {
    fn read(&self) -> Result<VideoClip> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&self.dir)
            .map_err(|e| Error::io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::SampleLoad {
                sample: self.dir.display().to_string(),
                reason: "no frames".into(),
            });
        }
        let frames = files
            .iter()
            .map(|p| {
                image::open(p).map(|i| i.to_rgb8()).map_err(|e| Error::SampleLoad {
                    sample: p.display().to_string(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = frames[0].dimensions();
        if frames.iter().any(|f| f.dimensions() != (w, h)) {
            return Err(Error::SampleLoad {
                sample: self.dir.display().to_string(),
                reason: "frames differ in size".into(),
            });
        }
        let arr = Array4::from_shape_fn((frames.len(), h as usize, w as usize, 3), |(t, y, x, c)| {
            frames[t].get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        VideoClip::new(arr, self.frame_rate_hz)
    }

    fn describe(&self) -> String {
        self.dir.display().to_string()
    }
}

/// Decodes a video container with an external `ffmpeg`, resampled to
/// `frame_rate_hz` and scaled to `size` during decoding.
#[derive(Debug, Clone)]
pub struct FfmpegReader {
    pub path: PathBuf,
    pub frame_rate_hz: f64,
    /// (height, width)
    pub size: (usize, usize),
}

impl Reader<VideoClip> for FfmpegReader {
    fn read(&self) -> Result<VideoClip> {
        let (h, w) = self.size;
        let output = Command::new(std::env::var("FUSEHAR_FFMPEG").unwrap_or_else(|_| "ffmpeg".into()))
            .args(["-v", "error", "-i"])
            .arg(&self.path)
            .args([
                "-vf",
                &format!("fps={},scale={w}:{h}", self.frame_rate_hz),
                "-f",
                "rawvideo",
                "-pix_fmt",
                "rgb24",
                "-",
            ])
            .output()
            .map_err(|e| Error::SampleLoad {
                sample: self.path.display().to_string(),
                reason: format!("cannot run ffmpeg: {e}"),
            })?;
        if !output.status.success() {
            return Err(Error::SampleLoad {
                sample: self.path.display().to_string(),
                reason: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        let frame_bytes = h * w * 3;
        let t = output.stdout.len() / frame_bytes;
        if t == 0 {
            return Err(Error::SampleLoad {
                sample: self.path.display().to_string(),
                reason: "decoded no frames".into(),
            });
        }
        let data: Vec<f64> = output.stdout[..t * frame_bytes]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let arr = Array4::from_shape_vec((t, h, w, 3), data).expect("sized");
        VideoClip::new(arr, self.frame_rate_hz)
    }

    fn describe(&self) -> String {
        self.path.display().to_string()
    }
}
