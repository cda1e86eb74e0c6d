use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{SensorSequence, VideoClip};
use crate::error::{Error, Result};

/// Canonical input geometry for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub sensor_rate_hz: f64,
    pub sensor_len: usize,
    pub video_fps: f64,
    pub video_frames: usize,
    /// (height, width)
    pub video_size: (usize, usize),
}

impl Preprocessing {
    /// 160 sensor steps at 50 Hz, 32 frames at 15 fps.
    pub fn utd_mhad() -> Self {
        Self {
            sensor_rate_hz: 50.0,
            sensor_len: 160,
            video_fps: 15.0,
            video_frames: 32,
            video_size: (224, 224),
        }
    }

    /// 250 sensor steps at 50 Hz, 64 frames at 30 fps.
    pub fn mmact() -> Self {
        Self {
            sensor_rate_hz: 50.0,
            sensor_len: 250,
            video_fps: 30.0,
            video_frames: 64,
            video_size: (224, 224),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.sensor_rate_hz, self.video_fps]
            .iter()
            .any(|r| r.is_nan() || *r <= 0.0)
        {
            return Err(Error::Config("preprocessing rates must be positive".into()));
        }
        if self.sensor_len == 0 || self.video_frames == 0 || self.video_size.0 == 0 || self.video_size.1 == 0 {
            return Err(Error::Config("preprocessing lengths and sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn sensor(&self, seq: &SensorSequence) -> Result<SensorSequence> {
        let seq = if seq.sample_rate_hz() != self.sensor_rate_hz {
            resample_sensor(seq, self.sensor_rate_hz)?
        } else {
            seq.clone()
        };
        if !seq.is_finite() {
            return Err(Error::NonFinite("sensor sequence".into()));
        }
        Ok(pad_or_crop(&seq, self.sensor_len))
    }

    pub fn video(&self, clip: &VideoClip) -> Result<VideoClip> {
        let clip = sample_video_frames(clip, self.video_fps, self.video_frames)?;
        if clip.frame_size() != self.video_size {
            resize_frames(&clip, self.video_size.0, self.video_size.1)
        } else {
            Ok(clip)
        }
    }
}

/// Linear-interpolation resampling to `target_rate_hz`. The output has
/// `round(len · target / source)` steps; positions past the last input sample
/// hold the last value.
pub fn resample_sensor(seq: &SensorSequence, target_rate_hz: f64) -> Result<SensorSequence> {
    if !(target_rate_hz > 0.0 && target_rate_hz.is_finite()) {
        return Err(Error::Invalid(format!("target rate {target_rate_hz} must be positive")));
    }
    if !seq.is_finite() {
        return Err(Error::NonFinite("sensor sequence passed to resample".into()));
    }
    let source = seq.sample_rate_hz();
    if target_rate_hz == source {
        return Ok(seq.clone());
    }
    let len = seq.len();
    let ratio = source / target_rate_hz;
    let out_len = ((len as f64 * target_rate_hz / source).round() as usize).max(1);
    let values = seq.values();
    let mut out = Array2::zeros((seq.channels(), out_len));
    for j in 0..out_len {
        let pos = j as f64 * ratio;
        let lo = (pos.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let frac = if lo == len - 1 { 0.0 } else { pos - lo as f64 };
        for c in 0..seq.channels() {
            out[[c, j]] = values[[c, lo]] * (1.0 - frac) + values[[c, hi]] * frac;
        }
    }
    SensorSequence::new(out, target_rate_hz, seq.channel_names().to_vec())
}

/// Zero-pads at the end or keeps the first `target_len` steps.
///
/// # Panics
/// If `target_len` is zero.
pub fn pad_or_crop(seq: &SensorSequence, target_len: usize) -> SensorSequence {
    assert!(target_len >= 1, "target length must be at least 1");
    let keep = seq.len().min(target_len);
    let mut out = Array2::zeros((seq.channels(), target_len));
    out.slice_mut(s![.., ..keep])
        .assign(&seq.values().slice(s![.., ..keep]));
    SensorSequence::new(out, seq.sample_rate_hz(), seq.channel_names().to_vec()).expect("shape preserved")
}

/// Selects frames at the uniform stride `source_fps / target_fps`, then crops
/// to `num_frames` or extends by repeating the final frame.
pub fn sample_video_frames(clip: &VideoClip, target_fps: f64, num_frames: usize) -> Result<VideoClip> {
    if target_fps.is_nan() || target_fps <= 0.0 || num_frames == 0 {
        return Err(Error::Invalid(format!(
            "frame sampling needs positive fps and frame count, got {target_fps} / {num_frames}"
        )));
    }
    let stride = clip.frame_rate_hz() / target_fps;
    let len = clip.num_frames();
    let mut picks: Vec<usize> = (0..)
        .map(|i| (i as f64 * stride + 1e-9).floor() as usize)
        .take_while(|&idx| idx < len)
        .take(num_frames)
        .collect();
    let last = *picks.last().unwrap_or(&(len - 1));
    picks.resize(num_frames, last);
    let frames = clip.frames().select(Axis(0), &picks);
    VideoClip::new(frames, target_fps)
}

/// Bilinear spatial resize (align-corners off, as in common vision stacks).
pub fn resize_frames(clip: &VideoClip, height: usize, width: usize) -> Result<VideoClip> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("resize target must be non-empty".into()));
    }
    let (t, h, w, _) = clip.frames().dim();
    let src = clip.frames();
    let mut out = Array4::zeros((t, height, width, 3));
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, y1) = (fy.floor() as usize, (fy.floor() as usize + 1).min(h - 1));
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, x1) = (fx.floor() as usize, (fx.floor() as usize + 1).min(w - 1));
            let wx = fx - x0 as f64;
            for f in 0..t {
                for c in 0..3 {
                    let top = src[[f, y0, x0, c]] * (1.0 - wx) + src[[f, y0, x1, c]] * wx;
                    let bottom = src[[f, y1, x0, c]] * (1.0 - wx) + src[[f, y1, x1, c]] * wx;
                    out[[f, y, x, c]] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoClip::new(out, clip.frame_rate_hz())
}

/// Stacks same-rate sequences channel-wise, zero-padding shorter ones.
pub fn stack_channels(seqs: &[SensorSequence]) -> Result<SensorSequence> {
    let first = seqs.first().ok_or_else(|| Error::Invalid("nothing to stack".into()))?;
    let rate = first.sample_rate_hz();
    if let Some(bad) = seqs.iter().find(|s| s.sample_rate_hz() != rate) {
        return Err(Error::Invalid(format!(
            "cannot stack {} Hz with {} Hz channels; resample first",
            bad.sample_rate_hz(),
            rate
        )));
    }
    let len = seqs.iter().map(SensorSequence::len).max().expect("non-empty");
    let padded: Vec<SensorSequence> = seqs.iter().map(|s| pad_or_crop(s, len)).collect();
    let views: Vec<_> = padded.iter().map(|s| s.values().view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).expect("equal lengths");
    let names = seqs.iter().flat_map(|s| s.channel_names().iter().cloned()).collect();
    SensorSequence::new(values, rate, names)
}
