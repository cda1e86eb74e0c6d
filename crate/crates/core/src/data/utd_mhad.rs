//! UTD-MHAD: 27 actions, 8 subjects, 4 trials each.
//!
//! Layout: `RGB/a{a}_s{s}_t{t}_color.avi` (or a directory of that stem holding
//! extracted frames) and `Inertial/a{a}_s{s}_t{t}_inertial.mat`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::decode::{read_mat_file, FfmpegReader, FrameDirReader, MatInertialReader};
use super::source::LoadOptions;
use super::{
    Dataset, DatasetIndex, LabeledSample, ModalityMask, Payload, Preprocessing, Reader, SensorSequence, SkippedSample,
    SplitTag, VideoClip,
};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 27;
pub const TRAIN_SUBJECTS: [u32; 4] = [1, 3, 5, 7];
pub const TEST_SUBJECTS: [u32; 4] = [2, 4, 6, 8];
/// Native camera rate of the Kinect RGB stream.
pub const VIDEO_FPS: f64 = 30.0;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "swipe_left",
    "swipe_right",
    "wave",
    "clap",
    "throw",
    "arm_cross",
    "basketball_shoot",
    "draw_x",
    "draw_circle_cw",
    "draw_circle_ccw",
    "draw_triangle",
    "bowling",
    "boxing",
    "baseball_swing",
    "tennis_swing",
    "arm_curl",
    "tennis_serve",
    "push",
    "knock",
    "catch",
    "pickup_throw",
    "jog",
    "walk",
    "sit_to_stand",
    "stand_to_sit",
    "lunge",
    "squat",
];

pub fn split_of(subject: u32) -> Option<SplitTag> {
    if TRAIN_SUBJECTS.contains(&subject) {
        Some(SplitTag::Train)
    } else if TEST_SUBJECTS.contains(&subject) {
        Some(SplitTag::Test)
    } else {
        None
    }
}

/// Parses `a{a}_s{s}_t{t}_<suffix>` into (action, subject, trial).
pub fn parse_key(stem: &str) -> Option<(u32, u32, u32)> {
    let mut it = stem.split('_');
    let num = |p: Option<&str>, c: char| p?.strip_prefix(c)?.parse::<u32>().ok();
    let a = num(it.next(), 'a')?;
    let s = num(it.next(), 's')?;
    let t = num(it.next(), 't')?;
    Some((a, s, t))
}

fn scan(dir: &Path, suffix: &str) -> Result<BTreeMap<(u32, u32, u32), PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = name.split('.').next().unwrap_or_default();
        if stem.ends_with(suffix) {
            if let Some(key) = parse_key(stem) {
                out.insert(key, path);
            }
        }
    }
    Ok(out)
}

fn video_reader(path: &Path, prep: &Preprocessing) -> Arc<dyn Reader<VideoClip>> {
    if path.is_dir() {
        Arc::new(FrameDirReader {
            dir: path.to_path_buf(),
            frame_rate_hz: VIDEO_FPS,
        })
    } else {
        Arc::new(FfmpegReader {
            path: path.to_path_buf(),
            frame_rate_hz: prep.video_fps,
            size: prep.video_size,
        })
    }
}

fn check_video(path: &Path) -> std::result::Result<(), String> {
    let meta = std::fs::metadata(path).map_err(|e| e.to_string())?;
    if meta.is_file() && meta.len() == 0 {
        return Err("empty video file".into());
    }
    Ok(())
}

fn check_inertial(path: &Path) -> std::result::Result<(), String> {
    let vars = read_mat_file(path).map_err(|e| e.to_string())?;
    match vars.iter().find(|v| v.name == "d_iner") {
        Some(v) if v.values.nrows() > 0 && v.values.iter().all(|x| x.is_finite()) => Ok(()),
        Some(_) => Err("empty or non-finite d_iner".into()),
        None => Err("no variable `d_iner`".into()),
    }
}

/// Indexes a UTD-MHAD root. Inertial files are validated eagerly; video
/// frames decode lazily.
pub fn load_utd_mhad(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let prep = opts.preprocessing.clone().unwrap_or_else(Preprocessing::utd_mhad);
    prep.validate()?;
    let videos = scan(&root.join("RGB"), "_color")?;
    let inertial = scan(&root.join("Inertial"), "_inertial")?;
    if videos.is_empty() && inertial.is_empty() {
        return Err(Error::Layout {
            root: root.to_path_buf(),
            reason: "no RGB/*_color or Inertial/*_inertial.mat files".into(),
        });
    }
    let keys: BTreeSet<_> = videos.keys().chain(inertial.keys()).copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut skipped = Vec::new();
    for (a, s, t) in keys {
        let sample_id = format!("a{a}_s{s}_t{t}");
        let mut problems = Vec::new();
        if a == 0 || a as usize > NUM_CLASSES {
            problems.push(format!("action {a} outside 1..={NUM_CLASSES}"));
        }
        let split = split_of(s);
        if split.is_none() {
            problems.push(format!("subject {s} outside 1..=8"));
        }
        let sensor_path = inertial.get(&(a, s, t));
        let video_path = videos.get(&(a, s, t));
        match sensor_path {
            None => problems.push("missing inertial file".into()),
            Some(p) => {
                if let Err(e) = check_inertial(p) {
                    problems.push(format!("{}: {e}", p.display()));
                }
            }
        }
        match video_path {
            None => problems.push("missing video file".into()),
            Some(p) => {
                if let Err(e) = check_video(p) {
                    problems.push(format!("{}: {e}", p.display()));
                }
            }
        }
        if !problems.is_empty() {
            let reason = problems.join("; ");
            if opts.strict {
                return Err(Error::SampleLoad {
                    sample: sample_id,
                    reason,
                });
            }
            log::warn!("skipping {sample_id}: {reason}");
            skipped.push(SkippedSample { sample_id, reason });
            continue;
        }
        let sensor: Arc<dyn Reader<SensorSequence>> =
            Arc::new(MatInertialReader::utd_mhad(sensor_path.expect("checked").clone()));
        let sample = LabeledSample {
            sample_id,
            subject_id: s,
            class_id: a as usize - 1,
            sensor: Some(Payload::Deferred(sensor)),
            video: Some(Payload::Deferred(video_reader(video_path.expect("checked"), &prep))),
            modality_mask: ModalityMask::BOTH,
        };
        match split.expect("checked") {
            SplitTag::Train => train.push(sample),
            SplitTag::Test => test.push(sample),
        }
    }
    let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    Ok(Dataset {
        name: "utd_mhad".into(),
        train: DatasetIndex::new(train, names.clone(), SplitTag::Train)?,
        test: DatasetIndex::new(test, names, SplitTag::Test)?,
        preprocessing: prep,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_parsing() {
        assert_eq!(parse_key("a12_s3_t4_color"), Some((12, 3, 4)));
        assert_eq!(parse_key("a12_s3_inertial"), None);
        assert_eq!(parse_key("readme"), None);
    }

    #[test]
    fn odd_subjects_train_even_test() {
        assert_eq!(split_of(3), Some(SplitTag::Train));
        assert_eq!(split_of(4), Some(SplitTag::Test));
        assert_eq!(split_of(9), None);
    }

    #[test]
    fn empty_root_is_a_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_utd_mhad(dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Layout { .. }));
    }
}
