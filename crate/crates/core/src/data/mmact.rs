//! MMAct, cross-subject protocol: 37 actions, 20 subjects.
//!
//! Layout (trimmed release):
//! `RGB/subject{s}/scene{c}/cam{k}/session{n}/{action}.mp4` (or a directory of
//! that stem holding extracted frames) and, per sensor stream,
//! `{stream}/subject{s}/scene{c}/session{n}/{action}.csv`. Each camera view is
//! its own sample and shares the session's sensor streams.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::decode::{CsvStream, FfmpegReader, FrameDirReader, MultiRateCsvReader};
use super::source::LoadOptions;
use super::{
    Dataset, DatasetIndex, LabeledSample, ModalityMask, Payload, Preprocessing, Reader, SkippedSample, SplitTag,
    VideoClip,
};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 37;
pub const NUM_TRAIN_SUBJECTS: u32 = 16;
pub const NUM_SUBJECTS: u32 = 20;
pub const VIDEO_FPS: f64 = 30.0;

/// Sensor streams and their native rates. Phone acceleration is 100 Hz.
pub const STREAMS: [(&str, f64); 4] = [
    ("acc_phone_clip", 100.0),
    ("acc_watch_clip", 100.0),
    ("gyro_clip", 50.0),
    ("orientation_clip", 50.0),
];

pub fn split_of(subject: u32) -> Option<SplitTag> {
    match subject {
        1..=NUM_TRAIN_SUBJECTS => Some(SplitTag::Train),
        s if s > NUM_TRAIN_SUBJECTS && s <= NUM_SUBJECTS => Some(SplitTag::Test),
        _ => None,
    }
}

fn numbered(name: &str, prefix: &str) -> Option<u32> {
    name.strip_prefix(prefix)?.parse().ok()
}

fn subdirs(dir: &Path, prefix: &str) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(n) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| numbered(n, prefix))
        {
            if path.is_dir() {
                out.push((n, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

struct VideoEntry {
    subject: u32,
    scene: u32,
    cam: u32,
    session: u32,
    action: String,
    path: PathBuf,
}

fn scan_videos(rgb: &Path) -> Result<Vec<VideoEntry>> {
    let mut out = Vec::new();
    for (subject, sdir) in subdirs(rgb, "subject")? {
        for (scene, cdir) in subdirs(&sdir, "scene")? {
            for (cam, kdir) in subdirs(&cdir, "cam")? {
                for (session, ndir) in subdirs(&kdir, "session")? {
                    let mut files: Vec<PathBuf> = std::fs::read_dir(&ndir)
                        .map_err(|e| Error::io(&ndir, e))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .collect();
                    files.sort();
                    for path in files {
                        let Some(action) = path.file_stem().and_then(|s| s.to_str()) else {
                            continue;
                        };
                        out.push(VideoEntry {
                            subject,
                            scene,
                            cam,
                            session,
                            action: action.to_string(),
                            path,
                        });
                    }
                }
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

/// Indexes an MMAct root. Class ids follow `opts.class_names` when given,
/// otherwise the sorted set of action names found under `RGB/`.
pub fn load_mmact(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let prep = opts.preprocessing.clone().unwrap_or_else(Preprocessing::mmact);
    prep.validate()?;
    let rgb = root.join("RGB");
    if !rgb.is_dir() {
        return Err(Error::Layout {
            root: root.to_path_buf(),
            reason: "missing RGB/ directory".into(),
        });
    }
    let videos = scan_videos(&rgb)?;
    let class_names: Vec<String> = match &opts.class_names {
        Some(names) => names.clone(),
        None => videos
            .iter()
            .map(|v| v.action.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if class_names.len() != NUM_CLASSES {
        log::warn!(
            "MMAct root has {} action classes, expected {NUM_CLASSES}",
            class_names.len()
        );
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut skipped = Vec::new();
    for v in videos {
        let sample_id = format!("s{}_sc{}_cam{}_se{}_{}", v.subject, v.scene, v.cam, v.session, v.action);
        let mut problems = Vec::new();
        let class_id = class_names.iter().position(|c| *c == v.action);
        if class_id.is_none() {
            problems.push(format!("unknown action `{}`", v.action));
        }
        let split = split_of(v.subject);
        if split.is_none() {
            problems.push(format!("subject {} outside 1..={NUM_SUBJECTS}", v.subject));
        }
        if std::fs::metadata(&v.path)
            .map(|m| m.is_file() && m.len() == 0)
            .unwrap_or(true)
        {
            problems.push("empty or unreadable video".into());
        }
        let streams: Vec<CsvStream> = STREAMS
            .iter()
            .map(|&(name, rate)| CsvStream {
                path: root
                    .join(name)
                    .join(format!("subject{}", v.subject))
                    .join(format!("scene{}", v.scene))
                    .join(format!("session{}", v.session))
                    .join(format!("{}.csv", v.action)),
                name: name.trim_end_matches("_clip").to_string(),
                sample_rate_hz: rate,
            })
            .collect();
        for s in &streams {
            if !s.path.is_file() {
                problems.push(format!("missing sensor file {}", s.path.display()));
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
        let sensor = MultiRateCsvReader {
            streams,
            target_rate_hz: prep.sensor_rate_hz,
        };
        let sample = LabeledSample {
            sample_id,
            subject_id: v.subject,
            class_id: class_id.expect("checked"),
            sensor: Some(Payload::Deferred(Arc::new(sensor))),
            video: Some(Payload::Deferred(video_reader(&v.path, &prep))),
            modality_mask: ModalityMask::BOTH,
        };
        match split.expect("checked") {
            SplitTag::Train => train.push(sample),
            SplitTag::Test => test.push(sample),
        }
    }
    Ok(Dataset {
        name: "mmact".into(),
        train: DatasetIndex::new(train, class_names.clone(), SplitTag::Train)?,
        test: DatasetIndex::new(test, class_names, SplitTag::Test)?,
        preprocessing: prep,
        skipped,
    })
}
