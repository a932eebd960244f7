//! Composite videos: whole source videos spliced end to end.
//!
//! Each source video's span inside the composite is free ground truth for
//! questions about that video, and its lower-median frame is used as the
//! approximate key-frame label.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datamodel::{CompositeVideo, LocalizationLabel, QAItem, Segment, VideoManifest};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompositeError {
    #[error("a composite needs at least 2 videos, got {0}")]
    TooFewVideos(usize),
    #[error("video {0:?} appears twice")]
    DuplicateVideo(String),
    #[error("video {0:?} has no frames")]
    EmptyVideo(String),
    #[error("global frame {index} out of range [0, {total})")]
    OutOfRange { index: usize, total: usize },
    #[error("video {0:?} is not part of composite")]
    NotInComposite(String),
    #[error("empty span [{0}, {1})")]
    EmptySpan(usize, usize),
    #[error("video {video:?} of question {question:?} belongs to {count} composites")]
    Membership {
        question: String,
        video: String,
        count: usize,
    },
    #[error("group size must be at least 2")]
    GroupSize,
}

/// Lays `videos` end to end in the given order.
pub fn build_composite(
    composite_id: &str,
    videos: &[VideoManifest],
) -> Result<CompositeVideo, CompositeError> {
    if videos.len() < 2 {
        return Err(CompositeError::TooFewVideos(videos.len()));
    }
    let mut seen = HashSet::new();
    let mut segments = Vec::with_capacity(videos.len());
    let mut start = 0;
    for v in videos {
        if !seen.insert(v.video_id.as_str()) {
            return Err(CompositeError::DuplicateVideo(v.video_id.clone()));
        }
        if v.n_frames == 0 {
            return Err(CompositeError::EmptyVideo(v.video_id.clone()));
        }
        segments.push(Segment {
            video_id: v.video_id.clone(),
            start_global: start,
            n_frames: v.n_frames,
        });
        start += v.n_frames;
    }
    Ok(CompositeVideo {
        composite_id: composite_id.to_string(),
        segments,
        total_frames: start,
    })
}

/// Maps a composite frame index to `(video_id, local index)`.
pub fn global_to_local(c: &CompositeVideo, global: usize) -> Result<(&str, usize), CompositeError> {
    if global >= c.total_frames {
        return Err(CompositeError::OutOfRange {
            index: global,
            total: c.total_frames,
        });
    }
    // segments are sorted by start; find the last one starting at or before `global`
    let pos = c.segments.partition_point(|s| s.start_global <= global) - 1;
    let s = &c.segments[pos];
    Ok((&s.video_id, global - s.start_global))
}

pub fn local_to_global(c: &CompositeVideo, video_id: &str, local: usize) -> Result<usize, CompositeError> {
    let s = c
        .segment(video_id)
        .ok_or_else(|| CompositeError::NotInComposite(video_id.to_string()))?;
    if local >= s.n_frames {
        return Err(CompositeError::OutOfRange {
            index: local,
            total: s.n_frames,
        });
    }
    Ok(s.start_global + local)
}

/// Half-open global span `[start, end)` of a video's segment.
pub fn segment_label(c: &CompositeVideo, video_id: &str) -> Result<(usize, usize), CompositeError> {
    c.segment(video_id)
        .map(|s| (s.start_global, s.end_global()))
        .ok_or_else(|| CompositeError::NotInComposite(video_id.to_string()))
}

/// Lower median of a half-open span.
pub fn median_frame_label((start, end): (usize, usize)) -> Result<usize, CompositeError> {
    if end <= start {
        return Err(CompositeError::EmptySpan(start, end));
    }
    Ok(start + (end - start - 1) / 2)
}

/// One median-frame label per question, in question order.
pub fn generate_tomloc_labels(
    composites: &[CompositeVideo],
    qa: &[QAItem],
) -> Result<Vec<LocalizationLabel>, CompositeError> {
    qa.iter()
        .map(|q| {
            let mut owners = composites.iter().filter(|c| c.segment(&q.video_id).is_some());
            let (Some(c), None) = (owners.next(), owners.next()) else {
                let count = composites
                    .iter()
                    .filter(|c| c.segment(&q.video_id).is_some())
                    .count();
                return Err(CompositeError::Membership {
                    question: q.question_id.clone(),
                    video: q.video_id.clone(),
                    count,
                });
            };
            Ok(LocalizationLabel {
                question_id: q.question_id.clone(),
                frame_index: median_frame_label(segment_label(c, &q.video_id)?)?,
            })
        })
        .collect()
}

/// Shuffles videos with a seeded generator and splices them in groups of
/// `group_size`. A trailing group of one video joins the previous group.
/// Composite ids are `<prefix><group number>`.
pub fn group_into_composites(
    videos: &[VideoManifest],
    group_size: usize,
    seed: u64,
    prefix: &str,
) -> Result<Vec<CompositeVideo>, CompositeError> {
    if group_size < 2 {
        return Err(CompositeError::GroupSize);
    }
    if videos.len() < 2 {
        return Err(CompositeError::TooFewVideos(videos.len()));
    }
    let mut order: Vec<&VideoManifest> = videos.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<Vec<VideoManifest>> = order
        .chunks(group_size)
        .map(|g| g.iter().map(|v| (*v).clone()).collect())
        .collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(last);
    }
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| build_composite(&format!("{prefix}{i}"), g))
        .collect()
}
