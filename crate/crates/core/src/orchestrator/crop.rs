//! Cropping a predicted sparse window into a densely sampled clip, and the
//! index bookkeeping between clip-local, sparse and source frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{FrameSpan, SpanBasis, VideoDescriptor};
use crate::sampling::{sample_frames, Fps};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CropError {
    #[error("window {start}..={end} outside sparse sequence of {len} frames")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("window must be on the sparse basis, got {0:?}")]
    WrongBasis(SpanBasis),
    #[error("no windows to crop")]
    NoWindow,
}

/// Translation between clip-local frames, sparse annotation frames and source
/// frames for one cropped clip.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexMap {
    /// `clip_to_source[k]` is the source index of clip-local frame `k`.
    pub clip_to_source: Vec<usize>,
    /// Sparse frame index to the clip-local frame nearest to it in source time.
    pub sparse_to_clip: BTreeMap<usize, usize>,
}

impl IndexMap {
    /// Builds the map for a clip whose frames have the given (sorted) source
    /// indices. Every sparse frame whose source index falls inside the clip's
    /// source range is linked to the nearest clip frame; ties go to the earlier one.
    pub fn build(clip_to_source: Vec<usize>, sparse_to_source: &[usize]) -> Self {
        let mut sparse_to_clip = BTreeMap::new();
        if let (Some(&lo), Some(&hi)) = (clip_to_source.first(), clip_to_source.last()) {
            for (j, &src) in sparse_to_source.iter().enumerate() {
                if src < lo || src > hi {
                    continue;
                }
                let k = match clip_to_source.binary_search(&src) {
                    Ok(k) => k,
                    Err(pos) => {
                        // lo <= src <= hi, so 0 < pos < len here.
                        let (before, after) = (clip_to_source[pos - 1], clip_to_source[pos]);
                        if src - before <= after - src {
                            pos - 1
                        } else {
                            pos
                        }
                    }
                };
                sparse_to_clip.insert(j, k);
            }
        }
        IndexMap { clip_to_source, sparse_to_clip }
    }

    pub fn len(&self) -> usize {
        self.clip_to_source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_to_source.is_empty()
    }

    pub fn source_of(&self, clip_frame: usize) -> Option<usize> {
        self.clip_to_source.get(clip_frame).copied()
    }

    pub fn clip_for_sparse(&self, sparse_frame: usize) -> Option<usize> {
        self.sparse_to_clip.get(&sparse_frame).copied()
    }
}

/// A cropped clip ready for the second turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDescriptor {
    /// The window that was cropped, on the sparse basis.
    pub sparse_window: FrameSpan,
    /// Inclusive source-frame range of the clip.
    pub source_span: FrameSpan,
    /// Source indices of the clip frames, in order.
    pub dense_indices: Vec<usize>,
    pub index_map: IndexMap,
}

impl ClipDescriptor {
    pub fn frame_count(&self) -> usize {
        self.dense_indices.len()
    }

    /// Payload handles for the clip frames.
    pub fn handles(&self, video: &VideoDescriptor) -> Vec<String> {
        self.dense_indices.iter().map(|&i| video.frames[i].clone()).collect()
    }
}

/// Smallest span covering all windows (min start, max end).
pub fn hull(windows: &[FrameSpan]) -> Option<FrameSpan> {
    let first = windows.first()?;
    let start = windows.iter().map(|w| w.start).min()?;
    let end = windows.iter().map(|w| w.end).max()?;
    Some(FrameSpan::new(start, end, first.basis))
}

/// Crops `window` (sparse basis) out of `video` and densely resamples it.
///
/// The clip keeps the frames of the video-wide `dense_fps` grid that fall in
/// the window's source range. With `max_clip_seconds`, a longer range is
/// shrunk symmetrically around its centre.
pub fn crop_window(
    video: &VideoDescriptor,
    sparse_indices: &[usize],
    window: FrameSpan,
    dense_fps: Fps,
    max_clip_seconds: Option<f64>,
) -> Result<ClipDescriptor, CropError> {
    if window.basis != SpanBasis::Sparse {
        return Err(CropError::WrongBasis(window.basis));
    }
    if window.start > window.end || window.end >= sparse_indices.len() {
        return Err(CropError::OutOfRange { start: window.start, end: window.end, len: sparse_indices.len() });
    }
    let mut start = sparse_indices[window.start];
    let mut end = sparse_indices[window.end];
    if let Some(max_s) = max_clip_seconds {
        let max_frames = ((max_s * video.source_fps.as_f64()).floor() as usize).max(1);
        let len = end - start + 1;
        if len > max_frames {
            let excess = len - max_frames;
            start += excess / 2;
            end -= excess - excess / 2;
        }
    }
    let mut dense: Vec<usize> =
        sample_frames(video, dense_fps).into_iter().filter(|i| (start..=end).contains(i)).collect();
    if dense.is_empty() {
        dense.push(start);
    }
    let index_map = IndexMap::build(dense.clone(), sparse_indices);
    Ok(ClipDescriptor {
        sparse_window: window,
        source_span: FrameSpan::new(start, end, SpanBasis::Source),
        dense_indices: dense,
        index_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample_indices;

    fn video(n: usize, fps: u32) -> VideoDescriptor {
        VideoDescriptor::with_default_handles("v", n, Fps::integer(fps)).unwrap()
    }

    #[test]
    fn window_lookup_into_sparse_indices() {
        let v = video(30, 24);
        let clip = crop_window(&v, &[0, 6, 12, 18, 24], FrameSpan::sparse(1, 3), Fps::integer(8), None).unwrap();
        assert_eq!(clip.source_span, FrameSpan::new(6, 18, SpanBasis::Source));
        assert_eq!(clip.dense_indices, vec![6, 9, 12, 15, 18]);
        assert_eq!(clip.index_map.clip_for_sparse(1), Some(0));
        assert_eq!(clip.index_map.clip_for_sparse(2), Some(2));
        assert_eq!(clip.index_map.clip_for_sparse(3), Some(4));
        assert_eq!(clip.index_map.clip_for_sparse(0), None);
    }

    #[test]
    fn full_window_covers_whole_video() {
        let v = video(120, 24);
        let sparse = sample_indices(120, Fps::integer(24), Fps::integer(4));
        let clip = crop_window(&v, &sparse, FrameSpan::sparse(0, sparse.len() - 1), Fps::integer(8), None).unwrap();
        assert_eq!(clip.source_span, FrameSpan::new(0, 119, SpanBasis::Source));
        assert_eq!(clip.dense_indices.len(), 41);
        assert_eq!(clip.index_map.sparse_to_clip.len(), sparse.len());
    }

    #[test]
    fn hull_of_two_windows() {
        let w = [FrameSpan::sparse(2, 4), FrameSpan::sparse(9, 11)];
        assert_eq!(hull(&w), Some(FrameSpan::sparse(2, 11)));
        assert_eq!(hull(&[]), None);
        let v = video(120, 24);
        let sparse = sample_indices(120, Fps::integer(24), Fps::integer(4));
        let clip = crop_window(&v, &sparse, hull(&w).unwrap(), Fps::integer(8), None).unwrap();
        assert_eq!(clip.source_span, FrameSpan::new(12, 66, SpanBasis::Source));
    }

    #[test]
    fn out_of_range_window() {
        let v = video(30, 24);
        let err = crop_window(&v, &[0, 6, 12], FrameSpan::sparse(1, 3), Fps::integer(8), None).unwrap_err();
        assert_eq!(err, CropError::OutOfRange { start: 1, end: 3, len: 3 });
    }

    #[test]
    fn max_clip_is_centre_clamped() {
        let v = video(240, 24);
        let sparse = sample_indices(240, Fps::integer(24), Fps::integer(4));
        // sparse 2..=10 is source 12..=60 (49 frames); cap at 1 s = 24 frames.
        let clip = crop_window(&v, &sparse, FrameSpan::sparse(2, 10), Fps::integer(8), Some(1.0)).unwrap();
        assert_eq!(clip.source_span.len(), 24);
        assert_eq!(clip.source_span, FrameSpan::new(24, 47, SpanBasis::Source));
    }

    #[test]
    fn nearest_mapping_when_grids_disagree() {
        let map = IndexMap::build(vec![10, 14, 18], &[9, 12, 16, 19]);
        assert_eq!(map.clip_for_sparse(0), None);
        assert_eq!(map.clip_for_sparse(1), Some(0)); // 12 is equidistant from 10 and 14
        assert_eq!(map.clip_for_sparse(2), Some(1));
        assert_eq!(map.clip_for_sparse(3), None);
    }
}
