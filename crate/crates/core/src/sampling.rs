//! Frame-rate handling and the uniform frame-sampling rule.
//!
//! Sampling at `target` fps picks source indices `round(k * source / target)`
//! for `k = 0..=floor(duration * target)`, clamps them to the last frame and
//! drops repeats. A 5 s, 24 fps video sampled at 4 fps gives 21 indices.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::VideoDescriptor;

/// A strictly positive rational frame rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fps(Ratio<i64>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid frame rate {0:?}")]
pub struct FpsError(pub String);

impl Fps {
    pub fn new(numer: i64, denom: i64) -> Result<Self, FpsError> {
        if numer <= 0 || denom <= 0 {
            return Err(FpsError(format!("{numer}/{denom}")));
        }
        Ok(Fps(Ratio::new(numer, denom)))
    }

    pub fn integer(n: u32) -> Self {
        Fps::new(n as i64, 1).expect("zero fps")
    }

    pub fn from_f64(value: f64) -> Result<Self, FpsError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(FpsError(value.to_string()));
        }
        let r = Ratio::<i64>::approximate_float(value).ok_or_else(|| FpsError(value.to_string()))?;
        Fps::new(*r.numer(), *r.denom())
    }

    pub fn ratio(&self) -> Ratio<i64> {
        self.0
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Fps {
    type Err = FpsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse::<i64>().map_err(|_| FpsError(s.to_string()))?;
            let d = d.trim().parse::<i64>().map_err(|_| FpsError(s.to_string()))?;
            return Fps::new(n, d);
        }
        let v = s.parse::<f64>().map_err(|_| FpsError(s.to_string()))?;
        Fps::from_f64(v)
    }
}

/// Integral rates serialize as JSON integers, others as `"num/den"` strings.
impl Serialize for Fps {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if *self.0.denom() == 1 {
            serializer.serialize_i64(*self.0.numer())
        } else {
            serializer.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Fps {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Float(f64),
            Text(String),
        }
        let fps = match Raw::deserialize(deserializer)? {
            Raw::Int(n) => Fps::new(n, 1),
            Raw::Float(v) => Fps::from_f64(v),
            Raw::Text(t) => t.parse(),
        };
        fps.map_err(serde::de::Error::custom)
    }
}

/// Source indices sampled from a video of `frame_count` frames at `target` fps.
pub fn sample_indices(frame_count: usize, source: Fps, target: Fps) -> Vec<usize> {
    if frame_count == 0 {
        return Vec::new();
    }
    let step = source.ratio() / target.ratio();
    // duration * target = frame_count / source * target
    let last_k = (Ratio::from_integer(frame_count as i64) / step).floor().to_integer();
    let max_index = frame_count - 1;
    let mut out: Vec<usize> = Vec::with_capacity(last_k as usize + 1);
    for k in 0..=last_k {
        let idx = (Ratio::from_integer(k) * step).round().to_integer();
        let idx = (idx.max(0) as usize).min(max_index);
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    out
}

/// [`sample_indices`] for a video descriptor.
pub fn sample_frames(video: &VideoDescriptor, target: Fps) -> Vec<usize> {
    sample_indices(video.frame_count, video.source_fps, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_second_video_gives_21_sparse_frames() {
        let idx = sample_indices(120, Fps::integer(24), Fps::integer(4));
        assert_eq!(idx.len(), 21);
        let expected: Vec<usize> = (0..20).map(|k| 6 * k).chain([119]).collect();
        assert_eq!(idx, expected);
    }

    #[test]
    fn identity_sampling() {
        let idx = sample_indices(37, Fps::integer(30), Fps::integer(30));
        assert_eq!(idx, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn single_frame_video() {
        assert_eq!(sample_indices(1, Fps::integer(24), Fps::integer(4)), vec![0]);
        assert_eq!(sample_indices(1, Fps::integer(1), Fps::integer(8)), vec![0]);
    }

    #[test]
    fn ntsc_rate_rounds_half_away_from_zero() {
        let fps: Fps = "30000/1001".parse().unwrap();
        let idx = sample_indices(300, fps, Fps::integer(4));
        // step = 30000/4004 ~ 7.4925
        assert_eq!(&idx[..4], &[0, 7, 15, 22]);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*idx.last().unwrap(), 299);
    }

    #[test]
    fn fps_parsing_and_serde() {
        assert_eq!("24".parse::<Fps>().unwrap(), Fps::integer(24));
        assert_eq!("12.5".parse::<Fps>().unwrap(), Fps::new(25, 2).unwrap());
        assert!("0".parse::<Fps>().is_err());
        assert!("-3/1".parse::<Fps>().is_err());
        let json = serde_json::to_string(&Fps::new(25, 2).unwrap()).unwrap();
        assert_eq!(json, "\"25/2\"");
        assert_eq!(serde_json::to_string(&Fps::integer(30)).unwrap(), "30");
        let back: Fps = serde_json::from_str("12.5").unwrap();
        assert_eq!(back, Fps::new(25, 2).unwrap());
    }

    #[test]
    fn dense_grid_contains_sparse_grid_when_rate_doubles() {
        for src in [24u32, 25, 30, 60] {
            for n in [1usize, 7, 119, 150, 301] {
                let sparse = sample_indices(n, Fps::integer(src), Fps::integer(4));
                let dense = sample_indices(n, Fps::integer(src), Fps::integer(8));
                assert!(sparse.iter().all(|i| dense.contains(i)), "src={src} n={n}");
            }
        }
    }
}
