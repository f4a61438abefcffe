//! Spatial/motion feature fusion.
//!
//! Spatial activations are pooled per frame into the concatenation of their
//! spatial mean and spatial population std, subsampled to every second
//! frame, and concatenated channel-wise with the motion stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPATIAL_CHANNELS: usize = 4096;
pub const MOTION_CHANNELS: usize = 512;
pub const FUSED_CHANNELS: usize = SPATIAL_CHANNELS + MOTION_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Spatial,
    Motion,
    Fused,
}

impl Stream {
    pub fn channels(self) -> usize {
        match self {
            Stream::Spatial => SPATIAL_CHANNELS,
            Stream::Motion => MOTION_CHANNELS,
            Stream::Fused => FUSED_CHANNELS,
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Stream::Spatial),
            "motion" => Ok(Stream::Motion),
            "fused" => Ok(Stream::Fused),
            other => Err(Error::Config(format!("unknown stream `{other}`"))),
        }
    }
}

/// Frame-level features of one video, `[T, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub data: Tensor,
    pub stream: Stream,
    /// Temporal stride relative to the source frame rate.
    pub stride: usize,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, data: Tensor, stream: Stream, stride: usize) -> Result<Self> {
        let (frames, channels) = data.dims2()?;
        if frames == 0 {
            return Err(Error::Empty("feature_sequence"));
        }
        if channels != stream.channels() {
            return Err(Error::InvalidShape {
                op: "feature_sequence",
                detail: format!(
                    "{stream:?} stream needs {} channels, found {channels}",
                    stream.channels()
                ),
            });
        }
        Ok(Self {
            video_id: video_id.into(),
            data,
            stream,
            stride,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Per-frame spatial mean ⊕ spatial population std of a `[T, H, W, C]`
/// activation, giving `[T, 2C]`.
pub fn gap_gsp_pool(activation: &Tensor) -> Result<Tensor> {
    let [frames, height, width, channels] = activation.shape() else {
        return Err(Error::InvalidShape {
            op: "gap_gsp_pool",
            detail: format!("expected [T, H, W, C], shape is {:?}", activation.shape()),
        });
    };
    let (frames, channels) = (*frames, *channels);
    let area = height * width;
    if area == 0 {
        return Err(Error::Empty("gap_gsp_pool"));
    }
    let data = activation.data();
    let mut out = Vec::with_capacity(frames * 2 * channels);
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for t in 0..frames {
        let frame = &data[t * area * channels..(t + 1) * area * channels];
        mean.iter_mut().for_each(|m| *m = 0.0);
        var.iter_mut().for_each(|v| *v = 0.0);
        for pixel in frame.chunks_exact(channels) {
            for (m, &x) in mean.iter_mut().zip(pixel) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= area as f64);
        for pixel in frame.chunks_exact(channels) {
            for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(pixel) {
                *v += (x - m) * (x - m);
            }
        }
        out.extend_from_slice(&mean);
        out.extend(var.iter().map(|v| (v / area as f64).sqrt()));
    }
    Tensor::matrix(frames, 2 * channels, out)
}

/// Keeps frames `0, factor, 2·factor, …` of a `[T, C]` sequence.
pub fn temporal_subsample(seq: &Tensor, factor: usize) -> Result<Tensor> {
    let (frames, channels) = seq.dims2()?;
    if factor == 0 {
        return Err(Error::Config("subsampling factor must be positive".into()));
    }
    if frames == 0 {
        return Err(Error::Empty("temporal_subsample"));
    }
    let mut out = Vec::with_capacity(frames.div_ceil(factor) * channels);
    for t in (0..frames).step_by(factor) {
        out.extend_from_slice(seq.row(t)?);
    }
    Tensor::matrix(frames.div_ceil(factor), channels, out)
}

/// Channel concatenation `[T, Cs] ⊕ [T, Cm] → [T, Cs + Cm]`, spatial first.
pub fn fuse(spatial: &Tensor, motion: &Tensor) -> Result<Tensor> {
    let (ts, cs) = spatial.dims2()?;
    let (tm, cm) = motion.dims2()?;
    if ts != tm {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: spatial.shape().to_vec(),
            rhs: motion.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(ts * (cs + cm));
    for t in 0..ts {
        out.extend_from_slice(spatial.row(t)?);
        out.extend_from_slice(motion.row(t)?);
    }
    Tensor::matrix(ts, cs + cm, out)
}

/// Subsamples a full-rate spatial stream by two and fuses it with a
/// half-rate motion stream.
pub fn fuse_streams(spatial: &FeatureSequence, motion: &FeatureSequence) -> Result<FeatureSequence> {
    if spatial.stream != Stream::Spatial || motion.stream != Stream::Motion {
        return Err(Error::Config(format!(
            "fuse expects spatial and motion streams, got {:?} and {:?}",
            spatial.stream, motion.stream
        )));
    }
    let sub = temporal_subsample(&spatial.data, 2)?;
    let fused = fuse(&sub, &motion.data)?;
    FeatureSequence::new(
        spatial.video_id.clone(),
        fused,
        Stream::Fused,
        spatial.stride * 2,
    )
}

/// Mean over frames of a `[T, C]` sequence.
pub fn temporal_mean(seq: &Tensor) -> Result<Vec<f64>> {
    let (frames, channels) = seq.dims2()?;
    if frames == 0 {
        return Err(Error::Empty("temporal_mean"));
    }
    let mut out = vec![0.0; channels];
    for row in seq.data().chunks_exact(channels) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= frames as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_value_and_zero() {
        let act = Tensor::full(&[2, 3, 3, 4], 1.75);
        let pooled = gap_gsp_pool(&act).unwrap();
        assert_eq!(pooled.shape(), &[2, 8]);
        for row in pooled.data().chunks(8) {
            assert_eq!(&row[..4], &[1.75; 4]);
            assert_eq!(&row[4..], &[0.0; 4]);
        }
    }

    #[test]
    fn single_pixel_pools_to_value() {
        let act = Tensor::new(vec![1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let pooled = gap_gsp_pool(&act).unwrap();
        assert_eq!(pooled.data(), &[0.5, -1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn resnet_sized_activation_gives_4096_channels() {
        let act = Tensor::zeros(&[1, 7, 7, 2048]);
        assert_eq!(gap_gsp_pool(&act).unwrap().shape(), &[1, SPATIAL_CHANNELS]);
    }

    #[test]
    fn pooling_two_pixel_std() {
        let act = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(gap_gsp_pool(&act).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn empty_spatial_extent_fails() {
        assert!(gap_gsp_pool(&Tensor::zeros(&[2, 0, 3, 4])).is_err());
        assert!(gap_gsp_pool(&Tensor::zeros(&[2, 3, 4])).is_err());
    }

    #[test]
    fn subsample_keeps_even_frames() {
        let seq = |t: usize| Tensor::matrix(t, 1, (0..t).map(|v| v as f64).collect()).unwrap();
        assert_eq!(temporal_subsample(&seq(4), 2).unwrap().data(), &[0.0, 2.0]);
        assert_eq!(temporal_subsample(&seq(1), 2).unwrap().data(), &[0.0]);
        assert_eq!(temporal_subsample(&seq(5), 2).unwrap().data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn fuse_shapes_and_errors() {
        let s = Tensor::full(&[10, SPATIAL_CHANNELS], 0.25);
        let m = Tensor::zeros(&[10, MOTION_CHANNELS]);
        let f = fuse(&s, &m).unwrap();
        assert_eq!(f.shape(), &[10, FUSED_CHANNELS]);
        for row in f.data().chunks(FUSED_CHANNELS) {
            assert!(row[..SPATIAL_CHANNELS].iter().all(|&v| v == 0.25));
        }
        let short = Tensor::zeros(&[9, MOTION_CHANNELS]);
        assert!(fuse(&s, &short).is_err());
    }

    #[test]
    fn fuse_streams_checks_tags_and_lengths() {
        let spatial = FeatureSequence::new("v", Tensor::zeros(&[6, SPATIAL_CHANNELS]), Stream::Spatial, 1).unwrap();
        let motion = FeatureSequence::new("v", Tensor::zeros(&[3, MOTION_CHANNELS]), Stream::Motion, 2).unwrap();
        let fused = fuse_streams(&spatial, &motion).unwrap();
        assert_eq!(fused.data.shape(), &[3, FUSED_CHANNELS]);
        assert_eq!(fused.stride, 2);
        assert!(fuse_streams(&motion, &spatial).is_err());
        assert!(FeatureSequence::new("v", Tensor::zeros(&[3, 10]), Stream::Motion, 1).is_err());
    }
}
