//! Videos paired with their frozen VQ-VAE reconstructions, ready for the
//! detector.

use crate::corpus::{CorpusError, Label, VideoClip};
use crate::detector::{ClipInput, Detector, ModelError};
use crate::mmfr::{FeatureProvider, MmfrError};
use crate::numerics::Tensor;
use crate::parallel::par_map;
use crate::vqvae::{VqError, VqVae};

#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video: VideoClip,
    pub recon: VideoClip,
}

impl PreparedVideo {
    pub fn id(&self) -> &str {
        &self.video.id
    }

    pub fn label(&self) -> Label {
        self.video.label
    }

    pub fn len(&self) -> usize {
        self.video.n
    }

    pub fn is_empty(&self) -> bool {
        self.video.n == 0
    }

    /// Frames and reconstruction of `start..start+len` as `[len×C×H×W]`.
    pub fn window(&self, start: usize, len: usize) -> Result<(Tensor, Tensor), CorpusError> {
        if len == 0 || start + len > self.video.n {
            return Err(CorpusError::BadParam(format!("window {start}+{len} of {} frames", self.video.n)));
        }
        Ok((self.video.to_nchw(start, len), self.recon.to_nchw(start, len)))
    }

    /// Timestamp in seconds of the window's center frame.
    pub fn center_time(&self, start: usize, len: usize) -> f64 {
        (start + len / 2) as f64 / self.video.fps as f64
    }

    /// Logit of the detector on one window.
    pub fn logit(
        &self,
        model: &Detector,
        provider: &dyn FeatureProvider,
        start: usize,
        len: usize,
    ) -> Result<f32, ModelError> {
        let (x, xhat) = self.window(start, len).map_err(|e| ModelError::Config(e.to_string()))?;
        let rec = self.record(model, provider, start, len)?;
        model.logit(&ClipInput { frames: &x, recon: &xhat, record: rec.as_deref() })
    }

    /// Feature record for a window when the model consumes one.
    pub fn record<'p>(
        &self,
        model: &Detector,
        provider: &'p dyn FeatureProvider,
        start: usize,
        len: usize,
    ) -> Result<Option<std::borrow::Cow<'p, crate::mmfr::MmfrRecord>>, MmfrError> {
        if !model.variant().mmfr {
            return Ok(None);
        }
        let v = &self.video;
        provider.lookup(&v.id, v.label, self.center_time(start, len), v.fps).map(Some)
    }
}

/// Center-crops each video to `crop` and reconstructs it with `vq`.
pub fn prepare(videos: &[VideoClip], vq: &VqVae, crop: usize) -> Result<Vec<PreparedVideo>, VqError> {
    par_map(videos, |v| {
        let video = v.center_crop(crop)?;
        let recon = vq.reconstruct(&video)?;
        Ok(PreparedVideo { video, recon })
    })
    .into_iter()
    .collect()
}
