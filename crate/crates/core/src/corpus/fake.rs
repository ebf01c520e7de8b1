use super::{Label, VideoClip};
use crate::numerics::SplitMix64;
use crate::parallel::par_map;
use crate::vqvae::{VqError, VqVae};

/// Reconstruction MSE above which a VQ-VAE is treated as untrained.
pub const DEFAULT_MSE_BOUND: f64 = 0.01;

/// Fake id for a real clip id: `real_0007` becomes `fake_0007`.
pub fn fake_id(real_id: &str) -> String {
    match real_id.strip_prefix("real_") {
        Some(rest) => format!("fake_{rest}"),
        None => format!("fake_{real_id}"),
    }
}

/// One fake per real clip: the VQ-VAE reconstruction with latent jitter
/// drawn from a per-clip stream of `seed`. Fails when the model's mean
/// reconstruction MSE over the first clip exceeds `mse_bound`.
pub fn gen_fake(reals: &[VideoClip], vq: &VqVae, jitter: f64, seed: u64, mse_bound: f64) -> Result<Vec<VideoClip>, VqError> {
    if let Some(first) = reals.first() {
        let mse = vq.reconstruction_mse(first)?;
        if !(mse <= mse_bound) {
            return Err(VqError::UntrainedModel { mse, bound: mse_bound });
        }
    }
    let indexed: Vec<(usize, &VideoClip)> = reals.iter().enumerate().collect();
    par_map(&indexed, |&(i, clip)| {
        let mut rng = SplitMix64::derived(seed, i as u64);
        let mut fake = vq.reconstruct_jittered(clip, jitter, &mut rng)?;
        fake.id = fake_id(&clip.id);
        fake.label = Label::Fake;
        Ok(fake)
    })
    .into_iter()
    .collect()
}
