//! Target-independent implementations behind the bindings.

use std::fmt;

use instantchar::checkpoint::CheckpointArchive;
use instantchar::dataset::{caption, caption_text, render_any, CharacterSpec, Identity, ViewFactors};
use instantchar::dit::interpolate;
use instantchar::image::ImageTensor;
use instantchar::params::Partition;
use instantchar::pipeline::InstantCharacter;
use instantchar::rng::seeded_rng;
use instantchar::tensor::Tensor;

pub const IDENTITY_COUNT: u32 = Identity::COUNT as u32;
pub const VIEW_COUNT: u32 = ViewFactors::COUNT as u32;
const MAX_RESOLUTION: u32 = 256;

#[derive(Debug)]
pub struct DemoError(String);

impl fmt::Display for DemoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<instantchar::Error> for DemoError {
    fn from(e: instantchar::Error) -> Self {
        DemoError(e.to_string())
    }
}

impl From<instantchar::checkpoint::CheckpointError> for DemoError {
    fn from(e: instantchar::checkpoint::CheckpointError) -> Self {
        DemoError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, DemoError>;

pub fn spec(identity: u32, view: u32) -> Result<CharacterSpec> {
    if identity >= IDENTITY_COUNT || view >= VIEW_COUNT {
        return Err(DemoError(format!(
            "identity must be below {IDENTITY_COUNT} and view below {VIEW_COUNT}, got {identity} and {view}"
        )));
    }
    Ok(CharacterSpec { identity: Identity::from_index(identity as usize), view: ViewFactors::from_index(view as usize) })
}

fn check_resolution(resolution: u32) -> Result<usize> {
    if !(8..=MAX_RESOLUTION).contains(&resolution) {
        return Err(DemoError(format!("resolution must be in 8..={MAX_RESOLUTION}, got {resolution}")));
    }
    Ok(resolution as usize)
}

pub fn to_rgba(image: &ImageTensor) -> Vec<u8> {
    image.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

pub fn render_rgba(identity: u32, view: u32, resolution: u32) -> Result<Vec<u8>> {
    let img = render_any(&spec(identity, view)?, check_resolution(resolution)?)?;
    Ok(to_rgba(&img))
}

pub fn caption_for(identity: u32, view: u32) -> Result<String> {
    Ok(caption_text(&caption(&spec(identity, view)?)))
}

/// `(1 - t) * image + t * noise`, clamped for display.
pub fn noised_rgba(identity: u32, view: u32, resolution: u32, t: f32, seed: u64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DemoError(format!("t must be in [0, 1], got {t}")));
    }
    let res = check_resolution(resolution)?;
    let img = render_any(&spec(identity, view)?, res)?;
    let x0 = Tensor::new(vec![res * res * 3], img.data().to_vec());
    let eps = instantchar::dit::gaussian::<f32, _>(&x0.shape, &mut seeded_rng(seed, "demo/noise"));
    let (x_t, _) = interpolate(&x0, &eps, t)?;
    let out = ImageTensor::from_clamped(res, res, x_t.data)?;
    Ok(to_rgba(&out))
}

#[derive(Debug, Default)]
pub struct Demo {
    model: Option<InstantCharacter<f32>>,
}

impl Demo {
    pub fn has_model(&self) -> bool {
        self.model.is_some()
    }

    pub fn load(&mut self, bytes: &[u8]) -> Result<String> {
        let archive = CheckpointArchive::from_bytes(bytes)?;
        let model = InstantCharacter::<f32>::from_archive(&archive)?;
        let summary = format!(
            "{} frozen and {} trainable tensors; sampling at {} px",
            model.store.count_in(Partition::BaseFrozen),
            model.store.count_in(Partition::AdapterTrainable),
            model.config.toy_low_resolution
        );
        self.model = Some(model);
        Ok(summary)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        identity: u32,
        view: u32,
        caption: &str,
        resolution: u32,
        steps: u32,
        scale: f32,
        seed: u64,
    ) -> Result<Vec<u8>> {
        let model = self.model.as_ref().ok_or_else(|| DemoError("load a checkpoint first".into()))?;
        let reference = render_any(&spec(identity, view)?, model.config.encoder_resolution)?;
        let out = model.infer(&reference, caption, check_resolution(resolution)?, steps as usize, scale, seed)?;
        Ok(to_rgba(&out.image))
    }
}
