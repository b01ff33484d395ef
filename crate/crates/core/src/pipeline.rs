//! The assembled model: both frozen encoders, the adapter and the backbone
//! share one parameter store, so a single checkpoint holds everything.

use rand::Rng;

use crate::adapter::Adapter;
use crate::checkpoint::CheckpointArchive;
use crate::config::RunConfig;
use crate::dataset::tokenize;
use crate::dit::ToyDit;
use crate::encoders::{EncoderPair, ReferenceFeatures};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{ParamId, ParamStore, Partition};
use crate::rng::seeded_rng;
use crate::tensor::Float;

pub const CONFIG_ATTRIBUTE: &str = "config";

#[derive(Debug, Clone)]
pub struct InstantCharacter<F: Float = f32> {
    pub config: RunConfig,
    pub store: ParamStore<F>,
    pub encoders: EncoderPair,
    pub adapter: Adapter,
    pub dit: ToyDit,
}

impl<F: Float> InstantCharacter<F> {
    /// Seeded initialization of every component.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoders = EncoderPair::new(&mut store, config, &mut seeded_rng(config.seed, "init/encoders"))?;
        let adapter = Adapter::new(&mut store, config, encoders.fused_width(), &mut seeded_rng(config.seed, "init/adapter"))?;
        let dit = ToyDit::new(&mut store, config, &mut seeded_rng(config.seed, "init/dit"))?;
        Ok(InstantCharacter { config: config.clone(), store, encoders, adapter, dit })
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids_in(Partition::AdapterTrainable)
    }

    /// The same model in another precision.
    pub fn cast<G: Float>(&self) -> InstantCharacter<G> {
        InstantCharacter {
            config: self.config.clone(),
            store: self.store.cast(),
            encoders: self.encoders.clone(),
            adapter: self.adapter.clone(),
            dit: self.dit.clone(),
        }
    }

    pub fn to_archive(&self) -> CheckpointArchive {
        let mut a = CheckpointArchive::from_store(&self.store);
        a.attributes.insert(CONFIG_ATTRIBUTE.into(), self.config.to_toml_string());
        a
    }

    /// Rebuilds the model described by the archive's config attribute and
    /// loads every parameter from it.
    pub fn from_archive(archive: &CheckpointArchive) -> Result<Self> {
        let text = archive
            .attributes
            .get(CONFIG_ATTRIBUTE)
            .ok_or_else(|| Error::Config("checkpoint has no embedded run config".into()))?;
        let config = RunConfig::from_toml_str(text)?;
        let mut model = Self::new(&config)?;
        archive.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn reference_features(&self, images: &[ImageTensor]) -> Result<ReferenceFeatures<F>> {
        self.encoders.reference_features(&self.store, images)
    }

    /// Samples one image per caption. With `reference` present, the adapter
    /// context is recomputed at every integration step; `scale == 0` or no
    /// reference gives text-only generation.
    #[allow(clippy::too_many_arguments)]
    pub fn generate<R: Rng + ?Sized>(
        &self,
        reference: Option<&ReferenceFeatures<F>>,
        captions: &[Vec<u32>],
        resolution: usize,
        steps: usize,
        scale: F,
        rng: &mut R,
    ) -> Result<Vec<ImageTensor>> {
        if let Some(r) = reference {
            if r.batch != captions.len() {
                return Err(Error::Shape(format!("{} references for {} captions", r.batch, captions.len())));
            }
        }
        self.dit.sample(&self.store, captions, resolution, steps, scale, rng, |t| match reference {
            Some(feats) => self.adapter.context(&self.store, feats, &vec![t; feats.batch]).map(Some),
            None => Ok(None),
        })
    }
}

/// A single reference-conditioned generation and its similarity to the
/// reference.
#[derive(Debug, Clone)]
pub struct Inference {
    pub image: ImageTensor,
    pub caption: Vec<u32>,
    pub identity_similarity: f64,
}

impl InstantCharacter<f32> {
    /// Encodes `reference`, tokenizes `caption`, and samples one image with
    /// the noise stream `infer` of `seed`.
    pub fn infer(
        &self,
        reference: &ImageTensor,
        caption: &str,
        resolution: usize,
        steps: usize,
        scale: f32,
        seed: u64,
    ) -> Result<Inference> {
        let tokens = tokenize(caption)?;
        let feats = self.reference_features(std::slice::from_ref(reference))?;
        let mut rng = seeded_rng(seed, "infer");
        let image = self
            .generate(Some(&feats), std::slice::from_ref(&tokens), resolution, steps, scale, &mut rng)?
            .remove(0);
        let identity_similarity = crate::eval::identity_similarity(self, &image, reference)?;
        Ok(Inference { image, caption: tokens, identity_similarity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip_rebuilds_the_model() {
        let cfg = RunConfig::default();
        let model = InstantCharacter::<f32>::new(&cfg).unwrap();
        let bytes = model.to_archive().to_bytes().unwrap();
        let back = InstantCharacter::<f32>::from_archive(&CheckpointArchive::from_bytes(&bytes).unwrap()).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.bit_eq(&b.tensor));
        }
    }

    #[test]
    fn inference_is_repeatable_and_scale_zero_matches_text_only() {
        let mut cfg = RunConfig::default();
        cfg.dit.width = 32;
        cfg.dit.depth = 1;
        cfg.dit.heads = 2;
        let model = InstantCharacter::<f32>::new(&cfg).unwrap();
        let reference = ImageTensor::filled(64, 64, [0.2, 0.4, 0.6]);
        let caption = "a small striped star character rising red background flat style";
        let a = model.infer(&reference, caption, 32, 3, 1.0, 9).unwrap();
        let b = model.infer(&reference, caption, 32, 3, 1.0, 9).unwrap();
        assert_eq!(a.image, b.image);
        let zero = model.infer(&reference, caption, 32, 3, 0.0, 9).unwrap();
        let text_only = model
            .generate(None, std::slice::from_ref(&a.caption), 32, 3, 0.0, &mut seeded_rng(9, "infer"))
            .unwrap()
            .remove(0);
        assert_eq!(zero.image, text_only);
        assert!(model.infer(&reference, "a purple unicorn", 32, 3, 1.0, 9).is_err());
    }

    #[test]
    fn both_partitions_are_populated_and_prefixed() {
        let model = InstantCharacter::<f32>::new(&RunConfig::default()).unwrap();
        assert!(model.store.count_in(Partition::BaseFrozen) > 0);
        assert!(model.store.count_in(Partition::AdapterTrainable) > 0);
        for (_, p) in model.store.iter() {
            let expected = if p.name.starts_with("adapter/") || p.name.starts_with("dit/adapter_xattn/") {
                Partition::AdapterTrainable
            } else {
                assert!(p.name.starts_with("encoder/") || p.name.starts_with("dit/base/"), "{}", p.name);
                Partition::BaseFrozen
            };
            assert_eq!(p.partition, expected, "{}", p.name);
        }
    }
}
