//! Frozen ViT feature extractors and the channel-wise fusion of their taps.
//!
//! Two small encoders stand in for large pretrained vision backbones: a
//! *semantic* encoder briefly trained to classify identity factors, and a
//! *structural* encoder left at its seeded random initialization. Each returns
//! a deep tap (final block) and a shallow tap (block `shallow_layer`), both
//! passed through the encoder's final layer norm.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{patchify, ImageTensor};
use crate::nn::{grid_position_code, EncoderBlock, LayerNorm, Linear, INIT_STD};
use crate::params::{Init, ParamId, ParamStore, Partition};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Deep,
    Shallow,
    Region,
    FusedChannel,
    FusedToken,
    Context,
}

/// A `T x D` feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F = f32> {
    pub tokens: Tensor<F>,
    pub tag: StreamTag,
}

impl<F: Float> TokenSequence<F> {
    pub fn new(tokens: Tensor<F>, tag: StreamTag) -> Result<Self> {
        if tokens.shape.len() != 2 || tokens.shape[0] == 0 || tokens.shape[1] == 0 {
            return Err(Error::Shape(format!("token sequence must be a non-empty T x D matrix, got {:?}", tokens.shape)));
        }
        if !tokens.is_finite() {
            return Err(Error::Numerical(format!("{tag:?} token sequence contains non-finite values")));
        }
        Ok(TokenSequence { tokens, tag })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Mean over tokens, one value per channel.
    pub fn mean_pool(&self) -> Vec<F> {
        let (t, d) = (self.len(), self.width());
        let mut out = vec![F::zero(); d];
        for r in 0..t {
            for (o, v) in out.iter_mut().zip(self.tokens.row(r)) {
                *o += *v;
            }
        }
        let inv = F::one() / F::lit(t as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTaps<F = f32> {
    pub deep: TokenSequence<F>,
    pub shallow: TokenSequence<F>,
    pub grid: usize,
}

/// Concatenates two equal-length streams along channels, semantic first.
pub fn fuse_channelwise<F: Float>(semantic: &TokenSequence<F>, structural: &TokenSequence<F>) -> Result<TokenSequence<F>> {
    if semantic.len() != structural.len() {
        return Err(Error::Shape(format!(
            "channel fusion needs equal token counts, got {} and {}",
            semantic.len(),
            structural.len()
        )));
    }
    Ok(TokenSequence { tokens: concat_cols(&semantic.tokens, &structural.tokens), tag: StreamTag::FusedChannel })
}

fn concat_cols<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::matrix(a.rows(), ca + cb, data)
}

/// A small pre-norm vision transformer over non-overlapping pixel patches
/// with a fixed sine/cosine position code.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub name: String,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub shallow_layer: usize,
    pub patch_embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

impl ToyEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        patch: usize,
        width: usize,
        depth: usize,
        heads: usize,
        shallow_layer: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth < 2 || shallow_layer < 1 || shallow_layer >= depth {
            return Err(Error::Config(format!(
                "encoder {name}: shallow layer {shallow_layer} must satisfy 1 <= l < depth ({depth})"
            )));
        }
        if !width.is_multiple_of(heads) || !width.is_multiple_of(4) {
            return Err(Error::Config(format!("encoder {name}: width {width} must be divisible by heads and 4")));
        }
        let p = Partition::BaseFrozen;
        let prefix = format!("encoder/{name}");
        let patch_embed = Linear::new(
            store,
            &format!("{prefix}/patch_embed"),
            patch * patch * 3,
            width,
            true,
            Init::TruncNormal(INIT_STD),
            p,
            rng,
        );
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("{prefix}/blocks/{i}"), width, heads, p, rng))
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{prefix}/final_norm"), width, p, rng);
        Ok(ToyEncoder { name: name.to_string(), patch, width, heads, shallow_layer, patch_embed, blocks, final_norm })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.patch_embed.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.final_norm.params());
        p
    }

    pub fn tokens_for(&self, resolution: usize) -> usize {
        (resolution / self.patch).pow(2)
    }

    fn check_resolution(&self, resolution: usize) -> Result<()> {
        if resolution == 0 || !resolution.is_multiple_of(self.patch) {
            return Err(Error::InvalidInput(format!(
                "encoder resolution {resolution} is not a positive multiple of patch size {}",
                self.patch
            )));
        }
        Ok(())
    }

    /// Patch tokens for a batch of images resized to `resolution`.
    pub fn patch_tokens<F: Float>(&self, images: &[ImageTensor], resolution: usize) -> Tensor<F> {
        let t = self.tokens_for(resolution);
        let cols = self.patch * self.patch * 3;
        let mut data = Vec::with_capacity(images.len() * t * cols);
        for img in images {
            let resized = if img.height() == resolution && img.width() == resolution {
                img.clone()
            } else {
                img.resize(resolution, resolution)
            };
            let px: Vec<F> = resized.data().iter().map(|v| F::lit(*v as f64)).collect();
            data.extend(patchify(&px, resolution, resolution, self.patch).data);
        }
        Tensor::matrix(images.len() * t, cols, data)
    }

    /// Graph-level forward over `[batch * tokens, patch*patch*3]` pixel
    /// patches. Returns `(deep, shallow)` taps after the final layer norm.
    pub fn forward_graph<F: Float>(&self, g: &mut Graph<F>, patches: Var, batch: usize, grid: usize) -> (Var, Var) {
        let tokens = grid * grid;
        let x = self.patch_embed.forward(g, patches);
        let pos = g.input(grid_position_code(grid, self.width));
        let mut h = g.add_positional(x, pos, tokens);
        let mut shallow = h;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, batch);
            if i + 1 == self.shallow_layer {
                shallow = h;
            }
        }
        let deep = self.final_norm.forward(g, h);
        let shallow = self.final_norm.forward(g, shallow);
        (deep, shallow)
    }

    /// Encodes a batch of images, returning stacked `[batch * T, width]` taps.
    pub fn encode_batch<F: Float>(
        &self,
        store: &ParamStore<F>,
        images: &[ImageTensor],
        resolution: usize,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_resolution(resolution)?;
        if images.is_empty() {
            return Err(Error::InvalidInput("no images to encode".into()));
        }
        let grid = resolution / self.patch;
        let mut g = Graph::new(store);
        let patches = g.input(self.patch_tokens(images, resolution));
        let (deep, shallow) = self.forward_graph(&mut g, patches, images.len(), grid);
        Ok((g.value(deep).clone(), g.value(shallow).clone()))
    }

    /// Resizes the image (corner-aligned bilinear) and encodes it.
    pub fn encode_full<F: Float>(&self, store: &ParamStore<F>, image: &ImageTensor, resolution: usize) -> Result<EncoderTaps<F>> {
        let (deep, shallow) = self.encode_batch(store, std::slice::from_ref(image), resolution)?;
        Ok(EncoderTaps {
            deep: TokenSequence::new(deep, StreamTag::Deep)?,
            shallow: TokenSequence::new(shallow, StreamTag::Shallow)?,
            grid: resolution / self.patch,
        })
    }

    /// Splits the image into a `k x k` grid, encodes every region at
    /// `resolution`, and concatenates the deep taps in row-major region order.
    pub fn encode_regions<F: Float>(
        &self,
        store: &ParamStore<F>,
        image: &ImageTensor,
        k: usize,
        resolution: usize,
    ) -> Result<TokenSequence<F>> {
        let regions = image.regions(k)?;
        let (deep, _) = self.encode_batch(store, &regions, resolution)?;
        TokenSequence::new(deep, StreamTag::Region)
    }
}

/// The two frozen encoders side by side.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub semantic: ToyEncoder,
    pub structural: ToyEncoder,
    pub resolution: usize,
    pub region_grid: usize,
}

/// Channel-fused features of one or more reference images, stacked along
/// rows: `shallow` and `deep` hold `batch * T` rows, `region` holds
/// `batch * k^2 * T` rows; every stream is `D_sem + D_str` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFeatures<F = f32> {
    pub batch: usize,
    pub shallow: Tensor<F>,
    pub deep: Tensor<F>,
    pub region: Tensor<F>,
}

impl<F: Float> ReferenceFeatures<F> {
    pub fn stack(items: &[&ReferenceFeatures<F>]) -> ReferenceFeatures<F> {
        let cat = |f: &dyn Fn(&ReferenceFeatures<F>) -> &Tensor<F>| {
            let cols = f(items[0]).cols();
            let data: Vec<F> = items.iter().flat_map(|i| f(i).data.iter().copied()).collect();
            Tensor::matrix(data.len() / cols, cols, data)
        };
        ReferenceFeatures {
            batch: items.iter().map(|i| i.batch).sum(),
            shallow: cat(&|i| &i.shallow),
            deep: cat(&|i| &i.deep),
            region: cat(&|i| &i.region),
        }
    }

    /// The features of sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> ReferenceFeatures<F> {
        let pick = |t: &Tensor<F>| t.batch_rows(self.batch, i, 1);
        ReferenceFeatures { batch: 1, shallow: pick(&self.shallow), deep: pick(&self.deep), region: pick(&self.region) }
    }

    pub fn cast<G: Float>(&self) -> ReferenceFeatures<G> {
        ReferenceFeatures { batch: self.batch, shallow: self.shallow.cast(), deep: self.deep.cast(), region: self.region.cast() }
    }
}

impl EncoderPair {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let e = &cfg.encoder;
        let semantic =
            ToyEncoder::new(store, "semantic", e.patch, e.semantic_width, e.depth, e.heads, e.shallow_layer(), rng)?;
        let structural =
            ToyEncoder::new(store, "structural", e.patch, e.structural_width, e.depth, e.heads, e.shallow_layer(), rng)?;
        if e.region_grid == 0 {
            return Err(Error::Config("region grid must be at least 1".into()));
        }
        Ok(EncoderPair { semantic, structural, resolution: cfg.encoder_resolution, region_grid: e.region_grid })
    }

    pub fn fused_width(&self) -> usize {
        self.semantic.width + self.structural.width
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.semantic.params();
        p.extend(self.structural.params());
        p
    }

    /// Full-image and region features for a batch of reference images, fused
    /// channel-wise per level.
    pub fn reference_features<F: Float>(&self, store: &ParamStore<F>, images: &[ImageTensor]) -> Result<ReferenceFeatures<F>> {
        let (sem_deep, sem_shallow) = self.semantic.encode_batch(store, images, self.resolution)?;
        let (str_deep, str_shallow) = self.structural.encode_batch(store, images, self.resolution)?;
        let mut regions = Vec::with_capacity(images.len() * self.region_grid.pow(2));
        for img in images {
            regions.extend(img.regions(self.region_grid)?);
        }
        let (sem_region, _) = self.semantic.encode_batch(store, &regions, self.resolution)?;
        let (str_region, _) = self.structural.encode_batch(store, &regions, self.resolution)?;
        let out = ReferenceFeatures {
            batch: images.len(),
            shallow: concat_cols(&sem_shallow, &str_shallow),
            deep: concat_cols(&sem_deep, &str_deep),
            region: concat_cols(&sem_region, &str_region),
        };
        if !(out.shallow.is_finite() && out.deep.is_finite() && out.region.is_finite()) {
            return Err(Error::Numerical("encoder produced non-finite features".into()));
        }
        Ok(out)
    }

    /// Mean-pooled deep semantic features, the embedding used for identity metrics.
    pub fn identity_embedding<F: Float>(&self, store: &ParamStore<F>, images: &[ImageTensor]) -> Result<Vec<Vec<F>>> {
        let (deep, _) = self.semantic.encode_batch(store, images, self.resolution)?;
        let t = self.semantic.tokens_for(self.resolution);
        Ok((0..images.len())
            .map(|i| {
                let seq = TokenSequence { tokens: deep.batch_rows(images.len(), i, 1), tag: StreamTag::Deep };
                debug_assert_eq!(seq.len(), t);
                seq.mean_pool()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn encoder(store: &mut ParamStore<f32>) -> ToyEncoder {
        ToyEncoder::new(store, "semantic", 8, 48, 4, 4, 2, &mut seeded_rng(0, "enc")).unwrap()
    }

    fn noise_image(seed: u64, side: usize) -> ImageTensor {
        let mut rng = seeded_rng(seed, "img");
        ImageTensor::new(side, side, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn encode_full_shapes_and_purity() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let img = noise_image(1, 64);
        let taps = enc.encode_full(&store, &img, 32).unwrap();
        assert_eq!(taps.deep.tokens.shape, vec![16, 48]);
        assert_eq!(taps.shallow.tokens.shape, vec![16, 48]);
        assert_eq!(taps.grid, 4);
        assert_eq!(enc.encode_full(&store, &img, 32).unwrap(), taps);
        assert!(!taps.deep.tokens.bit_eq(&taps.shallow.tokens));
    }

    #[test]
    fn resolution_must_be_a_patch_multiple() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        assert!(enc.encode_full(&store, &noise_image(1, 32), 36).is_err());
    }

    #[test]
    fn shallow_layer_bounds() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(0, "enc");
        assert!(ToyEncoder::new(&mut store, "a", 8, 48, 4, 4, 0, &mut rng).is_err());
        assert!(ToyEncoder::new(&mut store, "b", 8, 48, 4, 4, 4, &mut rng).is_err());
    }

    #[test]
    fn region_grid_shapes_and_identities() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let img = noise_image(2, 64);
        let r2 = enc.encode_regions(&store, &img, 2, 32).unwrap();
        assert_eq!(r2.tokens.shape, vec![64, 48]);
        let r1 = enc.encode_regions(&store, &img, 1, 32).unwrap();
        assert!(r1.tokens.bit_eq(&enc.encode_full(&store, &img, 32).unwrap().deep.tokens));
        assert!(enc.encode_regions(&store, &noise_image(2, 30), 4, 32).is_err());
    }

    #[test]
    fn identical_quadrants_give_identical_region_blocks() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let tile = noise_image(3, 16);
        let row = ImageTensor::hstack(&[tile.clone(), tile.clone()]).unwrap();
        let img = ImageTensor::vstack(&[row.clone(), row]).unwrap();
        let seq = enc.encode_regions(&store, &img, 2, 32).unwrap();
        let first = seq.tokens.batch_rows(4, 0, 1);
        for b in 1..4 {
            assert!(seq.tokens.batch_rows(4, b, 1).bit_eq(&first), "block {b}");
        }
    }

    #[test]
    fn channel_fusion_semantics() {
        let sem = TokenSequence::new(Tensor::full(&[16, 48], 1.0f32), StreamTag::Deep).unwrap();
        let st = TokenSequence::new(Tensor::full(&[16, 32], 2.0f32), StreamTag::Deep).unwrap();
        let f = fuse_channelwise(&sem, &st).unwrap();
        assert_eq!(f.tokens.shape, vec![16, 80]);
        assert!(f.tokens.row(5)[..48].iter().all(|v| *v == 1.0));
        assert!(f.tokens.row(5)[48..].iter().all(|v| *v == 2.0));
        let short = TokenSequence::new(Tensor::full(&[8, 32], 2.0f32), StreamTag::Deep).unwrap();
        assert!(fuse_channelwise(&sem, &short).is_err());
    }

    #[test]
    fn token_sequence_rejects_empty_and_non_finite() {
        assert!(TokenSequence::new(Tensor::<f32>::zeros(&[0, 4]), StreamTag::Deep).is_err());
        assert!(TokenSequence::new(Tensor::full(&[2, 2], f32::NAN), StreamTag::Deep).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn fuse_then_slice_recovers_inputs(t in 1usize..6, a in 1usize..5, b in 1usize..5, seed in 0u64..1000) {
                let mut rng = seeded_rng(seed, "fuse");
                let sem = Tensor::matrix(t, a, (0..t * a).map(|_| rng.random::<f32>()).collect());
                let st = Tensor::matrix(t, b, (0..t * b).map(|_| rng.random::<f32>()).collect());
                let f = fuse_channelwise(
                    &TokenSequence::new(sem.clone(), StreamTag::Deep).unwrap(),
                    &TokenSequence::new(st.clone(), StreamTag::Deep).unwrap(),
                ).unwrap();
                prop_assert!(f.tokens.slice_cols(0, a).bit_eq(&sem));
                prop_assert!(f.tokens.slice_cols(a, b).bit_eq(&st));
            }
        }
    }
}
