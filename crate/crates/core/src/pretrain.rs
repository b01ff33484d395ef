//! Preparation of the components that stay frozen during adapter training.
//!
//! The semantic encoder is trained to classify identity factors (body shape,
//! texture and each of the three palette colours) from mean-pooled deep
//! features; the classification heads are discarded afterwards. The base
//! backbone is trained as a text-conditioned flow-matching model on
//! characters outside the dataset, first at low and then at high resolution.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::dataset::{caption, null_caption, render, BodyShape, CharacterSpec, DatasetManifest, Identity, Texture, ViewFactors};
use crate::dit::{gaussian, interpolate_batch};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Linear, INIT_STD};
use crate::optimizer::AdamW;
use crate::encoders::ToyEncoder;
use crate::params::{Init, ParamId, ParamStore, Partition};
use crate::tensor::Float;
use crate::pipeline::InstantCharacter;
use crate::rng::seeded_rng;

/// Probability of replacing the caption with the null caption during base
/// pretraining, so the backbone also learns an unconditional field.
const BASE_NULL_CAPTION_PROB: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticReport {
    pub losses: Vec<f64>,
    /// Accuracy per factor (shape, texture, three palette slots) on fresh samples.
    pub accuracy: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseReport {
    pub losses_low: Vec<f64>,
    pub losses_high: Vec<f64>,
}

fn random_spec<R: Rng + ?Sized>(rng: &mut R) -> CharacterSpec {
    CharacterSpec {
        identity: Identity::from_index(rng.random_range(0..Identity::COUNT)),
        view: ViewFactors::from_index(rng.random_range(0..ViewFactors::COUNT)),
    }
}

fn factor_labels(spec: &CharacterSpec) -> [usize; 5] {
    let id = &spec.identity;
    let shape = BodyShape::ALL.iter().position(|s| *s == id.body_shape).unwrap();
    let texture = Texture::ALL.iter().position(|t| *t == id.texture).unwrap();
    let [a, b, c] = id.palette.0;
    [shape, texture, a as usize, b as usize, c as usize]
}

const FACTOR_CLASSES: [usize; 5] = [4, 3, 10, 10, 10];

/// Linear classification heads over mean-pooled deep encoder features, one
/// per identity factor.
#[derive(Debug, Clone)]
struct FactorHeads {
    heads: Vec<Linear>,
}

impl FactorHeads {
    fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, width: usize, rng: &mut R) -> Self {
        let heads = FACTOR_CLASSES
            .iter()
            .enumerate()
            .map(|(i, n)| {
                Linear::new(
                    store,
                    &format!("scratch/semantic_head/{i}"),
                    width,
                    *n,
                    true,
                    Init::TruncNormal(INIT_STD),
                    Partition::AdapterTrainable,
                    rng,
                )
            })
            .collect();
        FactorHeads { heads }
    }

    fn params(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| h.params()).collect()
    }

    fn logits<F: Float>(&self, g: &mut Graph<F>, encoder: &ToyEncoder, patches: Var, batch: usize, grid: usize) -> Vec<Var> {
        let (deep, _) = encoder.forward_graph(g, patches, batch, grid);
        let pooled = g.mean_tokens(deep, batch);
        self.heads.iter().map(|h| h.forward(g, pooled)).collect()
    }

    /// Sum of per-factor cross-entropies.
    fn loss<F: Float>(&self, g: &mut Graph<F>, encoder: &ToyEncoder, patches: Var, grid: usize, labels: &[[usize; 5]]) -> Var {
        let logits = self.logits(g, encoder, patches, labels.len(), grid);
        let terms: Vec<Var> = logits
            .into_iter()
            .enumerate()
            .map(|(f, l)| {
                let y: Vec<usize> = labels.iter().map(|l| l[f]).collect();
                g.cross_entropy(l, &y)
            })
            .collect();
        terms[1..].iter().fold(terms[0], |acc, t| g.add(acc, *t))
    }
}

/// Trains the semantic encoder on identity-factor classification.
pub fn pretrain_semantic(model: &mut InstantCharacter<f32>) -> Result<SemanticReport> {
    let cfg = model.config.clone();
    let p = &cfg.pretrain;
    let seed = cfg.seed;
    let res = cfg.toy_low_resolution;
    let encoder = model.encoders.semantic.clone();
    // Heads live in a scratch copy of the store so they never reach a checkpoint.
    let mut scratch = model.store.clone();
    let heads = FactorHeads::new(&mut scratch, encoder.width, &mut seeded_rng(seed, "pretrain/semantic/heads"));
    let mut trainable = encoder.params();
    trainable.extend(heads.params());

    let mut data_rng = seeded_rng(seed, "pretrain/semantic/data");
    let specs: Vec<CharacterSpec> = (0..p.semantic_samples).map(|_| random_spec(&mut data_rng)).collect();
    let images = specs.iter().map(|s| render(s, res)).collect::<Result<Vec<_>>>()?;
    let grid = model.encoders.resolution / encoder.patch;
    let mut opt = AdamW::new(&cfg.optimizer);
    let mut losses = Vec::new();
    let batch = p.semantic_batch.max(1);
    for epoch in 0..p.semantic_epochs {
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.shuffle(&mut seeded_rng(seed, &format!("pretrain/semantic/shuffle/{epoch}")));
        for chunk in order.chunks(batch) {
            let imgs: Vec<ImageTensor> = chunk.iter().map(|i| images[*i].clone()).collect();
            let labels: Vec<[usize; 5]> = chunk.iter().map(|i| factor_labels(&specs[*i])).collect();
            let patches = encoder.patch_tokens(&imgs, model.encoders.resolution);
            let (loss, grads) = {
                let mut g = Graph::with_trainable(&scratch, &trainable);
                let x = g.input(patches);
                let total = heads.loss(&mut g, &encoder, x, grid, &labels);
                (g.value(total).data[0] as f64, g.backward(total))
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("semantic pretraining loss is {loss} at epoch {epoch}")));
            }
            losses.push(loss);
            opt.update(&mut scratch, &grads, p.semantic_lr);
        }
    }
    for id in encoder.params() {
        model.store.tensor_mut(id).data.copy_from_slice(&scratch.tensor(id).data);
    }

    // Accuracy on fresh samples, read through the scratch heads.
    let mut eval_rng = seeded_rng(seed, "pretrain/semantic/eval");
    let eval_specs: Vec<CharacterSpec> = (0..256).map(|_| random_spec(&mut eval_rng)).collect();
    let eval_imgs = eval_specs.iter().map(|s| render(s, res)).collect::<Result<Vec<_>>>()?;
    let mut correct = [0usize; 5];
    let mut g = Graph::new(&scratch);
    let x = g.input(encoder.patch_tokens(&eval_imgs, model.encoders.resolution));
    for (f, logits) in heads.logits(&mut g, &encoder, x, eval_imgs.len(), grid).into_iter().enumerate() {
        let v = g.value(logits);
        for (i, s) in eval_specs.iter().enumerate() {
            let row = v.row(i);
            let argmax = (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
            if argmax == factor_labels(s)[f] {
                correct[f] += 1;
            }
        }
    }
    Ok(SemanticReport {
        losses,
        accuracy: correct.map(|c| c as f64 / eval_specs.len() as f64),
    })
}

/// Identities for base pretraining: `count` draws that avoid every identity
/// in `exclude`.
pub fn base_identities(seed: u64, count: usize, exclude: &HashSet<Identity>) -> Result<Vec<Identity>> {
    let available = Identity::COUNT - exclude.len();
    if count > available {
        return Err(Error::Config(format!("{count} base identities requested, only {available} available")));
    }
    let mut rng = seeded_rng(seed, "pretrain/base/identities");
    let mut out = Vec::with_capacity(count);
    for i in sample_indices(&mut rng, Identity::COUNT, count + exclude.len()).into_iter() {
        let id = Identity::from_index(i);
        if !exclude.contains(&id) {
            out.push(id);
            if out.len() == count {
                break;
            }
        }
    }
    Ok(out)
}

/// Text-conditioned flow-matching training of the base backbone. Only
/// `dit/base/*` parameters change. The low-resolution steps come first; the
/// high-resolution steps then alternate with further low-resolution steps so
/// the backbone keeps serving both resolutions.
pub fn pretrain_base(model: &mut InstantCharacter<f32>, exclude: &HashSet<Identity>) -> Result<BaseReport> {
    let cfg = model.config.clone();
    let p = &cfg.pretrain;
    let identities = base_identities(cfg.seed, p.base_characters, exclude)?;
    let trainable = model.dit.base_params();
    let mut opt = AdamW::new(&cfg.optimizer);
    let mut report = BaseReport { losses_low: Vec::new(), losses_high: Vec::new() };
    let (low, high) = (cfg.toy_low_resolution, cfg.toy_high_resolution);
    let schedule = std::iter::repeat_n(low, p.base_steps_low)
        .chain((0..2 * p.base_steps_high).map(|i| if i % 2 == 0 { high } else { low }));
    for (step, res) in schedule.enumerate() {
        let mut rng = seeded_rng(cfg.seed, &format!("pretrain/base/step/{step}"));
        let mut specs = Vec::with_capacity(p.base_batch);
        let mut t = Vec::with_capacity(p.base_batch);
        let mut text = Vec::new();
        for _ in 0..p.base_batch {
            let spec = CharacterSpec {
                identity: identities[rng.random_range(0..identities.len())],
                view: ViewFactors::from_index(rng.random_range(0..ViewFactors::COUNT)),
            };
            t.push(rng.random::<f32>());
            let ids = if rng.random::<f64>() < BASE_NULL_CAPTION_PROB { null_caption() } else { caption(&spec) };
            text.extend(ids.into_iter().map(|i| i as usize));
            specs.push(spec);
        }
        let images = specs.iter().map(|s| render(s, res)).collect::<Result<Vec<_>>>()?;
        let x0 = model.dit.patchify_batch::<f32>(&images.iter().collect::<Vec<_>>());
        let eps = gaussian(&x0.shape, &mut rng);
        let (x_t, v) = interpolate_batch(&x0, &eps, &t)?;
        let (loss, grads) = {
            let mut g = Graph::with_trainable(&model.store, &trainable);
            let xv = g.input(x_t);
            let pred = model.dit.forward_graph(&mut g, xv, &t, &text, None);
            let loss = g.mse(pred, &v);
            (g.value(loss).data[0] as f64, g.backward(loss))
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("base pretraining loss is {loss} at step {step}")));
        }
        opt.update(&mut model.store, &grads, p.base_lr);
        if res == low {
            report.losses_low.push(loss);
        } else {
            report.losses_high.push(loss);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparationReport {
    pub semantic: SemanticReport,
    pub base: BaseReport,
}

/// A freshly initialized model with its semantic encoder and base backbone
/// pretrained; base identities avoid every identity in `manifest`.
pub fn prepare_model(config: &crate::config::RunConfig, manifest: &DatasetManifest) -> Result<(InstantCharacter<f32>, PreparationReport)> {
    let mut model = InstantCharacter::<f32>::new(config)?;
    let semantic = pretrain_semantic(&mut model)?;
    let exclude: HashSet<Identity> = manifest.records.iter().map(|r| r.spec.identity).collect();
    let base = pretrain_base(&mut model, &exclude)?;
    Ok((model, PreparationReport { semantic, base }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dit.width = 32;
        cfg.dit.depth = 1;
        cfg.dit.heads = 2;
        cfg.encoder.depth = 2;
        cfg.encoder.shallow_layer = Some(1);
        cfg.pretrain.semantic_samples = 64;
        cfg.pretrain.semantic_epochs = 1;
        cfg.pretrain.semantic_batch = 16;
        cfg.pretrain.base_characters = 10;
        cfg.pretrain.base_steps_low = 3;
        cfg.pretrain.base_steps_high = 1;
        cfg.pretrain.base_batch = 2;
        cfg
    }

    #[test]
    fn semantic_pretraining_only_touches_the_semantic_encoder() {
        let mut model = InstantCharacter::<f32>::new(&tiny()).unwrap();
        let before = model.store.clone();
        let report = pretrain_semantic(&mut model).unwrap();
        assert_eq!(report.losses.len(), 4);
        assert_eq!(before.len(), model.store.len());
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            let changed = !a.tensor.bit_eq(&b.tensor);
            assert_eq!(changed, a.name.starts_with("encoder/semantic/"), "{}", a.name);
        }
    }

    #[test]
    fn base_pretraining_only_touches_the_base_backbone() {
        let mut model = InstantCharacter::<f32>::new(&tiny()).unwrap();
        let before = model.store.clone();
        let report = pretrain_base(&mut model, &HashSet::new()).unwrap();
        assert_eq!((report.losses_low.len(), report.losses_high.len()), (4, 1));
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            if !a.name.starts_with("dit/base/") {
                assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
            }
        }
        assert!(model.store.ids_with_prefix("dit/base/final_proj").iter().any(|id| !before.tensor(*id).bit_eq(model.store.tensor(*id))));
    }

    #[test]
    fn factor_objective_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let pair = crate::encoders::EncoderPair::new(&mut store, &cfg, &mut seeded_rng(1, "t")).unwrap();
        let encoder = pair.semantic;
        let heads = FactorHeads::new(&mut store, encoder.width, &mut seeded_rng(2, "t"));
        let mut rng = seeded_rng(3, "t");
        let specs: Vec<CharacterSpec> = (0..3).map(|_| random_spec(&mut rng)).collect();
        let imgs: Vec<ImageTensor> = specs.iter().map(|s| render(s, 32).unwrap()).collect();
        let labels: Vec<[usize; 5]> = specs.iter().map(factor_labels).collect();
        let patches = encoder.patch_tokens::<f64>(&imgs, 32);
        let grid = 32 / encoder.patch;
        let mut trainable = encoder.params();
        trainable.extend(heads.params());
        let eval = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let x = g.input(patches.clone());
            let l = heads.loss(&mut g, &encoder, x, grid, &labels);
            g.value(l).data[0]
        };
        let grads = {
            let mut g = Graph::with_trainable(&store, &trainable);
            let x = g.input(patches.clone());
            let l = heads.loss(&mut g, &encoder, x, grid, &labels);
            g.backward(l)
        };
        let mut worst = 0f64;
        for id in &trainable {
            let n = store.tensor(*id).data.len();
            for j in (0..n).step_by((n / 5).max(1)) {
                let orig = store.tensor(*id).data[j];
                store.tensor_mut(*id).data[j] = orig + 1e-5;
                let up = eval(&store);
                store.tensor_mut(*id).data[j] = orig - 1e-5;
                let down = eval(&store);
                store.tensor_mut(*id).data[j] = orig;
                let fd = (up - down) / 2e-5;
                let an = grads.get(*id).unwrap().data[j];
                worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-3));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn base_identities_avoid_exclusions() {
        let exclude: HashSet<Identity> = (0..50).map(Identity::from_index).collect();
        let ids = base_identities(3, 100, &exclude).unwrap();
        assert_eq!(ids.len(), 100);
        assert!(ids.iter().all(|i| !exclude.contains(i)));
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 100);
    }
}
