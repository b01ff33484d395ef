//! Quantitative checks of a trained model: identity consistency, prompt
//! adherence, copy-paste measurement and finite-difference gradient checks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::dataset::{caption, caption_text, render_any, CharacterSpec, DatasetManifest, Identity, Split, ViewFactors};
use crate::dit::{gaussian, Injection};
use crate::encoders::ReferenceFeatures;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore, Partition};
use crate::pipeline::InstantCharacter;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// Border colour tolerance (max-norm over RGB) for the background check.
pub const BACKGROUND_TOLERANCE: f32 = 0.25;
/// A pixel is foreground when it differs from the named background by more
/// than this (max-norm).
pub const FOREGROUND_THRESHOLD: f32 = 0.2;
/// Allowed absolute error of the scale estimated from the mask area.
pub const SCALE_TOLERANCE: f64 = 0.1;
/// Allowed principal-axis deviation in degrees (modulo 180).
pub const POSE_TOLERANCE_DEG: f64 = 25.0;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean-pooled deep semantic features of each image.
pub fn identity_embeddings(model: &InstantCharacter<f32>, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let emb = model.encoders.identity_embedding(&model.store, images)?;
    Ok(emb.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect())
}

pub fn identity_similarity(model: &InstantCharacter<f32>, generated: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let emb = identity_embeddings(model, &[generated.clone(), reference.clone()])?;
    Ok(cosine(&emb[0], &emb[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub accuracy: f64,
    /// Per generated image: own-reference similarity beats every other.
    pub correct: Vec<bool>,
    pub own_similarity: Vec<f64>,
    pub best_other_similarity: Vec<f64>,
    /// Comparisons skipped because two references share an identity.
    pub excluded_pairs: usize,
}

/// Ranking over precomputed embeddings. `gens[i]` pairs with `refs[i]`;
/// `identities`, when given, excludes comparisons against other references
/// of the same identity.
pub fn rank_embeddings(gens: &[Vec<f64>], refs: &[Vec<f64>], identities: Option<&[Identity]>) -> Result<RankingOutcome> {
    if gens.len() != refs.len() || refs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "ranking needs equally many generations and references (at least 2), got {} and {}",
            gens.len(),
            refs.len()
        )));
    }
    if let Some(ids) = identities {
        if ids.len() != refs.len() {
            return Err(Error::InvalidInput("one identity per reference required".into()));
        }
    }
    let mut out = RankingOutcome {
        accuracy: 0.0,
        correct: Vec::new(),
        own_similarity: Vec::new(),
        best_other_similarity: Vec::new(),
        excluded_pairs: 0,
    };
    for (i, g) in gens.iter().enumerate() {
        let own = cosine(g, &refs[i]);
        let mut best = f64::NEG_INFINITY;
        for (j, r) in refs.iter().enumerate() {
            if j == i {
                continue;
            }
            if identities.is_some_and(|ids| ids[i] == ids[j]) {
                out.excluded_pairs += 1;
                continue;
            }
            best = best.max(cosine(g, r));
        }
        out.correct.push(own > best);
        out.own_similarity.push(own);
        out.best_other_similarity.push(best);
    }
    out.accuracy = out.correct.iter().filter(|c| **c).count() as f64 / gens.len() as f64;
    Ok(out)
}

/// Fraction of generated images that are closer to their own reference
/// than to any other reference.
pub fn identity_ranking_accuracy(
    model: &InstantCharacter<f32>,
    gens: &[ImageTensor],
    refs: &[ImageTensor],
    identities: Option<&[Identity]>,
) -> Result<RankingOutcome> {
    let g = identity_embeddings(model, gens)?;
    let r = identity_embeddings(model, refs)?;
    rank_embeddings(&g, &r, identities)
}

/// Pearson correlation of flattened pixels; the generated image is resized
/// to the reference size when they differ. Zero-variance inputs score 0.
pub fn copy_paste_score(generated: &ImageTensor, reference: &ImageTensor) -> f64 {
    let resized;
    let gen = if generated.height() != reference.height() || generated.width() != reference.width() {
        resized = generated.resize(reference.height(), reference.width());
        &resized
    } else {
        generated
    };
    pearson(gen.data(), reference.data())
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|v| *v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adherence {
    pub background: bool,
    pub scale: bool,
    pub pose: bool,
    pub foreground_pixels: usize,
    /// Scale estimated from the mask area; absent for an empty mask.
    pub estimated_scale: Option<f64>,
    /// Principal-axis angle in degrees in `[0, 180)`; absent for an empty mask.
    pub estimated_angle: Option<f64>,
}

impl Adherence {
    pub fn passed(&self) -> bool {
        self.background && self.scale && self.pose
    }
}

fn max_norm(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f32::max)
}

fn foreground_mask(image: &ImageTensor, background: [f32; 3]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if max_norm(image.pixel(y, x), background) > FOREGROUND_THRESHOLD {
                out.push((y, x));
            }
        }
    }
    out
}

/// Principal-axis angle in degrees, measured counter-clockwise with the
/// image y axis pointing down, in `[0, 180)`.
fn principal_angle(mask: &[(usize, usize)]) -> f64 {
    let n = mask.len() as f64;
    let (cx, cy) = mask.iter().fold((0.0, 0.0), |(sx, sy), (y, x)| (sx + *x as f64, sy - *y as f64));
    let (cx, cy) = (cx / n, cy / n);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for (y, x) in mask {
        let (dx, dy) = (*x as f64 - cx, -(*y as f64) - cy);
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
    }
    let angle = 0.5 * (2.0 * m11).atan2(m20 - m02);
    angle.to_degrees().rem_euclid(180.0)
}

fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Checks the background colour, scale and pose named by `spec` against a
/// generated image.
pub fn prompt_adherence(generated: &ImageTensor, spec: &CharacterSpec) -> Result<Adherence> {
    let (h, w) = (generated.height(), generated.width());
    if h != w {
        return Err(Error::InvalidInput(format!("prompt adherence expects a square image, got {h}x{w}")));
    }
    let bg = spec.view.background.rgb();
    let mut border = [0f64; 3];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                let p = generated.pixel(y, x);
                for k in 0..3 {
                    border[k] += p[k] as f64;
                }
                count += 1;
            }
        }
    }
    let mean = border.map(|v| (v / count as f64) as f32);
    let background = max_norm(mean, bg) <= BACKGROUND_TOLERANCE;

    let mask = foreground_mask(generated, bg);
    if mask.is_empty() {
        return Ok(Adherence {
            background,
            scale: false,
            pose: false,
            foreground_pixels: 0,
            estimated_scale: None,
            estimated_angle: None,
        });
    }
    let expected = foreground_mask(&render_any(spec, h)?, bg).len().max(1);
    let named = spec.view.scale as f64;
    let est_scale = named * (mask.len() as f64 / expected as f64).sqrt();
    let angle = principal_angle(&mask);
    Ok(Adherence {
        background,
        scale: (est_scale - named).abs() < SCALE_TOLERANCE,
        pose: angle_distance(angle, spec.view.pose_angle as f64) <= POSE_TOLERANCE_DEG,
        foreground_pixels: mask.len(),
        estimated_scale: Some(est_scale),
        estimated_angle: Some(angle),
    })
}

// ------------------------------------------------------------ evaluation

/// One held-out character: the reference view shown to the adapter and the
/// view requested by the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub character_id: u32,
    pub reference: CharacterSpec,
    pub target: CharacterSpec,
}

/// Up to `count` held-out characters (lowest ids first), each prompted with
/// a seeded view whose pose differs from the reference pose.
pub fn novel_pose_cases(manifest: &DatasetManifest, seed: u64, count: usize) -> Result<Vec<EvalCase>> {
    let mut cases: Vec<EvalCase> = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == Split::Heldout) {
        if cases.len() == count {
            break;
        }
        if cases.iter().any(|c| c.character_id == r.character_id) {
            continue;
        }
        let reference = r.reference_spec();
        let mut rng = seeded_rng(seed, &format!("eval/case/{}", r.character_id));
        let view = loop {
            let v = ViewFactors::from_index(rng.random_range(0..ViewFactors::COUNT));
            if v.pose_angle != reference.view.pose_angle {
                break v;
            }
        };
        cases.push(EvalCase { character_id: r.character_id, reference, target: reference.with_view(view) });
    }
    if cases.len() < 2 {
        return Err(Error::Dataset(format!("evaluation needs at least 2 held-out characters, found {}", cases.len())));
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub steps: usize,
    pub scale: f32,
    pub seed: u64,
    pub resolution: usize,
    pub generations: usize,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalOptions {
            steps: cfg.sampling.steps,
            scale: cfg.sampling.scale as f32,
            seed: cfg.seed,
            resolution: cfg.toy_low_resolution,
            generations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub character_id: u32,
    pub generation: usize,
    pub caption: String,
    pub own_similarity: f64,
    pub best_other_similarity: f64,
    pub ranked_correctly: bool,
    pub copy_paste_score: f64,
    pub adherence: Adherence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub identity_ranking_accuracy: f64,
    pub mean_identity_similarity: f64,
    pub prompt_adherence_rate: f64,
    pub background_adherence_rate: f64,
    pub copy_paste_score: f64,
    pub excluded_pairs: usize,
    pub options: EvalOptions,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub references: Vec<ImageTensor>,
    /// `generations[g][case]`.
    pub generations: Vec<Vec<ImageTensor>>,
}

/// Generates every case with the adapter and scores the results.
pub fn evaluate(model: &InstantCharacter<f32>, cases: &[EvalCase], opts: &EvalOptions) -> Result<EvalOutput> {
    let references = cases.iter().map(|c| render_any(&c.reference, opts.resolution)).collect::<Result<Vec<_>>>()?;
    let feats = model.reference_features(&references)?;
    let captions: Vec<Vec<u32>> = cases.iter().map(|c| caption(&c.target)).collect();
    let identities: Vec<Identity> = cases.iter().map(|c| c.reference.identity).collect();
    let ref_emb = identity_embeddings(model, &references)?;
    let mut rows = Vec::new();
    let mut generations = Vec::new();
    let mut excluded = 0;
    for gen_index in 0..opts.generations.max(1) {
        let mut rng = seeded_rng(opts.seed, &format!("eval/generate/{gen_index}"));
        let images = model.generate(Some(&feats), &captions, opts.resolution, opts.steps, opts.scale, &mut rng)?;
        let gen_emb = identity_embeddings(model, &images)?;
        let ranking = rank_embeddings(&gen_emb, &ref_emb, Some(&identities))?;
        excluded += ranking.excluded_pairs;
        for (i, case) in cases.iter().enumerate() {
            rows.push(EvalRow {
                character_id: case.character_id,
                generation: gen_index,
                caption: caption_text(&captions[i]),
                own_similarity: ranking.own_similarity[i],
                best_other_similarity: ranking.best_other_similarity[i],
                ranked_correctly: ranking.correct[i],
                copy_paste_score: copy_paste_score(&images[i], &references[i]),
                adherence: prompt_adherence(&images[i], &case.target)?,
            });
        }
        generations.push(images);
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        identity_ranking_accuracy: mean(&|r| r.ranked_correctly as u8 as f64),
        mean_identity_similarity: mean(&|r| r.own_similarity),
        prompt_adherence_rate: mean(&|r| r.adherence.passed() as u8 as f64),
        background_adherence_rate: mean(&|r| r.adherence.background as u8 as f64),
        copy_paste_score: mean(&|r| r.copy_paste_score),
        excluded_pairs: excluded,
        options: *opts,
        rows,
    };
    Ok(EvalOutput { report, references, generations })
}

/// A neutral rendering of what the prompt asks for: the target view with
/// the palette replaced by its luminance.
pub fn prompt_card(target: &CharacterSpec, resolution: usize) -> Result<ImageTensor> {
    let img = render_any(target, resolution)?;
    let bg = target.view.background.rgb();
    let mut data = img.data().to_vec();
    for px in data.chunks_exact_mut(3) {
        if max_norm([px[0], px[1], px[2]], bg) > FOREGROUND_THRESHOLD {
            let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.copy_from_slice(&[l, l, l]);
        }
    }
    ImageTensor::new(resolution, resolution, data)
}

/// One row per case: reference | prompt card | generations, each tile
/// resized to `tile` pixels.
pub fn sample_grid(output: &EvalOutput, cases: &[EvalCase], tile: usize) -> Result<ImageTensor> {
    let rows = cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut tiles = vec![output.references[i].resize(tile, tile), prompt_card(&case.target, tile)?];
            tiles.extend(output.generations.iter().map(|g| g[i].resize(tile, tile)));
            ImageTensor::hstack(&tiles)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::vstack(&rows)
}

// ------------------------------------------------------- gradient checks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradComponent {
    Qformer,
    IntermediateLow,
    IntermediateRegion,
    /// Every adapter parameter.
    Adapter,
    /// The injected cross-attention layers of the backbone.
    DitXattn,
    /// A standalone linear layer whose gradient is known in closed form.
    LinearProbe,
    SemanticEncoder,
    StructuralEncoder,
}

impl GradComponent {
    pub const ALL: [GradComponent; 8] = [
        GradComponent::Qformer,
        GradComponent::IntermediateLow,
        GradComponent::IntermediateRegion,
        GradComponent::Adapter,
        GradComponent::DitXattn,
        GradComponent::LinearProbe,
        GradComponent::SemanticEncoder,
        GradComponent::StructuralEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradComponent::Qformer => "qformer",
            GradComponent::IntermediateLow => "intermediate_low",
            GradComponent::IntermediateRegion => "intermediate_region",
            GradComponent::Adapter => "adapter",
            GradComponent::DitXattn => "dit_xattn",
            GradComponent::LinearProbe => "linear_probe",
            GradComponent::SemanticEncoder => "encoder_semantic",
            GradComponent::StructuralEncoder => "encoder_structural",
        }
    }
}

impl fmt::Display for GradComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradComponent::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<&str> = GradComponent::ALL.iter().map(|c| c.name()).collect();
            Error::InvalidInput(format!("unknown component `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Finite-difference step.
pub const FD_EPSILON: f64 = 1e-4;
/// Entries checked per tensor (all entries of smaller tensors).
pub const FD_SAMPLES_PER_TENSOR: usize = 200;
/// Gradient magnitude below which errors are measured absolutely.
pub const FD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: GradComponent,
    pub tensors: usize,
    pub entries: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_gradients: (f64, f64),
    pub tolerance: f64,
    pub passed: bool,
}

/// The scalar objective of a gradient check: its store, the checked
/// parameters and a closure evaluating the loss into a graph.
struct Objective {
    store: ParamStore<f64>,
    params: Vec<ParamId>,
    eval: Box<dyn Fn(&mut Graph<f64>) -> crate::autodiff::Var>,
}

fn weights_like(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
    gaussian(shape, rng)
}

fn objective(config: &RunConfig, component: GradComponent, seed: u64) -> Result<Objective> {
    let mut rng = seeded_rng(seed, &format!("gradcheck/{}", component.name()));
    if component == GradComponent::LinearProbe {
        let mut store = ParamStore::<f64>::new();
        let probe = Linear::new(&mut store, "probe", 6, 4, true, Init::Normal(1.0), Partition::AdapterTrainable, &mut rng);
        let x: Tensor<f64> = gaussian(&[5, 6], &mut rng);
        let w = weights_like(&[5, 4], &mut rng);
        let params = probe.params();
        return Ok(Objective {
            store,
            params,
            eval: Box::new(move |g| {
                let xv = g.input(x.clone());
                let y = probe.forward(g, xv);
                g.weighted_sum(y, &w)
            }),
        });
    }
    let model = InstantCharacter::<f64>::new(config)?;
    let mut store = model.store.clone();
    // Zero-initialized projections and gates would make most gradients
    // vanish, so every parameter is perturbed away from its initial value.
    let mut perturb = seeded_rng(seed, "gradcheck/perturb");
    for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
        let t = store.tensor_mut(id);
        let noise: Tensor<f64> = gaussian(&t.shape, &mut perturb);
        for (v, n) in t.data.iter_mut().zip(&noise.data) {
            *v += 0.05 * n;
        }
    }
    let params = match component {
        GradComponent::Qformer => model.adapter.qformer.params(),
        GradComponent::IntermediateLow => model.adapter.low.params(),
        GradComponent::IntermediateRegion => model.adapter.region.params(),
        GradComponent::Adapter => model.adapter.params(),
        GradComponent::DitXattn => model.dit.adapter_params(),
        GradComponent::SemanticEncoder | GradComponent::StructuralEncoder => {
            return Err(Error::InvalidInput(format!("{component}: component has no trainable parameters")));
        }
        GradComponent::LinearProbe => unreachable!(),
    };
    let batch = 1;
    let t = vec![0.3];
    if component == GradComponent::Qformer {
        let qformer = model.adapter.qformer.clone();
        // Low pathway `[shallow; deep]` followed by region pathway `[regions; deep]`.
        let enc_tokens = model.encoders.semantic.tokens_for(model.encoders.resolution);
        let fused_tokens = enc_tokens * 2 + enc_tokens * (model.encoders.region_grid.pow(2) + 1);
        let fused: Tensor<f64> = gaussian(&[batch * fused_tokens, config.adapter.width], &mut rng);
        let w = weights_like(&[batch * config.adapter.queries, config.adapter.context_dim], &mut rng);
        return Ok(Objective {
            store,
            params,
            eval: Box::new(move |g| {
                let x = g.input(fused.clone());
                let out = qformer.forward_graph(g, x, &t);
                g.weighted_sum(out, &w)
            }),
        });
    }
    if component != GradComponent::DitXattn {
        let enc_tokens = model.encoders.semantic.tokens_for(model.encoders.resolution);
        let width = model.encoders.fused_width();
        let regions = model.encoders.region_grid.pow(2);
        let feats = ReferenceFeatures {
            batch,
            shallow: gaussian(&[batch * enc_tokens, width], &mut rng),
            deep: gaussian(&[batch * enc_tokens, width], &mut rng),
            region: gaussian(&[batch * enc_tokens * regions, width], &mut rng),
        };
        let adapter = model.adapter.clone();
        let w = weights_like(&[batch * config.adapter.queries, config.adapter.context_dim], &mut rng);
        return Ok(Objective {
            store,
            params,
            eval: Box::new(move |g| {
                let out = adapter.forward_graph(g, &feats, &t);
                g.weighted_sum(out, &w)
            }),
        });
    }
    // A 4x4 token grid keeps the backbone passes cheap.
    let dit = model.dit.clone();
    let tokens = 16;
    let x_t: Tensor<f64> = gaussian(&[batch * tokens, dit.patch_dim()], &mut rng);
    let context: Tensor<f64> = gaussian(&[batch * config.adapter.queries, config.adapter.context_dim], &mut rng);
    let text: Vec<usize> = (0..batch * crate::dataset::CAPTION_LEN).map(|_| rng.random_range(1..64)).collect();
    let w = weights_like(&[batch * tokens, dit.patch_dim()], &mut rng);
    Ok(Objective {
        store,
        params,
        eval: Box::new(move |g| {
            let x = g.input(x_t.clone());
            let ctx = g.input(context.clone());
            let gains = [0.7];
            let out = dit.forward_graph(g, x, &t, &text, Some(Injection { context: ctx, gains: &gains }));
            g.weighted_sum(out, &w)
        }),
    })
}

/// Central finite differences against the analytic gradient in 64-bit
/// precision. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, FD_FLOOR)`.
pub fn gradient_check(config: &RunConfig, component: GradComponent, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let Objective { mut store, params, eval } = objective(config, component, seed)?;
    let grads = {
        let mut g = Graph::with_trainable(&store, &params);
        let loss = eval(&mut g);
        g.backward(loss)
    };
    let loss_at = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let l = eval(&mut g);
        g.value(l).data[0]
    };
    let mut pick = seeded_rng(seed, &format!("gradcheck/{}/entries", component.name()));
    let mut report = GradCheckReport {
        component,
        tensors: params.len(),
        entries: 0,
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_gradients: (0.0, 0.0),
        tolerance,
        passed: false,
    };
    for id in &params {
        let name = store.get(*id).name.clone();
        let analytic = grads
            .get(*id)
            .ok_or_else(|| Error::Numerical(format!("{name}: no gradient reached the parameter")))?
            .clone();
        if !analytic.is_finite() {
            return Err(Error::Numerical(format!("{name}: non-finite analytic gradient")));
        }
        let n = analytic.data.len();
        let entries: Vec<usize> = if n <= FD_SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            sample_indices(&mut pick, n, FD_SAMPLES_PER_TENSOR).into_vec()
        };
        for j in entries {
            let orig = store.tensor(*id).data[j];
            store.tensor_mut(*id).data[j] = orig + FD_EPSILON;
            let up = loss_at(&store);
            store.tensor_mut(*id).data[j] = orig - FD_EPSILON;
            let down = loss_at(&store);
            store.tensor_mut(*id).data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            let a = analytic.data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            if !rel.is_finite() {
                return Err(Error::Numerical(format!("{name}[{j}]: non-finite finite difference")));
            }
            if rel > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_parameter = format!("{name}[{j}]");
                report.worst_gradients = (a, numeric);
            }
            report.entries += 1;
        }
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render, Background, BodyShape, Palette, Style, Texture};

    fn spec(view_index: usize) -> CharacterSpec {
        CharacterSpec {
            identity: Identity { body_shape: BodyShape::Triangle, palette: Palette([0, 3, 7]), texture: Texture::Stripes },
            view: ViewFactors::from_index(view_index),
        }
    }

    fn model() -> InstantCharacter<f32> {
        InstantCharacter::new(&RunConfig::default()).unwrap()
    }

    #[test]
    fn cosine_handles_degenerate_vectors() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_is_one_and_symmetric() {
        let m = model();
        let a = render(&spec(5), 32).unwrap();
        let b = render(&spec(77), 32).unwrap();
        assert!((identity_similarity(&m, &a, &a).unwrap() - 1.0).abs() < 1e-6);
        let ab = identity_similarity(&m, &a, &b).unwrap();
        let ba = identity_similarity(&m, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn inverted_sprite_is_less_similar_than_itself() {
        let m = model();
        let a = render(&spec(9), 32).unwrap();
        let inv = a.map(|v| 1.0 - v).unwrap();
        assert!(identity_similarity(&m, &inv, &a).unwrap() < identity_similarity(&m, &a, &a).unwrap());
    }

    #[test]
    fn all_black_images_follow_the_degenerate_rule() {
        let m = model();
        let black = ImageTensor::filled(32, 32, [0.0; 3]);
        let s = identity_similarity(&m, &black, &black).unwrap();
        let emb = identity_embeddings(&m, &[black]).unwrap();
        let zero = emb[0].iter().all(|v| *v == 0.0);
        assert!(if zero { s == 0.0 } else { (s - 1.0).abs() < 1e-6 });
    }

    #[test]
    fn ranking_of_references_against_themselves_is_perfect() {
        let m = model();
        let refs: Vec<ImageTensor> = (0..6)
            .map(|i| {
                let mut s = spec(i * 13);
                s.identity.palette = Palette::from_index(i * 97);
                render(&s, 32).unwrap()
            })
            .collect();
        assert_eq!(identity_ranking_accuracy(&m, &refs, &refs, None).unwrap().accuracy, 1.0);
        let mut rotated = refs.clone();
        rotated.rotate_left(1);
        assert_eq!(identity_ranking_accuracy(&m, &rotated, &refs, None).unwrap().accuracy, 0.0);
    }

    #[test]
    fn duplicate_identities_are_excluded_and_counted() {
        let e = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let ids = [spec(0).identity, spec(0).identity, Identity::from_index(1)];
        let r = rank_embeddings(&e, &e, Some(&ids)).unwrap();
        assert_eq!(r.excluded_pairs, 2);
        assert_eq!(r.accuracy, 1.0);
        assert!(rank_embeddings(&e[..1], &e[..1], None).is_err());
    }

    #[test]
    fn copy_paste_score_examples() {
        let a = render(&spec(3), 32).unwrap();
        assert!((copy_paste_score(&a, &a) - 1.0).abs() < 1e-12);
        let mut shifted = vec![0f32; a.data().len()];
        for y in 0..32 {
            for x in 0..32 {
                let p = a.pixel(y, (x + 8) % 32);
                shifted[(y * 32 + x) * 3..(y * 32 + x) * 3 + 3].copy_from_slice(&p);
            }
        }
        let shifted = ImageTensor::new(32, 32, shifted).unwrap();
        assert!(copy_paste_score(&shifted, &a) < 1.0);
        let flat = ImageTensor::filled(32, 32, [0.3; 3]);
        assert_eq!(copy_paste_score(&flat, &a), 0.0);
        // Different sizes are reconciled by resizing the generation.
        let big = render(&spec(3), 64).unwrap();
        assert!(copy_paste_score(&big, &a) > 0.9);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let mut rng = seeded_rng(11, "noise");
        let mut hits = 0;
        for _ in 0..20 {
            let a: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.random()).collect();
            let b: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.random()).collect();
            let s = copy_paste_score(&ImageTensor::new(32, 32, a).unwrap(), &ImageTensor::new(32, 32, b).unwrap());
            hits += (s.abs() < 0.1) as usize;
        }
        assert_eq!(hits, 20);
    }

    #[test]
    fn ground_truth_renders_pass_every_view() {
        for shape in BodyShape::ALL {
            for texture in Texture::ALL {
                for view in 0..ViewFactors::COUNT {
                    let mut s = spec(view);
                    s.identity.body_shape = shape;
                    s.identity.texture = texture;
                    for res in [32, 64] {
                        let a = prompt_adherence(&render(&s, res).unwrap(), &s).unwrap();
                        assert!(a.passed(), "{s:?} at {res}: {a:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn swapped_background_fails_only_the_background_check() {
        let mut s = spec(0);
        s.view.background = Background::Red;
        let mut blue = s;
        blue.view.background = Background::Blue;
        let a = prompt_adherence(&render(&blue, 32).unwrap(), &s).unwrap();
        assert!(!a.background);
    }

    #[test]
    fn empty_mask_fails_geometric_checks() {
        let mut s = spec(0);
        s.view.background = Background::Gray;
        s.view.style = Style::Flat;
        let a = prompt_adherence(&ImageTensor::filled(32, 32, Background::Gray.rgb()), &s).unwrap();
        assert!(a.background && !a.scale && !a.pose);
        assert_eq!(a.foreground_pixels, 0);
    }

    #[test]
    fn wrong_pose_and_scale_are_detected() {
        let s = spec(0);
        let mut turned = s;
        turned.view.pose_angle = (s.view.pose_angle + 90) % 180;
        let a = prompt_adherence(&render(&turned, 32).unwrap(), &s).unwrap();
        assert!(!a.pose, "{a:?}");
        let mut small = s;
        small.view.scale = 0.6;
        let mut large = s;
        large.view.scale = 1.0;
        let a = prompt_adherence(&render(&small, 32).unwrap(), &large).unwrap();
        assert!(!a.scale, "{a:?}");
    }

    #[test]
    fn component_names_roundtrip() {
        for c in GradComponent::ALL {
            assert_eq!(c.name().parse::<GradComponent>().unwrap(), c);
        }
        assert!("encoder".parse::<GradComponent>().is_err());
    }

    #[test]
    fn linear_probe_gradient_is_exact() {
        let r = gradient_check(&RunConfig::default(), GradComponent::LinearProbe, 1e-8, 0).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.entries, 6 * 4 + 4);
    }

    #[test]
    fn frozen_encoders_have_nothing_to_check() {
        for c in [GradComponent::SemanticEncoder, GradComponent::StructuralEncoder] {
            let err = gradient_check(&RunConfig::default(), c, 1e-4, 0).unwrap_err();
            assert!(err.to_string().contains("component has no trainable parameters"));
        }
    }

    #[test]
    fn small_adapter_components_pass() {
        let mut cfg = RunConfig::default();
        cfg.adapter.width = 16;
        cfg.adapter.heads = 2;
        cfg.adapter.queries = 4;
        cfg.adapter.depth = 1;
        cfg.adapter.qformer_blocks = 1;
        cfg.adapter.context_dim = 8;
        cfg.dit.width = 16;
        cfg.dit.depth = 1;
        cfg.dit.heads = 2;
        for c in [GradComponent::Qformer, GradComponent::IntermediateLow, GradComponent::DitXattn] {
            let r = gradient_check(&cfg, c, 1e-4, 1).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn novel_pose_cases_change_the_pose() {
        let m = crate::dataset::generate_dataset(12, 3, 0.5, 5, &mut seeded_rng(0, "d")).unwrap();
        let cases = novel_pose_cases(&m, 4, 20).unwrap();
        assert_eq!(cases.len(), 5);
        for c in &cases {
            assert_ne!(c.reference.view.pose_angle, c.target.view.pose_angle);
            assert_eq!(c.reference.identity, c.target.identity);
        }
        assert_eq!(cases, novel_pose_cases(&m, 4, 20).unwrap());
    }

    #[test]
    fn evaluation_produces_bounded_metrics_and_a_grid() {
        let mut cfg = RunConfig::default();
        cfg.dit.width = 32;
        cfg.dit.depth = 1;
        cfg.dit.heads = 2;
        let model = InstantCharacter::<f32>::new(&cfg).unwrap();
        let m = crate::dataset::generate_dataset(8, 2, 0.5, 3, &mut seeded_rng(0, "d")).unwrap();
        let cases = novel_pose_cases(&m, 0, 3).unwrap();
        let opts = EvalOptions { steps: 2, generations: 2, ..EvalOptions::from_config(&cfg) };
        let out = evaluate(&model, &cases, &opts).unwrap();
        let r = &out.report;
        assert_eq!(r.rows.len(), 6);
        for v in [r.identity_ranking_accuracy, r.prompt_adherence_rate, r.background_adherence_rate] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((-1.0..=1.0).contains(&r.copy_paste_score));
        let grid = sample_grid(&out, &cases, 16).unwrap();
        assert_eq!((grid.height(), grid.width()), (3 * 16, 4 * 16));
        let again = evaluate(&model, &cases, &opts).unwrap();
        assert_eq!(serde_json::to_string(&again.report).unwrap(), serde_json::to_string(r).unwrap());
    }
}
