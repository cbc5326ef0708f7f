//! Contrastive image–text training at desk scale: stub encoders, projection
//! heads into the shared 224-dim space, the ICL/TCL/MVS composition, and the
//! warmup training loop.

mod losses;

pub use losses::{
    combined_loss, icl_loss, mvs_loss, tcl_loss, Embeddings, LossTerms, LossWeights, ViewBatch,
    ViewGrads,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpusio::{
    augment_text, preprocess_mimic_image, resize_bilinear, ImageGrid, MimicAugConfig, TextAugmenter,
};
use crate::downcls::EMBED_DIM;
use crate::error::{check_len, input_err, Result};
use crate::genlm::Vocab;
use crate::nn::{affine, affine_backward, argmax, dot, norm, Mlp, MlpCache};
use crate::optimkit::{adamw_step, warmup_lr, AdamWConfig, AdamWState, WarmupSchedule};
use crate::params::{fan_in_bound, ParamStore, TensorId};
use crate::rng::{derived, seeded, Rng};

/// Encoder output width on both sides.
pub const ENCODER_DIM: usize = 256;
/// Token embedding width of the bag-of-words text encoder.
pub const TOKEN_DIM: usize = 64;

/// What the text encoder consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextEncoderKind {
    /// Averaged token embeddings over a vocabulary of this size.
    Tokens { vocab_size: usize },
    /// A dense feature vector of this width.
    Dense { input_dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipArch {
    pub image_input_dim: usize,
    pub text: TextEncoderKind,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl ClipArch {
    pub fn new(image_input_dim: usize, text: TextEncoderKind) -> Self {
        Self {
            image_input_dim,
            text,
            hidden_dim: ENCODER_DIM,
            embed_dim: EMBED_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextInput {
    Tokens(Vec<usize>),
    Dense(Vec<f64>),
}

/// Affine map followed by unit normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionHead {
    pub weight: TensorId,
    pub bias: TensorId,
}

impl ProjectionHead {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = fan_in_bound(n_in);
        Self {
            weight: store.add_uniform(format!("{prefix}.weight"), &[n_out, n_in], bound, rng),
            bias: store.add_uniform(format!("{prefix}.bias"), &[n_out], bound, rng),
        }
    }
}

/// Divides by the Euclidean norm; a zero vector maps to the first basis vector.
pub fn normalize_guarded(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        (v.iter().map(|x| x / n).collect(), n)
    } else {
        let mut e1 = vec![0.0; v.len()];
        if let Some(first) = e1.first_mut() {
            *first = 1.0;
        }
        (e1, 0.0)
    }
}

/// Affine map then unit normalization.
pub fn project_normalize(
    raw: &[f64],
    store: &ParamStore,
    head: &ProjectionHead,
) -> Result<Vec<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return input_err("projection input must be finite");
    }
    let n_in = store.info(head.weight).shape[1];
    check_len("projection input", n_in, raw.len())?;
    Ok(normalize_guarded(&affine(store.get(head.weight), store.get(head.bias), raw)).0)
}

/// Backward of `y = u / ‖u‖`.
fn normalize_backward(y: &[f64], n: f64, dy: &[f64]) -> Vec<f64> {
    if n == 0.0 {
        return vec![0.0; y.len()];
    }
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(yi, gi)| (gi - yi * proj) / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel {
    pub arch: ClipArch,
    pub params: ParamStore,
    image_encoder: Mlp,
    text_embed: Option<TensorId>,
    text_encoder: Mlp,
    image_head: ProjectionHead,
    text_head: ProjectionHead,
}

/// Forward state for one view.
pub struct ViewCache {
    enc: MlpCache,
    encoded: Vec<f64>,
    embedding: Vec<f64>,
    norm: f64,
    tokens: Option<Vec<usize>>,
}

impl ViewCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

impl ClipModel {
    pub fn new(arch: ClipArch, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let image_encoder = Mlp::register(
            &mut params,
            "clip.image.encoder",
            &[arch.image_input_dim, arch.hidden_dim, arch.hidden_dim],
            rng,
        );
        let (text_embed, text_in) = match arch.text {
            TextEncoderKind::Tokens { vocab_size } => (
                Some(params.add_uniform("clip.text.embed", &[vocab_size, TOKEN_DIM], 1.0, rng)),
                TOKEN_DIM,
            ),
            TextEncoderKind::Dense { input_dim } => (None, input_dim),
        };
        let text_encoder = Mlp::register(
            &mut params,
            "clip.text.encoder",
            &[text_in, arch.hidden_dim, arch.hidden_dim],
            rng,
        );
        let image_head = ProjectionHead::register(
            &mut params,
            "clip.image.proj",
            arch.hidden_dim,
            arch.embed_dim,
            rng,
        );
        let text_head = ProjectionHead::register(
            &mut params,
            "clip.text.proj",
            arch.hidden_dim,
            arch.embed_dim,
            rng,
        );
        Self {
            arch,
            params,
            image_encoder,
            text_embed,
            text_encoder,
            image_head,
            text_head,
        }
    }

    pub fn image_head(&self) -> &ProjectionHead {
        &self.image_head
    }

    pub fn text_head(&self) -> &ProjectionHead {
        &self.text_head
    }

    fn head_forward(&self, head: &ProjectionHead, encoded: &[f64]) -> (Vec<f64>, f64) {
        normalize_guarded(&affine(
            self.params.get(head.weight),
            self.params.get(head.bias),
            encoded,
        ))
    }

    pub fn image_forward(&self, x: &[f64]) -> Result<ViewCache> {
        check_len("image features", self.arch.image_input_dim, x.len())?;
        let (encoded, enc) = self.image_encoder.forward_cached(&self.params, x);
        let (embedding, norm) = self.head_forward(&self.image_head, &encoded);
        Ok(ViewCache {
            enc,
            encoded,
            embedding,
            norm,
            tokens: None,
        })
    }

    pub fn text_forward(&self, t: &TextInput) -> Result<ViewCache> {
        let (input, tokens) = match (t, self.text_embed) {
            (TextInput::Tokens(ids), Some(table)) => {
                let table = self.params.get(table);
                let mut bag = vec![0.0; TOKEN_DIM];
                let vocab = table.len() / TOKEN_DIM;
                for &id in ids {
                    if id >= vocab {
                        return input_err(format!("token id {id} outside vocabulary of {vocab}"));
                    }
                    for (b, e) in bag
                        .iter_mut()
                        .zip(&table[id * TOKEN_DIM..(id + 1) * TOKEN_DIM])
                    {
                        *b += e;
                    }
                }
                if !ids.is_empty() {
                    bag.iter_mut().for_each(|b| *b /= ids.len() as f64);
                }
                (bag, Some(ids.clone()))
            }
            (TextInput::Dense(v), None) => {
                check_len("text features", self.text_encoder.input_dim(), v.len())?;
                (v.clone(), None)
            }
            _ => return input_err("text input kind does not match the text encoder"),
        };
        let (encoded, enc) = self.text_encoder.forward_cached(&self.params, &input);
        let (embedding, norm) = self.head_forward(&self.text_head, &encoded);
        Ok(ViewCache {
            enc,
            encoded,
            embedding,
            norm,
            tokens,
        })
    }

    pub fn embed_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.image_forward(x)?.embedding)
    }

    pub fn embed_text(&self, t: &TextInput) -> Result<Vec<f64>> {
        Ok(self.text_forward(t)?.embedding)
    }

    fn head_backward(
        &self,
        head: &ProjectionHead,
        cache: &ViewCache,
        d_emb: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let d_u = normalize_backward(&cache.embedding, cache.norm, d_emb);
        let mut d_enc = vec![0.0; cache.encoded.len()];
        let (dw, db) = self.params.slot_pair(grad, head.weight, head.bias);
        affine_backward(
            self.params.get(head.weight),
            &cache.encoded,
            &d_u,
            dw,
            db,
            Some(&mut d_enc),
        );
        d_enc
    }

    pub fn image_backward(&self, cache: &ViewCache, d_emb: &[f64], grad: &mut [f64]) {
        let d_enc = self.head_backward(&self.image_head, cache, d_emb, grad);
        self.image_encoder
            .backward(&self.params, &cache.enc, &d_enc, grad);
    }

    pub fn text_backward(&self, cache: &ViewCache, d_emb: &[f64], grad: &mut [f64]) {
        let d_enc = self.head_backward(&self.text_head, cache, d_emb, grad);
        let d_in = self
            .text_encoder
            .backward(&self.params, &cache.enc, &d_enc, grad);
        if let (Some(table), Some(ids)) = (self.text_embed, &cache.tokens) {
            if ids.is_empty() {
                return;
            }
            let inv = 1.0 / ids.len() as f64;
            let slot = self.params.slot(grad, table);
            for &id in ids {
                for (g, d) in slot[id * TOKEN_DIM..(id + 1) * TOKEN_DIM]
                    .iter_mut()
                    .zip(&d_in)
                {
                    *g += d * inv;
                }
            }
        }
    }
}

/// Which rendering of an instance to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    /// Unaugmented, used for evaluation and embedding export.
    Clean,
    /// Augmented view 0 or 1.
    Augmented(u8),
}

/// Supplies encoder inputs for each instance and view.
///
/// Implementations must be pure given the generator so batches are reproducible.
pub trait ViewSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn image_view(&self, index: usize, kind: ViewKind, rng: &mut Rng) -> Result<Vec<f64>>;
    fn text_view(&self, index: usize, kind: ViewKind, rng: &mut Rng) -> Result<TextInput>;
}

/// Dense image/text feature pairs; augmented views add isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePairs {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl FeaturePairs {
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            noise_std: self.noise_std,
        }
    }
}

fn jitter(v: &[f64], kind: ViewKind, std: f64, rng: &mut Rng) -> Vec<f64> {
    use rand::Rng as _;
    match kind {
        ViewKind::Clean => v.to_vec(),
        ViewKind::Augmented(_) => v
            .iter()
            .map(|x| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                x + std * z
            })
            .collect(),
    }
}

impl ViewSource for FeaturePairs {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image_view(&self, index: usize, kind: ViewKind, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(jitter(&self.images[index], kind, self.noise_std, rng))
    }

    fn text_view(&self, index: usize, kind: ViewKind, rng: &mut Rng) -> Result<TextInput> {
        Ok(TextInput::Dense(jitter(
            &self.texts[index],
            kind,
            self.noise_std,
            rng,
        )))
    }
}

/// Side of the down-sampled image fed to the image encoder.
pub const IMAGE_FEATURE_SIDE: usize = 16;
pub const IMAGE_FEATURE_DIM: usize = IMAGE_FEATURE_SIDE * IMAGE_FEATURE_SIDE;

/// Bilinear down-sample to `16 × 16`, flattened and standardized per image.
pub fn image_feature_vector(img: &ImageGrid) -> Result<Vec<f64>> {
    let small = resize_bilinear(img, IMAGE_FEATURE_SIDE, IMAGE_FEATURE_SIDE)?;
    let v: Vec<f64> = small.pixels.iter().map(|&p| f64::from(p)).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    Ok(if std > 1e-12 {
        v.iter().map(|x| (x - mean) / std).collect()
    } else {
        vec![0.0; v.len()]
    })
}

/// Radiographs paired with report text.
///
/// Image views are MIMIC preprocessing with augmentation (clean views skip it);
/// text view 1 is the text itself and view 2 goes through the augmenter, falling
/// back to the original when augmentation fails.
pub struct ReportImagePairs<'a> {
    pub images: Vec<ImageGrid>,
    pub texts: Vec<String>,
    pub vocab: &'a Vocab,
    pub image_aug: MimicAugConfig,
    pub text_aug: &'a dyn TextAugmenter,
}

impl ViewSource for ReportImagePairs<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image_view(&self, index: usize, kind: ViewKind, rng: &mut Rng) -> Result<Vec<f64>> {
        let cfg = match kind {
            ViewKind::Clean => MimicAugConfig {
                normalization: self.image_aug.normalization,
                ..MimicAugConfig::disabled()
            },
            ViewKind::Augmented(_) => self.image_aug,
        };
        image_feature_vector(&preprocess_mimic_image(&self.images[index], &cfg, rng)?)
    }

    fn text_view(&self, index: usize, kind: ViewKind, _rng: &mut Rng) -> Result<TextInput> {
        let text = &self.texts[index];
        let viewed = match kind {
            ViewKind::Augmented(1) => {
                augment_text(text, self.text_aug).unwrap_or_else(|_| text.clone())
            }
            _ => text.clone(),
        };
        Ok(TextInput::Tokens(self.vocab.encode(&viewed)))
    }
}

/// Shape of a shared-latent paired corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentCorpusSpec {
    pub pairs: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Noise added to each modality when the corpus is drawn.
    pub sample_noise: f64,
    /// Noise added per augmented view during training.
    pub view_noise: f64,
}

impl Default for LatentCorpusSpec {
    fn default() -> Self {
        Self {
            pairs: 256,
            latent_dim: 16,
            image_dim: 256,
            text_dim: 256,
            sample_noise: 0.05,
            view_noise: 0.05,
        }
    }
}

/// Draws `z ~ N(0, I)` and returns `(A z + e, B z + e')` pairs plus the latents.
///
/// `A` and `B` are fixed Gaussian maps scaled by `1/sqrt(latent_dim)`, drawn from `seed`,
/// so corpora with the same seed share the maps regardless of size.
pub fn latent_corpus(spec: &LatentCorpusSpec, seed: u64) -> (FeaturePairs, Vec<Vec<f64>>) {
    use rand::Rng as _;
    let gauss = |rng: &mut Rng| -> f64 { rng.sample(rand_distr::StandardNormal) };
    let mut maps = derived(seed, 0);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let mut draw_map = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                (0..spec.latent_dim)
                    .map(|_| gauss(&mut maps) * scale)
                    .collect()
            })
            .collect()
    };
    let a = draw_map(spec.image_dim);
    let b = draw_map(spec.text_dim);
    let mut rng = derived(seed, 1);
    let mut images = Vec::with_capacity(spec.pairs);
    let mut texts = Vec::with_capacity(spec.pairs);
    let mut latents = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| gauss(&mut rng)).collect();
        images.push(
            a.iter()
                .map(|row| dot(row, &z) + spec.sample_noise * gauss(&mut rng))
                .collect(),
        );
        texts.push(
            b.iter()
                .map(|row| dot(row, &z) + spec.sample_noise * gauss(&mut rng))
                .collect(),
        );
        latents.push(z);
    }
    (
        FeaturePairs {
            images,
            texts,
            noise_std: spec.view_noise,
        },
        latents,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipTrainConfig {
    pub batch_size: usize,
    pub learn_rate: f64,
    pub weight_decay: f64,
    pub total_epochs: u32,
    pub warmup_epochs: u32,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for ClipTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learn_rate: 5e-5,
            weight_decay: 1e-4,
            total_epochs: 5,
            warmup_epochs: 1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipEpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub retrieval_top1: f64,
}

impl ClipEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_loss,retrieval_top1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.retrieval_top1
        )
    }
}

#[derive(Clone, Debug)]
pub struct ClipTrainOutcome {
    pub model: ClipModel,
    /// Parameters from the epoch with the lowest validation loss.
    pub best: ClipModel,
    pub log: Vec<ClipEpochLog>,
}

/// Two image and two text views of one instance.
type Views = (Vec<f64>, Vec<f64>, TextInput, TextInput);

/// Four views per instance, seeded per `(seed, epoch, instance)`.
fn build_views(
    source: &dyn ViewSource,
    idx: &[usize],
    seed: u64,
    epoch: u64,
) -> Result<Vec<Views>> {
    idx.iter()
        .map(|&i| {
            let mut rng = derived(seed ^ (epoch << 40), i as u64);
            Ok((
                source.image_view(i, ViewKind::Augmented(0), &mut rng)?,
                source.image_view(i, ViewKind::Augmented(1), &mut rng)?,
                source.text_view(i, ViewKind::Augmented(0), &mut rng)?,
                source.text_view(i, ViewKind::Augmented(1), &mut rng)?,
            ))
        })
        .collect()
}

/// Loss and parameter gradient for one batch of instances.
pub fn batch_loss_and_grad(
    model: &ClipModel,
    views: &[(Vec<f64>, Vec<f64>, TextInput, TextInput)],
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(f64, LossTerms, Vec<f64>)> {
    let mut c_img1 = Vec::with_capacity(views.len());
    let mut c_img2 = Vec::with_capacity(views.len());
    let mut c_txt1 = Vec::with_capacity(views.len());
    let mut c_txt2 = Vec::with_capacity(views.len());
    for (i1, i2, t1, t2) in views {
        c_img1.push(model.image_forward(i1)?);
        c_img2.push(model.image_forward(i2)?);
        c_txt1.push(model.text_forward(t1)?);
        c_txt2.push(model.text_forward(t2)?);
    }
    let emb = |c: &[ViewCache]| c.iter().map(|v| v.embedding.clone()).collect::<Vec<_>>();
    let batch = ViewBatch {
        img1: emb(&c_img1),
        img2: emb(&c_img2),
        txt1: emb(&c_txt1),
        txt2: emb(&c_txt2),
    };
    let (loss, terms, g) = combined_loss(&batch, weights)?;
    let mut grad = Vec::new();
    if want_grad {
        grad = model.params.zeros_like();
        for k in 0..views.len() {
            model.image_backward(&c_img1[k], &g.img1[k], &mut grad);
            model.image_backward(&c_img2[k], &g.img2[k], &mut grad);
            model.text_backward(&c_txt1[k], &g.txt1[k], &mut grad);
            model.text_backward(&c_txt2[k], &g.txt2[k], &mut grad);
        }
    }
    Ok((loss, terms, grad))
}

/// Fraction of images whose most similar text (clean views) is their own.
pub fn retrieval_top1(model: &ClipModel, source: &dyn ViewSource) -> Result<f64> {
    let n = source.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = seeded(0);
    let imgs: Vec<Vec<f64>> = (0..n)
        .map(|i| model.embed_image(&source.image_view(i, ViewKind::Clean, &mut rng)?))
        .collect::<Result<_>>()?;
    let txts: Vec<Vec<f64>> = (0..n)
        .map(|i| model.embed_text(&source.text_view(i, ViewKind::Clean, &mut rng)?))
        .collect::<Result<_>>()?;
    Ok(retrieval_top1_from_embeddings(&imgs, &txts))
}

pub fn similarity_matrix(imgs: &[Vec<f64>], txts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    imgs.iter()
        .map(|a| txts.iter().map(|b| dot(a, b)).collect())
        .collect()
}

pub fn retrieval_top1_from_embeddings(imgs: &[Vec<f64>], txts: &[Vec<f64>]) -> f64 {
    let s = similarity_matrix(imgs, txts);
    let hits = s
        .iter()
        .enumerate()
        .filter(|(i, row)| argmax(row) == *i)
        .count();
    hits as f64 / imgs.len().max(1) as f64
}

fn mean_batched_loss(
    model: &ClipModel,
    source: &dyn ViewSource,
    cfg: &ClipTrainConfig,
) -> Result<f64> {
    let idx: Vec<usize> = (0..source.len()).collect();
    let views = build_views(source, &idx, cfg.seed ^ 0x5_EED0_F7A1, 0)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in views.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        total += batch_loss_and_grad(model, chunk, &cfg.weights, false)?.0 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Trains encoders and heads with AdamW; epoch learning rates follow linear warmup then stay constant.
pub fn train_clip(
    arch: ClipArch,
    train: &dyn ViewSource,
    val: &dyn ViewSource,
    cfg: &ClipTrainConfig,
) -> Result<ClipTrainOutcome> {
    cfg.weights.validate()?;
    if cfg.batch_size < 2 {
        return input_err("CLIP batch size must be at least 2");
    }
    if train.len() < 2 * cfg.batch_size {
        return input_err(format!(
            "CLIP training needs at least {} pairs, got {}",
            2 * cfg.batch_size,
            train.len()
        ));
    }
    let mut rng = seeded(cfg.seed);
    let mut model = ClipModel::new(arch, &mut rng);
    let schedule = WarmupSchedule {
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.total_epochs,
        base_lr: cfg.learn_rate,
    };
    let mut opt = AdamWConfig::new(cfg.learn_rate, cfg.weight_decay)?;
    let mut state = AdamWState::new(model.params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..cfg.total_epochs {
        opt.learn_rate = warmup_lr(&schedule, epoch)?;
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let views = build_views(train, chunk, cfg.seed, u64::from(epoch) + 1)?;
            let (loss, _, grad) = batch_loss_and_grad(&model, &views, &cfg.weights, true)?;
            adamw_step(model.params.data_mut(), &grad, &mut state, &opt)?;
            train_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        train_loss /= seen.max(1) as f64;
        let (val_loss, retrieval) = if val.len() >= 2 {
            (
                mean_batched_loss(&model, val, cfg)?,
                retrieval_top1(&model, val)?,
            )
        } else {
            (train_loss, retrieval_top1(&model, train)?)
        };
        log.push(ClipEpochLog {
            epoch,
            lr: opt.learn_rate,
            train_loss,
            val_loss,
            retrieval_top1: retrieval,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
        }
    }
    let mut best_model = model.clone();
    if let Some((_, p)) = best {
        best_model.params = p;
    }
    Ok(ClipTrainOutcome {
        model,
        best: best_model,
        log,
    })
}
