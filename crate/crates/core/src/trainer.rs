//! Training loop, inference and embedding export.
//!
//! One step: draw a batch of exocentric views, pick each view's
//! conditioning text (possibly a synonym), run the head per view, pool the
//! encoder features under the map, project, and minimize the total
//! contrastive loss using the ORIGINAL interaction labels. Only the head and
//! projector are trained; encoder checksums are verified after the run.
//!
//! Views are forwarded and back-propagated in parallel, each on its own
//! tape. Per-view gradients are summed in view order so results do not
//! depend on the worker count.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::dataset::{make_batches, rng_for, scan_dataset, AugmentPolicy, DatasetIndex, Mode, Sampler, Split, View};
use crate::encoders::{EncoderConfig, EncoderRegistry, FeatureGrid, ImageEncoder, TextEncoder};
use crate::error::{Error, IoContext, Result};
use crate::head::{AffordanceHead, AffordanceMap, HeadConfig};
use crate::imaging::{GrayMap, RgbImage};
use crate::losses::{l_total, pool_features_tape, LossConfig, ProjectedEmbedding, Projector, ProjectorConfig, TotalLoss};
use crate::metrics::{evaluate_dataset, EvalPair, EvalReport};
use crate::params::{Adam, GradBuffer, ParamStore};
use crate::relmap::{Provenance, RelationshipMap};
use crate::synonyms::{sample_condition_text, SynonymTable};
use crate::tensor::Matrix;

/// Head sizes that are not implied by the encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    pub layers: usize,
    pub heads: usize,
    /// Defaults to `2 * dim`.
    pub ffn_hidden: Option<usize>,
    /// Defaults to `dim / 2`.
    pub conv_hidden: Option<usize>,
    pub positional: bool,
}

impl Default for HeadSettings {
    fn default() -> Self {
        HeadSettings {
            layers: 4,
            heads: 4,
            ffn_hidden: None,
            conv_hidden: None,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset root.
    pub data: PathBuf,
    /// Output directory for checkpoints and the loss curve.
    pub out_dir: PathBuf,
    /// Relationship map; without one every class is related only to itself.
    pub relmap: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size_samples: usize,
    pub views: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub encoder: EncoderConfig,
    pub head: HeadSettings,
    /// Projector hidden width; defaults to the encoder dim.
    pub projector_hidden: Option<usize>,
    pub projector_output: usize,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    /// Divide the summed loss by the number of views.
    pub mean_over_views: bool,
    /// Continue from this checkpoint's parameters, optimizer state and step.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            relmap: None,
            synonyms: None,
            steps: 500,
            lr: 2e-4,
            batch_size_samples: 16,
            views: 2,
            seed: 0,
            sampler: Sampler::PairUniform,
            loss: LossConfig::default(),
            augment: AugmentPolicy::toy(),
            encoder: EncoderConfig::default(),
            head: HeadSettings::default(),
            projector_hidden: None,
            projector_output: 128,
            checkpoint_every: 0,
            grad_clip: None,
            mean_over_views: false,
            resume: None,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl TrainConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// Parses TOML text, resolving relative paths against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        resolve(base, &mut cfg.data);
        resolve(base, &mut cfg.out_dir);
        for p in [&mut cfg.relmap, &mut cfg.synonyms, &mut cfg.resume].into_iter().flatten() {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size_samples < 2 {
            return Err(Error::Config("batch_size_samples must be at least 2".into()));
        }
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        if self.augment.crop_size % self.encoder.patch != 0 {
            return Err(Error::Config(format!(
                "crop size {} is not divisible by patch size {}",
                self.augment.crop_size, self.encoder.patch
            )));
        }
        self.head_config().validate()
    }

    pub fn head_config(&self) -> HeadConfig {
        let d = self.encoder.dim;
        let grid = self.augment.crop_size / self.encoder.patch.max(1);
        HeadConfig {
            dim: d,
            text_dim: self.encoder.text_dim,
            grid_height: grid,
            grid_width: grid,
            layers: self.head.layers,
            heads: self.head.heads,
            ffn_hidden: self.head.ffn_hidden.unwrap_or(2 * d),
            conv_hidden: self.head.conv_hidden.unwrap_or((d / 2).max(1)),
            positional: self.head.positional,
        }
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig {
            input: self.encoder.dim,
            hidden: self.projector_hidden.unwrap_or(self.encoder.dim),
            output: self.projector_output,
        }
    }
}

/// Inputs for one view: frozen image features and the text class token.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub grid: FeatureGrid,
    pub class_token: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: TotalLoss,
    pub grads: GradBuffer,
    pub z: Matrix,
    pub degenerate_maps: usize,
}

fn view_forward(head: &AffordanceHead, projector: &Projector, store: &ParamStore, input: &ViewInput) -> Result<(Tape, Var, bool)> {
    let mut tape = Tape::new();
    let out = head.forward_tape(&mut tape, store, &input.grid, &input.class_token)?;
    let g = tape.input(input.grid.values.clone());
    let f = pool_features_tape(&mut tape, g, out.map)?;
    let z = projector.forward_tape(&mut tape, store, f)?;
    Ok((tape, z, out.degenerate))
}

/// Embeddings of every view, stacked as rows.
pub fn embed_views(head: &AffordanceHead, projector: &Projector, store: &ParamStore, views: &[ViewInput]) -> Result<Matrix> {
    let rows = crate::par::try_map(views, |v| {
        let (tape, z, _) = view_forward(head, projector, store, v)?;
        Ok::<_, Error>(tape.value(z).data.clone())
    })?;
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_vec(rows.len(), cols, rows.concat())
}

/// Total loss over the views and its gradient with respect to every
/// parameter in `store`. `labels` index `relmap.labels`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    head: &AffordanceHead,
    projector: &Projector,
    store: &ParamStore,
    views: &[ViewInput],
    labels: &[usize],
    objects: &[usize],
    relmap: &RelationshipMap,
    cfg: &LossConfig,
) -> Result<StepResult> {
    let forwards = crate::par::try_map(views, |v| view_forward(head, projector, store, v))?;
    let cols = forwards.first().map_or(0, |(t, z, _)| t.value(*z).cols);
    let mut z = Matrix::zeros(forwards.len(), cols);
    for (i, (tape, var, _)) in forwards.iter().enumerate() {
        z.row_mut(i).copy_from_slice(&tape.value(*var).data);
    }
    let loss = l_total(&z, labels, objects, relmap, cfg)?;
    let jobs: Vec<(usize, &(Tape, Var, bool))> = forwards.iter().enumerate().collect();
    let per_view = crate::par::map(&jobs, |(i, (tape, var, _))| {
        let seed = Matrix::row_vector(loss.grad.row(*i).to_vec());
        let mut buf = store.zero_grads();
        tape.backward_into(&[(*var, &seed)], &mut buf);
        buf
    });
    let mut grads = store.zero_grads();
    for g in &per_view {
        grads.merge(g);
    }
    Ok(StepResult {
        degenerate_maps: forwards.iter().filter(|f| f.2).count(),
        loss,
        grads,
        z,
    })
}

/// Loss only (used by gradient checks).
#[allow(clippy::too_many_arguments)]
pub fn loss_value(
    head: &AffordanceHead,
    projector: &Projector,
    store: &ParamStore,
    views: &[ViewInput],
    labels: &[usize],
    objects: &[usize],
    relmap: &RelationshipMap,
    cfg: &LossConfig,
) -> Result<f64> {
    let z = embed_views(head, projector, store, views)?;
    Ok(l_total(&z, labels, objects, relmap, cfg)?.total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub inter: f64,
    pub obj: f64,
    pub degenerate_maps: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub losses: Vec<LossRecord>,
    pub encoder_checksums: [String; 2],
}

/// Trained head and projector with their frozen encoders.
pub struct Model {
    pub head: AffordanceHead,
    pub projector: Projector,
    pub store: ParamStore,
    pub image_encoder: Box<dyn ImageEncoder>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub augment: AugmentPolicy,
    pub interactions: Vec<String>,
    pub objects: Vec<String>,
}

impl Model {
    pub fn from_checkpoint(ckpt: Checkpoint, registry: &EncoderRegistry) -> Result<Self> {
        let image_encoder = registry.image_encoder(&ckpt.encoder)?;
        let text_encoder = registry.text_encoder(&ckpt.encoder)?;
        let sums = [image_encoder.checksum(), text_encoder.checksum()];
        if sums != ckpt.encoder_checksums {
            return Err(Error::Checkpoint("encoder weights differ from the ones used in training".into()));
        }
        Ok(Model {
            head: AffordanceHead::bind(ckpt.head.clone(), &ckpt.params)?,
            projector: Projector::bind(ckpt.projector.clone(), &ckpt.params)?,
            store: ckpt.params,
            image_encoder,
            text_encoder,
            augment: ckpt.augment,
            interactions: ckpt.interactions,
            objects: ckpt.objects,
        })
    }

    pub fn load(path: &Path, registry: &EncoderRegistry) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, registry)
    }

    /// Affordance map for free-form interaction text. The whole image is
    /// resized to the training crop size.
    pub fn ground(&self, image: &RgbImage, text: &str) -> Result<AffordanceMap> {
        let size = self.augment.crop_size;
        let grid = self.image_encoder.encode(&image.resize(size, size))?;
        let token = self.text_encoder.encode(text)?;
        self.head.forward(&self.store, &grid, &token.class_token)
    }

    /// Projected embedding of an already preprocessed image.
    pub fn embed(&self, image: &RgbImage, text: &str) -> Result<ProjectedEmbedding> {
        let view = ViewInput {
            grid: self.image_encoder.encode(image)?,
            class_token: self.text_encoder.encode(text)?.class_token,
        };
        let (tape, z, _) = view_forward(&self.head, &self.projector, &self.store, &view)?;
        ProjectedEmbedding::new(tape.value(z).data.clone())
    }
}

fn write_loss_rows(path: &Path, rows: &[LossRecord], append: bool) -> Result<()> {
    // an empty file still needs the header
    let has_rows = fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .at(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!(append && has_rows)).from_writer(file);
    for r in rows {
        w.serialize(r).at(path)?;
    }
    w.flush().at(path)
}

fn relmap_indices(index: &DatasetIndex, relmap: &RelationshipMap) -> Result<Vec<usize>> {
    index
        .interactions
        .iter()
        .map(|l| {
            relmap
                .index_of(l)
                .ok_or_else(|| Error::UnknownLabel(format!("{l} (missing from the relationship map)")))
        })
        .collect()
}

/// Everything `train` needs besides the config paths; lets callers supply
/// in-memory maps.
pub struct TrainInputs {
    pub index: DatasetIndex,
    pub relmap: RelationshipMap,
    pub synonyms: SynonymTable,
}

impl TrainInputs {
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let index = scan_dataset(&config.data)?;
        let relmap = match &config.relmap {
            Some(p) => RelationshipMap::load(p)?,
            None => {
                log::warn!("no relationship map configured; using the identity map");
                RelationshipMap::identity(index.interactions.clone(), Provenance::Manual)
            }
        };
        let synonyms = match &config.synonyms {
            Some(p) => SynonymTable::load(p)?,
            None => SynonymTable::empty(0.0),
        };
        Ok(TrainInputs {
            index,
            relmap,
            synonyms,
        })
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let inputs = TrainInputs::from_config(config)?;
    train_with(config, &inputs, &EncoderRegistry::default(), |_| {})
}

/// Runs training; `progress` sees every step's record as it completes.
pub fn train_with<F>(config: &TrainConfig, inputs: &TrainInputs, registry: &EncoderRegistry, mut progress: F) -> Result<TrainOutcome>
where
    F: FnMut(&LossRecord),
{
    config.validate()?;
    let TrainInputs {
        index,
        relmap,
        synonyms,
    } = inputs;
    relmap.validate()?;
    let to_relmap = relmap_indices(index, relmap)?;
    synonyms.validate()?;
    synonyms.validate_against(&index.interactions)?;

    let image_encoder = registry.image_encoder(&config.encoder)?;
    let text_encoder = registry.text_encoder(&config.encoder)?;
    if image_encoder.dim() != config.encoder.dim || text_encoder.dim() != config.encoder.text_dim {
        return Err(Error::Config("encoder dims do not match the configuration".into()));
    }
    let checksums_before = [image_encoder.checksum(), text_encoder.checksum()];

    let head_cfg = config.head_config();
    let proj_cfg = config.projector_config();
    let (mut store, mut adam, start) = match &config.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.head != head_cfg || ckpt.projector != proj_cfg || ckpt.encoder != config.encoder {
                return Err(Error::Checkpoint("resume checkpoint was built with a different configuration".into()));
            }
            let adam = ckpt.optimizer.clone().unwrap_or_else(|| Adam::new(config.lr, &ckpt.params));
            (ckpt.params, adam, ckpt.step)
        }
        None => {
            let mut rng = rng_for(config.seed, "init");
            let mut store = ParamStore::new();
            AffordanceHead::init(head_cfg.clone(), &mut store, &mut rng)?;
            Projector::init(proj_cfg.clone(), &mut store, &mut rng)?;
            let adam = Adam::new(config.lr, &store);
            (store, adam, 0)
        }
    };
    adam.lr = config.lr;
    let head = AffordanceHead::bind(head_cfg.clone(), &store)?;
    let projector = Projector::bind(proj_cfg.clone(), &store)?;

    let stream = make_batches(
        index,
        config.batch_size_samples,
        config.views,
        config.augment,
        config.seed,
        config.sampler,
        Mode::Train,
    )?;
    fs::create_dir_all(&config.out_dir).at(&config.out_dir)?;
    let loss_curve = config.out_dir.join("loss_curve.csv");
    if start == 0 {
        write_loss_rows(&loss_curve, &[], false)?;
    }

    let snapshot = |store: &ParamStore, adam: &Adam, step: usize| Checkpoint {
        version: CHECKPOINT_VERSION,
        step,
        seed: config.seed,
        head: head_cfg.clone(),
        projector: proj_cfg.clone(),
        encoder: config.encoder.clone(),
        augment: config.augment,
        interactions: index.interactions.clone(),
        objects: index.objects.clone(),
        encoder_checksums: checksums_before.clone(),
        params: store.clone(),
        optimizer: Some(adam.clone()),
    };

    let mut token_cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut losses = Vec::new();
    for k in start..config.steps {
        let step = k + 1;
        let batch = stream.batch(k)?;
        let mut text_rng = rng_for(config.seed, &format!("text/{k}"));
        let texts: Vec<String> = batch
            .interaction_ids
            .iter()
            .map(|&y| sample_condition_text(&index.interactions[y], synonyms, &mut text_rng))
            .collect();
        for t in &texts {
            if !token_cache.contains_key(t) {
                token_cache.insert(t.clone(), text_encoder.encode(t)?.class_token);
            }
        }
        let grids = crate::par::try_map(&batch.images, |img| image_encoder.encode(img))?;
        let views: Vec<ViewInput> = grids
            .into_iter()
            .zip(&texts)
            .map(|(grid, t)| ViewInput {
                grid,
                class_token: token_cache[t].clone(),
            })
            .collect();
        let labels: Vec<usize> = batch.interaction_ids.iter().map(|&y| to_relmap[y]).collect();
        let result = loss_and_grads(&head, &projector, &store, &views, &labels, &batch.object_ids, relmap, &config.loss)
            .map_err(|e| Error::Training {
                step,
                cause: e.to_string(),
            })?;
        let StepResult {
            loss,
            mut grads,
            degenerate_maps,
            ..
        } = result;
        if !loss.total.is_finite() {
            return Err(Error::Training {
                step,
                cause: format!("non-finite loss {}", loss.total),
            });
        }
        let scale = if config.mean_over_views { 1.0 / views.len() as f64 } else { 1.0 };
        if scale != 1.0 {
            grads.scale(scale);
        }
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                cause: "non-finite gradient".into(),
            });
        }
        if let Some(clip) = config.grad_clip {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        adam.update(&mut store, &grads);

        let record = LossRecord {
            step,
            total: loss.total * scale,
            inter: loss.inter * scale,
            obj: loss.obj * scale,
            degenerate_maps,
            grad_norm,
        };
        write_loss_rows(&loss_curve, std::slice::from_ref(&record), true)?;
        progress(&record);
        losses.push(record);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.steps {
            snapshot(&store, &adam, step).save(&config.out_dir.join(format!("checkpoint_step{step}.json")))?;
        }
    }

    let checksums_after = [image_encoder.checksum(), text_encoder.checksum()];
    if checksums_after != checksums_before {
        return Err(Error::Training {
            step: config.steps,
            cause: "encoder weights changed during training".into(),
        });
    }
    let checkpoint = config.out_dir.join("checkpoint_final.json");
    snapshot(&store, &adam, config.steps.max(start)).save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_curve,
        losses,
        encoder_checksums: checksums_after,
    })
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).at(path)?;
    r.deserialize().map(|row| row.at(path)).collect()
}

// ---------------------------------------------------------------------------
// Evaluation and export

/// Predicts a map for every egocentric test image with GT and scores it.
pub fn evaluate_model(model: &Model, index: &DatasetIndex) -> Result<EvalReport> {
    let items = index.eval_samples();
    if items.is_empty() {
        return Err(Error::validation("dataset has no egocentric test images with GT masks"));
    }
    let pairs = crate::par::try_map(&items, |(s, mask)| {
        let image = RgbImage::load(&s.image_path)?;
        let map = model.ground(&image, &s.interaction)?;
        Ok::<_, Error>(EvalPair {
            id: index.relative(&s.image_path),
            interaction: s.interaction.clone(),
            object: s.object.clone(),
            gt: crate::dataset::load_gt_mask(mask)?,
            pred: GrayMap::new(map.width, map.height, map.values)?,
        })
    })?;
    evaluate_dataset(&pairs)
}

/// Scores precomputed prediction maps stored under `predictions` with the
/// same relative paths as the egocentric images.
pub fn evaluate_prediction_dir(index: &DatasetIndex, predictions: &Path) -> Result<EvalReport> {
    let items = index.eval_samples();
    if items.is_empty() {
        return Err(Error::validation("dataset has no egocentric test images with GT masks"));
    }
    let pairs = crate::par::try_map(&items, |(s, mask)| {
        let rel = index.relative(&s.image_path);
        let pred_path = predictions.join(&rel).with_extension("png");
        if !pred_path.is_file() {
            return Err(Error::validation(format!("missing prediction {}", pred_path.display())));
        }
        Ok(EvalPair {
            id: rel,
            interaction: s.interaction.clone(),
            object: s.object.clone(),
            gt: crate::dataset::load_gt_mask(mask)?,
            pred: GrayMap::load(&pred_path)?,
        })
    })?;
    evaluate_dataset(&pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample: String,
    pub interaction: String,
    pub object: String,
    pub z: Vec<f64>,
}

/// Projected embedding of every exocentric training image (center crop,
/// original label as text).
pub fn export_embeddings(model: &Model, index: &DatasetIndex) -> Result<Vec<EmbeddingRow>> {
    let samples: Vec<_> = index
        .samples
        .iter()
        .filter(|s| s.view == View::Exocentric && s.split == Split::Train)
        .collect();
    let off = model.augment.center_offset();
    crate::par::try_map(&samples, |s| {
        let image = RgbImage::load(&s.image_path)?;
        let view = model.augment.apply(&image, off, off, false)?;
        let z = model.embed(&view, &s.interaction)?;
        Ok(EmbeddingRow {
            sample: index.relative(&s.image_path),
            interaction: s.interaction.clone(),
            object: s.object.clone(),
            z: z.into_inner(),
        })
    })
}

pub fn write_embeddings_csv(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    let dim = rows.first().map_or(0, |r| r.z.len());
    let mut header = vec!["sample".to_string(), "interaction".into(), "object".into()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header).at(path)?;
    for r in rows {
        let mut rec = vec![r.sample.clone(), r.interaction.clone(), r.object.clone()];
        rec.extend(r.z.iter().map(|v| format!("{v:.17e}")));
        w.write_record(&rec).at(path)?;
    }
    w.flush().at(path)
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::ReaderBuilder::new().from_path(path).at(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.at(path)?;
        let z = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| Error::validation(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(EmbeddingRow {
            sample: rec[0].to_string(),
            interaction: rec[1].to_string(),
            object: rec[2].to_string(),
            z,
        });
    }
    Ok(out)
}

/// Indices of the `ceil(fraction * n)` largest map cells.
pub fn top_cells(values: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * values.len() as f64).ceil() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Intersection over union of a cell set and a boolean cell mask.
pub fn cell_iou(cells: &[usize], mask: &[bool]) -> f64 {
    let mut chosen = vec![false; mask.len()];
    for &c in cells {
        chosen[c] = true;
    }
    let inter = chosen.iter().zip(mask).filter(|(a, b)| **a && **b).count();
    let union = chosen.iter().zip(mask).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_resolve() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let h = cfg.head_config();
        assert_eq!((h.grid_height, h.grid_width, h.ffn_hidden, h.conv_hidden), (6, 6, 64, 16));
        assert_eq!(cfg.projector_config().output, 128);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<TrainConfig>("stepz = 3").is_err());
    }

    #[test]
    fn top_cells_and_iou() {
        let v = [0.1, 0.9, 0.5, 0.9];
        assert_eq!(top_cells(&v, 0.5), vec![1, 3]);
        assert_eq!(cell_iou(&[1, 3], &[false, true, false, true]), 1.0);
        assert!((cell_iou(&[1, 2], &[false, true, false, true]) - 1.0 / 3.0).abs() < 1e-12);
    }
}
