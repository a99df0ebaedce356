//! Flag structs doubling as config-file sections. Each field is optional so a
//! flag can override the file and the file can fill in missing flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use intra_core::trainer::TrainConfig;

/// Bad flags or config contents; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

pub trait Section: DeserializeOwned + Default {
    fn config_path(&self) -> Option<&Path>;
    /// Fields set on `self` win over `file`.
    fn overlay(self, file: Self) -> Self;
    fn resolve(&mut self, base: &Path);
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

macro_rules! section {
    ($(#[$doc:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty),* $(,)? } paths [$($p:ident),*]) => {
        $(#[$doc])*
        #[derive(Debug, Default, clap::Args, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            /// TOML config file; flags override its values.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $(
                $(#[$fm])*
                #[arg(long)]
                pub $field: Option<$ty>,
            )*
        }

        impl Section for $name {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn overlay(self, file: Self) -> Self {
                $name {
                    config: self.config,
                    $($field: self.$field.or(file.$field),)*
                }
            }

            fn resolve(&mut self, base: &Path) {
                $(resolve_opt(base, &mut self.$p);)*
            }
        }
    };
}

section!(ToyDataArgs {
    /// Output directory.
    out: PathBuf,
    interactions: usize,
    objects: usize,
    /// Exocentric training images per (interaction, object).
    images_per_pair: usize,
    /// Egocentric test images per pair (default: max(2, images_per_pair / 4)).
    test_images_per_pair: usize,
    /// Image side in pixels.
    size: usize,
    seed: u64,
} paths [out]);

section!(BuildRelmapArgs {
    /// llm | wordnet | word2vec | cooccurrence
    mode: String,
    /// Transcript cache (llm) or directory of `<mode>.json` score tables.
    fixtures: PathBuf,
    /// Explicit score table for a similarity mode.
    scores: PathBuf,
    /// Similarity threshold for baseline modes (default 0.5).
    threshold: f64,
    /// Newline-separated label file (default: dataset interactions, else the 36 AGD20K labels).
    labels: PathBuf,
    /// Dataset root to take the label vocabulary from.
    data: PathBuf,
    /// Output JSON path.
    out: PathBuf,
} paths [fixtures, scores, labels, data, out]);

section!(GenSynonymsArgs {
    labels: PathBuf,
    data: PathBuf,
    /// JSON object mapping each label to a context object.
    contexts: PathBuf,
    /// Replay a saved LLM response instead of calling the endpoint.
    response: PathBuf,
    /// Synonyms per label.
    k: usize,
    /// Substitution probability during training.
    p: f64,
    out: PathBuf,
} paths [labels, data, contexts, response, out]);

section!(EvalArgs {
    data: PathBuf,
    checkpoint: PathBuf,
    /// Directory of prediction PNGs mirroring the test image layout.
    predictions: PathBuf,
    out_dir: PathBuf,
} paths [data, checkpoint, predictions, out_dir]);

section!(GroundArgs {
    checkpoint: PathBuf,
    image: PathBuf,
    /// Interaction text; any free text is accepted.
    text: String,
    /// Overlay PNG path; the raw map is written next to it as `<stem>_map.png`.
    overlay: PathBuf,
    /// jet | turbo | viridis | inferno | gray
    colormap: String,
    alpha: f64,
} paths [checkpoint, image, overlay]);

section!(ExportArgs {
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
} paths [checkpoint, data, out]);

/// Train flags override the `[train]` table, which uses the full training
/// config schema.
#[derive(Debug, Default, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub relmap: Option<PathBuf>,
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub struct ConfigFile;

impl ConfigFile {
    /// Reads `[section]` from the config (if any) and applies flag overrides.
    pub fn merge<S: Section>(args: S, section: &str) -> anyhow::Result<S> {
        let Some(path) = args.config_path().map(Path::to_path_buf) else {
            return Ok(args);
        };
        let file = match table(&path, section)? {
            Some(t) => {
                let mut s: S = t
                    .try_into()
                    .map_err(|e| usage(format!("{} [{section}]: {e}", path.display())))?;
                s.resolve(path.parent().unwrap_or(Path::new(".")));
                s
            }
            None => S::default(),
        };
        Ok(args.overlay(file))
    }
}

fn table(path: &Path, section: &str) -> anyhow::Result<Option<toml::Table>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    match doc.remove(section) {
        None => Ok(None),
        Some(toml::Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(usage(format!("{}: `{section}` must be a table", path.display())).into()),
    }
}

pub fn train_config(args: TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => match table(path, "train")? {
            Some(t) => {
                let base = path.parent().unwrap_or(Path::new("."));
                let text = toml::to_string(&t)?;
                TrainConfig::from_toml_str(&text, base).map_err(|e| usage(format!("{} [train]: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        },
        None => TrainConfig::default(),
    };
    if let Some(v) = args.data {
        cfg.data = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.relmap = args.relmap.or(cfg.relmap);
    cfg.synonyms = args.synonyms.or(cfg.synonyms);
    cfg.resume = args.resume.or(cfg.resume);
    Ok(cfg)
}
