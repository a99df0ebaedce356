//! `intra`: command-line front end for dataset generation, relationship-map
//! and synonym building, training, evaluation, grounding and export.
//!
//! Every subcommand takes `--config <file>`: a TOML file with one optional
//! table per subcommand (`[toy_data]`, `[build_relmap]`, `[gen_synonyms]`,
//! `[train]`, `[eval]`, `[ground]`, `[export_embeddings]`). Flags override
//! the file; relative paths in the file resolve against its directory.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use intra_core::dataset::{generate_toy_dataset, scan_dataset, ToySpec, AGD20K_INTERACTIONS};
use intra_core::encoders::EncoderRegistry;
use intra_core::imaging::RgbImage;
use intra_core::overlay::{render_overlay, OverlaySpec};
use intra_core::relmap::{
    build_map_llm, build_map_similarity, HttpOracle, NoOracle, PairOracle, Provenance, ScoreTable, TranscriptStore,
};
use intra_core::synonyms::{build_synonym_table, DEFAULT_K, DEFAULT_P};
use intra_core::trainer::{
    evaluate_model, evaluate_prediction_dir, export_embeddings, train_with, write_embeddings_csv, Model, TrainInputs,
};

use config::{
    BuildRelmapArgs, ConfigFile, EvalArgs, ExportArgs, GenSynonymsArgs, GroundArgs, ToyDataArgs, TrainArgs,
};

/// Default similarity threshold for the baseline relationship maps.
const BASELINE_THRESHOLD: f64 = 0.5;

#[derive(Parser)]
#[command(name = "intra", version, about = "Relationship-guided affordance grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy dataset.
    ToyData(ToyDataArgs),
    /// Build an interaction-relationship map (LLM transcripts or a similarity baseline).
    BuildRelmap(BuildRelmapArgs),
    /// Generate the synonym table used for text augmentation.
    GenSynonyms(GenSynonymsArgs),
    /// Train the grounding head and projector.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of prediction maps against GT.
    Eval(EvalArgs),
    /// Ground one interaction in one image and render an overlay.
    Ground(GroundArgs),
    /// Export projected embeddings of the exocentric training images.
    ExportEmbeddings(ExportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let validation = err
                .chain()
                .any(|c| c.downcast_ref::<intra_core::Error>().is_some_and(|e| e.is_validation()))
                || err.downcast_ref::<config::UsageError>().is_some();
            eprintln!("error: {}", one_line(&err));
            if validation {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn one_line(err: &anyhow::Error) -> String {
    err.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ").replace('\n', " ")
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::ToyData(a) => cmd_toy_data(a),
        Command::BuildRelmap(a) => cmd_build_relmap(a),
        Command::GenSynonyms(a) => cmd_gen_synonyms(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ground(a) => cmd_ground(a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(a),
    }
}

fn cmd_toy_data(args: ToyDataArgs) -> anyhow::Result<()> {
    let a = ConfigFile::merge(args, "toy_data")?;
    let out = a.out.clone().ok_or_else(|| config::usage("toy-data needs --out"))?;
    let mut spec = ToySpec::with_counts(
        a.interactions.unwrap_or(4),
        a.objects.unwrap_or(3),
        a.images_per_pair.unwrap_or(16),
        a.size.unwrap_or(84),
        a.seed.unwrap_or(7),
    );
    spec.test_images_per_pair = a.test_images_per_pair;
    let toy = generate_toy_dataset(&spec, &out)?;
    let train = toy.manifest.iter().filter(|e| e.image.starts_with("train/")).count();
    println!(
        "toy dataset at {}: {} interactions x {} objects, {train} train / {} test images",
        toy.root.display(),
        spec.interactions.len(),
        spec.objects.len(),
        toy.manifest.len() - train
    );
    Ok(())
}

/// Vocabulary from a label file, a dataset root, or the 36 AGD20K labels.
fn vocabulary(labels: Option<&Path>, data: Option<&Path>) -> anyhow::Result<Vec<String>> {
    if let Some(path) = labels {
        let text = fs::read_to_string(path).with_context(|| format!("reading labels {}", path.display()))?;
        let out: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if out.is_empty() {
            return Err(intra_core::Error::validation(format!("{} lists no labels", path.display())).into());
        }
        return Ok(out);
    }
    if let Some(root) = data {
        return Ok(scan_dataset(root)?.interactions);
    }
    Ok(AGD20K_INTERACTIONS.iter().map(|s| s.to_string()).collect())
}

fn live_oracle() -> Box<dyn PairOracle> {
    match HttpOracle::from_env() {
        Some(o) => Box::new(o),
        None => Box::new(NoOracle),
    }
}

fn cmd_build_relmap(args: BuildRelmapArgs) -> anyhow::Result<()> {
    let a = ConfigFile::merge(args, "build_relmap")?;
    let mode = Provenance::parse(a.mode.as_deref().ok_or_else(|| config::usage("build-relmap needs --mode"))?)?;
    let out = a.out.clone().ok_or_else(|| config::usage("build-relmap needs --out"))?;
    let labels = vocabulary(a.labels.as_deref(), a.data.as_deref())?;
    let map = match mode {
        Provenance::Llm => {
            let store = match &a.fixtures {
                Some(dir) => TranscriptStore::open(dir)?,
                None => TranscriptStore::in_memory(),
            };
            let oracle = live_oracle();
            let built = build_map_llm(&labels, oracle.as_ref(), &store)?;
            println!(
                "llm map: {} labels, {} pair lookups, {} cache hits, {} live calls, {} defaulted to negative",
                labels.len(),
                store.lookups(),
                store.hits(),
                built.live_calls,
                built.defaulted_pairs.len()
            );
            built.map
        }
        Provenance::Manual => bail!(config::usage("manual maps are written by hand; nothing to build")),
        baseline => {
            let scores = match (&a.scores, &a.fixtures) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => dir.join(format!("{}.json", baseline.as_str())),
                (None, None) => bail!(config::usage("similarity modes need --scores or --fixtures")),
            };
            let table = ScoreTable::load(&scores)?;
            let threshold = a.threshold.unwrap_or(BASELINE_THRESHOLD);
            let map = build_map_similarity(&labels, &table, threshold, baseline)?;
            println!("{} map: {} labels, threshold {threshold}", baseline.as_str(), labels.len());
            map
        }
    };
    ensure_parent(&out)?;
    map.save(&out)?;
    println!("{} positive off-diagonal pairs -> {}", map.positive_pairs(), out.display());
    Ok(())
}

fn cmd_gen_synonyms(args: GenSynonymsArgs) -> anyhow::Result<()> {
    let a = ConfigFile::merge(args, "gen_synonyms")?;
    let out = a.out.clone().ok_or_else(|| config::usage("gen-synonyms needs --out"))?;
    let labels = vocabulary(a.labels.as_deref(), a.data.as_deref())?;
    let contexts: BTreeMap<String, String> = match (&a.contexts, &a.data) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading contexts {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing contexts {}", p.display()))?
        }
        (None, Some(root)) => {
            // first object seen with each interaction
            let index = scan_dataset(root)?;
            let mut ctx = BTreeMap::new();
            for s in index.train_samples() {
                ctx.entry(s.interaction.clone()).or_insert_with(|| s.object.clone());
            }
            ctx
        }
        (None, None) => bail!(config::usage("gen-synonyms needs --contexts or --data")),
    };
    let replay = match &a.response {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading response {}", p.display()))?),
        None => None,
    };
    let oracle: Box<dyn PairOracle> = match replay {
        Some(text) => Box::new(move |_: &str| Ok::<_, String>(text.clone())),
        None => live_oracle(),
    };
    let k = a.k.unwrap_or(DEFAULT_K);
    let p = a.p.unwrap_or(DEFAULT_P);
    let (table, prompt, response) = build_synonym_table(&labels, &contexts, oracle.as_ref(), k, p)?;
    ensure_parent(&out)?;
    table.save(&out)?;
    let transcript = out.with_extension("transcript.json");
    let record = serde_json::json!({ "prompt": prompt, "response": response });
    fs::write(&transcript, serde_json::to_string_pretty(&record)?)
        .with_context(|| format!("writing {}", transcript.display()))?;
    let filled = table.entries.values().filter(|v| !v.is_empty()).count();
    println!(
        "synonyms for {filled}/{} labels (k={k}, p={p}) -> {}",
        labels.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = config::train_config(args)?;
    cfg.validate()?;
    let inputs = TrainInputs::from_config(&cfg)?;
    let total = cfg.steps;
    let every = (total / 10).max(1);
    let outcome = train_with(&cfg, &inputs, &EncoderRegistry::default(), |r| {
        if r.step == 1 || r.step % every == 0 || r.step == total {
            println!(
                "step {:>5}/{total}  loss {:.4}  (inter {:.4}, obj {:.4})",
                r.step, r.total, r.inter, r.obj
            );
        }
    })?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.total, last.total, outcome.losses.len());
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("loss curve: {}", outcome.loss_curve.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let a = ConfigFile::merge(args, "eval")?;
    let data = a.data.clone().ok_or_else(|| config::usage("eval needs --data"))?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| PathBuf::from("eval"));
    let index = scan_dataset(&data)?;
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), None) => evaluate_model(&Model::load(ckpt, &EncoderRegistry::default())?, &index)?,
        (None, Some(dir)) => evaluate_prediction_dir(&index, dir)?,
        _ => bail!(config::usage("eval needs exactly one of --checkpoint or --predictions")),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let json = out_dir.join("metrics.json");
    let csv = out_dir.join("per_image.csv");
    report.write_json(&json)?;
    report.write_csv(&csv)?;
    let s = report.summary;
    println!(
        "{} images: mKLD {:.4}  mSIM {:.4}  mNSS {:.4}",
        s.count, s.m_kld, s.m_sim, s.m_nss
    );
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn cmd_ground(args: GroundArgs) -> anyhow::Result<()> {
    let a = ConfigFile::merge(args, "ground")?;
    let ckpt = a.checkpoint.clone().ok_or_else(|| config::usage("ground needs --checkpoint"))?;
    let image_path = a.image.clone().ok_or_else(|| config::usage("ground needs --image"))?;
    let text = a.text.clone().ok_or_else(|| config::usage("ground needs --text"))?;
    let overlay = a.overlay.clone().unwrap_or_else(|| PathBuf::from("overlay.png"));
    let colormap = match &a.colormap {
        Some(name) => name.parse()?,
        None => Default::default(),
    };
    let spec = OverlaySpec::new(colormap, a.alpha.unwrap_or(0.5), overlay)?;
    let model = Model::load(&ckpt, &EncoderRegistry::default())?;
    let image = RgbImage::load(&image_path)?;
    let map = model.ground(&image, &text)?;
    let out = render_overlay(&image, &map, &spec)?;
    let peak = map
        .values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| (i / map.width, i % map.width))
        .ok_or_else(|| anyhow!("empty affordance map"))?;
    println!(
        "`{text}` on {}: {}x{} map, peak at cell {:?}{}",
        image_path.display(),
        map.height,
        map.width,
        peak,
        if map.degenerate { " (constant map)" } else { "" }
    );
    println!("overlay: {}  raw map: {}", out.overlay_path.display(), out.sidecar_path.display());
    Ok(())
}

fn cmd_export_embeddings(args: ExportArgs) -> anyhow::Result<()> {
    let a = ConfigFile::merge(args, "export_embeddings")?;
    let ckpt = a.checkpoint.clone().ok_or_else(|| config::usage("export-embeddings needs --checkpoint"))?;
    let data = a.data.clone().ok_or_else(|| config::usage("export-embeddings needs --data"))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("embeddings.csv"));
    let model = Model::load(&ckpt, &EncoderRegistry::default())?;
    let rows = export_embeddings(&model, &scan_dataset(&data)?)?;
    ensure_parent(&out)?;
    write_embeddings_csv(&rows, &out)?;
    println!(
        "{} embeddings (dim {}) -> {}",
        rows.len(),
        rows.first().map_or(0, |r| r.z.len()),
        out.display()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
