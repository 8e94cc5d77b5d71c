use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use refseg_core::ablation::{default_grid, run_ablation};
use refseg_core::backend::{open_backend, BackendKind, EmbeddingBackend};
use refseg_core::checkpoint::load_checkpoint;
use refseg_core::config::{AblationFlags, RunConfig};
use refseg_core::data::{generate_dataset, load_dataset, read_image, save_dataset, Dataset, Expression, ExpressionKind, GenerationConfig};
use refseg_core::infer::{
    evaluate_predictions, predict_dataset, predict_one, read_predictions, write_predictions, PredictionRecord,
    PREDICTIONS_FILE,
};
use refseg_core::model::{prior_similarity, PriorCache, SampleInput};
use refseg_core::plot::{heatmap_overlay, mask_image, save_png};
use refseg_core::prior::{compute_heatmap, Heatmap};
use refseg_core::text::{build_prompt, extract_main_object, read_conllu};
use refseg_core::train::{train, LogRecord, TrainData, TrainOptions};

/// Environment variable naming the directory that receives all outputs.
const OUTPUT_ROOT_VAR: &str = "REFSEG_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "refseg-out";

#[derive(Parser)]
#[command(name = "refseg", version, about = "Referring image segmentation on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given: desk or large.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override a setting, e.g. `--set optim.lr=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for everything random; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and validation splits of synthetic scenes.
    GenData {
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        #[arg(long, default_value_t = 100)]
        val_scenes: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Destination; `<output root>/data` by default.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train a model; writes the log, a checkpoint and a validation report.
    Train {
        /// Run name under `<output root>/runs/`.
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Predict masks for a dataset split, or for one image and parse.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to predict on; the configured validation split by default.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Predictions file; `<output root>/preds.jsonl` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single-image mode: image file.
        #[arg(long, requires = "conllu")]
        image: Option<PathBuf>,
        /// Dependency parse of the expression (CoNLL-U, first sentence used).
        #[arg(long)]
        conllu: Option<PathBuf>,
        /// Raw expression text. Only accepted together with a parse.
        #[arg(long)]
        expression: Option<String>,
        /// Single-image mode: write the predicted mask here.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Score a predictions file against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report directory; the predictions file's directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every configuration of the module grid and compare them.
    Ablate {
        /// Comma-separated labels such as `baseline,prior,cmd,cmd+mcc,full`.
        #[arg(long, value_delimiter = ',')]
        configs: Vec<String>,
        #[arg(long, default_value = "ablation")]
        name: String,
    },
    /// Render the prior heatmap of one expression over its image.
    Heatmap {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        scene: Option<String>,
        /// Flat expression index within the scene.
        #[arg(long, default_value_t = 0)]
        expression: usize,
        #[arg(long, conflicts_with_all = ["scene"], requires = "conllu")]
        image: Option<PathBuf>,
        #[arg(long)]
        conllu: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        zoom: u32,
    },
    /// Read dependency parses from stdin and print each main object as JSON.
    ExtractObject,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Relative dataset paths in a config are taken relative to the output root.
fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let base = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&g.preset)?,
    };
    let mut config = base.with_overrides(&g.overrides)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn parse_flags(label: &str) -> Result<AblationFlags> {
    match label {
        "baseline" => return Ok(AblationFlags::BASELINE),
        "full" => return Ok(AblationFlags::FULL),
        _ => {}
    }
    let mut flags = AblationFlags::BASELINE;
    for part in label.split('+') {
        match part.trim() {
            "prior" => flags.clip_prior = true,
            "cmd" => flags.cmd = true,
            "mcc" => flags.mcc = true,
            other => bail!("unknown module {other:?} in ablation label {label:?}"),
        }
    }
    Ok(flags)
}

struct Splits {
    train: Dataset,
    val: Dataset,
    train_priors: PriorCache,
    val_priors: PriorCache,
}

fn load_split(dir: &Path, backend_kind: BackendKind) -> Result<(Dataset, PriorCache)> {
    let ds = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let backend = open_backend(backend_kind, Some(dir))?;
    let priors = PriorCache::build(&ds, backend.as_ref())?;
    Ok((ds, priors))
}

fn load_splits(config: &RunConfig, root: &Path) -> Result<Splits> {
    let (train, train_priors) = load_split(&resolve(root, &config.data.train), config.data.backend)?;
    let (val, val_priors) = load_split(&resolve(root, &config.data.val), config.data.backend)?;
    eprintln!(
        "train: {} scenes, val: {} scenes ({} samples)",
        train.len(),
        val.len(),
        val.samples().len()
    );
    Ok(Splits { train, val, train_priors, val_priors })
}

fn print_progress(prefix: &str, r: &LogRecord, seconds: f64) {
    if r.iteration % 100 == 0 || r.val_miou.is_some() {
        let val = r.val_miou.map(|v| format!(" val_miou {v:.4}")).unwrap_or_default();
        eprintln!(
            "{prefix}iter {:>6} {:>8.1}s lr {:.1e} loss {:.4} grad {:.2}{val}",
            r.iteration, seconds, r.lr, r.loss.total, r.grad_norm
        );
    }
}

/// First sentence of a CoNLL-U file as an expression.
fn expression_from_conllu(path: &Path) -> Result<Expression> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parse = read_conllu(&text)?
        .into_iter()
        .next()
        .with_context(|| format!("{} holds no sentence", path.display()))?;
    Ok(Expression::from_parse(parse, ExpressionKind::External))
}

fn image_key(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn heatmap_for(backend: &dyn EmbeddingBackend, key: &str, image: &refseg_core::data::RgbImage, expr: &Expression) -> Result<(Heatmap, String, bool)> {
    let main = extract_main_object(&expr.parse);
    let prompt = build_prompt(&main.phrase)?;
    let tokens = backend.embed_image(key, image)?;
    let text = backend.embed_text(&prompt)?;
    Ok((compute_heatmap(&tokens, &text)?, prompt, main.rolled_back))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    refseg_core::nn::ops::flush_denormals();
    let root = output_root();
    let g = &cli.global;
    match cli.command {
        Command::GenData { scenes, val_scenes, image_size, dir } => {
            let seed = g.seed.unwrap_or(load_config(g)?.seed);
            let dir = dir.unwrap_or_else(|| root.join("data"));
            for (split, count, prefix, split_seed) in
                [("train", scenes, "scene", seed), ("val", val_scenes, "val", seed.wrapping_add(1))]
            {
                let cfg = GenerationConfig { scenes: count, image_size, id_prefix: prefix.into(), ..Default::default() };
                let ds = generate_dataset(&cfg, split_seed)?;
                save_dataset(&ds, dir.join(split))?;
                eprintln!("{split}: {} scenes, {} samples -> {}", ds.len(), ds.samples().len(), dir.join(split).display());
            }
        }
        Command::Train { name } => {
            let config = load_config(g)?;
            let splits = load_splits(&config, &root)?;
            let run = root.join("runs").join(&name);
            std::fs::create_dir_all(&run)?;
            std::fs::write(run.join("config.toml"), config.to_toml_string()?)?;
            let data = TrainData {
                train: &splits.train,
                train_priors: &splits.train_priors,
                val: &splits.val,
                val_priors: &splits.val_priors,
            };
            let progress = |r: &LogRecord, t: f64| print_progress("", r, t);
            let outcome = train(&config, &data, &TrainOptions { out_dir: Some(run.clone()), progress: Some(&progress) })?;
            if let Some(v) = &outcome.val {
                eprintln!(
                    "done in {:.0}s: val mIoU {:.4}, Pr@0.5 {:.4}",
                    outcome.seconds,
                    v.miou,
                    v.precision(0.5).unwrap_or(0.0)
                );
            }
            println!("{}", run.display());
        }
        Command::Infer { checkpoint, dataset, out, image, conllu, expression, mask_out } => {
            let ckpt_dir = checkpoint.unwrap_or_else(|| root.join("runs/train/checkpoint"));
            let ckpt = load_checkpoint(&ckpt_dir).with_context(|| format!("loading {}", ckpt_dir.display()))?;
            let config = ckpt.manifest.config.clone();
            let model = ckpt.model;
            if let Some(image_path) = image {
                let conllu = conllu.context("single-image inference needs --conllu")?;
                let expr = expression_from_conllu(&conllu)?;
                if let Some(text) = &expression {
                    if !text.split_whitespace().eq(expr.parse.forms()) {
                        bail!("--expression {text:?} does not match the tokens of the supplied parse");
                    }
                }
                let img = read_image(&image_path)?;
                let backend = open_backend(config.data.backend, dataset.as_deref())?;
                let prior = prior_similarity(backend.as_ref(), &image_key(&image_path), &img, &expr)?;
                let pred = predict_one(&model, SampleInput { image: &img, expression: &expr, prior: &prior, target: None })?;
                if let Some(path) = mask_out {
                    save_png(&mask_image(&pred.mask), path)?;
                }
                println!(
                    "{}",
                    serde_json::json!({
                        "expression": expr.text,
                        "probability": pred.probability,
                        "query": pred.query,
                        "mask": refseg_core::data::Rle::encode(&pred.mask),
                    })
                );
            } else {
                if expression.is_some() {
                    bail!(
                        "free-text expressions need a dependency parse: write it as CoNLL-U and pass it with --conllu together with --image"
                    );
                }
                let dir = dataset.unwrap_or_else(|| resolve(&root, &config.data.val));
                let (ds, priors) = load_split(&dir, config.data.backend)?;
                let refs = ds.samples();
                let preds = predict_dataset(&model, &ds, &priors, &refs, 32)?;
                let records: Vec<PredictionRecord> =
                    refs.iter().zip(&preds).map(|(&r, p)| PredictionRecord::new(&ds, r, p)).collect();
                let out = out.unwrap_or_else(|| root.join(PREDICTIONS_FILE));
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                write_predictions(&out, &records)?;
                eprintln!("{} predictions -> {}", records.len(), out.display());
            }
        }
        Command::Evaluate { preds, dataset, out } => {
            let config = load_config(g)?;
            let dir = dataset.unwrap_or_else(|| resolve(&root, &config.data.val));
            let ds = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            let records = read_predictions(&preds)?;
            let report = evaluate_predictions(&ds, &records)?;
            let out = out.unwrap_or_else(|| preds.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(out.join("samples.csv"), report.samples_csv())?;
            println!(
                "{}",
                serde_json::json!({
                    "miou": report.miou,
                    "precision_at": report.precision_at,
                    "oc_iou": report.oc_iou,
                    "jf_mean": report.jf_mean,
                })
            );
        }
        Command::Ablate { configs, name } => {
            let config = load_config(g)?;
            let grid = if configs.is_empty() {
                default_grid()
            } else {
                configs.iter().map(|c| parse_flags(c)).collect::<Result<Vec<_>>>()?
            };
            let splits = load_splits(&config, &root)?;
            let data = TrainData {
                train: &splits.train,
                train_priors: &splits.train_priors,
                val: &splits.val,
                val_priors: &splits.val_priors,
            };
            let dir = root.join(&name);
            let progress = |label: &str, r: &LogRecord, t: f64| print_progress(&format!("[{label}] "), r, t);
            let start = Instant::now();
            let report = run_ablation(&config, &grid, &data, Some(&dir), Some(&progress))?;
            print!("{}", report.table_csv());
            eprintln!("{} configurations in {:.0}s -> {}", grid.len(), start.elapsed().as_secs_f64(), dir.display());
        }
        Command::Heatmap { dataset, scene, expression, image, conllu, out, zoom } => {
            let config = load_config(g)?;
            let (img, expr, key, backend_dir) = match image {
                Some(path) => {
                    let conllu = conllu.context("--image needs --conllu")?;
                    (read_image(&path)?, expression_from_conllu(&conllu)?, image_key(&path), dataset.clone())
                }
                None => {
                    let dir = dataset.unwrap_or_else(|| resolve(&root, &config.data.val));
                    let ds = load_dataset(&dir)?;
                    let scene = match &scene {
                        Some(id) => ds.scene(id).with_context(|| format!("no scene {id}"))?,
                        None => ds.scenes.first().context("dataset is empty")?,
                    };
                    let (i, e) = scene
                        .locate_expression(expression)
                        .with_context(|| format!("scene {} has no expression {expression}", scene.scene_id))?;
                    let expr = scene.instances[i].expressions[e].clone();
                    (scene.image.clone(), expr, scene.scene_id.clone(), Some(dir))
                }
            };
            let backend = open_backend(config.data.backend, backend_dir.as_deref())?;
            let (heatmap, prompt, rolled_back) = heatmap_for(backend.as_ref(), &key, &img, &expr)?;
            let out = out.unwrap_or_else(|| root.join(format!("heatmap_{key}.png")));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            save_png(&heatmap_overlay(&img, &heatmap, 0.5, zoom)?, &out)?;
            let (y, x) = heatmap.argmax();
            println!(
                "{}",
                serde_json::json!({
                    "expression": expr.text,
                    "prompt": prompt,
                    "rolled_back": rolled_back,
                    "argmax": [y, x],
                    "png": out,
                })
            );
        }
        Command::ExtractObject => {
            let mut input = String::new();
            std::io::stdin().read_to_string(&mut input)?;
            for parse in read_conllu(&input)? {
                println!("{}", serde_json::to_string(&extract_main_object(&parse))?);
            }
        }
    }
    Ok(())
}
