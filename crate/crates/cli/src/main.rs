//! `jmpe` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use jmpe_core::harness::{run_ablation, Experiment, ExperimentConfig, SEED_ENV};
use jmpe_core::ingest::{preprocess_case, PreprocessSpec};
use jmpe_core::metrics::{evaluate_binary, MetricsReport};
use jmpe_core::phantom::{make_dataset, Manifest, TreeSpec};
use jmpe_core::prior::{
    evaluate_codec, load_prior_samples, split_indices, train_prior, LossWeights, PriorCodec,
    PriorNetSpec, PriorTrainConfig,
};
use jmpe_core::seg::{train_segmenter, write_run, SegTrainConfig, VariantKind, VariantSpec};
use jmpe_core::topo::{compute_edt, extract_ridge, skeletonize};
use jmpe_core::volume::{
    binarize, load_grid, load_mask, save_grid, save_mask, BinaryMask, SoftMask,
};

#[derive(Parser)]
#[command(
    name = "jmpe",
    version,
    about = "Vessel segmentation with learned shape and topology priors"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic vessel-tree datasets.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// CT preprocessing.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Distance transform, skeleton or EDT ridge of a mask.
    Topo(TopoArgs),
    /// Train or evaluate a prior codec.
    #[command(subcommand)]
    Prior(PriorCmd),
    /// Train a segmentation network.
    #[command(subcommand)]
    Seg(SegCmd),
    /// Score predictions against ground truth.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Cross-validated five-variant comparison.
    Ablate(ExpArgs),
    /// Random search over the regularisation weights.
    Hpo(HpoArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    Generate {
        /// TOML tree-generation parameters; defaults if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// First seed; JMPE_SEED takes precedence.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IngestCmd {
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        liver_mask: PathBuf,
        #[arg(long)]
        vessel_mask: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Training-fold spacings (d,h,w triples) for the median target;
        /// defaults to this case's own spacing.
        #[arg(long, value_delimiter = ',')]
        train_spacing: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TopoOp {
    Edt,
    Skeleton,
    Ridge,
}

#[derive(Args)]
struct TopoArgs {
    op: TopoOp,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PriorCmd {
    /// Train a codec on every case of a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML with `[spec]` (architecture, heads) and `[train]` sections.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction DSC and topology-head correlation.
    Eval {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Subcommand)]
enum SegCmd {
    Train {
        #[arg(long)]
        variant: VariantKind,
        #[arg(long)]
        data: PathBuf,
        /// Frozen codec directories required by the variant.
        #[arg(long, num_args = 0..)]
        codec: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// One prediction; prints a CSV header and row.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Binarisation threshold for soft predictions.
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// A JSON list of `{id, pred, gt}` entries, paths relative to the list.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HpoArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "shape,topo,shape+topo,jmpe"
    )]
    variants: Vec<VariantKind>,
    /// Overrides the trial count from the config.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PriorFile {
    spec: PriorNetSpec,
    train: PriorTrainConfig,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SegFile {
    train: SegTrainConfig,
    weights: Option<LossWeights>,
    val_fraction: f64,
}

impl Default for SegFile {
    fn default() -> Self {
        Self {
            train: SegTrainConfig::default(),
            weights: None,
            val_fraction: 0.2,
        }
    }
}

#[derive(Deserialize)]
struct PairEntry {
    id: String,
    pred: PathBuf,
    gt: PathBuf,
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn seed_or_env(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?}")),
        Err(_) => Ok(seed),
    }
}

/// Loads a prediction; soft (non-binary) volumes are thresholded.
fn load_prediction(path: &Path, threshold: f32) -> Result<BinaryMask> {
    let grid = load_grid(path)?;
    if grid.values().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Ok(BinaryMask::new(grid)?);
    }
    Ok(binarize(&SoftMask::new(grid)?, threshold)?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Phantom(PhantomCmd::Generate { spec, n, seed, out }) => {
            let template: TreeSpec = read_toml(spec.as_deref())?;
            let m = make_dataset(&template, n, seed_or_env(seed)?, &out)?;
            println!("wrote {} phantoms to {}", m.len(), out.display());
        }
        Cmd::Ingest(IngestCmd::Preprocess {
            image,
            liver_mask,
            vessel_mask,
            spec,
            train_spacing,
            out,
        }) => {
            let spec: PreprocessSpec = read_toml(spec.as_deref())?;
            let image = load_grid(&image)?;
            if train_spacing.len() % 3 != 0 {
                bail!("--train-spacing takes d,h,w triples");
            }
            let train: Vec<[f64; 3]> = if train_spacing.is_empty() {
                vec![image.spacing()]
            } else {
                train_spacing
                    .chunks(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect()
            };
            let target = spec.target_spacing.resolve(&train)?;
            let case = preprocess_case(
                &image,
                &load_mask(&liver_mask)?,
                &load_mask(&vessel_mask)?,
                &spec,
                target,
            )?;
            std::fs::create_dir_all(&out)?;
            save_grid(&case.image, &out.join("image.raw"))?;
            save_mask(&case.liver, &out.join("liver_mask.raw"))?;
            save_mask(&case.vessels, &out.join("vessel_mask.raw"))?;
            println!(
                "shape {:?} spacing {:?}",
                case.image.shape(),
                case.image.spacing()
            );
        }
        Cmd::Topo(a) => {
            let mask = load_mask(&a.mask)?;
            match a.op {
                TopoOp::Edt => save_grid(compute_edt(&mask)?.grid(), &a.out)?,
                TopoOp::Skeleton => save_mask(&skeletonize(&mask), &a.out)?,
                TopoOp::Ridge => save_mask(&extract_ridge(&compute_edt(&mask)?), &a.out)?,
            }
        }
        Cmd::Prior(PriorCmd::Train { data, spec, out }) => {
            let mut file: PriorFile = read_toml(spec.as_deref())?;
            file.train.seed = seed_or_env(file.train.seed)?;
            let (codec, log) = train_prior(&Manifest::load(&data)?, &file.spec, &file.train)?;
            codec.save(&out)?;
            std::fs::write(out.join("train_log.csv"), log.to_csv())?;
            println!(
                "best epoch {} checksum {}",
                log.best_epoch,
                codec.checksum()
            );
        }
        Cmd::Prior(PriorCmd::Eval { codec, data }) => {
            let codec = PriorCodec::load(&codec)?;
            let ev = evaluate_codec(&codec, &load_prior_samples(&Manifest::load(&data)?)?)?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!("cases,shape_dsc,topo_pearson");
            println!(
                "{},{},{}",
                ev.cases,
                show(ev.shape_dsc),
                show(ev.topo_pearson)
            );
        }
        Cmd::Seg(SegCmd::Train {
            variant,
            data,
            codec,
            config,
            out,
        }) => {
            let mut file: SegFile = read_toml(config.as_deref())?;
            file.train.seed = seed_or_env(file.train.seed)?;
            let codecs = codec
                .iter()
                .map(|d| PriorCodec::load(d))
                .collect::<Result<Vec<_>, _>>()?;
            let weights = file.weights.unwrap_or_else(|| variant.default_weights());
            let spec = VariantSpec::new(variant, codecs, weights)?;
            let cases = Manifest::load(&data)?.load_cases()?;
            let (tr, va) = split_indices(cases.len(), file.val_fraction, file.train.seed);
            let train: Vec<_> = tr.iter().map(|&i| &cases[i]).collect();
            let val: Vec<_> = va.iter().map(|&i| &cases[i]).collect();
            let (net, log) = train_segmenter(&spec, &train, &val, &file.train)?;
            let echo = toml::to_string_pretty(&file.train)?;
            write_run(&out, &net, &log, &echo)?;
            match log.best_val_dsc {
                Some(d) => println!("best epoch {} val DSC {d:.4}", log.best_epoch),
                None => println!("best epoch {}", log.best_epoch),
            }
        }
        Cmd::Metrics(MetricsCmd::Eval {
            pred,
            gt,
            threshold,
        }) => {
            let r = evaluate_binary(&load_prediction(&pred, threshold)?, &load_mask(&gt)?)?;
            println!("{}", MetricsReport::CSV_HEADER);
            println!("{}", r.csv_row());
        }
        Cmd::Metrics(MetricsCmd::Batch {
            manifest,
            threshold,
        }) => {
            let text = std::fs::read_to_string(&manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let entries: Vec<PairEntry> = serde_json::from_str(&text)?;
            let root = manifest.parent().unwrap_or(Path::new("."));
            println!("id,{}", MetricsReport::CSV_HEADER);
            let mut ok = true;
            for e in entries {
                let r = load_prediction(&root.join(&e.pred), threshold)
                    .and_then(|p| Ok(evaluate_binary(&p, &load_mask(&root.join(&e.gt))?)?));
                match r {
                    Ok(r) => println!("{},{}", e.id, r.csv_row()),
                    Err(err) => {
                        eprintln!("{}: {err:#}", e.id);
                        ok = false;
                    }
                }
            }
            return Ok(ok);
        }
        Cmd::Ablate(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let report = run_ablation(&cfg, &a.out)?;
            print!("{}", report.to_table());
            return Ok(report.is_complete());
        }
        Cmd::Hpo(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(t) = a.trials {
                cfg.search.trials = t;
            }
            if cfg.search.trials == 0 {
                bail!("search.trials is 0; nothing to do");
            }
            let mut exp = Experiment::open(cfg)?;
            let mut ok = true;
            for v in a.variants {
                match exp.search(v, &a.out) {
                    Ok(r) => println!(
                        "{v}: best {:?} objective {:.4}",
                        r.best, r.trials[r.best_trial].objective
                    ),
                    Err(e) => {
                        eprintln!("{v}: search failed: {e:#}");
                        ok = false;
                    }
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
