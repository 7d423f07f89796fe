//! The `lmk` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codec::validate_dataset;
use crate::convert::{convert_dataset, ConvertOptions, PointFormat};
use crate::dataset::{Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dirs, BiometrySpec, EvalReport, DEFAULT_THRESHOLDS};
use crate::inference::{predict_image, Ensemble};
use crate::io;
use crate::layout::{results_root, Layout};
use crate::plan::{compute_fingerprint, derive_plan, Fingerprint, Plan, PlanOverrides};
use crate::preprocess::{preprocess_all, read_cached};
use crate::report::{render_overlays, render_tables, write_index, OverlayStyle};
use crate::splits::{split_folds, FoldSel, Splits};
use crate::synth::{synth_generate, SynthConfig};
use crate::train::{checkpoint_path, train, AugmentParams, Checkpoint, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "lmk", version, about = "3D landmark detection by heatmap regression")]
pub struct Cli {
    /// Results root; defaults to $NNLM_RESULTS, then ./results.
    #[arg(long, global = true)]
    pub results: Option<PathBuf>,

    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// JSON file with plan overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DatasetArg {
    /// Dataset directory containing dataset.json.
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the dataset fingerprint.
    Fingerprint(DatasetArg),
    /// Derive plan.json and splits.json from the fingerprint.
    Plan(DatasetArg),
    /// Resample, normalise and label-encode the training cases.
    Preprocess {
        #[command(flatten)]
        ds: DatasetArg,
        /// Rewrite cases that are already cached.
        #[arg(long)]
        force: bool,
    },
    /// Train one fold.
    Train {
        #[command(flatten)]
        ds: DatasetArg,
        /// Fold index, or `all` to train on every case.
        #[arg(long, default_value = "0")]
        fold: String,
        /// Epoch count for this run (the plan keeps its own value).
        #[arg(long)]
        epochs: Option<usize>,
        /// Iterations per epoch for this run.
        #[arg(long)]
        iterations: Option<usize>,
        /// Disable data augmentation.
        #[arg(long)]
        no_augment: bool,
    },
    /// Predict landmarks for every image in a directory.
    Predict {
        #[command(flatten)]
        ds: DatasetArg,
        /// Image directory; defaults to the dataset's imagesTs.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated folds to ensemble (e.g. `0,1,2` or `all`); defaults to every trained fold.
        #[arg(long, value_delimiter = ',')]
        folds: Vec<String>,
        #[arg(long, value_enum, default_value_t = CheckpointKind::Final)]
        checkpoint: CheckpointKind,
        /// Also write per-class heatmaps on the preprocessed grid.
        #[arg(long)]
        save_heatmaps: bool,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// SDR thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        /// Report in voxels of this size instead of millimetres.
        #[arg(long)]
        voxel_size: Option<f64>,
        /// dataset.json providing the biometry measurements.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Image directory; renders overlay figures and index.md when given.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Convert a generic landmark layout into a dataset directory.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "converted")]
        name: String,
        #[arg(long, value_enum, default_value_t = ModalityArg::Other)]
        modality: ModalityArg,
        /// Negate x and y (RAS input to the internal LPS convention).
        #[arg(long)]
        ras_to_lps: bool,
    },
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 40)]
        cases: usize,
        /// Cases moved to the test split.
        #[arg(long, default_value_t = 0)]
        test_cases: usize,
        #[arg(long, num_args = 3, default_values_t = [64, 64, 64])]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Check landmark placement and separation.
    Validate(DatasetArg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckpointKind {
    Best,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    CsvPoints,
    FcsvPoints,
    CoordinateJson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Ct,
    Other,
}

struct Ctx {
    root: PathBuf,
    seed: u64,
    overrides: PlanOverrides,
}

impl Ctx {
    fn layout(&self, ds: &Dataset) -> Layout {
        Layout::new(&self.root, &ds.descriptor.name)
    }

    fn fingerprint(&self, ds: &Dataset) -> Result<Fingerprint> {
        let path = self.layout(ds).fingerprint_path();
        if path.is_file() {
            let fp: Fingerprint = io::read_json(&path)?;
            if fp.seed == self.seed {
                return Ok(fp);
            }
        }
        let fp = compute_fingerprint(&ds.cases(Split::Train)?, &ds.descriptor, self.seed)?;
        io::write_json(&path, &fp)?;
        Ok(fp)
    }

    /// The plan for the current overrides, written to its hash directory if new.
    fn plan(&self, ds: &Dataset) -> Result<Plan> {
        let plan = derive_plan(&self.fingerprint(ds)?, &self.overrides)?;
        let path = self.layout(ds).plan_path(&plan.hash());
        if !path.is_file() {
            io::write_json(&path, &plan)?;
        }
        Ok(plan)
    }

    fn splits(&self, ds: &Dataset, plan: &Plan) -> Result<Splits> {
        let path = self.layout(ds).splits_path();
        // Case records come back sorted by id, matching `Splits::all_ids`.
        let ids: Vec<String> = ds.cases(Split::Train)?.into_iter().map(|c| c.case_id).collect();
        if path.is_file() {
            let s: Splits = io::read_json(&path)?;
            if s.all_ids() == ids && s.fold_count() == plan.fold_count {
                return Ok(s);
            }
            log::warn!("{} does not match the current cases or fold count, regenerating", path.display());
        }
        let s = split_folds(&ids, plan.fold_count, self.seed)?;
        io::write_json(&path, &s)?;
        Ok(s)
    }
}

fn open(ds: &DatasetArg) -> Result<Dataset> {
    Dataset::open(&ds.dataset)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let overrides = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => PlanOverrides::default(),
    };
    let ctx = Ctx { root: results_root(cli.results.as_deref()), seed: cli.seed, overrides };
    match cli.command {
        Command::Fingerprint(d) => {
            let ds = open(&d)?;
            let fp = compute_fingerprint(&ds.cases(Split::Train)?, &ds.descriptor, ctx.seed)?;
            let path = ctx.layout(&ds).fingerprint_path();
            io::write_json(&path, &fp)?;
            println!("{}", path.display());
        }
        Command::Plan(d) => {
            let ds = open(&d)?;
            let plan = ctx.plan(&ds)?;
            let splits = ctx.splits(&ds, &plan)?;
            println!("{}", ctx.layout(&ds).plan_path(&plan.hash()).display());
            println!("{} folds over {} cases", splits.fold_count(), splits.all_ids().len());
        }
        Command::Preprocess { ds: d, force } => {
            let ds = open(&d)?;
            let plan = ctx.plan(&ds)?;
            let dir = ctx.layout(&ds).preprocessed_dir(&plan.hash());
            let n = preprocess_all(&ds.cases(Split::Train)?, &plan, &dir, force)?;
            println!("{n} cases written to {}", dir.display());
        }
        Command::Train { ds: d, fold, epochs, iterations, no_augment } => {
            let ds = open(&d)?;
            let plan = ctx.plan(&ds)?;
            let hash = plan.hash();
            let layout = ctx.layout(&ds);
            let splits = ctx.splits(&ds, &plan)?;
            let sel = FoldSel::parse(&fold)?;
            let pre_dir = layout.preprocessed_dir(&hash);
            let train_ids = splits.train_ids(sel)?;
            let val_ids = splits.val_ids(sel)?;
            let train_cases: Vec<_> =
                train_ids.iter().map(|id| read_cached(&pre_dir, id, &plan.classes)).collect::<Result<_>>()?;
            let val_cases: Vec<_> =
                val_ids.iter().map(|id| read_cached(&pre_dir, id, &plan.classes)).collect::<Result<_>>()?;
            let mut run_plan = plan.clone();
            if let Some(e) = epochs {
                run_plan.epochs = e;
            }
            if let Some(i) = iterations {
                run_plan.iterations_per_epoch = i;
            }
            let mut opts = TrainOptions::new(ctx.seed, sel.to_string());
            if no_augment {
                opts.augment = AugmentParams::none();
            }
            let out = layout.fold_dir(&hash, &sel.dir_name());
            let state = train(&run_plan, train_cases, &val_cases, &opts, &out)?;
            match state.validation_mre {
                Some(m) => println!("fold {sel}: validation MRE {m:.3} mm, artifacts in {}", out.display()),
                None => println!("fold {sel}: artifacts in {}", out.display()),
            }
        }
        Command::Predict { ds: d, input, output, folds, checkpoint, save_heatmaps } => {
            let ds = open(&d)?;
            let plan = ctx.plan(&ds)?;
            let layout = ctx.layout(&ds);
            let hash = plan.hash();
            let fold_dirs = resolve_folds(&layout, &hash, &folds)?;
            let mut models = Vec::new();
            for dir in &fold_dirs {
                let ck = Checkpoint::load(&checkpoint_path(dir, checkpoint == CheckpointKind::Best))?;
                if ck.header.classes != plan.classes {
                    return Err(Error::Config(format!("{} was trained for other classes", dir.display())));
                }
                models.push(ck.into_model()?);
            }
            let model = Ensemble { models };
            let input = input.unwrap_or_else(|| ds.root.join(Split::Test.images_dir()));
            let cases = crate::dataset::list_cases(&input, &input.join("__none__"))?;
            if cases.is_empty() {
                return Err(Error::Config(format!("no images in {}", input.display())));
            }
            for case in &cases {
                let raw = io::read_volume(&case.image_path)?;
                let pred = predict_image(&model, &raw, &plan, &case.case_id)?;
                io::landmarks::write(
                    &output.join(format!("{}.json", case.case_id)),
                    &pred.landmarks,
                    Some(&pred.confidence),
                )?;
                if save_heatmaps {
                    for (c, name) in plan.classes.iter().enumerate() {
                        let p = output.join("heatmaps").join(format!("{}_{name}.nii.gz", case.case_id));
                        io::write_volume(&p, &pred.heatmap.channel_volume(c))?;
                    }
                }
                log::info!("predicted {}", case.case_id);
            }
            println!("{} cases predicted with {} model(s) into {}", cases.len(), fold_dirs.len(), output.display());
        }
        Command::Evaluate { gt, pred, output, thresholds, voxel_size, dataset, images } => {
            let thresholds = if thresholds.is_empty() { DEFAULT_THRESHOLDS.to_vec() } else { thresholds };
            let biometry = match &dataset {
                Some(p) => Dataset::open(p)?.descriptor.biometry.map(BiometrySpec),
                None => None,
            };
            let report = evaluate_dirs(&gt, &pred, &thresholds, biometry.as_ref(), voxel_size)?;
            write_evaluation(&report, &output, images.as_deref(), &gt, &pred)?;
            println!(
                "MRE {:.3} ± {:.3} {} over {} landmarks; results in {}",
                report.mre,
                report.std,
                report.unit,
                report.landmark_count,
                output.display()
            );
        }
        Command::Convert { input, format, output, name, modality, ras_to_lps } => {
            let format = match format {
                FormatArg::CsvPoints => PointFormat::CsvPoints,
                FormatArg::FcsvPoints => PointFormat::FcsvPoints,
                FormatArg::CoordinateJson => PointFormat::CoordinateJson,
            };
            let modality = match modality {
                ModalityArg::Ct => Modality::Ct,
                ModalityArg::Other => Modality::Other,
            };
            let log = convert_dataset(&input, &ConvertOptions { format, name, modality, ras_to_lps }, &output)?;
            println!(
                "{} cases, {} classes, {} log entries → {}",
                log.cases.len(),
                log.classes.len(),
                log.entries.len(),
                output.display()
            );
        }
        Command::Synth { output, cases, test_cases, shape, classes, noise, name } => {
            let mut cfg = SynthConfig::new(cases, [shape[0], shape[1], shape[2]], classes, ctx.seed, noise);
            cfg.test_cases = test_cases;
            cfg.name = name;
            synth_generate(&cfg, &output)?;
            println!("{cases} cases written to {}", output.display());
        }
        Command::Validate(d) => {
            let ds = open(&d)?;
            let spacing = derive_plan(&ctx.fingerprint(&ds)?, &ctx.overrides).ok().map(|p| p.target_spacing);
            let mut report = validate_dataset(&ds.cases(Split::Train)?, ds.classes(), spacing);
            report.cases.extend(validate_dataset(&ds.cases(Split::Test)?, ds.classes(), spacing).cases);
            let path = ctx.layout(&ds).dataset_dir().join("validation.json");
            io::write_json(&path, &report)?;
            let bad = report.violations();
            for c in &bad {
                eprintln!("{}: {}", c.case_id, serde_json::to_string(c).unwrap_or_default());
            }
            if !bad.is_empty() {
                return Err(Error::Validation(format!(
                    "{} of {} cases have violations",
                    bad.len(),
                    report.cases.len()
                )));
            }
            println!("{} cases valid; report in {}", report.cases.len(), path.display());
        }
    }
    Ok(())
}

fn resolve_folds(layout: &Layout, hash: &str, folds: &[String]) -> Result<Vec<PathBuf>> {
    let plan_dir = layout.plan_dir(hash);
    let dirs: Vec<PathBuf> = if folds.is_empty() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(&plan_dir)
            .map_err(|e| Error::io(&plan_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("fold_")))
            .filter(|p| checkpoint_path(p, false).is_file())
            .collect();
        found.sort();
        found
    } else {
        folds.iter().map(|f| FoldSel::parse(f).map(|s| layout.fold_dir(hash, &s.dir_name()))).collect::<Result<_>>()?
    };
    if dirs.is_empty() {
        return Err(Error::Config(format!("no trained folds under {}", plan_dir.display())));
    }
    Ok(dirs)
}

fn write_evaluation(report: &EvalReport, out: &Path, images: Option<&Path>, gt: &Path, pred: &Path) -> Result<()> {
    io::write_json(&out.join("results.json"), report)?;
    io::write_text(&out.join("results.md"), &render_tables(report))?;
    let Some(images) = images else { return Ok(()) };
    let mut figures = Vec::new();
    for case in &report.cases {
        let Some(img) = io::find_volume(images, &case.case_id) else {
            log::warn!("no image for {} in {}, skipping overlays", case.case_id, images.display());
            continue;
        };
        let volume = io::read_volume(&img)?;
        let g = io::landmarks::read(&gt.join(format!("{}.json", case.case_id)))?;
        let p = io::landmarks::read(&pred.join(format!("{}.json", case.case_id)))?;
        figures.extend(render_overlays(&volume, &g, &p, &out.join("figures"), &OverlayStyle::default())?);
    }
    write_index(out, "results.md", &figures)
}

/// Process exit status for an error: 2 for evaluation mismatches, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Evaluation(_) => 2,
        _ => 1,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_subcommands() {
        let c =
            Cli::try_parse_from(["lmk", "--seed", "3", "train", "--dataset", "d", "--fold", "all", "--epochs", "1"])
                .unwrap();
        assert_eq!(c.seed, 3);
        assert!(matches!(c.command, Command::Train { epochs: Some(1), .. }));
        let c = Cli::try_parse_from(["lmk", "synth", "--output", "o", "--shape", "32", "40", "48"]).unwrap();
        assert!(matches!(c.command, Command::Synth { ref shape, .. } if shape == &vec![32, 40, 48]));
        assert!(Cli::try_parse_from(["lmk", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["lmk", "convert", "--input", "i", "--output", "o", "--format", "xml"]).is_err());
    }
}
