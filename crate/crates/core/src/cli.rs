//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::augment::{
    lab_image_stats, fit_lab_profile_from_stats, load_lab_profile, randstainna_augment,
    save_lab_profile, sca_augment, scl_pair_float, stain_jitter, AugmentConfig, RestandardiseDirection,
    JitterMatrix, JitterParams,
};
use crate::bench::{self, BenchConfig, BenchMethod};
use crate::error::{Error, Result};
use crate::imaging::{OdBase, RgbImage, DEFAULT_TISSUE_THRESHOLD};
use crate::io::{self, encode_png, list_pngs, load_float_map, load_instance_png, load_mask_png, load_png};
use crate::loss::stain_consistency_loss;
use crate::metrics::{aggregate, f1_50, match_instances, pq_50, Aggregation, IOU_THRESHOLD};
use crate::normalize::{make_reference, normalize, NormConfig, NormMethod, DEFAULT_FDA_BETA};
use crate::profile::{extract_image_stats, fit_profile, load_profile, save_profile, StainConfig, StatsDomain};
use crate::seed::task_rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Largest concentration disagreement `pair --verify` accepts.
const PAIR_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "stainkit", version, about = "Stain separation, normalisation and augmentation for histology images")]
pub struct Cli {
    /// Worker threads (default: one per core). Never changes any output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct StainArgs {
    /// Logarithm base used when recomposing images.
    #[arg(long, value_enum, default_value_t = OdBase::Ten)]
    pub od_base: OdBase,
    /// Pixels concentration statistics are computed over.
    #[arg(long = "stats-on", value_enum, default_value_t = StatsDomain::Tissue)]
    pub stats_on: StatsDomain,
    /// Minimum max-channel OD for a pixel to count as tissue.
    #[arg(long, default_value_t = DEFAULT_TISSUE_THRESHOLD)]
    pub tissue_threshold: f64,
}

impl StainArgs {
    fn config(&self) -> Result<StainConfig> {
        if !self.tissue_threshold.is_finite() || self.tissue_threshold < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "--tissue-threshold must be finite and >= 0, got {}",
                self.tissue_threshold
            )));
        }
        Ok(StainConfig {
            od_base: self.od_base,
            stats_domain: self.stats_on,
            tissue_threshold: self.tissue_threshold,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AugmentMethod {
    Sca,
    Jitter,
    Randstainna,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a dataset stain profile from a directory of PNGs.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        stain: StainArgs,
        /// Keep only the covariance diagonals.
        #[arg(long)]
        diag_cov: bool,
        /// Fit a lαβ profile for RandStainNA instead.
        #[arg(long)]
        lab: bool,
    },
    /// Write K augmented variants of every input image.
    Augment {
        #[arg(long, value_enum)]
        method: AugmentMethod,
        /// Stain profile (sca) or lαβ profile (randstainna).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How concentrations are re-standardised towards sampled statistics.
        #[arg(long, alias = "eq5-direction", value_enum, default_value_t = RestandardiseDirection::Printed)]
        restandardise_direction: RestandardiseDirection,
        #[command(flatten)]
        stain: StainArgs,
        #[arg(long, default_value_t = 0.25)]
        jitter_alpha: f64,
        #[arg(long, default_value_t = 0.05)]
        jitter_beta: f64,
        #[arg(long, value_enum, default_value_t = JitterMatrix::PerImage)]
        jitter_matrix: JitterMatrix,
    },
    /// Write a pair of variants sharing concentrations for every input.
    Pair {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How concentrations are re-standardised towards sampled statistics.
        #[arg(long, alias = "eq5-direction", value_enum, default_value_t = RestandardiseDirection::Printed)]
        restandardise_direction: RestandardiseDirection,
        #[command(flatten)]
        stain: StainArgs,
        /// Check that both members carry the same concentrations.
        #[arg(long)]
        verify: bool,
    },
    /// Normalise every input image to a reference image.
    Normalize {
        #[arg(long, value_enum)]
        method: NormMethod,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FDA_BETA)]
        fda_beta: f64,
        #[command(flatten)]
        stain: StainArgs,
    },
    /// Stain consistency loss between two single-channel PFM predictions.
    Loss {
        #[arg(long)]
        pred_a: PathBuf,
        #[arg(long)]
        pred_b: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        inputs_are_probabilities: bool,
        /// Digits printed after the decimal point.
        #[arg(long, default_value_t = 6)]
        digits: usize,
    },
    /// F1 and PQ at IoU 0.5 between instance-label PNG directories.
    Metrics {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Average per-image scores instead of pooling counts.
        #[arg(long)]
        per_image: bool,
    },
    /// Time methods over a synthetic corpus on one thread.
    Bench {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "reinhard,sca,macenko")]
        methods: Vec<BenchMethod>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_DOMAIN
            }
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn execute(cli: Cli) -> CmdResult {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Fit {
            input,
            output,
            stain,
            diag_cov,
            lab,
        } => cmd_fit(&input, &output, &stain.config()?, diag_cov, lab),
        Command::Augment {
            method,
            profile,
            input,
            output,
            count,
            seed,
            restandardise_direction,
            stain,
            jitter_alpha,
            jitter_beta,
            jitter_matrix,
        } => {
            let config = AugmentConfig {
                stain: stain.config()?,
                direction: restandardise_direction,
            };
            let jitter = JitterParams::new(jitter_alpha, jitter_beta)?;
            cmd_augment(method, profile.as_deref(), &input, &output, count, seed, &config, &jitter, jitter_matrix)
        }
        Command::Pair {
            profile,
            input,
            output,
            seed,
            restandardise_direction,
            stain,
            verify,
        } => {
            let config = AugmentConfig {
                stain: stain.config()?,
                direction: restandardise_direction,
            };
            cmd_pair(&profile, &input, &output, seed, &config, verify)
        }
        Command::Normalize {
            method,
            reference,
            input,
            output,
            fda_beta,
            stain,
        } => {
            let config = NormConfig {
                stain: stain.config()?,
                fda_beta,
            };
            cmd_normalize(method, &reference, &input, &output, &config)
        }
        Command::Loss {
            pred_a,
            pred_b,
            mask,
            inputs_are_probabilities,
            digits,
        } => {
            let a = load_float_map(&pred_a)?;
            let b = load_float_map(&pred_b)?;
            let m = load_mask_png(&mask)?;
            let loss = stain_consistency_loss(&a, &b, &m, inputs_are_probabilities)?;
            println!("{loss:.digits$}");
            Ok(())
        }
        Command::Metrics { gt, pred, per_image } => cmd_metrics(&gt, &pred, per_image),
        Command::Bench {
            methods,
            size,
            count,
            warmup,
            seed,
            report,
        } => {
            let config = BenchConfig {
                methods,
                size,
                count,
                warmup,
                seed,
            };
            let rows = bench::run_bench(&config)?;
            let csv = bench::to_csv(&rows, &config);
            match report {
                Some(path) => {
                    io::write_atomic(&path, csv.as_bytes())?;
                    println!("ordering: {}", bench::ordering_summary(&rows));
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(files)
}

/// Creates `output` and refuses to use the input directory as output.
fn prepare_output(input: &Path, output: &Path) -> CmdResult {
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(Failure::Usage(
            "output directory must differ from the input directory".into(),
        ));
    }
    Ok(())
}

/// Files destined for the output directory, grouped per input image. A
/// group is written together or not at all.
type Outputs = Vec<Vec<(PathBuf, Vec<u8>)>>;

/// Writes every group atomically; on failure, files already written by this
/// call are removed.
fn write_groups(groups: Outputs) -> Result<usize> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        for group in groups {
            let staged = group
                .iter()
                .map(|(path, bytes)| io::stage(path, bytes))
                .collect::<Result<Vec<_>>>()?;
            for (tmp, (path, _)) in staged.into_iter().zip(&group) {
                tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
                written.push(path.clone());
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written.len()),
        Err(e) => {
            for path in &written {
                let _ = fs::remove_file(path);
            }
            Err(e)
        }
    }
}

/// Loads and processes every input in parallel, failing on the first error
/// in input order.
fn process_all<F>(files: &[PathBuf], f: F) -> Result<Outputs>
where
    F: Fn(usize, &Path, &RgbImage) -> Result<Vec<(PathBuf, Vec<u8>)>> + Sync,
{
    files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let img = load_png(path)?;
            f(i, path, &img).map_err(|e| match e {
                e if e.is_io() => e,
                e => Error::InvalidImage(format!("{}: {e}", path.display())),
            })
        })
        .collect()
}

fn cmd_fit(input: &Path, output: &Path, config: &StainConfig, diag_cov: bool, lab: bool) -> CmdResult {
    let files = list_pngs(input)?;
    let images = files
        .par_iter()
        .map(load_png)
        .collect::<Result<Vec<_>>>()?;

    if lab {
        let stats: Vec<_> = images.par_iter().map(lab_image_stats).collect();
        let profile = fit_lab_profile_from_stats(&stats)?;
        save_lab_profile(&profile, output)?;
        println!("fitted lab profile on {} images (skipped 0)", stats.len());
        return Ok(());
    }

    let results: Vec<_> = images
        .par_iter()
        .map(|img| extract_image_stats(img, config))
        .collect();
    let mut stats = Vec::new();
    let mut skipped = 0;
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(s) => stats.push(s),
            Err(e) => {
                eprintln!("skipped {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    let profile = fit_profile(&stats, config, diag_cov)?;
    save_profile(&profile, output)?;
    println!("fitted profile on {} images (skipped {skipped})", stats.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    method: AugmentMethod,
    profile: Option<&Path>,
    input: &Path,
    output: &Path,
    count: usize,
    seed: u64,
    config: &AugmentConfig,
    jitter: &JitterParams,
    jitter_matrix: JitterMatrix,
) -> CmdResult {
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let need_profile = || {
        profile.ok_or_else(|| Failure::Usage("--profile is required for this method".into()))
    };
    enum Loaded {
        Stain(Box<crate::profile::StainProfile>),
        Lab(crate::augment::LabProfile),
        None,
    }
    let loaded = match method {
        AugmentMethod::Sca => {
            let p = load_profile(need_profile()?)?;
            p.check_conventions(&config.stain)?;
            Loaded::Stain(Box::new(p))
        }
        AugmentMethod::Randstainna => Loaded::Lab(load_lab_profile(need_profile()?)?),
        AugmentMethod::Jitter => Loaded::None,
    };
    let files = inputs(input)?;
    prepare_output(input, output)?;

    let groups = process_all(&files, |i, path, img| {
        (0..count)
            .map(|k| {
                let mut rng = task_rng(seed, i as u64, k as u64);
                let out = match &loaded {
                    Loaded::Stain(p) => sca_augment(img, p, config, &mut rng)?,
                    Loaded::Lab(p) => randstainna_augment(img, p, &mut rng),
                    Loaded::None => stain_jitter(img, jitter, jitter_matrix, &config.stain, &mut rng)?,
                };
                Ok((output.join(format!("{}_aug{k}.png", stem(path))), encode_png(&out)?))
            })
            .collect()
    })?;
    let n = write_groups(groups)?;
    println!("wrote {n} images");
    Ok(())
}

fn cmd_pair(
    profile: &Path,
    input: &Path,
    output: &Path,
    seed: u64,
    config: &AugmentConfig,
    verify: bool,
) -> CmdResult {
    let profile = load_profile(profile)?;
    profile.check_conventions(&config.stain)?;
    let files = inputs(input)?;
    prepare_output(input, output)?;

    let groups = process_all(&files, |i, path, img| {
        let renders = scl_pair_float(img, &profile, config, &mut task_rng(seed, i as u64, 0))?;
        if verify {
            let gap = renders.concentration_discrepancy()?;
            if gap > PAIR_TOLERANCE {
                return Err(Error::InvalidImage(format!(
                    "pair concentrations differ by {gap:e}"
                )));
            }
        }
        let pair = renders.to_pair();
        let s = stem(path);
        Ok(vec![
            (output.join(format!("{s}_a.png")), encode_png(&pair.image_a)?),
            (output.join(format!("{s}_b.png")), encode_png(&pair.image_b)?),
        ])
    })?;
    let n = write_groups(groups)?;
    if verify {
        println!("verified {} pairs (tolerance {PAIR_TOLERANCE:e})", n / 2);
    }
    println!("wrote {n} images");
    Ok(())
}

fn cmd_normalize(
    method: NormMethod,
    reference: &Path,
    input: &Path,
    output: &Path,
    config: &NormConfig,
) -> CmdResult {
    let reference = make_reference(&load_png(reference)?, method, config)?;
    let files = inputs(input)?;
    prepare_output(input, output)?;
    let groups = process_all(&files, |_, path, img| {
        let out = normalize(img, &reference, &config.stain)?;
        let name = path.file_name().expect("listed files have names");
        Ok(vec![(output.join(name), encode_png(&out)?)])
    })?;
    let n = write_groups(groups)?;
    println!("wrote {n} images");
    Ok(())
}

fn cmd_metrics(gt: &Path, pred: &Path, per_image: bool) -> CmdResult {
    let files = inputs(gt)?;
    let reports = files
        .par_iter()
        .map(|path| {
            let name = path.file_name().expect("listed files have names");
            let g = load_instance_png(path)?;
            let p = load_instance_png(pred.join(name))?;
            match_instances(&g, &p, IOU_THRESHOLD)
        })
        .collect::<Result<Vec<_>>>()?;

    println!("image\tF1_50\tPQ_50");
    if per_image {
        for (path, r) in files.iter().zip(&reports) {
            println!("{}\t{:.6}\t{:.6}", stem(path), f1_50(r), pq_50(r));
        }
    }
    let mode = if per_image {
        Aggregation::PerImage
    } else {
        Aggregation::Dataset
    };
    let (f1, pq) = aggregate(&reports, mode).expect("at least one image");
    let label = if per_image { "mean" } else { "dataset" };
    println!("{label}\t{f1:.6}\t{pq:.6}");
    Ok(())
}
