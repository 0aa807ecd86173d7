//! Single-threaded throughput benchmark over a seeded synthetic corpus.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::augment::{
    fit_lab_profile, randstainna_augment, sca_augment, stain_jitter, AugmentConfig, JitterMatrix,
    JitterParams,
};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::normalize::{make_reference, normalize, NormConfig, NormMethod};
use crate::profile::{extract_image_stats, fit_profile, StainConfig};
use crate::seed::task_rng;
use crate::synth;

/// Images used to fit profiles before timing starts.
const PROFILE_IMAGES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchMethod {
    Reinhard,
    Sca,
    /// Macenko normalisation.
    Macenko,
    Hm,
    Fda,
    Jitter,
    Randstainna,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Reinhard => "reinhard",
            BenchMethod::Sca => "sca",
            BenchMethod::Macenko => "macenko",
            BenchMethod::Hm => "hm",
            BenchMethod::Fda => "fda",
            BenchMethod::Jitter => "jitter",
            BenchMethod::Randstainna => "randstainna",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<BenchMethod>,
    pub size: usize,
    pub count: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![BenchMethod::Reinhard, BenchMethod::Sca, BenchMethod::Macenko],
            size: 256,
            count: 1000,
            warmup: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub seconds: f64,
    pub images_per_second: f64,
}

type Runner = Box<dyn Fn(usize, &RgbImage) -> Result<RgbImage>>;

fn runner(method: BenchMethod, corpus: &[RgbImage], seed: u64) -> Result<Runner> {
    let stain = StainConfig::default();
    let fit_set = &corpus[..corpus.len().min(PROFILE_IMAGES)];
    let norm = |m: NormMethod| -> Result<Runner> {
        let reference = make_reference(&corpus[0], m, &NormConfig::default())?;
        Ok(Box::new(move |_, img| normalize(img, &reference, &stain)))
    };
    Ok(match method {
        BenchMethod::Reinhard => norm(NormMethod::Reinhard)?,
        BenchMethod::Macenko => norm(NormMethod::Macenko)?,
        BenchMethod::Hm => norm(NormMethod::Histogram)?,
        BenchMethod::Fda => norm(NormMethod::Fda)?,
        BenchMethod::Sca => {
            let stats = fit_set
                .iter()
                .filter_map(|img| extract_image_stats(img, &stain).ok())
                .collect::<Vec<_>>();
            let profile = fit_profile(&stats, &stain, false)?;
            let config = AugmentConfig {
                stain,
                ..Default::default()
            };
            Box::new(move |i, img| sca_augment(img, &profile, &config, &mut task_rng(seed, i as u64, 0)))
        }
        BenchMethod::Jitter => {
            let params = JitterParams::default();
            Box::new(move |i, img| {
                stain_jitter(img, &params, JitterMatrix::PerImage, &stain, &mut task_rng(seed, i as u64, 0))
            })
        }
        BenchMethod::Randstainna => {
            let profile = fit_lab_profile(fit_set)?;
            Box::new(move |i, img| Ok(randstainna_augment(img, &profile, &mut task_rng(seed, i as u64, 0))))
        }
    })
}

/// Images timed per method before moving to the next one.
const ROUND_SIZE: usize = 50;

/// Times each method over the same corpus on the calling thread. Corpus
/// generation, profile fitting and reference preparation are not timed.
///
/// Methods are timed in interleaved rounds of `ROUND_SIZE` images so slow
/// drift in clock speed affects every method alike; each method still
/// processes every image exactly once.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.count == 0 || config.size < 16 {
        return Err(Error::InvalidParameter(
            "bench needs --count >= 1 and --size >= 16".into(),
        ));
    }
    let corpus = synth::corpus(config.seed, config.count, config.size);
    let runners = config
        .methods
        .iter()
        .map(|&m| runner(m, &corpus, config.seed))
        .collect::<Result<Vec<_>>>()?;
    for run in &runners {
        for i in 0..config.warmup {
            black_box(run(i, &corpus[i % corpus.len()])?);
        }
    }
    let mut elapsed = vec![Duration::ZERO; runners.len()];
    for start in (0..corpus.len()).step_by(ROUND_SIZE) {
        let end = (start + ROUND_SIZE).min(corpus.len());
        for (run, total) in runners.iter().zip(&mut elapsed) {
            let t = Instant::now();
            for (i, img) in corpus.iter().enumerate().take(end).skip(start) {
                black_box(run(i, black_box(img))?);
            }
            *total += t.elapsed();
        }
    }
    Ok(config
        .methods
        .iter()
        .zip(elapsed)
        .map(|(&method, d)| {
            let seconds = d.as_secs_f64();
            BenchRow {
                method,
                seconds,
                images_per_second: config.count as f64 / seconds,
            }
        })
        .collect())
}

/// Methods from fastest to slowest, e.g. `reinhard < sca < macenko`.
pub fn ordering_summary(rows: &[BenchRow]) -> String {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.seconds.total_cmp(&b.seconds));
    sorted
        .iter()
        .map(|r| r.method.name())
        .collect::<Vec<_>>()
        .join(" < ")
}

/// CPU model from `/proc/cpuinfo` where available.
pub fn cpu_description() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

pub fn to_csv(rows: &[BenchRow], config: &BenchConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# cpu: {}", cpu_description());
    let _ = writeln!(
        out,
        "# threads: 1, images: {}, size: {}x{}, warmup: {}, seed: {}",
        config.count, config.size, config.size, config.warmup, config.seed
    );
    out.push_str("method,seconds,images_per_second\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.3}", r.method.name(), r.seconds, r.images_per_second);
    }
    let _ = writeln!(out, "# ordering: {}", ordering_summary(rows));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_reports_every_method() {
        let config = BenchConfig {
            methods: vec![
                BenchMethod::Reinhard,
                BenchMethod::Sca,
                BenchMethod::Macenko,
                BenchMethod::Hm,
                BenchMethod::Fda,
                BenchMethod::Jitter,
                BenchMethod::Randstainna,
            ],
            size: 32,
            count: 3,
            warmup: 1,
            seed: 1,
        };
        let rows = run_bench(&config).unwrap();
        assert_eq!(rows.len(), 7);
        let csv = to_csv(&rows, &config);
        assert!(csv.starts_with("# cpu: "));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 8);
        assert!(rows.iter().all(|r| r.seconds > 0.0));
    }
}
