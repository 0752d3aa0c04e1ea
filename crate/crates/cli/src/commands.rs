//! Subcommand implementations: train, denoise, evaluate, gen-data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;

use cadis_core::error::{CoreError, Result};
use cadis_core::imaging::{
    add_noise, extract_patches, load_dataset_dir, load_image, psnr, save_pgm, PatchGrid,
};
use cadis_core::model_io::{load_model, save_model};
use cadis_core::pipeline::{denoise, DenoiseReport};
use cadis_core::prior::{learn_prior, ClusterModel, LearnOptions};
use cadis_core::seed;
use cadis_core::snis::NoiseModel;
use cadis_core::synth;

use crate::config_file;
use crate::{DenoiseArgs, EvaluateArgs, GenDataArgs, TrainArgs};

const REPORT_HEADER: &str =
    "image,sigma,seed,pass1_psnr,pass2_psnr,sigma2,mean_ess,fallback_rate,wall_ms";

fn io_err(e: std::io::Error) -> CoreError {
    CoreError::ImageIo(e.into())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    Ok(())
}

/// `root/sub` when that directory exists, else `root` itself.
fn subdir_or_self(root: &Path, sub: &str) -> PathBuf {
    let candidate = root.join(sub);
    if candidate.is_dir() {
        candidate
    } else {
        root.to_path_buf()
    }
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn parse_list<T: std::str::FromStr>(text: &str, name: &'static str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let value = item
            .parse::<T>()
            .map_err(|_| CoreError::invalid_parameter(name, format!("bad value {item:?}")))?;
        out.push(value);
    }
    if out.is_empty() {
        return Err(CoreError::invalid_parameter(name, "empty list"));
    }
    Ok(out)
}

/// One CSV row of the per-run report. Cells for the second pass stay empty
/// on single-pass runs; PSNR cells stay empty without a clean reference.
fn report_row(image: &str, sigma: f64, run_seed: u64, report: &DenoiseReport, wall_ms: u128) -> String {
    let psnrs = report.pass_psnrs.as_deref().unwrap_or(&[]);
    let pass1 = psnrs.first().map(|v| format!("{v:.4}")).unwrap_or_default();
    let pass2 = psnrs.get(1).map(|v| format!("{v:.4}")).unwrap_or_default();
    let sigma2 = report
        .sigma2
        .map(|v| format!("{v:.6}"))
        .unwrap_or_default();
    let last = report.pass_stats.last().expect("at least one pass");
    format!(
        "{image},{sigma},{run_seed},{pass1},{pass2},{sigma2},{:.3},{:.6},{wall_ms}",
        last.mean_ess,
        last.fallback_rate()
    )
}

fn source_date_epoch() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = config_file::resolve(&args.common)?;
    let data_dir = subdir_or_self(&args.data, "train");
    let (images, skipped) = load_dataset_dir(&data_dir)?;
    if images.is_empty() {
        return Err(CoreError::EmptyInput("training directory"));
    }
    println!(
        "loaded {} training images from {}",
        images.len(),
        data_dir.display()
    );
    if !skipped.is_empty() {
        println!("skipped {} non-image files", skipped.len());
    }

    let mut mats = Vec::with_capacity(images.len());
    for (path, img) in &images {
        let grid = PatchGrid::new(img.width(), img.height(), cfg.patch_side, cfg.train_stride)
            .map_err(|e| {
                CoreError::invalid_parameter("data", format!("{}: {e}", path.display()))
            })?;
        mats.push(extract_patches(img, &grid)?);
    }
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    let patches = ndarray::concatenate(Axis(0), &views).expect("patch dims agree");
    let n_patches = patches.nrows();
    println!(
        "training {} clusters on {} patches of side {} (stride {}, beta {})",
        cfg.clusters, n_patches, cfg.patch_side, cfg.train_stride, cfg.beta
    );

    let mut model = learn_prior(
        patches,
        cfg.patch_side,
        cfg.clusters,
        cfg.beta,
        cfg.base_seed,
        &LearnOptions::default(),
    )?;
    model.set_created_unix(source_date_epoch());

    print_model_summary(&model, n_patches);

    ensure_parent(&args.model)?;
    save_model(&model, &args.model)?;
    let bytes = fs::metadata(&args.model).map_err(io_err)?.len();
    println!("wrote {} ({} bytes)", args.model.display(), bytes);
    Ok(())
}

fn print_model_summary(model: &ClusterModel, n_patches: usize) {
    let mut sizes: Vec<usize> = model
        .clusters()
        .iter()
        .map(|c| c.members().len())
        .collect();
    sizes.sort_unstable();
    let median = sizes[sizes.len() / 2];
    println!(
        "cluster sizes: min {} / median {} / max {}",
        sizes[0],
        median,
        sizes[sizes.len() - 1]
    );
    println!("cluster sizes (sorted): {sizes:?}");
    let meta = model.meta();
    println!(
        "outer iterations {}, reseed events {}",
        meta.outer_iterations, meta.reseed_events
    );
    if let Some(ll) = meta.ll_trace.last() {
        println!(
            "final log-likelihood per patch: {:.6}",
            ll / n_patches as f64
        );
    }
}

pub fn denoise_cmd(args: DenoiseArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let cfg = config_file::resolve_with_model(&args.common, model.patch_side())?;
    let noisy = load_image(&args.input)?;
    let noise = NoiseModel::new(args.sigma)?;
    let clean = match &args.clean {
        Some(path) => Some(load_image(path)?),
        None => None,
    };

    let started = Instant::now();
    let (estimate, report) = denoise(&noisy, &model, &noise, &cfg, clean.as_ref())?;
    let wall_ms = started.elapsed().as_millis();

    ensure_parent(&args.output)?;
    save_pgm(&estimate, &args.output)?;

    for (i, stats) in report.pass_stats.iter().enumerate() {
        println!(
            "pass {}: sigma {:.3}, mean ESS {:.3}, fallback rate {:.4}%",
            i + 1,
            stats.sigma,
            stats.mean_ess,
            100.0 * stats.fallback_rate()
        );
    }
    if let (Some(reference), Some(psnrs)) = (clean.as_ref(), report.pass_psnrs.as_ref()) {
        let noisy_psnr = psnr(reference, &noisy)?;
        print!("PSNR: noisy {noisy_psnr:.4} dB");
        for (i, value) in psnrs.iter().enumerate() {
            print!(", pass {} {value:.4} dB", i + 1);
        }
        println!();
    }
    println!("wrote {} ({wall_ms} ms)", args.output.display());

    if let Some(report_path) = &args.report {
        let row = report_row(
            &file_label(&args.input),
            args.sigma,
            cfg.base_seed,
            &report,
            wall_ms,
        );
        ensure_parent(report_path)?;
        fs::write(report_path, format!("{REPORT_HEADER}\n{row}\n")).map_err(io_err)?;
        println!("wrote {}", report_path.display());
    }
    Ok(())
}

/// Running means for one noise level of an evaluation grid.
#[derive(Default)]
struct SigmaAgg {
    runs: usize,
    pass1_sum: f64,
    final_sum: f64,
    sigma2_sum: f64,
    sigma2_runs: usize,
    ess_sum: f64,
    fallback_sum: f64,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let sigmas: Vec<f64> = parse_list(&args.sigma, "sigma")?;
    let run_seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;

    let model = load_model(&args.model)?;
    let cfg = config_file::resolve_with_model(&args.common, model.patch_side())?;
    let data_dir = subdir_or_self(&args.data, "test");
    let (images, _skipped) = load_dataset_dir(&data_dir)?;
    if images.is_empty() {
        return Err(CoreError::EmptyInput("test directory"));
    }
    fs::create_dir_all(&args.out).map_err(io_err)?;
    println!(
        "evaluating {} images x {} noise levels x {} seeds",
        images.len(),
        sigmas.len(),
        run_seeds.len()
    );

    let mut rows = Vec::new();
    let mut aggs: Vec<SigmaAgg> = sigmas.iter().map(|_| SigmaAgg::default()).collect();

    for (sigma_idx, &sigma) in sigmas.iter().enumerate() {
        let noise = NoiseModel::new(sigma)?;
        for &run_seed in &run_seeds {
            for (image_idx, (path, clean)) in images.iter().enumerate() {
                let noise_seed = seed::mix(run_seed, image_idx as u64);
                let noisy = add_noise(clean, sigma, noise_seed)?;
                let mut run_cfg = cfg.clone();
                run_cfg.base_seed = run_seed;

                let started = Instant::now();
                let (estimate, report) = denoise(&noisy, &model, &noise, &run_cfg, Some(clean))?;
                let wall_ms = if args.fixed_timing {
                    0
                } else {
                    started.elapsed().as_millis()
                };

                rows.push(report_row(
                    &file_label(path),
                    sigma,
                    run_seed,
                    &report,
                    wall_ms,
                ));

                let psnrs = report.pass_psnrs.as_deref().expect("clean given");
                let agg = &mut aggs[sigma_idx];
                agg.runs += 1;
                agg.pass1_sum += psnrs[0];
                agg.final_sum += psnrs[psnrs.len() - 1];
                if let Some(sigma2) = report.sigma2 {
                    agg.sigma2_sum += sigma2;
                    agg.sigma2_runs += 1;
                }
                let last = report.pass_stats.last().expect("at least one pass");
                agg.ess_sum += last.mean_ess;
                agg.fallback_sum += last.fallback_rate();

                if !args.no_images {
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| format!("image{image_idx}"));
                    let out_path = args.out.join(format!("{stem}_s{sigma}_seed{run_seed}.pgm"));
                    save_pgm(&estimate, &out_path)?;
                }
            }
        }
    }

    let mut report_csv = String::from(REPORT_HEADER);
    report_csv.push('\n');
    for row in &rows {
        report_csv.push_str(row);
        report_csv.push('\n');
    }
    let report_path = args.out.join("report.csv");
    fs::write(&report_path, &report_csv).map_err(io_err)?;

    let mut summary_csv = String::from(
        "sigma,runs,mean_pass1_psnr,mean_final_psnr,mean_sigma2,mean_ess,mean_fallback_rate\n",
    );
    for (&sigma, agg) in sigmas.iter().zip(&aggs) {
        let n = agg.runs as f64;
        let mean_sigma2 = if agg.sigma2_runs > 0 {
            format!("{:.6}", agg.sigma2_sum / agg.sigma2_runs as f64)
        } else {
            String::new()
        };
        writeln!(
            summary_csv,
            "{sigma},{},{:.4},{:.4},{mean_sigma2},{:.3},{:.6}",
            agg.runs,
            agg.pass1_sum / n,
            agg.final_sum / n,
            agg.ess_sum / n,
            agg.fallback_sum / n
        )
        .expect("write to string");
        println!(
            "sigma {sigma}: pass1 {:.4} dB, final {:.4} dB ({} runs)",
            agg.pass1_sum / n,
            agg.final_sum / n,
            agg.runs
        );
    }
    let summary_path = args.out.join("summary.csv");
    fs::write(&summary_path, &summary_csv).map_err(io_err)?;
    println!("wrote {}", report_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    synth::write_dataset(&args.out, args.train, args.test, args.size, args.seed)?;
    println!(
        "wrote {} training and {} test images ({}x{}) under {}",
        args.train,
        args.test,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}
