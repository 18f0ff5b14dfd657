//! Subcommand implementations: gen-data, train, translate, eval.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use ca3d_core::config::VolumeMode;
use ca3d_core::data::{
    container_read, container_write, dataset_generate, load_split, read_pgm, write_pgm, Split,
};
use ca3d_core::diffusion::{
    sample, training_loss, ConditioningOptions, Direction, NoiseSchedule, SampleOptions,
};
use ca3d_core::geometry::PhantomSpec;
use ca3d_core::metrics::{psnr, ssim_default, MetricReport};
use ca3d_core::optim::{optimizer_step, AdamW, OptimizerState};
use ca3d_core::unet::{load_checkpoint, save_checkpoint, CheckpointMeta, UNet};
use ca3d_core::{Rng, RunConfig, Tensor};

use crate::{CliError, CliResult};

pub fn gen_data(out: &Path, count: usize, size: usize, seed: u64) -> CliResult {
    if count == 0 {
        return Err(CliError::usage("--count must be >= 1"));
    }
    if size < 8 {
        return Err(CliError::usage("--size must be >= 8"));
    }
    let spec = PhantomSpec::new(size, seed);
    let entries = dataset_generate(out, count, &spec, seed).map_err(|e| CliError::io(e.to_string()))?;
    let count_of = |s: Split| entries.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {count} pairs ({}x{size}x{size}) to {}: train/val/test = {}/{}/{}",
        size,
        out.display(),
        count_of(Split::Train),
        count_of(Split::Val),
        count_of(Split::Test),
    );
    Ok(())
}

pub fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    steps: usize,
    no_caca: bool,
    no_im3d: bool,
) -> CliResult {
    if steps == 0 {
        return Err(CliError::usage("--steps must be >= 1"));
    }
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;

    let pairs = load_split(data, Split::Train).map_err(|e| CliError::io(format!("loading dataset: {e}")))?;
    if pairs.is_empty() {
        return Err(CliError::io("train split is empty"));
    }
    if pairs[0].cc.shape() != [cfg.image_size, cfg.image_size] {
        return Err(CliError::usage(format!(
            "dataset images are {:?} but the config expects {}x{}",
            pairs[0].cc.shape(),
            cfg.image_size,
            cfg.image_size
        )));
    }

    let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
    let mut unet_cfg = cfg.unet_config();
    unet_cfg.caca_enabled = !no_caca;
    unet_cfg.im3d_enabled = !no_im3d;
    let mut rng = Rng::new(cfg.seed);
    let mut model = UNet::new(unet_cfg, &mut rng)?;
    let opt = AdamW::new(cfg.lr);
    let mut state = OptimizerState::new(&model.store);
    let cond = ConditioningOptions {
        use_volume: !no_im3d,
        reference_only: cfg.volume_mode == VolumeMode::ReferenceOnly,
    };

    let log_path = out.with_extension("log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(format!("opening {}: {e}", log_path.display())))?;

    println!(
        "training: {} pairs, {} params, T={}, batch={}, steps={steps}, caca={}, im3d={}",
        pairs.len(),
        model.param_count(),
        cfg.t_steps,
        cfg.batch,
        !no_caca,
        !no_im3d
    );
    let start = Instant::now();
    let mut last_loss = f32::NAN;
    for step in 0..steps {
        let batch: Vec<_> = (0..cfg.batch)
            .map(|_| pairs[rng.below(pairs.len())].clone())
            .collect();
        let loss = training_loss(&model, &batch, &sched, cfg.mask_prob, cond, &mut rng)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            let _ = writeln!(log, "{step}\tNaN\t{}", start.elapsed().as_millis());
            return Err(CliError::numeric(format!("loss became non-finite at step {step}")));
        }
        loss.backward()?;
        let grads = model.store.take_grads_zero_filled();
        optimizer_step(&opt, &mut model.store, &grads, &mut state)?;
        last_loss = loss_val;

        if step % 50 == 0 || step + 1 == steps {
            writeln!(log, "{step}\t{loss_val}\t{}", start.elapsed().as_millis())
                .map_err(|e| CliError::io(e.to_string()))?;
        }
        if step % 200 == 0 {
            println!("step {step}: loss {loss_val:.4}");
        }
    }

    save_checkpoint(
        out,
        &model,
        &sched,
        cfg.volume_mode,
        CheckpointMeta {
            step: state.step_count(),
            seed: cfg.seed,
        },
    )?;
    println!(
        "done: final loss {last_loss:.4} after {steps} steps ({:.1}s); checkpoint at {}",
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

/// Read a translation input: PGM, or a container holding the source view
/// (record named after the view, "image", or a single record).
fn read_input_image(path: &Path, source_view: &str) -> Result<Tensor, CliError> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        return Ok(read_pgm(path)?);
    }
    let records = container_read(path)?;
    if records.len() == 1 {
        return Ok(records.into_iter().next().unwrap().1);
    }
    for want in [source_view, "image"] {
        if let Some((_, t)) = records.iter().find(|(n, _)| n == want) {
            return Ok(t.clone());
        }
    }
    Err(CliError::usage(format!(
        "{}: no '{source_view}' or 'image' record found",
        path.display()
    )))
}

#[allow(clippy::too_many_arguments)]
pub fn translate(
    ckpt: &Path,
    input: &Path,
    direction: &str,
    steps: usize,
    guidance: f32,
    seed: u64,
    out: &Path,
) -> CliResult {
    let dir = Direction::parse(direction).map_err(|e| CliError::usage(e.to_string()))?;
    let (model, sched, volume_mode, _meta) =
        load_checkpoint(ckpt).map_err(|e| CliError::io(format!("loading checkpoint: {e}")))?;
    if steps == 0 || steps > sched.len() {
        return Err(CliError::usage(format!(
            "--steps {steps} out of range 1..={} (checkpoint T)",
            sched.len()
        )));
    }
    let source_view = match dir {
        Direction::Cc2Mlo => "cc",
        Direction::Mlo2Cc => "mlo",
    };
    let img = read_input_image(input, source_view)?;
    let size = model.cfg.image_size;
    if img.shape() != [size, size] {
        return Err(CliError::usage(format!(
            "input is {:?} but the checkpoint expects {size}x{size}",
            img.shape()
        )));
    }

    let opts = SampleOptions {
        steps,
        guidance,
        seed,
        conditioning: ConditioningOptions {
            use_volume: model.cfg.im3d_enabled,
            reference_only: volume_mode == VolumeMode::ReferenceOnly,
        },
        conditional_only: false,
    };
    let result = sample(&model, &img, dir, &sched, &opts)?;

    let stem = strip_image_ext(out);
    let pgm = stem.with_extension("pgm");
    let bin = stem.with_extension("ca3d");
    write_pgm(&pgm, &result)?;
    container_write(&bin, &[("image", &result)])?;
    println!("wrote {} and {}", pgm.display(), bin.display());
    Ok(())
}

fn strip_image_ext(path: &Path) -> std::path::PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ca3d") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    out: &Path,
    seed: u64,
    steps: usize,
    guidance: f32,
    identity: bool,
) -> CliResult {
    let split = Split::parse(split).map_err(|e| CliError::usage(e.to_string()))?;
    let (model, sched, volume_mode, _meta) =
        load_checkpoint(ckpt).map_err(|e| CliError::io(format!("loading checkpoint: {e}")))?;
    if steps == 0 || steps > sched.len() {
        return Err(CliError::usage(format!(
            "--steps {steps} out of range 1..={}",
            sched.len()
        )));
    }
    let pairs = load_split(data, split).map_err(|e| CliError::io(format!("loading dataset: {e}")))?;
    if pairs.is_empty() {
        return Err(CliError::io(format!("split '{}' is empty", split.as_str())));
    }

    let conditioning = ConditioningOptions {
        use_volume: model.cfg.im3d_enabled,
        reference_only: volume_mode == VolumeMode::ReferenceOnly,
    };

    // (psnr, ssim) per direction per sample; samples translate concurrently
    // with ids-derived seeds, so the report is independent of scheduling.
    let results: Vec<Result<(u64, [f32; 2], [f32; 2]), CliError>> = pairs
        .par_iter()
        .map(|pair| {
            if identity {
                let p0 = psnr(&pair.mlo, &pair.mlo)?;
                let s0 = ssim_default(&pair.mlo, &pair.mlo)?;
                let p1 = psnr(&pair.cc, &pair.cc)?;
                let s1 = ssim_default(&pair.cc, &pair.cc)?;
                return Ok((pair.id, [p0, s0], [p1, s1]));
            }
            let run = |dir: Direction, reference: &Tensor, target: &Tensor, salt: u64| {
                let opts = SampleOptions {
                    steps,
                    guidance,
                    seed: seed ^ pair.id ^ salt,
                    conditioning,
                    conditional_only: false,
                };
                let generated = sample(&model, reference, dir, &sched, &opts)?;
                Ok::<[f32; 2], CliError>([psnr(&generated, target)?, ssim_default(&generated, target)?])
            };
            let cc2mlo = run(Direction::Cc2Mlo, &pair.cc, &pair.mlo, 0)?;
            let mlo2cc = run(Direction::Mlo2Cc, &pair.mlo, &pair.cc, 0x8000_0000_0000_0000)?;
            Ok((pair.id, cc2mlo, mlo2cc))
        })
        .collect();

    let mut rep_cc2mlo = MetricReport::default();
    let mut rep_mlo2cc = MetricReport::default();
    for r in results {
        let (id, fwd, back) = r?;
        rep_cc2mlo.push(format!("cc2mlo/{id}"), fwd[0], fwd[1]);
        rep_mlo2cc.push(format!("mlo2cc/{id}"), back[0], back[1]);
    }

    let text = format!("{}{}", rep_cc2mlo.emit(), rep_mlo2cc.emit());
    std::fs::write(out, &text).map_err(|e| CliError::io(e.to_string()))?;
    println!(
        "{} samples | cc2mlo PSNR {:.3} SSIM {:.4} | mlo2cc PSNR {:.3} SSIM {:.4} | report at {}",
        rep_cc2mlo.len(),
        rep_cc2mlo.mean_psnr(),
        rep_cc2mlo.mean_ssim(),
        rep_mlo2cc.mean_psnr(),
        rep_mlo2cc.mean_ssim(),
        out.display()
    );
    Ok(())
}
