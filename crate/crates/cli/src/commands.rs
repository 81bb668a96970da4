//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rmm_core::degradation::{degrade as apply_degradation, substream_seed};
use rmm_core::gradcheck::{module_maxima, run_suites, TOLERANCE};
use rmm_core::imageio::{load_rgb, save_png};
use rmm_core::metrics::{ms_ssim, psnr, ssim};
use rmm_core::pipeline::{
    attention_maps, load_dataset, restore as restore_image, synth_dataset, write_dataset, Checkpoint, Model, Trainer,
};
use rmm_core::wavelet::{wpd_forward_padded, wpd_inverse};
use rmm_core::{Error, MemoryBank, RunConfig, Tensor};

use crate::outdir::OutDir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("output directory is locked by another run ({})", .0.display())]
    Locked(PathBuf),
    #[error("{0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Locked(_) => "LOCK",
            CliError::Gradcheck(_) => "GRADCHECK",
        }
    }

    /// Unknown configuration keys are usage errors.
    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Core(Error::UnknownKey(_)))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Core(e.into()))
}

/// `input` itself, or the PNG files directly inside it in name order.
fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(input).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", input.display())))
    })?;
    if meta.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = io(fs::read_dir(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no PNG files in {}", input.display()),
        ))
        .into());
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = synth_dataset(cfg.get("data.count")?, cfg.get("data.resolution")?, cfg.get("seed")?)?;
    let dir = OutDir::acquire(out, cfg)?;
    write_dataset(dir.join(""), &data)?;
    println!("wrote {} faces to {}", data.len(), out.display());
    Ok(())
}

pub fn degrade(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let files = png_inputs(input)?;
    let ranges = cfg.degradation_ranges()?;
    let seed: u64 = cfg.get("seed")?;
    let dir = OutDir::acquire(out, cfg)?;
    let mut manifest = String::new();
    for (i, f) in files.iter().enumerate() {
        let img = load_rgb(f)?;
        let (_, h, w) = img.dims3()?;
        let sampled = ranges.sample_divisible(substream_seed(seed, i as u64), h, w)?;
        let (lq, applied) = apply_degradation(&img, &sampled)?;
        let name = file_name(f);
        save_png(dir.join(&name), &lq)?;
        let _ = writeln!(manifest, "file={name} {applied}");
    }
    io(fs::write(dir.join("degradation.txt"), manifest))?;
    println!("degraded {} images into {}", files.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data_dir: Option<&Path>, out: &Path) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let data = match data_dir {
        Some(d) => load_dataset(d)?,
        None => synth_dataset(cfg.get("data.count")?, cfg.get("data.resolution")?, seed)?,
    };
    let steps: usize = cfg.get("train.steps")?;
    let every: usize = cfg.get("train.checkpoint_every")?;
    let mut trainer = Trainer::new(cfg.generator_config()?, cfg.train_config()?)?;
    let dir = OutDir::acquire(out, cfg)?;
    let mut log = String::new();
    let started = Instant::now();
    for _ in 0..steps {
        let t0 = Instant::now();
        let entry = trainer.train_step(&data)?;
        let line = format!("{entry} elapsed_ms={}", t0.elapsed().as_millis());
        log::info!("{line}");
        log.push_str(&line);
        log.push('\n');
        let done = trainer.steps_taken() as usize;
        if every > 0 && done.is_multiple_of(every) && done < steps {
            save_snapshot(&trainer, cfg, &dir, &format!("_{done:06}"))?;
        }
    }
    io(fs::write(dir.join("log.txt"), log))?;
    save_snapshot(&trainer, cfg, &dir, "")?;
    println!(
        "trained {steps} steps in {:.1}s; memory occupancy {}/{}",
        started.elapsed().as_secs_f64(),
        trainer.bank.occupied_count(),
        trainer.bank.capacity()
    );
    Ok(())
}

fn save_snapshot(trainer: &Trainer, cfg: &RunConfig, dir: &OutDir, suffix: &str) -> Result<()> {
    let bank_name = format!("bank{suffix}.mmb");
    trainer.bank.save(dir.join(&bank_name))?;
    Checkpoint::from_trainer(trainer, cfg, &bank_name)?.save(dir.join(format!("checkpoint{suffix}.mmck")))?;
    Ok(())
}

/// Loads the model and its bank, checking the bank digest when it comes from
/// the path recorded in the checkpoint.
fn load_model(checkpoint: &Path, bank: Option<&Path>) -> Result<(Model, MemoryBank)> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let loaded = match bank {
        Some(b) => {
            let loaded = MemoryBank::load(b)?;
            if let Err(e) = ck.verify_bank(&loaded) {
                log::warn!("{e}");
            }
            loaded
        }
        None => {
            let base = checkpoint.parent().unwrap_or(Path::new("."));
            let loaded = MemoryBank::load(base.join(&ck.bank_path))?;
            ck.verify_bank(&loaded)?;
            loaded
        }
    };
    Ok((model, loaded))
}

pub fn restore(cfg: &RunConfig, checkpoint: &Path, bank: Option<&Path>, input: &Path, out: &Path) -> Result<()> {
    let files = png_inputs(input)?;
    let (model, bank) = load_model(checkpoint, bank)?;
    let seed: u64 = cfg.get("seed")?;
    let dir = OutDir::acquire(out, cfg)?;
    let mut manifest = String::new();
    for (i, f) in files.iter().enumerate() {
        let lq = load_rgb(f)?;
        let r = restore_image(&lq, &model, &bank, substream_seed(seed, i as u64))?;
        let name = file_name(f);
        save_png(dir.join(&name), &r.image)?;
        match r.retrieved {
            Some((slot, sim)) => {
                let _ = writeln!(manifest, "file={name} slot={slot} similarity={sim:.9}");
            }
            None => {
                let _ = writeln!(manifest, "file={name} slot=none");
            }
        }
    }
    io(fs::write(dir.join("retrieval.txt"), manifest))?;
    println!("restored {} images into {}", files.len(), out.display());
    Ok(())
}

pub fn wpd(cfg: &RunConfig, levels: usize, input: &Path, out: &Path) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("--levels must be at least 1".into()).into());
    }
    let img = load_rgb(input)?;
    let tree = wpd_forward_padded(&img, levels)?;
    let dir = OutDir::acquire(out, cfg)?;
    for (j, band) in tree.subbands().iter().enumerate() {
        band.save(dir.join(format!("subband_{j:03}.tensor")))?;
    }
    let mosaics: Vec<Tensor> = (0..tree.channel_count()).map(|c| tree.mosaic(c)).collect();
    let (_, h, w) = mosaics[0].dims3()?;
    let grid = if mosaics.len() == 3 {
        Tensor::new(&[3, h, w], mosaics.iter().flat_map(|m| m.data().iter().copied()).collect())?
    } else {
        mosaics[0].clone()
    };
    save_png(dir.join("grid.png"), &grid)?;
    let back = wpd_inverse(&tree)?;
    println!(
        "levels={levels} subbands={} roundtrip_max_abs_err={:.3e} energy_in={:.9e} energy_out={:.9e}",
        tree.subbands().len(),
        back.max_abs_diff(&img),
        img.sum_sq(),
        tree.energy()
    );
    Ok(())
}

pub fn dump_attn(cfg: &RunConfig, checkpoint: &Path, bank: Option<&Path>, input: &Path, out: &Path) -> Result<()> {
    let (model, bank) = load_model(checkpoint, bank)?;
    let lq = load_rgb(input)?;
    let maps = attention_maps(&lq, &model, &bank, substream_seed(cfg.get("seed")?, 0))?;
    let dir = OutDir::acquire(out, cfg)?;
    for (j, m) in maps.iter().enumerate() {
        m.instance.save(dir.join(format!("block{j}_instance.tensor")))?;
        m.layer.save(dir.join(format!("block{j}_layer.tensor")))?;
        m.gate.save(dir.join(format!("block{j}_gate.tensor")))?;
        // Source weights as RGB: spatial, noise, wavelet.
        save_png(dir.join(format!("block{j}_instance.png")), &m.instance)?;
        save_png(dir.join(format!("block{j}_layer.png")), &m.layer)?;
        if m.gate.dims3()?.0 == 1 {
            save_png(dir.join(format!("block{j}_gate.png")), &m.gate)?;
        }
    }
    println!("wrote attention maps of {} blocks to {}", maps.len(), out.display());
    Ok(())
}

pub fn memory_dump(cfg: &RunConfig, bank_path: &Path, out: &Path) -> Result<()> {
    let bank = MemoryBank::load(bank_path)?;
    let slots: Vec<usize> = (0..bank.capacity()).filter(|&s| bank.is_occupied(s)).collect();
    let keys: Vec<f64> = slots.iter().flat_map(|&s| bank.key(s).iter().copied()).collect();
    let values: Vec<f64> = slots.iter().flat_map(|&s| bank.value(s).iter().copied()).collect();
    let dir = OutDir::acquire(out, cfg)?;
    Tensor::new(&[slots.len(), bank.key_dim()], keys)?.save(dir.join("keys.tensor"))?;
    Tensor::new(&[slots.len(), bank.value_dim()], values)?.save(dir.join("values.tensor"))?;
    let mut table = String::new();
    for &s in &slots {
        let _ = writeln!(table, "slot={s} last_access={}", bank.last_access(s));
    }
    io(fs::write(dir.join("slots.txt"), table))?;
    println!("dumped {} of {} slots to {}", slots.len(), bank.capacity(), out.display());
    Ok(())
}

pub fn memory_stats(bank_path: &Path, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("--bins must be positive".into()).into());
    }
    let bank = MemoryBank::load(bank_path)?;
    println!("{}", bank.stats(bins));
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn metrics(restored: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let files = png_inputs(restored)?;
    let mut rows = Vec::new();
    for f in &files {
        let name = file_name(f);
        let other = reference.join(&name);
        if !other.is_file() {
            log::warn!("{name} has no counterpart in {}", reference.display());
            continue;
        }
        let (a, b) = (load_rgb(f)?, load_rgb(&other)?);
        rows.push((name, psnr(&a, &b, 1.0)?, ssim(&a, &b)?, ms_ssim(&a, &b)?));
    }
    if rows.is_empty() {
        return Err(Error::Contract(format!(
            "no file names shared by {} and {}",
            restored.display(),
            reference.display()
        ))
        .into());
    }
    let mut machine = String::new();
    println!("{:<24} {:>10} {:>8} {:>8}", "file", "psnr_db", "ssim", "ms_ssim");
    for (name, p, s, m) in &rows {
        println!("{name:<24} {:>10} {s:>8.4} {m:>8.4}", fmt_db(*p));
        let _ = writeln!(machine, "metric file={name} psnr={p:.9} ssim={s:.9} ms_ssim={m:.9}");
    }
    let n = rows.len() as f64;
    let mean = |k: fn(&(String, f64, f64, f64)) -> f64| rows.iter().map(k).sum::<f64>() / n;
    let (mp, ms, mm) = (mean(|r| r.1), mean(|r| r.2), mean(|r| r.3));
    println!("{:<24} {:>10} {ms:>8.4} {mm:>8.4}", "mean", fmt_db(mp));
    let _ = writeln!(machine, "aggregate count={} psnr={mp:.9} ssim={ms:.9} ms_ssim={mm:.9}", rows.len());
    print!("{machine}");
    if let Some(path) = out {
        io(fs::write(path, machine))?;
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, coords: usize) -> Result<()> {
    let results = run_suites(cfg.get("seed")?, coords)?;
    let mut failed = Vec::new();
    for (module, err, checked) in module_maxima(&results) {
        println!("gradcheck module={module} max_rel_err={err:.3e} coords={checked}");
        if !(err < TOLERANCE) {
            failed.push(module);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(format!(
            "relative error above {TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}
