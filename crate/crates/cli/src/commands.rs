use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hit_core::bim::{bim_flops, count_core_macs, Bim};
use hit_core::data::attribution::{heat_image, integrated_gradients, region_mean_target, Region};
use hit_core::data::dataset::{load_images, load_paired};
use hit_core::data::degrade::Degradation;
use hit_core::data::metrics::{psnr, rgb_to_y, ssim};
use hit_core::data::ppm::{read_image, write_ppm};
use hit_core::data::{clamp01, synthetic, ImagePair};
use hit_core::gradcheck::{self, GradcheckOptions};
use hit_core::nn::Bound;
use hit_core::training::{sample_seed, save_trace_csv, train};
use hit_core::{Model, Model64, ModelConfig, Scalar, Tape, Tensor};

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult, Context};

/// Which color space `eval` scores in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Denoise,
    /// Scored on BT.601 luma, as is customary for deraining benchmarks.
    Derain,
    Deblur,
    General,
}

fn load_model(path: &Path) -> CliResult<Model64> {
    Model64::load(path).context(|| format!("loading checkpoint {}", path.display()))
}

fn load_image(path: &Path) -> CliResult<Tensor<f64>> {
    read_image(path).context(|| format!("reading {}", path.display()))
}

fn save_image(path: &Path, img: &Tensor<f64>) -> CliResult<()> {
    write_ppm(path, img).context(|| format!("writing {}", path.display()))
}

/// Pairs from a dataset folder: the paired layout as is, or clean images
/// with a synthetic degradation seeded per image starting at `first_index`.
fn training_pairs<T: Scalar>(
    dir: &Path,
    paired: bool,
    degradation: Option<&Degradation>,
    first_index: u64,
) -> CliResult<Vec<ImagePair<T>>> {
    if paired {
        let pairs = load_paired::<T>(dir).context(|| format!("loading pairs from {}", dir.display()))?;
        return Ok(pairs.into_iter().map(|(_, p)| p).collect());
    }
    let d = degradation.expect("validated config has a degradation");
    let images = load_images::<T>(dir).context(|| format!("loading images from {}", dir.display()))?;
    images
        .into_iter()
        .enumerate()
        .map(|(i, (name, clean))| {
            let per_image = Degradation::new(d.kind.clone(), sample_seed(d.seed, first_index + i as u64));
            let degraded = per_image.apply(&clean).context(|| format!("degrading {name}"))?;
            ImagePair::new(degraded, clean).context(|| name.clone())
        })
        .collect()
}

pub fn train_cmd(config: &Path) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg),
        Precision::F64 => train_as::<f64>(&cfg),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let p = &cfg.paths;
    let data = training_pairs::<T>(&p.train_dir, p.paired, cfg.degradation.as_ref(), 0)?;
    if data.is_empty() {
        return Err(CliError::Argument(format!("no images in {}", p.train_dir.display())));
    }
    let val = match &p.val_dir {
        Some(dir) => training_pairs::<T>(dir, p.paired, cfg.degradation.as_ref(), data.len() as u64)?,
        None => Vec::new(),
    };
    let model_cfg = cfg.model_config().context(|| "model".into())?;
    let mut model = Model::<T>::build(&model_cfg, cfg.train.seed).context(|| "building model".into())?;
    let trace = train(&mut model, &data, &val, &cfg.train).context(|| "training".into())?;
    model
        .save(&p.checkpoint)
        .context(|| format!("writing {}", p.checkpoint.display()))?;
    save_trace_csv(&trace, &p.trace).context(|| format!("writing {}", p.trace.display()))?;
    let last = trace.last().expect("at least one step");
    println!(
        "trained {} ({} parameters) for {} steps on {} images; final loss {:.6e}",
        model_cfg.name,
        model.count_params(),
        trace.len(),
        data.len(),
        last.loss
    );
    if let Some(v) = trace.iter().rev().find_map(|r| r.val_psnr) {
        println!("validation PSNR {v:.3} dB");
    }
    println!("checkpoint {}\ntrace {}", p.checkpoint.display(), p.trace.display());
    Ok(())
}

pub fn restore_cmd(checkpoint: &Path, input: &Path, output: &Path, residual: Option<&Path>) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let img = load_image(input)?;
    let r = model.forward(&img).context(|| format!("restoring {}", input.display()))?;
    save_image(output, &clamp01(&r.restored))?;
    if let Some(path) = residual {
        save_image(path, &clamp01(&r.residual.map(|v| 0.5 + 0.5 * v)))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image PSNR and SSIM of clamped restorations, in file-name order.
pub fn evaluate(model: &Model64, dir: &Path, task: Task) -> CliResult<Vec<EvalRow>> {
    let pairs = load_paired::<f64>(dir).context(|| format!("loading pairs from {}", dir.display()))?;
    if pairs.is_empty() {
        return Err(CliError::Argument(format!("no image pairs in {}", dir.display())));
    }
    pairs
        .into_iter()
        .map(|(name, p)| {
            let ctx = || name.clone();
            let mut out = clamp01(&model.forward(&p.degraded).context(ctx)?.restored);
            let mut clean = p.clean;
            if task == Task::Derain {
                out = rgb_to_y(&out).context(ctx)?;
                clean = rgb_to_y(&clean).context(ctx)?;
            }
            Ok(EvalRow {
                psnr: psnr(&out, &clean, 1.0).context(ctx)?,
                ssim: ssim(&out, &clean).context(ctx)?,
                name,
            })
        })
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("image,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.name, r.psnr, r.ssim);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let _ = writeln!(s, "mean,{},{}", mean(|r| r.psnr), mean(|r| r.ssim));
    s
}

pub fn eval_cmd(checkpoint: &Path, dataset: &Path, task: Task, csv: Option<&Path>) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let table = eval_csv(&evaluate(&model, dataset, task)?);
    if let Some(path) = csv {
        std::fs::write(path, &table).map_err(|e| CliError::io(path, e))?;
    }
    print!("{table}");
    Ok(())
}

fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Closed form against the instrumented counter for one BIM core.
pub fn flops_single(h: usize, w: usize, c: usize) -> CliResult<bool> {
    let f = bim_flops(h as i64, w as i64, c as i64).context(|| "flops".into())?;
    let counted = count_core_macs(h, w, c, 0).context(|| "flops".into())?;
    println!("BIM core at {h}x{w}x{c}");
    println!("{:<12}{:>20}", "module", "MACs");
    println!("{:<12}{:>20}", "SEU", grouped(f.seu_macs));
    println!("{:<12}{:>20}", "SA", grouped(f.sa_macs));
    println!("{:<12}{:>20}", "2(SEU+SA)", grouped(f.total_macs));
    println!("closed form hwc(18+4c) {}", grouped(f.total_macs));
    println!("instrumented count     {}", grouped(counted));
    Ok(counted == f.total_macs)
}

/// Counts MACs of one model forward pass per top-level module and checks
/// each BIM core against its closed form.
pub fn flops_model(cfg: &ModelConfig, size: usize) -> CliResult<bool> {
    let model = Model::<f32>::build(cfg, 0).context(|| "building model".into())?;
    let tape = Tape::<f32>::new();
    let b = Bound::new(&tape, model.params(), false);
    let x = tape.constant(synthetic::scene(size, size, 0));
    model.forward_var(&b, &x, None).context(|| "forward pass".into())?;

    let table = tape.mac_table();
    let mut modules: Vec<(String, u64)> = Vec::new();
    for (path, n) in &table {
        let top = path.split('/').next().unwrap_or("").to_owned();
        match modules.iter_mut().find(|(m, _)| *m == top) {
            Some(e) => e.1 += n,
            None => modules.push((top, *n)),
        }
    }
    let total = tape.total_macs();
    println!("{} at {size}x{size}", cfg.name);
    println!("{:<12}{:>20}{:>9}", "module", "MACs", "share");
    for (m, n) in &modules {
        let share = 100.0 * *n as f64 / total.max(1) as f64;
        println!("{m:<12}{:>20}{share:>8.2}%", grouped(*n));
    }
    println!("{:<12}{:>20}  ({:.3} GMACs)", "total", grouped(total), total as f64 / 1e9);

    let padded = size.div_ceil(cfg.pad_multiple()) * cfg.pad_multiple();
    let mut all_equal = true;
    println!(
        "{:<10}{:>14}{:>18}{:>18}{:>18}",
        "bim", "extent", "hwc(18+4c)", "split closed", "instrumented"
    );
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let (hl, c) = (padded >> l, cfg.channels(l));
        let prefix = format!("decoder{l}/bim/core");
        let counted: u64 = table
            .iter()
            .filter(|(k, _)| *k == &prefix || k.starts_with(&format!("{prefix}/")))
            .map(|(_, v)| v)
            .sum();
        let eq8 = bim_flops(hl as i64, hl as i64, c as i64).context(|| "flops".into())?;
        let split = Bim::core_macs(hl, hl, c);
        all_equal &= split == counted;
        println!(
            "{:<10}{:>14}{:>18}{:>18}{:>18}",
            format!("level {l}"),
            format!("{hl}x{hl}x{c}"),
            grouped(eq8.total_macs),
            grouped(split),
            grouped(counted)
        );
    }
    Ok(all_equal)
}

pub fn gradcheck_cmd(seeds: Vec<u64>, ops: Option<Vec<String>>, corrupt: Option<String>) -> CliResult<()> {
    let mut opts = GradcheckOptions {
        ops,
        corrupt,
        ..Default::default()
    };
    if !seeds.is_empty() {
        opts.seeds = seeds;
    }
    let report = gradcheck::run(&opts).map_err(|e| match e {
        hit_core::HitError::Config(m) => CliError::Argument(m),
        e => CliError::Hit {
            context: "gradcheck".into(),
            source: e,
        },
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        let w = report.worst().expect("a failing report has results");
        Err(CliError::Verification(format!(
            "{} has relative error {:.3e} (tolerance {:.0e})",
            w.name, w.max_rel_err, report.tolerance
        )))
    }
}

/// Parses `y,x,h,w`.
pub fn parse_region(s: &str) -> Result<Region, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [y, x, h, w] => Ok(Region { y, x, h, w }),
        _ => Err(format!("expected y,x,h,w, got {} numbers", v.len())),
    }
}

pub struct AttributeArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub output: &'a Path,
    pub raw: Option<PathBuf>,
    pub region: Option<Region>,
    pub steps: usize,
    pub baseline: Option<&'a Path>,
}

pub fn attribute_cmd(a: AttributeArgs) -> CliResult<()> {
    let model = load_model(a.checkpoint)?;
    let img = load_image(a.image)?;
    let (h, w, c) = img.hwc().context(|| a.image.display().to_string())?;
    let region = a.region.unwrap_or(Region::whole(h, w));
    region
        .check(h, w)
        .map_err(|e| CliError::Argument(e.to_string()))?;
    let baseline = match a.baseline {
        Some(p) => load_image(p)?,
        None => Tensor::zeros(&[h, w, c]),
    };
    let attr = integrated_gradients(region_mean_target(&model, region), &img, &baseline, a.steps)
        .context(|| "integrated gradients".into())?;
    save_image(a.output, &heat_image(&attr.values).context(|| "heat image".into())?)?;
    let raw = a.raw.unwrap_or_else(|| a.output.with_extension("f64"));
    let bytes: Vec<u8> = attr.values.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&raw, bytes).map_err(|e| CliError::io(&raw, e))?;
    println!("region y={} x={} h={} w={}, {} steps", region.y, region.x, region.h, region.w, a.steps);
    println!("target(input) {:.9e}", attr.target_input);
    println!("target(baseline) {:.9e}", attr.target_baseline);
    println!("sum of attributions {:.9e}", attr.total());
    println!("completeness error {:.4}%", 100.0 * attr.completeness_error());
    println!("raw values {} ({h}x{w}x{c} little-endian f64)", raw.display());
    Ok(())
}
