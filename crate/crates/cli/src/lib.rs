//! Command implementations behind the `lmii` binary.

pub mod image_io;
pub mod palette;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lmii_core::cost::{self, ReportFormat};
use lmii_core::engine::Tensor;
use lmii_core::network::{checkpoint, Lmiinet, NetworkConfig};
use lmii_core::suite;
use lmii_core::train::{
    self, argmax_classes, history_csv, HistoryRow, SyntheticSpec, TrainOptions, CSV_HEADER,
};
use lmii_core::{Error, Result};

use image_io::RgbImage;
use palette::Palette;

/// Process exit status for an error: 1 for invalid input or configuration,
/// 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::Config(_) | Error::Dimension { .. } | Error::Usage(_) => 1,
        _ => 2,
    }
}

/// `WxH`, both positive.
pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("resolution {s:?} is not of the form WxH"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("resolution {s:?} needs two positive integers")),
    }
}

/// Default network configuration, or the file at `path`; `seed` overrides the file's.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<NetworkConfig> {
    let mut cfg = match path {
        Some(p) => NetworkConfig::load(p)?,
        None => NetworkConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

// -- summary / export-report ---------------------------------------------------

pub fn summary(
    cfg: &NetworkConfig,
    (w, h): (usize, usize),
    format: ReportFormat,
) -> Result<String> {
    cfg.validate()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidConfig(vec![format!(
            "resolution {w}x{h} must be divisible by 8 in both extents"
        )]));
    }
    Ok(cost::render(&cost::analyze(cfg, 1, h, w), format))
}

/// Writes `cost_report.json`, `cost_report.txt` and `config.json` into `out`.
pub fn export_report(cfg: &NetworkConfig, res: (usize, usize), out: &Path) -> Result<Vec<PathBuf>> {
    let json = summary(cfg, res, ReportFormat::Json)?;
    let text = summary(cfg, res, ReportFormat::Text)?;
    std::fs::create_dir_all(out)?;
    let files = [
        (out.join("cost_report.json"), json + "\n"),
        (out.join("cost_report.txt"), text),
        (out.join("config.json"), cfg.to_pretty_json() + "\n"),
    ];
    for (p, body) in &files {
        std::fs::write(p, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

// -- grad-check ----------------------------------------------------------------

pub struct GradCheckOutcome {
    pub table: String,
    pub failed: Vec<&'static str>,
}

pub fn grad_check(scope: &str, fault: Option<&str>) -> Result<GradCheckOutcome> {
    let results = suite::run_scope(scope, fault)?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<20} {:>6} {:>8} {:>12} {:>10}  {:<6} worst",
        "entry", "kind", "checked", "max rel err", "tolerance", "result"
    );
    let mut failed = Vec::new();
    for r in &results {
        let pass = r.report.passed();
        if !pass {
            failed.push(r.name);
        }
        let worst = r.report.worst().map(|t| t.name.as_str()).unwrap_or("-");
        let _ = writeln!(
            table,
            "{:<20} {:>6} {:>8} {:>12.3e} {:>10.0e}  {:<6} {worst}",
            r.name,
            match r.kind {
                suite::CaseKind::Op => "op",
                suite::CaseKind::Block => "block",
            },
            r.report.checked(),
            r.report.max_rel_error(),
            r.report.tolerance,
            if pass { "PASS" } else { "FAIL" },
        );
    }
    let secs: f64 = results.iter().map(|r| r.seconds).sum();
    let _ = writeln!(
        table,
        "{} entries, {} failed, {secs:.1}s",
        results.len(),
        failed.len()
    );
    Ok(GradCheckOutcome { table, failed })
}

// -- train-toy -----------------------------------------------------------------

pub struct TrainToyOutcome {
    pub history: Vec<HistoryRow>,
    pub final_miou: Option<f64>,
}

/// Converts planar f32 images in [−1, 1] back to 8-bit RGB.
pub fn tensor_to_rgb(images: &Tensor<f32>, index: usize) -> Result<RgbImage> {
    let (_, _, h, w) = images.dims4("tensor_to_rgb")?;
    let plane = h * w;
    let base = index * 3 * plane;
    let d = images.data();
    let mut img = RgbImage::new(w, h);
    for p in 0..plane {
        let px = [0, 1, 2].map(|c| {
            (((d[base + c * plane + p] + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
        });
        img.put(p % w, p / w, px);
    }
    Ok(img)
}

/// 8-bit RGB to a 1×3×H×W tensor on the training scale [−1, 1].
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        img.data[p * 3 + c] as f32 / 255.0 * 2.0 - 1.0
    })
}

fn side_by_side(parts: &[&RgbImage]) -> RgbImage {
    let h = parts[0].height;
    let w: usize = parts.iter().map(|p| p.width).sum();
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for p in parts {
        for y in 0..h {
            for x in 0..p.width {
                out.put(x0 + x, y, p.pixel(x, y));
            }
        }
        x0 += p.width;
    }
    out
}

/// Writes `sample_{i}.png` (input | truth | prediction) for the first `n` held-out images.
pub fn write_triptychs(
    net: &Lmiinet<f32>,
    spec: &SyntheticSpec,
    n: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let pal = Palette::new(net.config.classes);
    let (images, labels) = spec.held_out().images(0, n);
    let logits = net.infer(&images, false)?.logits;
    let pred = argmax_classes(&logits)?;
    let s = spec.size;
    let mut paths = Vec::new();
    for i in 0..n {
        let input = tensor_to_rgb(&images, i)?;
        let truth = pal.colorize(&labels[i * s * s..][..s * s], s, s);
        let guess = pal.colorize(&pred[i * s * s..][..s * s], s, s);
        let p = out.join(format!("sample_{i}.png"));
        image_io::write_image(&p, &side_by_side(&[&input, &truth, &guess]))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Trains on synthetic shapes, streaming `history.csv`, then writes
/// `final.ckpt` and four sample triptychs into `out`.
pub fn train_toy(
    cfg: &NetworkConfig,
    opts: &TrainOptions,
    out: &Path,
    mut progress: impl FnMut(&HistoryRow),
) -> Result<TrainToyOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut net = Lmiinet::<f32>::build(cfg)?;
    let csv_path = out.join("history.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;
    let mut io_err = None;
    let history = train::train_loop(&mut net, opts, |row| {
        if io_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", row.csv_line()).and_then(|_| csv.flush()) {
                io_err = Some(e);
            }
        }
        progress(row);
    });
    csv.flush()?;
    drop(csv);
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let history = history?;
    debug_assert_eq!(std::fs::read_to_string(&csv_path)?, history_csv(&history));
    checkpoint::save(&net, &out.join("final.ckpt"))?;
    write_triptychs(&net, &opts.data, 4, out)?;
    let final_miou = history.iter().rev().find_map(|r| r.miou);
    Ok(TrainToyOutcome {
        history,
        final_miou,
    })
}

// -- infer ---------------------------------------------------------------------

/// Reflect-pads `img` so both extents are multiples of 8.
pub fn reflect_pad(img: &RgbImage) -> RgbImage {
    let up = |n: usize| n.div_ceil(8) * 8;
    let (w, h) = (up(img.width), up(img.height));
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.put(
                x,
                y,
                img.pixel(reflect(x, img.width), reflect(y, img.height)),
            );
        }
    }
    out
}

/// Per-pixel labels for `img` (cropped back after optional padding).
pub fn predict(net: &Lmiinet<f32>, img: &RgbImage, pad: bool) -> Result<Vec<u32>> {
    let aligned = img.width % 8 == 0 && img.height % 8 == 0;
    if !aligned && !pad {
        return Err(Error::InvalidConfig(vec![format!(
            "image is {}x{}; both extents must be divisible by 8 (use --pad to reflect-pad)",
            img.width, img.height
        )]));
    }
    let padded = if aligned {
        img.clone()
    } else {
        reflect_pad(img)
    };
    let logits = net.infer(&rgb_to_tensor(&padded), false)?.logits;
    let labels = argmax_classes(&logits)?;
    let pw = padded.width;
    Ok((0..img.height)
        .flat_map(|y| labels[y * pw..y * pw + img.width].iter().copied())
        .collect())
}

/// Loads a checkpoint, segments `input` and writes the colorized labels.
/// `expected` (from `--config`) must agree with the checkpoint's class count.
pub fn infer(
    ckpt: &Path,
    input: &Path,
    output: &Path,
    expected: Option<&NetworkConfig>,
    pad: bool,
) -> Result<(usize, usize)> {
    let net = checkpoint::load(ckpt)?;
    if let Some(cfg) = expected {
        if cfg.classes != net.config.classes {
            return Err(Error::InvalidConfig(vec![format!(
                "config has {} classes but checkpoint {} has {}",
                cfg.classes,
                ckpt.display(),
                net.config.classes
            )]));
        }
    }
    let img = image_io::read_image(input)?;
    let labels = predict(&net, &img, pad)?;
    let pal = Palette::new(net.config.classes);
    image_io::write_image(output, &pal.colorize(&labels, img.width, img.height))?;
    Ok((img.width, img.height))
}
