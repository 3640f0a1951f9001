//! Command-line surface: `synth`, `train`, `dehaze`, `eval`, `ablate` and
//! `gradcheck`.
//!
//! Usage errors exit with 2, runtime failures with 1. `GRIDHAZE_THREADS`
//! caps the worker pool (0 or unset = one per core).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradient_suite::run_gradient_suite;
use crate::haze::{load_manifest_dataset, procedural_scene, synth_dataset, DepthKind, SynthOptions};
use crate::io::{format_sig, load_checkpoint, read_image, write_image};
use crate::network::{apply_ablation, Ablation, AttentionMode, GridConfig, Head, Model};
use crate::train::{evaluate_with, hazy_baseline, run_ablation_suite, TrainConfig, Trainer, Variant, TABLE_GRID_SIZES};

/// Parse `lo:hi`, or a single value meaning `lo = hi`.
pub fn parse_range(s: &str) -> std::result::Result<(f32, f32), String> {
    let num = |t: &str| t.trim().parse::<f32>().map_err(|e| format!("{t:?}: {e}"));
    let (lo, hi) = match s.split_once(':') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(format!("range {s} has lo > hi"));
    }
    Ok((lo, hi))
}

/// Parse `HxW` (or a single side for a square).
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(s).map(|v| (v, v)),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_depth(s: &str) -> std::result::Result<DepthKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_head(s: &str) -> std::result::Result<Head, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "gridhaze",
    version,
    about = "Grid dehazing network: synthesis, training, inference, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Haze clear images with synthetic depth and write a manifest.
    Synth(SynthArgs),
    /// Train a network on a manifest dataset.
    Train(TrainArgs),
    /// Dehaze one image or every .ppm in a directory.
    Dehaze(DehazeArgs),
    /// PSNR / SSIM of a checkpoint (or of the hazy inputs) on a manifest.
    Eval(EvalArgs),
    /// Train and compare variants and grid sizes.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of clear .ppm images.
    #[arg(long, required_unless_present = "procedural")]
    pub clear_dir: Option<PathBuf>,
    /// Generate this many procedural clear scenes instead (written to
    /// OUT/clear).
    #[arg(long, conflicts_with = "clear_dir")]
    pub procedural: Option<usize>,
    /// Size of procedural scenes, HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Scattering coefficient range lo:hi.
    #[arg(long, default_value = "0.6:1.8", value_parser = parse_range)]
    pub beta: (f32, f32),
    /// Atmospheric light range lo:hi.
    #[arg(long, default_value = "0.7:1.0", value_parser = parse_range)]
    pub airlight: (f32, f32),
    /// ramp, radial or fractal.
    #[arg(long, default_value = "fractal", value_parser = parse_depth)]
    pub depth: DepthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Network configuration as JSON; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// First-scale width; deeper scales double it.
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub growth: Option<usize>,
    #[arg(long)]
    pub rdb_layers: Option<usize>,
    /// direct or indirect.
    #[arg(long, value_parser = parse_head)]
    pub head: Option<Head>,
    /// One attention weight pair per junction instead of per channel.
    #[arg(long)]
    pub shared_attention: bool,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
}

impl ModelArgs {
    pub fn grid(&self) -> Result<GridConfig> {
        let mut g = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => GridConfig::default(),
        };
        if self.rows.is_some() || self.cols.is_some() {
            g = g
                .clone()
                .with_grid(self.rows.unwrap_or(g.rows), self.cols.unwrap_or(g.cols));
        }
        if let Some(b) = self.base_channels {
            g = g.with_base_channels(b);
        }
        if let Some(k) = self.growth {
            g = g.with_growth(k);
        }
        if let Some(l) = self.rdb_layers {
            g = g.with_rdb_layers(l);
        }
        if let Some(h) = self.head {
            g = g.with_head(h);
        }
        if self.shared_attention {
            g.attention_mode = AttentionMode::Shared;
        }
        if let Some(a) = self.ablation {
            g = apply_ablation(&g, a)?;
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    /// Epochs between learning-rate halvings.
    #[arg(long, default_value_t = 20)]
    pub halve_every: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Weight of the perceptual term.
    #[arg(long, default_value_t = crate::loss::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl OptimArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            patch_size: self.patch,
            batch_size: self.batch,
            lr0: self.lr,
            halve_every: self.halve_every,
            epochs: self.epochs,
            max_steps: self.max_steps,
            seed: self.seed,
            lambda: self.lambda,
            eval_every: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out manifest for periodic evaluation and best.gdhz.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint (its network configuration and seed win).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct DehazeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A .ppm file or a directory of them.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score the hazy inputs when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "full,indirect_head")]
    pub variants: Vec<Variant>,
    /// Comma-separated RxC sizes, `table` for the 3x{2,4,6} sweep, or `none`.
    #[arg(long, default_value = "none")]
    pub grid_sizes: String,
    /// Directory for ablation.md and ablation.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_grid_sizes(s: &str) -> Result<Vec<(usize, usize)>> {
    match s {
        "none" | "" => Ok(Vec::new()),
        "table" => Ok(TABLE_GRID_SIZES.to_vec()),
        list => list
            .split(',')
            .map(|t| parse_size(t).map_err(|e| Error::InvalidParameter(format!("grid size {e}"))))
            .collect(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let opts = SynthOptions {
        beta_range: args.beta,
        airlight_range: args.airlight,
        depth_kind: args.depth,
    };
    let clear_dir = match (&args.clear_dir, args.procedural) {
        (Some(dir), _) => dir.clone(),
        (None, Some(n)) => {
            let dir = args.out.join("clear");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (h, w) = args.size;
            (0..n).into_par_iter().try_for_each(|i| {
                let scene = procedural_scene(h, w, args.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
                write_image(&scene, dir.join(format!("clear_{i:04}.ppm")))
            })?;
            dir
        }
        (None, None) => return Err(Error::InvalidParameter("need --clear-dir or --procedural".into())),
    };
    let manifest = synth_dataset(&clear_dir, &args.out, args.count, &opts, args.seed)?;
    writeln!(
        out,
        "wrote {} pairs to {}",
        manifest.records.len(),
        args.out.join("manifest.tsv").display()
    )
    .ok();
    Ok(())
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_manifest_dataset(&args.data)?;
    let held_out = args.eval.as_ref().map(load_manifest_dataset).transpose()?;
    let mut config = args.optim.train_config();
    config.checkpoint_dir = Some(args.out.clone());
    config.eval_every = args.eval_every;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(load_checkpoint(path)?, config)?,
        None => Trainer::new(args.model.grid()?, config)?,
    };
    writeln!(out, "{}", trainer.grid.summary()).ok();
    trainer.fit(&data, held_out.as_ref())?;
    if let Some(last) = trainer.log.steps.last() {
        writeln!(
            out,
            "step {} epoch {} loss {}",
            trainer.step,
            trainer.epoch,
            format_sig(last.total, 6)
        )
        .ok();
    }
    if let Some(e) = trainer.log.evals.last() {
        writeln!(out, "held-out PSNR {:.2} dB SSIM {:.4}", e.psnr, e.ssim).ok();
    }
    writeln!(out, "checkpoints in {}", args.out.display()).ok();
    Ok(())
}

fn dehaze(args: &DehazeArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = Model::new(ckpt.config, ckpt.params)?;
    if args.input.is_dir() {
        let entries = fs::read_dir(&args.input).map_err(|e| Error::io(&args.input, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&args.input, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
                files.push(path);
            }
        }
        files.sort();
        fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        files.par_iter().try_for_each(|path| {
            let name = path.file_name().expect("listed file has a name");
            write_image(&model.dehaze(&read_image(path)?)?, args.out.join(name))
        })?;
        writeln!(out, "dehazed {} images into {}", files.len(), args.out.display()).ok();
    } else {
        write_image(&model.dehaze(&read_image(&args.input)?)?, &args.out)?;
        writeln!(out, "wrote {}", args.out.display()).ok();
    }
    Ok(())
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_manifest_dataset(&args.data)?;
    let report = match &args.ckpt {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let model = Model::new(ckpt.config, ckpt.params)?;
            evaluate_with(&data, |h| model.dehaze(h))?
        }
        None => hazy_baseline(&data)?,
    };
    writeln!(out, "image\tpsnr\tssim").ok();
    for (i, (p, s)) in report.per_image.iter().enumerate() {
        writeln!(out, "{i}\t{}\t{}", format_sig(*p, 6), format_sig(*s, 6)).ok();
    }
    writeln!(
        out,
        "mean\t{}\t{}",
        format_sig(report.mean_psnr, 6),
        format_sig(report.mean_ssim, 6)
    )
    .ok();
    Ok(())
}

fn ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let train_data = load_manifest_dataset(&args.train)?;
    let test_data = load_manifest_dataset(&args.test)?;
    let sizes = parse_grid_sizes(&args.grid_sizes)?;
    let report = run_ablation_suite(
        &args.model.grid()?,
        &args.optim.train_config(),
        &train_data,
        &test_data,
        &args.variants,
        &sizes,
    )?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let md = report.to_markdown();
    write_text(&args.out.join("ablation.md"), &md)?;
    write_text(&args.out.join("ablation.tsv"), &report.to_tsv())?;
    write!(out, "{md}").ok();
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let checks = run_gradient_suite(args.seed)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        writeln!(
            out,
            "{:4} {:<40} err {:.3e} tol {:.0e} checked {} skipped {}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            c.skipped
        )
        .ok();
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    writeln!(out, "{} checks, {} failed", checks.len(), failed).ok();
    Ok(ok)
}

/// Size the global worker pool from `GRIDHAZE_THREADS`.
pub fn configure_threads() -> Result<()> {
    let n = match std::env::var("GRIDHAZE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidParameter(format!("GRIDHAZE_THREADS={v:?} is not a count")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // Fails only if the pool already exists, in which case it stays.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Run one command line, writing normal output to `out` and diagnostics to
/// `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                write!(out, "{text}").ok();
            } else {
                write!(err, "{text}").ok();
            }
            return code;
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Synth(a) => synth(a, out).map(|()| true),
        Command::Train(a) => train(a, out).map(|()| true),
        Command::Dehaze(a) => dehaze(a, out).map(|()| true),
        Command::Eval(a) => eval(a, out).map(|()| true),
        Command::Ablate(a) => ablate(a, out).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a, out),
    });
    match result {
        Ok(true) => 0,
        Ok(false) => {
            writeln!(err, "error: gradient check failed").ok();
            1
        }
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("0.6:1.8").unwrap(), (0.6, 1.8));
        assert_eq!(parse_range("0.9").unwrap(), (0.9, 0.9));
        assert!(parse_range("1.8:0.6").is_err());
        assert!(parse_range("a:1").is_err());
        assert_eq!(parse_size("32x48").unwrap(), (32, 48));
        assert_eq!(parse_size("16").unwrap(), (16, 16));
        assert_eq!(parse_grid_sizes("table").unwrap().len(), 9);
        assert_eq!(parse_grid_sizes("2x4,3x6").unwrap(), vec![(2, 4), (3, 6)]);
    }

    #[test]
    fn model_flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "gridhaze",
            "train",
            "--data",
            "m.tsv",
            "--out",
            "o",
            "--rows",
            "2",
            "--cols",
            "4",
            "--base-channels",
            "8",
            "--head",
            "indirect",
            "--ablation",
            "no_attention",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!("train")
        };
        let g = a.model.grid().unwrap();
        assert_eq!((g.rows, g.cols, g.channels_per_scale.clone()), (2, 4, vec![8, 16]));
        assert_eq!(g.head, Head::Indirect);
        assert!(!g.attention);
    }

    #[test]
    fn usage_errors_exit_2() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["gridhaze", "bogus"], &mut out, &mut err), 2);
        assert_eq!(run(["gridhaze", "dehaze", "--ckpt", "x"], &mut out, &mut err), 2);
        assert_eq!(
            run(
                ["gridhaze", "synth", "--out", "o", "--beta", "2:1", "--procedural", "1"],
                &mut out,
                &mut err
            ),
            2
        );
        assert_eq!(run(["gridhaze", "--help"], &mut out, &mut err), 0);
    }

    #[test]
    fn runtime_failures_exit_1() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(
            ["gridhaze", "eval", "--data", "/nonexistent/manifest.tsv"],
            &mut out,
            &mut err,
        );
        assert_eq!(code, 1);
        assert!(String::from_utf8(err).unwrap().starts_with("error: "));
    }
}
