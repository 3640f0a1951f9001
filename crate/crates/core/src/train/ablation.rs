use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::haze::{Dataset, DERIVED_CHANNELS};
use crate::io::format_sig;
use crate::network::{apply_ablation, parameter_count, Ablation, GridConfig, Head, InputMode, Model};

use super::{evaluate, hazy_baseline, TrainConfig, Trainer};

/// The r x c sweep: rows 1..=3 against 2, 4 and 6 columns.
pub const TABLE_GRID_SIZES: [(usize, usize); 9] =
    [(1, 2), (1, 4), (1, 6), (2, 2), (2, 4), (2, 6), (3, 2), (3, 4), (3, 6)];

/// A configuration compared in the ablation report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Grid(Ablation),
    /// Fixed white-balance / contrast / gamma / gray stack instead of the
    /// learned pre-processing.
    DerivedInputs,
    /// RGB plus zero maps instead of the learned pre-processing.
    NoPreprocessing,
    IndirectHead,
    /// Trained with smooth L1 only.
    NoPerceptual,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Grid(Ablation::Full),
        Variant::Grid(Ablation::NoAttention),
        Variant::Grid(Ablation::NoExchange),
        Variant::Grid(Ablation::EncoderDecoder),
        Variant::Grid(Ablation::OriginalGridNetStyle),
        Variant::DerivedInputs,
        Variant::NoPreprocessing,
        Variant::IndirectHead,
        Variant::NoPerceptual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Grid(a) => a.name(),
            Variant::DerivedInputs => "derived_inputs",
            Variant::NoPreprocessing => "no_preprocessing",
            Variant::IndirectHead => "indirect_head",
            Variant::NoPerceptual => "no_perceptual",
        }
    }

    /// Network and training configuration of this variant. The derived
    /// stack has a fixed width, so `derived_inputs` rescales the channel
    /// ladder to start at that width.
    pub fn apply(self, grid: &GridConfig, train: &TrainConfig) -> Result<(GridConfig, TrainConfig)> {
        let mut train = train.clone();
        let grid = match self {
            Variant::Grid(a) => apply_ablation(grid, a)?,
            Variant::DerivedInputs => {
                let mut g = grid.clone().with_base_channels(DERIVED_CHANNELS);
                g.input = InputMode::Derived;
                g
            }
            Variant::NoPreprocessing => {
                let mut g = grid.clone();
                g.input = InputMode::RgbZeros;
                g
            }
            Variant::IndirectHead => grid.clone().with_head(Head::Indirect),
            Variant::NoPerceptual => {
                train.lambda = 0.0;
                grid.clone()
            }
        };
        grid.validate()?;
        train.validate(&grid)?;
        Ok((grid, train))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// Variant name, or `full` for grid-size rows.
    pub variant: String,
    pub rows: usize,
    pub cols: usize,
    pub params: usize,
    pub steps: usize,
    /// Mean total loss over the first and last tenth of the steps.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub hazy_psnr: f64,
    pub hazy_ssim: f64,
    pub variants: Vec<AblationRow>,
    pub grid_sizes: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows(&self) -> impl Iterator<Item = &AblationRow> {
        self.variants.iter().chain(&self.grid_sizes)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let header = |out: &mut String, first: &str| {
            writeln!(
                out,
                "| {first} | params | steps | initial loss | final loss | PSNR (dB) | SSIM |"
            )
            .unwrap();
            writeln!(out, "|---|---:|---:|---:|---:|---:|---:|").unwrap();
        };
        writeln!(
            out,
            "Hazy inputs: PSNR {:.2} dB, SSIM {:.4}",
            self.hazy_psnr, self.hazy_ssim
        )
        .unwrap();
        let line = |out: &mut String, label: String, r: &AblationRow| {
            writeln!(
                out,
                "| {label} | {} | {} | {} | {} | {:.2} | {:.4} |",
                r.params,
                r.steps,
                format_sig(r.initial_loss, 4),
                format_sig(r.final_loss, 4),
                r.psnr,
                r.ssim
            )
            .unwrap();
        };
        if !self.variants.is_empty() {
            out.push('\n');
            header(&mut out, "variant");
            for r in &self.variants {
                line(&mut out, r.variant.clone(), r);
            }
        }
        if !self.grid_sizes.is_empty() {
            out.push('\n');
            header(&mut out, "r x c");
            for r in &self.grid_sizes {
                line(&mut out, format!("{} x {}", r.rows, r.cols), r);
            }
        }
        out
    }

    /// Header line plus one tab-separated line per trained configuration;
    /// the hazy baseline is the `hazy` line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\trows\tcols\tparams\tsteps\tinitial_loss\tfinal_loss\tpsnr\tssim\n");
        writeln!(
            out,
            "hazy\t0\t0\t0\t0\t0\t0\t{}\t{}",
            format_sig(self.hazy_psnr, 6),
            format_sig(self.hazy_ssim, 6)
        )
        .unwrap();
        for r in self.rows() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.variant,
                r.rows,
                r.cols,
                r.params,
                r.steps,
                format_sig(r.initial_loss, 6),
                format_sig(r.final_loss, 6),
                format_sig(r.psnr, 6),
                format_sig(r.ssim, 6)
            )
            .unwrap();
        }
        out
    }
}

fn run_one(
    label: &str,
    grid: GridConfig,
    train: TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<AblationRow> {
    let mut trainer = Trainer::new(grid, train)?;
    trainer.fit(train_data, None)?;
    let report = evaluate(&Model::new(trainer.grid.clone(), trainer.params.clone())?, test_data)?;
    let (initial_loss, final_loss) = trainer
        .log
        .loss_trend((trainer.step / 10).max(1))
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(AblationRow {
        variant: label.to_string(),
        rows: trainer.grid.rows,
        cols: trainer.grid.cols,
        params: parameter_count(&trainer.params),
        steps: trainer.step,
        initial_loss,
        final_loss,
        psnr: report.mean_psnr,
        ssim: report.mean_ssim,
    })
}

/// Train every variant and every `(rows, cols)` grid size from the same
/// seed and budget, then score each on `test_data`. Checkpointing is
/// disabled for the individual runs.
pub fn run_ablation_suite(
    base: &GridConfig,
    train: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    variants: &[Variant],
    grid_sizes: &[(usize, usize)],
) -> Result<AblationReport> {
    let train = TrainConfig {
        checkpoint_dir: None,
        eval_every: None,
        ..train.clone()
    };
    let baseline = hazy_baseline(test_data)?;
    let mut report = AblationReport {
        hazy_psnr: baseline.mean_psnr,
        hazy_ssim: baseline.mean_ssim,
        variants: Vec::new(),
        grid_sizes: Vec::new(),
    };
    for &v in variants {
        let (g, t) = v.apply(base, &train)?;
        report.variants.push(run_one(v.name(), g, t, train_data, test_data)?);
    }
    for &(rows, cols) in grid_sizes {
        let g = base.clone().with_grid(rows, cols);
        g.validate()?;
        train.validate(&g)?;
        report
            .grid_sizes
            .push(run_one("full", g, train.clone(), train_data, test_data)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::{procedural_dataset, SynthOptions};

    fn tiny() -> (GridConfig, TrainConfig) {
        let grid = GridConfig::default()
            .with_grid(2, 2)
            .with_base_channels(4)
            .with_growth(4)
            .with_rdb_layers(2);
        let train = TrainConfig {
            patch_size: 16,
            batch_size: 2,
            max_steps: Some(2),
            epochs: 10,
            halve_every: 1000,
            ..TrainConfig::default()
        };
        (grid, train)
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("no_grid".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn every_variant_yields_a_valid_configuration() {
        let (grid, train) = tiny();
        for v in Variant::ALL {
            let (g, t) = v.apply(&grid, &train).unwrap();
            assert_eq!(t.lambda == 0.0, v == Variant::NoPerceptual, "{v}");
            assert_eq!(g.head == Head::Indirect, v == Variant::IndirectHead, "{v}");
        }
        let (g, _) = Variant::DerivedInputs.apply(&grid, &train).unwrap();
        assert_eq!(g.channels_per_scale, vec![16, 32]);
    }

    #[test]
    fn grid_sweep_has_nine_rows() {
        let rows: Vec<usize> = TABLE_GRID_SIZES.iter().map(|s| s.0).collect();
        assert_eq!(rows, [1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert!(TABLE_GRID_SIZES
            .iter()
            .all(|&(r, c)| GridConfig::default().with_grid(r, c).validate().is_ok()));
    }

    #[test]
    fn report_is_deterministic_and_has_both_heads() {
        let (grid, train) = tiny();
        let data = procedural_dataset(2, 16, 16, &SynthOptions::indoor(), 9).unwrap();
        let test = procedural_dataset(1, 20, 20, &SynthOptions::indoor(), 10).unwrap();
        let variants = [Variant::Grid(Ablation::Full), Variant::IndirectHead];
        let run = || run_ablation_suite(&grid, &train, &data, &test, &variants, &[(1, 2)]).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.rows().count(), 3);
        let tsv = a.to_tsv();
        assert_eq!(tsv.lines().count(), 5);
        assert!(tsv.lines().nth(2).unwrap().starts_with("full\t2\t2\t"));
        assert!(tsv.lines().nth(3).unwrap().starts_with("indirect_head\t"));
        let md = a.to_markdown();
        assert!(md.contains("| indirect_head |") && md.contains("| 1 x 2 |"));
    }
}
