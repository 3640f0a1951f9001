use std::fmt::Write as _;

use crate::io::format_sig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f32,
    pub smooth_l1: f64,
    pub perceptual: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-step losses and periodic held-out scores of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// One `step<TAB>lr<TAB>Ls<TAB>Lp<TAB>L` line per step, 6 significant
    /// digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.steps {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.step,
                format_sig(r.lr as f64, 6),
                format_sig(r.smooth_l1, 6),
                format_sig(r.perceptual, 6),
                format_sig(r.total, 6)
            )
            .expect("write to string");
        }
        out
    }

    /// One `step<TAB>psnr<TAB>ssim` line per evaluation.
    pub fn eval_text(&self) -> String {
        let mut out = String::new();
        for r in &self.evals {
            writeln!(out, "{}\t{}\t{}", r.step, format_sig(r.psnr, 6), format_sig(r.ssim, 6)).expect("write to string");
        }
        out
    }

    /// Mean total loss over the first and last `k` steps.
    pub fn loss_trend(&self, k: usize) -> Option<(f64, f64)> {
        if self.steps.is_empty() || k == 0 {
            return None;
        }
        let k = k.min(self.steps.len());
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..k]), mean(&self.steps[self.steps.len() - k..])))
    }
}
