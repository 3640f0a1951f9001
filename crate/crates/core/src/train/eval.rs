use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::haze::Dataset;
use crate::loss::{psnr, ssim};
use crate::network::Model;
use crate::tensor::Tensor;

/// Per-image and mean PSNR / SSIM over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Score `restore(hazy)` against the clear image of every pair. Images
/// are processed in parallel; results keep dataset order.
pub fn evaluate_with<F>(data: &Dataset, restore: F) -> Result<EvalReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let per_image = data
        .pairs
        .par_iter()
        .map(|pair| {
            let out = restore(&pair.hazy)?;
            Ok((psnr(&out, &pair.clear, 1.0)?, ssim(&out, &pair.clear)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(EvalReport {
        mean_psnr: per_image.iter().map(|p| p.0).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        per_image,
    })
}

/// Full-image inference; sizes that are not a multiple of the grid's
/// scale factor are reflect-padded and cropped back.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    evaluate_with(data, |hazy| model.dehaze(hazy))
}

/// Scores of the hazy inputs themselves.
pub fn hazy_baseline(data: &Dataset) -> Result<EvalReport> {
    evaluate_with(data, |hazy| Ok(hazy.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::{procedural_dataset, SynthOptions};

    #[test]
    fn identity_oracle_scores_perfectly() {
        let data = procedural_dataset(3, 16, 16, &SynthOptions::indoor(), 4).unwrap();
        let clears: Vec<_> = data.pairs.iter().map(|p| (p.hazy.clone(), p.clear.clone())).collect();
        let report = evaluate_with(&data, |hazy| {
            Ok(clears.iter().find(|(h, _)| h == hazy).expect("known input").1.clone())
        })
        .unwrap();
        assert_eq!((report.mean_psnr, report.mean_ssim), (100.0, 1.0));
        assert_eq!(report.per_image.len(), 3);
    }

    #[test]
    fn baseline_is_finite_and_below_cap() {
        let data = procedural_dataset(2, 16, 16, &SynthOptions::indoor(), 4).unwrap();
        let r = hazy_baseline(&data).unwrap();
        assert!(r.mean_psnr.is_finite() && r.mean_psnr < 100.0);
        assert!(evaluate_with(&Dataset::new(vec![]), |h| Ok(h.clone())).is_err());
    }
}
