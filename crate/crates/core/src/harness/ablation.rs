use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{evaluate_entries, train, LoadedCorpus, PairScore};
use super::{DatasetManifest, Split, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{MeanStd, StdKind};
use crate::net::Branches;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Modules,
    Losses,
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Modules => "modules",
            AblationKind::Losses => "losses",
        })
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(AblationKind::Modules),
            "losses" => Ok(AblationKind::Losses),
            _ => Err(Error::InvalidConfig(format!("unknown ablation kind {s:?} (modules|losses)"))),
        }
    }
}

impl AblationKind {
    /// Column names of the three toggles.
    pub fn columns(self) -> [&'static str; 3] {
        match self {
            AblationKind::Modules => ["mem", "crm", "dem"],
            AblationKind::Losses => ["l1", "color", "cr"],
        }
    }

    /// Toggle rows in table order.
    pub fn rows(self) -> &'static [[bool; 3]] {
        match self {
            AblationKind::Modules => &[
                [false, false, false],
                [true, false, false],
                [true, true, false],
                [true, false, true],
                [false, true, true],
                [true, true, true],
            ],
            AblationKind::Losses => &[[true, false, false], [true, true, false], [true, false, true], [true, true, true]],
        }
    }

    /// `base` with one row's toggles applied. Disabled loss terms get
    /// weight 0; enabled ones keep their base weight.
    pub fn apply(self, base: &TrainConfig, on: [bool; 3]) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationKind::Modules => {
                cfg.network.branches = Branches { mem: on[0], crm: on[1], dem: on[2] };
            }
            AblationKind::Losses => {
                let w = base.loss_weights;
                let pick = |b: bool, v: f64| if b { v } else { 0.0 };
                cfg.loss_weights = LossWeights {
                    lambda_l1: pick(on[0], w.lambda_l1),
                    lambda_color: pick(on[1], w.lambda_color),
                    lambda_cr: pick(on[2], w.lambda_cr),
                };
            }
        }
        cfg
    }
}

/// PSNR/SSIM mean and sample deviation over one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
}

impl SplitScore {
    fn of(scores: &[PairScore]) -> Option<Self> {
        let p: Vec<f64> = scores.iter().map(|s| s.restored_psnr).collect();
        let s: Vec<f64> = scores.iter().map(|s| s.restored_ssim).collect();
        Some(Self { psnr: MeanStd::of(&p, StdKind::Sample)?, ssim: MeanStd::of(&s, StdKind::Sample)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: [bool; 3],
    pub train: SplitScore,
    pub test: Option<SplitScore>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::parse("ablation report", e.to_string());
        let mut header: Vec<&str> = self.kind.columns().to_vec();
        header.extend([
            "train_psnr",
            "train_psnr_std",
            "train_ssim",
            "train_ssim_std",
            "test_psnr",
            "test_psnr_std",
            "test_ssim",
            "test_ssim_std",
            "final_loss",
        ]);
        w.write_record(&header).map_err(err)?;
        let split = |s: Option<&SplitScore>| -> Vec<String> {
            match s {
                Some(s) => [s.psnr.mean, s.psnr.std, s.ssim.mean, s.ssim.std].iter().map(|v| v.to_string()).collect(),
                None => vec![String::new(); 4],
            }
        };
        for r in &self.rows {
            let mut rec: Vec<String> = r.toggles.iter().map(|&b| if b { "x".into() } else { String::new() }).collect();
            rec.extend(split(Some(&r.train)));
            rec.extend(split(r.test.as_ref()));
            rec.push(r.final_loss.to_string());
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("ablation report", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Trains one variant per table row from the same seed and manifest and
/// scores each on both splits.
pub fn run_ablation(kind: AblationKind, base: &TrainConfig, manifest: &DatasetManifest) -> Result<AblationReport> {
    base.validate()?;
    let corpus = LoadedCorpus::load(manifest, base)?;
    let mut rows = Vec::new();
    for &on in kind.rows() {
        let cfg = kind.apply(base, on);
        log::info!("ablation {kind}: {:?} = {on:?}", kind.columns());
        let out = train(&cfg, manifest, None)?;
        let train_scores = evaluate_entries(&out.checkpoint, &corpus, manifest, Split::Train, &cfg)?;
        let test_scores = evaluate_entries(&out.checkpoint, &corpus, manifest, Split::Test, &cfg)?;
        rows.push(AblationRow {
            toggles: on,
            train: SplitScore::of(&train_scores).ok_or(Error::EmptyInput)?,
            test: SplitScore::of(&test_scores),
            final_loss: out.log.rows.last().map_or(f64::NAN, |r| r.total),
        });
    }
    Ok(AblationReport { kind, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layouts() {
        assert_eq!(AblationKind::Modules.rows().len(), 6);
        assert_eq!(AblationKind::Losses.rows().len(), 4);
        assert!(AblationKind::Losses.rows().iter().all(|r| r[0]));
        assert_eq!(AblationKind::Modules.rows()[0], [false; 3]);
        assert_eq!(*AblationKind::Modules.rows().last().unwrap(), [true; 3]);
        assert_eq!("losses".parse::<AblationKind>().unwrap(), AblationKind::Losses);
        assert!("both".parse::<AblationKind>().is_err());
    }

    #[test]
    fn toggles_map_onto_config() {
        let base = TrainConfig::default();
        let c = AblationKind::Modules.apply(&base, [true, false, true]);
        assert_eq!(c.network.branches, Branches { mem: true, crm: false, dem: true });
        let c = AblationKind::Losses.apply(&base, [true, false, true]);
        assert_eq!(c.loss_weights, LossWeights { lambda_l1: 0.8, lambda_color: 0.0, lambda_cr: 0.1 });
    }
}
