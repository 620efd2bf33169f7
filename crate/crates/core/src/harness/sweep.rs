use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::SceneKind;
use crate::error::{Error, Result};
use crate::imaging::{load_image, Image};
use crate::metrics::{list_images, psnr, ssim};
use crate::priors::{optimized_linear_stretch, OlsParams};

/// Degraded/clean pairs of one scene kind.
#[derive(Debug, Clone)]
pub struct SweepSet {
    pub kind: SceneKind,
    pub pairs: Vec<(Image, Image)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scene: SceneKind,
    pub p_a_min: f64,
    pub p_a_max: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_norm: f64,
    pub ssim_norm: f64,
    /// Mean of the two normalized metrics, itself rescaled to [0, 1].
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub best: BTreeMap<SceneKind, (f64, f64)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::parse("sweep report", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("sweep report", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Min-max rescaling; a constant column maps to 1.
fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Restores each set with OLS at every `(p_a_min, p_a_max)` in `grid` and
/// scores it. `base` supplies the truncation percentiles.
pub fn ols_sweep(grid: &[(f64, f64)], sets: &[SweepSet], base: &OlsParams) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows = Vec::new();
    let mut best = BTreeMap::new();
    for set in sets {
        if set.pairs.is_empty() {
            return Err(Error::EmptyCorpus(format!("no {} pairs to sweep", set.kind)));
        }
        let mut raw = Vec::with_capacity(grid.len());
        for &(a_min, a_max) in grid {
            let params = OlsParams::new(base.p_min, base.p_max, a_min, a_max)?;
            let (mut p, mut s) = (0.0, 0.0);
            for (d, c) in &set.pairs {
                let r = optimized_linear_stretch(d, &params)?;
                p += psnr(&r, c)?;
                s += ssim(&r, c)?;
            }
            let n = set.pairs.len() as f64;
            raw.push((p / n, s / n));
        }
        let pn = normalize(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
        let sn = normalize(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        let score = normalize(&pn.iter().zip(&sn).map(|(a, b)| (a + b) / 2.0).collect::<Vec<_>>());
        let mut arg = 0;
        for (i, &(a_min, a_max)) in grid.iter().enumerate() {
            if score[i] > score[arg] {
                arg = i;
            }
            rows.push(SweepRow {
                scene: set.kind,
                p_a_min: a_min,
                p_a_max: a_max,
                psnr: raw[i].0,
                ssim: raw[i].1,
                psnr_norm: pn[i],
                ssim_norm: sn[i],
                score: score[i],
            });
        }
        best.insert(set.kind, grid[arg]);
    }
    Ok(SweepReport { rows, best })
}

/// Grid file: one `p_a_min p_a_max` pair per line (whitespace or comma
/// separated); `#` starts a comment.
pub fn parse_grid(text: &str, context: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(context, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 2 {
            return Err(Error::parse(context, format!("line {}: expected 2 values, got {}", n + 1, vals.len())));
        }
        out.push((vals[0], vals[1]));
    }
    if out.is_empty() {
        return Err(Error::parse(context, "grid has no points"));
    }
    Ok(out)
}

/// Reads `<dir>/<scene>/degraded/*.png` with same-named files in
/// `<dir>/<scene>/clean/`, for every scene subdirectory present.
pub fn load_sweep_sets(dir: &Path) -> Result<Vec<SweepSet>> {
    let mut sets = Vec::new();
    for kind in SceneKind::ALL {
        let root = dir.join(kind.as_str());
        if !root.is_dir() {
            continue;
        }
        let mut pairs = Vec::new();
        for d in list_images(&root.join("degraded"))? {
            let name = d.file_name().expect("listed file");
            let c = root.join("clean").join(name);
            if !c.is_file() {
                return Err(Error::PairMismatch(format!("{} has no clean counterpart", d.display())));
            }
            let (d, c) = (load_image(&d)?, load_image(&c)?);
            d.check_same_shape(&c)?;
            pairs.push((d, c));
        }
        sets.push(SweepSet { kind, pairs });
    }
    if sets.is_empty() {
        return Err(Error::EmptyCorpus(format!("no haze/, sand/ or lowlight/ under {}", dir.display())));
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{synth_pair, DegradationSpec};
    use crate::harness::procedural_scene;

    fn sets() -> Vec<SweepSet> {
        let specs = [
            DegradationSpec::haze(1.8, [0.9, 0.9, 0.9]),
            DegradationSpec::sand(1.5, [0.85, 0.65, 0.35]),
            DegradationSpec::lowlight(2.2, 0.5),
        ];
        specs
            .iter()
            .map(|s| SweepSet {
                kind: s.kind,
                pairs: (0..3)
                    .map(|i| {
                        let (c, d) = procedural_scene(10 + i, 32, 32);
                        synth_pair(&c, Some(&d), s).unwrap()
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn single_point_scores_one() {
        let r = ols_sweep(&[(0.1, 0.1)], &sets(), &OlsParams::with_adjustment(0.0, 0.0)).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|x| x.score == 1.0 && x.psnr_norm == 1.0 && x.ssim_norm == 1.0));
    }

    #[test]
    fn rows_cover_grid_times_scenes() {
        let grid = [(0.0, 0.0), (0.1, 0.1), (0.2, 0.0), (0.0, 0.2)];
        let r = ols_sweep(&grid, &sets(), &OlsParams::with_adjustment(0.0, 0.0)).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert_eq!(r.best.len(), 3);
        for kind in SceneKind::ALL {
            let rows: Vec<_> = r.rows.iter().filter(|x| x.scene == kind).collect();
            assert!(rows.iter().all(|x| (0.0..=1.0).contains(&x.score)));
            let top = rows.iter().find(|x| x.score == 1.0).unwrap();
            assert_eq!(r.best[&kind], (top.p_a_min, top.p_a_max));
        }
        assert!(r.to_csv().unwrap().starts_with("scene,p_a_min,p_a_max,psnr,ssim"));
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("# header\n0 0.1\n0.2, 0.3 # note\n\n", "g").unwrap();
        assert_eq!(g, vec![(0.0, 0.1), (0.2, 0.3)]);
        assert!(parse_grid("0.1\n", "g").is_err());
        assert!(parse_grid("# nothing\n", "g").is_err());
        assert!(matches!(ols_sweep(&[], &sets(), &OlsParams::with_adjustment(0.0, 0.0)), Err(Error::EmptyInput)));
    }
}
