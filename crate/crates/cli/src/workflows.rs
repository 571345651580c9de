//! Multi-step workflows shared by the commands and the acceptance tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use liteie::imaging::list_images;
use liteie::metrics::{evaluate, mean_report, pair_by_name, EvalRow, Pairing};
use liteie::train::{load_dataset, train_on_images};
use liteie::{enhance_image, load_image, EnhanceConfig, MetricsReport, NetTopology, TrainConfig, Weights};

/// Enhances every low image that has a same-named reference and scores it.
pub fn evaluate_dirs(weights: &Weights, low: &Path, gt: &Path, cfg: &EnhanceConfig) -> Result<(Vec<EvalRow>, Pairing)> {
    let pairing = pair_by_name(&list_images(low)?, &list_images(gt)?);
    let mut rows = Vec::with_capacity(pairing.pairs.len());
    for (l, g) in &pairing.pairs {
        let input = load_image(l)?;
        let reference = load_image(g)?;
        let out = enhance_image(weights, &input, cfg)?;
        let report = evaluate(&out, &reference).with_context(|| format!("scoring {}", l.display()))?;
        let image = l.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(EvalRow { image, report });
    }
    Ok((rows, pairing))
}

/// An inclusive `start:stop:step` sweep over one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub param: GridParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridParam {
    /// Exposure target scale.
    Alpha,
    /// Edge-aware smoothness sharpness.
    Beta,
}

impl GridParam {
    pub fn name(self) -> &'static str {
        match self {
            GridParam::Alpha => "alpha",
            GridParam::Beta => "beta",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, v: f64) {
        match self {
            GridParam::Alpha => cfg.loss_cfg.exp_alpha = v,
            GridParam::Beta => cfg.loss_cfg.tv_beta = v,
        }
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, range) = s.split_once('=').ok_or("expected NAME=START:STOP:STEP")?;
        let param = match name.trim() {
            "alpha" => GridParam::Alpha,
            "beta" => GridParam::Beta,
            other => return Err(format!("unknown grid parameter '{other}' (alpha, beta)")),
        };
        let parts: Vec<f64> = range
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number '{p}'")))
            .collect::<std::result::Result<_, _>>()?;
        let [start, stop, step] = parts[..] else {
            return Err("expected START:STOP:STEP".into());
        };
        if step.is_nan() || step <= 0.0 || stop < start || !start.is_finite() || !stop.is_finite() {
            return Err(format!("empty or invalid range {range}"));
        }
        // Inclusive of `stop` up to rounding in the step count.
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let values = (0..n).map(|i| round9(start + i as f64 * step)).collect();
        Ok(Grid { param, values })
    }
}

fn round9(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub mean: MetricsReport,
}

pub fn sweep_csv(param: GridParam, points: &[SweepPoint]) -> String {
    let mut s = format!("{}, psnr, ssim, mae, mse\n", param.name());
    for p in points {
        let m = &p.mean;
        let _ = writeln!(s, "{}, {:.6}, {:.6}, {:.6}, {:.6}", p.value, m.psnr, m.ssim, m.mae, m.mse);
    }
    s
}

/// Trains one model per grid value and scores each on the evaluation pairs.
pub fn sweep(
    train_dir: &Path,
    eval_low: &Path,
    gt: &Path,
    topology: &NetTopology,
    base: &TrainConfig,
    grid: &Grid,
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>> {
    let images = load_dataset(train_dir)?;
    let mut points = Vec::with_capacity(grid.values.len());
    for &v in &grid.values {
        let mut cfg = base.clone();
        grid.param.apply(&mut cfg, v);
        let (weights, _) = train_on_images(&images, topology, &cfg, |_| {})?;
        let (rows, _) = evaluate_dirs(&weights, eval_low, gt, &cfg.enhance_cfg)?;
        let Some(mean) = mean_report(&rows) else {
            bail!("no matching evaluation pairs between {} and {}", eval_low.display(), gt.display());
        };
        let point = SweepPoint { value: v, mean };
        on_point(&point);
        points.push(point);
    }
    Ok(points)
}

/// LOL-style layout: `our485/{low,high}` for training, `eval15/{low,high}` for evaluation.
#[derive(Debug, Clone)]
pub struct LolLayout {
    pub root: PathBuf,
}

impl LolLayout {
    pub fn train_low(&self) -> PathBuf {
        self.root.join("our485").join("low")
    }

    pub fn eval_low(&self) -> PathBuf {
        self.root.join("eval15").join("low")
    }

    pub fn eval_high(&self) -> PathBuf {
        self.root.join("eval15").join("high")
    }

    /// The dataset root from `LITEIE_LOL_DIR`, or `./data/LOL`.
    pub fn locate() -> Self {
        let root = std::env::var_os("LITEIE_LOL_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/LOL"));
        Self { root }
    }

    /// Checks that the training and evaluation directories hold images.
    pub fn check(&self) -> Result<()> {
        for dir in [self.train_low(), self.eval_low(), self.eval_high()] {
            let n = list_images(&dir).map(|v| v.len()).unwrap_or(0);
            if n == 0 {
                bail!("LOL dataset not found: {} has no PNG/PPM images (set LITEIE_LOL_DIR)", dir.display());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        let g: Grid = "alpha=0.4:1.2:0.2".parse().unwrap();
        assert_eq!(g.param, GridParam::Alpha);
        assert_eq!(g.values, vec![0.4, 0.6, 0.8, 1.0, 1.2]);
        let b: Grid = "beta=0.2:0.6:0.1".parse().unwrap();
        assert_eq!(b.values, vec![0.2, 0.3, 0.4, 0.5, 0.6]);
        let one: Grid = "alpha=0.8:0.8:0.1".parse().unwrap();
        assert_eq!(one.values, vec![0.8]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        for s in ["alpha", "gamma=0:1:0.1", "alpha=1:0:0.1", "alpha=0:1:0", "alpha=0:1", "alpha=a:1:0.1"] {
            assert!(s.parse::<Grid>().is_err(), "{s}");
        }
    }

    #[test]
    fn sweep_csv_header() {
        let p = SweepPoint { value: 0.8, mean: MetricsReport { psnr: 15.0, ssim: 0.5, mae: 1.0, mse: 2.0 } };
        assert_eq!(
            sweep_csv(GridParam::Alpha, &[p]),
            "alpha, psnr, ssim, mae, mse\n0.8, 15.000000, 0.500000, 1.000000, 2.000000\n"
        );
    }
}
