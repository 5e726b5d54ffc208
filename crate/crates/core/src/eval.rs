//! Full-reference metrics (PSNR, SSIM) and dataset evaluation.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Image;
use crate::error::{invalid, Result};
use crate::model::DerainModel;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)` for unit peak, capped at 100 dB.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(invalid(format!("psnr: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM over every fully contained 11x11 Gaussian window,
/// computed per channel (and batch element) and averaged.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(invalid(format!("ssim: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    let [_, _, h, w] = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut planes = 0;
    for (px, py) in x.data().chunks(plane).zip(y.data().chunks(plane)) {
        let xx: Vec<f64> = px.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = py.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = px.iter().zip(py).map(|(a, b)| a * b).collect();
        let mx = filter_valid(px, h, w, &win);
        let my = filter_valid(py, h, w, &win);
        let sxx = filter_valid(&xx, h, w, &win);
        let syy = filter_valid(&yy, h, w, &win);
        let sxy = filter_valid(&xy, h, w, &win);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            acc += ssim_formula(mx[i], my[i], sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
        }
        total += acc / mx.len() as f64;
        planes += 1;
    }
    Ok(total / planes as f64)
}

pub(crate) fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(k, c)| c * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(k, c)| c * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Sorted by identifier.
    pub rows: Vec<MetricsRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn from_rows(mut rows: Vec<MetricsRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricsReport {
            rows,
            mean_psnr,
            mean_ssim,
        }
    }

    /// `id,psnr,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.id, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// One evaluation item: identifier, rainy input, clean reference.
pub struct EvalItem {
    pub id: String,
    pub rainy: Image,
    pub clean: Image,
}

/// Derain every item and score it against its reference.
pub fn evaluate(model: &DerainModel, items: &[EvalItem]) -> Result<MetricsReport> {
    let rows = items
        .iter()
        .map(|it| {
            let out = model.derain(&it.rainy.to_tensor())?;
            let clean = it.clean.to_tensor();
            Ok(MetricsRow {
                id: it.id.clone(),
                psnr: psnr(&out, &clean)?,
                ssim: ssim(&out, &clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows))
}

/// Metrics of the rainy inputs themselves (the no-op baseline).
pub fn evaluate_inputs(items: &[EvalItem]) -> Result<MetricsReport> {
    let rows = items
        .iter()
        .map(|it| {
            let (o, b) = (it.rainy.to_tensor(), it.clean.to_tensor());
            Ok(MetricsRow {
                id: it.id.clone(),
                psnr: psnr(&o, &b)?,
                ssim: ssim(&o, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_, _, _, _| r.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full([1, 3, 8, 8], 0.3);
        let b = Tensor::full([1, 3, 8, 8], 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!(psnr(&a, &Tensor::zeros([1, 3, 8, 7])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = rand_img(16, 16, 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let checker = Tensor::from_fn([1, 3, 16, 16], |_, _, y, x| ((x + y) % 2) as f64);
        let inv = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < 0.5);
        assert!(ssim(&rand_img(10, 16, 1), &rand_img(10, 16, 2)).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn evaluate_identity_model() {
        let cfg = ModelConfig {
            channels: 4,
            rrn_blocks: 1,
            drn_blocks: 1,
            se_reduction: 2,
            ..Default::default()
        };
        let model = DerainModel::new(&cfg).unwrap();
        let img = |s: u64| {
            let t = rand_img(12, 12, s);
            Image::from_tensor_clamped(&t, 0).unwrap()
        };
        let items = vec![
            EvalItem {
                id: "b".into(),
                rainy: img(1),
                clean: img(1),
            },
            EvalItem {
                id: "a".into(),
                rainy: img(2),
                clean: img(3),
            },
        ];
        let rep = evaluate(&model, &items).unwrap();
        assert_eq!(rep.rows[0].id, "a");
        assert_eq!(rep.rows[1].psnr, 100.0);
        assert_eq!(rep.rows[1].ssim, 1.0);
        assert_eq!(rep, evaluate_inputs(&items).unwrap());
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_ssim_symmetric(seed in 0u64..1000) {
            let a = rand_img(12, 13, seed);
            let b = rand_img(12, 13, seed + 1);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..1000) {
            let base = Tensor::full([1, 3, 8, 8], 0.5);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let dir = Tensor::from_fn([1, 3, 8, 8], |_, _, _, _| if r.random_bool(0.5) { 1.0 } else { -1.0 });
            let noisy = |amp: f64| base.zip_map(&dir, |b, d| b + amp * d).unwrap();
            let p1 = psnr(&base, &noisy(0.01)).unwrap();
            let p2 = psnr(&base, &noisy(0.02)).unwrap();
            let p3 = psnr(&base, &noisy(0.04)).unwrap();
            prop_assert!(p1 > p2 && p2 > p3);
        }
    }
}
