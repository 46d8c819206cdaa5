//! How much of the input image survives in the client's feature map.
//!
//! For each channel: the Pearson correlation with the center-cropped
//! original, and the PSNR of the best affine reconstruction `a·channel + b`
//! (least squares) against that crop. Images are in `[0, 1]`, so the PSNR
//! peak is 1.

use std::path::Path;

use crate::data::{write_pgm, Pgm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported when the reconstruction is exact.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDistortion {
    pub channel: usize,
    /// In `[-1, 1]`; 0 when either side has zero variance.
    pub correlation: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    pub channels: Vec<ChannelDistortion>,
    pub mean_abs_correlation: f64,
    pub max_abs_correlation: f64,
    /// Highest per-channel PSNR.
    pub best_psnr_db: f64,
}

impl DistortionReport {
    /// CSV with one row per channel followed by the aggregates.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,correlation,psnr_db\n");
        for c in &self.channels {
            s.push_str(&format!("{},{:.6},{:.4}\n", c.channel, c.correlation, c.psnr_db));
        }
        s.push_str(&format!("mean_abs,{:.6},\n", self.mean_abs_correlation));
        s.push_str(&format!("max_abs,{:.6},{:.4}\n", self.max_abs_correlation, self.best_psnr_db));
        s
    }
}

/// Crops `[1, H, W]` symmetrically to `h × w`.
fn center_crop(original: &Tensor, h: usize, w: usize) -> Result<Vec<f64>> {
    let s = original.shape();
    if s.len() != 3 || s[0] != 1 || s[1] < h || s[2] < w || !(s[1] - h).is_multiple_of(2) || !(s[2] - w).is_multiple_of(2) {
        return Err(Error::dim(
            "distortion_metrics",
            format!("cannot center-crop original {s:?} to {h}x{w}"),
        ));
    }
    let (oy, ox) = ((s[1] - h) / 2, (s[2] - w) / 2);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &original.data()[(y + oy) * s[2] + ox..(y + oy) * s[2] + ox + w];
        out.extend(row.iter().map(|&v| v as f64));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// PSNR of the least-squares fit `a·channel + b ≈ target`.
fn affine_psnr(channel: &[f64], target: &[f64]) -> f64 {
    let (mc, mt) = (mean(channel), mean(target));
    let (mut sct, mut scc) = (0.0, 0.0);
    for (&c, &t) in channel.iter().zip(target) {
        sct += (c - mc) * (t - mt);
        scc += (c - mc) * (c - mc);
    }
    let a = if scc == 0.0 { 0.0 } else { sct / scc };
    let b = mt - a * mc;
    let mse = channel
        .iter()
        .zip(target)
        .map(|(&c, &t)| (a * c + b - t).powi(2))
        .sum::<f64>()
        / target.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Compares one original image `[1, H, W]` with its feature map `[F, h, w]`.
pub fn distortion_metrics(original: &Tensor, feature_map: &Tensor) -> Result<DistortionReport> {
    let s = feature_map.shape();
    if s.len() != 3 {
        return Err(Error::dim(
            "distortion_metrics",
            format!("feature map must be [F, h, w], got {s:?}"),
        ));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let target = center_crop(original, h, w)?;
    let channels: Vec<ChannelDistortion> = (0..f)
        .map(|c| {
            let ch: Vec<f64> = feature_map.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).collect();
            ChannelDistortion {
                channel: c,
                correlation: pearson(&ch, &target),
                psnr_db: affine_psnr(&ch, &target),
            }
        })
        .collect();
    let abs: Vec<f64> = channels.iter().map(|c| c.correlation.abs()).collect();
    Ok(DistortionReport {
        mean_abs_correlation: mean(&abs),
        max_abs_correlation: abs.iter().copied().fold(0.0, f64::max),
        best_psnr_db: channels.iter().map(|c| c.psnr_db).fold(f64::NEG_INFINITY, f64::max),
        channels,
    })
}

/// Writes `original.pgm`, one min-max normalized `channel_NN.pgm` per
/// feature channel, and `report.csv` into `dir`.
pub fn write_distortion_dumps(dir: &Path, original: &Tensor, feature_map: &Tensor, report: &DistortionReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let os = original.shape();
    let orig: Vec<f64> = original.data().iter().map(|&v| v as f64).collect();
    let pixels = orig.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(&dir.join("original.pgm"), &Pgm { width: os[2], height: os[1], pixels })?;
    let s = feature_map.shape();
    let (h, w) = (s[1], s[2]);
    for c in 0..s[0] {
        let ch: Vec<f64> = feature_map.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).collect();
        write_pgm(&dir.join(format!("channel_{c:02}.pgm")), &Pgm::min_max(w, h, &ch))?;
    }
    let path = dir.join("report.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::random;

    fn image() -> Tensor {
        random::<f32>(&[1, 64, 64], 3).map(|v| (v + 1.0) / 2.0)
    }

    fn crop_as_map(img: &Tensor, channels: usize) -> Tensor {
        let c: Vec<f32> = center_crop(img, 62, 62).unwrap().iter().map(|&v| v as f32).collect();
        let data = (0..channels).flat_map(|_| c.iter().copied()).collect();
        Tensor::new(vec![channels, 62, 62], data).unwrap()
    }

    #[test]
    fn identity_map() {
        let img = image();
        let r = distortion_metrics(&img, &crop_as_map(&img, 2)).unwrap();
        for c in &r.channels {
            assert!((c.correlation - 1.0).abs() < 1e-9);
            assert_eq!(c.psnr_db, PSNR_CAP_DB);
        }
    }

    #[test]
    fn affine_and_negated_maps() {
        let img = image();
        let m = crop_as_map(&img, 1).map(|v| -3.0 * v + 0.5);
        let r = distortion_metrics(&img, &m).unwrap();
        assert!((r.channels[0].correlation + 1.0).abs() < 1e-6);
        assert!(r.channels[0].psnr_db > 60.0);
        assert!((r.max_abs_correlation - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_map() {
        let img = image();
        let r = distortion_metrics(&img, &Tensor::full(&[1, 62, 62], 0.3)).unwrap();
        assert_eq!(r.channels[0].correlation, 0.0);
        // best fit is the mean image
        let t = center_crop(&img, 62, 62).unwrap();
        let m = mean(&t);
        let mse = t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((r.channels[0].psnr_db - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn random_maps_stay_in_range() {
        let img = image();
        for seed in 0..5 {
            let r = distortion_metrics(&img, &random::<f32>(&[8, 62, 62], seed)).unwrap();
            assert!(r.channels.iter().all(|c| (-1.0..=1.0).contains(&c.correlation)));
        }
    }

    #[test]
    fn shape_errors() {
        let img = image();
        assert!(distortion_metrics(&img, &Tensor::zeros(&[8, 63, 62])).is_err());
        assert!(distortion_metrics(&img, &Tensor::zeros(&[8, 62])).is_err());
        assert!(distortion_metrics(&Tensor::zeros(&[2, 64, 64]), &Tensor::zeros(&[1, 62, 62])).is_err());
    }

    #[test]
    fn dumps_written() {
        let dir = tempfile::tempdir().unwrap();
        let img = image();
        let m = random::<f32>(&[3, 62, 62], 1);
        let r = distortion_metrics(&img, &m).unwrap();
        write_distortion_dumps(dir.path(), &img, &m, &r).unwrap();
        for name in ["original.pgm", "channel_00.pgm", "channel_02.pgm", "report.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let p = crate::data::read_pgm(&dir.path().join("channel_01.pgm")).unwrap();
        assert_eq!((p.width, p.height), (62, 62));
        assert_eq!(*p.pixels.iter().max().unwrap(), 255);
    }
}
