//! PSNR and SSIM on the luma channel.

use std::io::Write;

use crate::data::{rgb_to_y, ImageRGB, Plane};
use crate::error::{Error, Result};

/// PSNR reported for identical inputs in text output.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const PEAK: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// `+inf` for identical inputs.
    pub psnr_db: f64,
    pub ssim: f64,
    pub border_crop: usize,
}

impl MetricReport {
    pub fn psnr_capped(&self) -> f64 {
        self.psnr_db.min(PSNR_CAP_DB)
    }
}

fn same_size(op: &'static str, a: &Plane, b: &Plane) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Invalid(format!(
            "{op}: {}x{} vs {}x{} planes",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; values are on the 0–`peak` scale.
pub fn psnr(a: &Plane, b: &Plane, peak: f64) -> Result<f64> {
    same_size("psnr", a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Separable 11x11 Gaussian filter over valid window positions.
fn filter_valid(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let (wo, ho) = (width - WINDOW + 1, height - WINDOW + 1);
    let mut tmp = vec![0.0; wo * height];
    for y in 0..height {
        for x in 0..wo {
            let row = &data[y * width + x..][..WINDOW];
            tmp[y * wo + x] = row.iter().zip(&taps).map(|(v, t)| v * t).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..WINDOW).map(|k| taps[k] * tmp[(y + k) * wo + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window (σ = 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, `L = 255`, averaged over valid window positions.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    same_size("ssim", a, b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs planes of at least {WINDOW}x{WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let (w, h) = (a.width, a.height);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&a.data, w, h);
    let mu_b = filter_valid(&b.data, w, h);
    let aa = filter_valid(&prod(&a.data, &a.data), w, h);
    let bb = filter_valid(&prod(&b.data, &b.data), w, h);
    let ab = filter_valid(&prod(&a.data, &b.data), w, h);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Luma on the 0–255 scale.
pub fn luma_255(img: &ImageRGB) -> Plane {
    rgb_to_y(img).scaled(PEAK)
}

/// Y-channel PSNR and SSIM after dropping `border` pixels per side.
pub fn evaluate_pair(reference: &ImageRGB, test: &ImageRGB, border: usize) -> Result<MetricReport> {
    let a = luma_255(reference).crop(border)?;
    let b = luma_255(test).crop(border)?;
    Ok(MetricReport {
        psnr_db: psnr(&a, &b, PEAK)?,
        ssim: ssim(&a, &b)?,
        border_crop: border,
    })
}

/// Per-channel RGB SSIM averaged over channels, after the same border crop.
pub fn ssim_rgb(reference: &ImageRGB, test: &ImageRGB, border: usize) -> Result<f64> {
    let mut acc = 0.0;
    for c in 0..3 {
        let a = reference.channel(c).scaled(PEAK).crop(border)?;
        let b = test.channel(c).scaled(PEAK).crop(border)?;
        acc += ssim(&a, &b)?;
    }
    Ok(acc / 3.0)
}

/// Writes `name,psnr_db,ssim` rows sorted by name. PSNR is capped at
/// [`PSNR_CAP_DB`].
pub fn write_csv<W: Write>(out: &mut W, rows: &[(String, MetricReport)]) -> std::io::Result<()> {
    let mut sorted: Vec<&(String, MetricReport)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    writeln!(out, "name,psnr_db,ssim")?;
    for (name, r) in sorted {
        writeln!(out, "{name},{:.4},{:.6}", r.psnr_capped(), r.ssim)?;
    }
    Ok(())
}

/// Mean of the reports, accumulated in name order.
pub fn mean_report(rows: &[(String, MetricReport)]) -> Option<MetricReport> {
    let mut sorted: Vec<&(String, MetricReport)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let first = sorted.first()?;
    let n = sorted.len() as f64;
    Some(MetricReport {
        psnr_db: sorted.iter().map(|r| r.1.psnr_db).sum::<f64>() / n,
        ssim: sorted.iter().map(|r| r.1.ssim).sum::<f64>() / n,
        border_crop: first.1.border_crop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Plane {
        Plane::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn identical_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_plane(16, 12, &mut rng);
        let p = psnr(&a, &a, PEAK).unwrap();
        assert!(p.is_infinite());
        let r = MetricReport {
            psnr_db: p,
            ssim: 1.0,
            border_crop: 0,
        };
        assert_eq!(r.psnr_capped(), 99.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_level_error_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Plane::new(8, 8, (0..64).map(|_| rng.random_range(0..255) as f64).collect()).unwrap();
        let b = Plane::new(8, 8, a.data.iter().map(|v| v + 1.0).collect()).unwrap();
        let p = psnr(&a, &b, PEAK).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((p - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn psnr_matches_scalar_loop_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_plane(13, 9, &mut rng);
        let b = random_plane(13, 9, &mut rng);
        let mut se = 0.0;
        for i in 0..a.data.len() {
            se += (a.data[i] - b.data[i]).powi(2);
        }
        let want = 10.0 * (255.0f64 * 255.0 / (se / a.data.len() as f64)).log10();
        assert!((psnr(&a, &b, PEAK).unwrap() - want).abs() <= 1e-9);
        assert_eq!(psnr(&a, &b, PEAK).unwrap(), psnr(&b, &a, PEAK).unwrap());
        assert!(psnr(&a, &random_plane(9, 13, &mut rng), PEAK).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_plane(32, 32, &mut rng);
        let noise: Vec<f64> = (0..a.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let b = Plane::new(32, 32, a.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect()).unwrap();
            let p = psnr(&a, &b, PEAK).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    /// Direct 2-D window evaluation of SSIM.
    fn ssim_direct(a: &Plane, b: &Plane) -> f64 {
        let mut win = [[0.0; 11]; 11];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                total += *v;
            }
        }
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=a.height - 11 {
            for x in 0..=a.width - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = win[i][j] / total;
                        let (p, q) = (a.at(x + j, y + i), b.at(x + j, y + i));
                        ma += w * p;
                        mb += w * q;
                        saa += w * p * p;
                        sbb += w * q * q;
                        sab += w * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_matches_direct_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_plane(23, 17, &mut rng);
        let b = Plane::new(
            23,
            17,
            a.data.iter().map(|v| v + rng.random_range(-30.0..30.0)).collect(),
        )
        .unwrap();
        let fast = ssim(&a, &b).unwrap();
        assert!((fast - ssim_direct(&a, &b)).abs() <= 1e-9);
        assert!((fast - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        assert!(fast < 1.0);
    }

    #[test]
    fn inverted_binary_plane_has_negative_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Plane::new(
            16,
            16,
            (0..256)
                .map(|_| if rng.random_bool(0.5) { 255.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let inv = Plane::new(16, 16, a.data.iter().map(|v| 255.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_plane(10, 20, &mut rng);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_applies_border_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = ImageRGB::from_fn(20, 20, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
        // Differences confined to the border vanish after cropping.
        let mut edited = img.clone();
        edited = ImageRGB::from_fn(20, 20, |c, x, y| {
            if x == 0 {
                1.0 - edited.at(c, x, y)
            } else {
                edited.at(c, x, y)
            }
        })
        .unwrap();
        let r = evaluate_pair(&img, &edited, 2).unwrap();
        assert!(r.psnr_db.is_infinite());
        assert_eq!(r.border_crop, 2);
        assert!(evaluate_pair(&img, &edited, 0).unwrap().psnr_db.is_finite());
    }

    #[test]
    fn csv_rows_sorted() {
        let r = MetricReport {
            psnr_db: f64::INFINITY,
            ssim: 1.0,
            border_crop: 2,
        };
        let rows = vec![
            ("b.png".to_string(), r),
            ("a.png".to_string(), MetricReport { psnr_db: 30.0, ..r }),
        ];
        let mut out = Vec::new();
        write_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "name,psnr_db,ssim\na.png,30.0000,1.000000\nb.png,99.0000,1.000000\n"
        );
    }
}
