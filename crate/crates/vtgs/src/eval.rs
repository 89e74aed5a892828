//! Evaluation metrics (ATE RMSE, PSNR, depth L1) and the run report format.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::image_buf::{GrayImage, MaskImage, RgbImage};

/// Root-mean-square absolute trajectory error in centimeters after rigid
/// (rotation + translation, no scale) least-squares alignment of the
/// estimated translations onto the ground truth.
pub fn ate_rmse(estimated: &[Pose], ground_truth: &[Pose]) -> Result<f64> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory length mismatch: {} vs {}",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::InvalidInput(
            "ATE needs at least two poses".into(),
        ));
    }
    let n = estimated.len() as f64;
    let xs: Vec<Vector3<f64>> = estimated.iter().map(|p| p.translation).collect();
    let ys: Vec<Vector3<f64>> = ground_truth.iter().map(|p| p.translation).collect();
    let cx = xs.iter().sum::<Vector3<f64>>() / n;
    let cy = ys.iter().sum::<Vector3<f64>>() / n;
    // Kabsch: cross-covariance SVD with a reflection guard.
    let mut h = Matrix3::zeros();
    for (x, y) in xs.iter().zip(&ys) {
        h += (y - cy) * (x - cx).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let t = cy - r * cx;
    let mse = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (r * x + t - y).norm_squared())
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() * 100.0)
}

/// Peak signal-to-noise ratio in dB for images in [0,1]; identical images
/// give +infinity.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::InvalidInput("psnr shape mismatch".into()));
    }
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * a.len()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean absolute depth error in centimeters over the mask. Rendered depth is
/// silhouette-normalized where coverage exceeds 0.5; masked pixels without
/// that coverage are skipped. Returns None when no pixel qualifies.
pub fn depth_l1(
    rendered: &GrayImage,
    silhouette: &GrayImage,
    gt: &GrayImage,
    mask: &MaskImage,
) -> Result<Option<f64>> {
    if !rendered.same_shape(gt) || !rendered.same_shape(mask) || !rendered.same_shape(silhouette) {
        return Err(Error::InvalidInput("depth_l1 shape mismatch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..rendered.len() {
        let s = silhouette.as_slice()[i];
        if mask.as_slice()[i] && s > 0.5 {
            total += (rendered.as_slice()[i] / s - gt.as_slice()[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(total / count as f64 * 100.0))
}

/// Ordered key=value report, one entry per line on disk.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_string_lines(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_string_lines())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("report line {}: missing '='", ln + 1))
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn traj(n: usize, seed: u64) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Pose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )),
                    Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = traj(12, 1);
        assert!(ate_rmse(&t, &t).unwrap() < 1e-12);
    }

    #[test]
    fn ate_is_gauge_invariant() {
        let gt = traj(20, 2);
        let gauge = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.4, -1.0, 0.7)),
            Vector3::new(3.0, -2.0, 11.0),
        );
        let est: Vec<Pose> = gt.iter().map(|p| gauge.compose(p)).collect();
        assert!(ate_rmse(&est, &gt).unwrap() < 1e-9);
    }

    /// Horn's quaternion-based absolute orientation, an independent algorithm
    /// from the SVD Kabsch solution used by ate_rmse.
    fn horn_rmse(est: &[Pose], gt: &[Pose]) -> f64 {
        let n = est.len() as f64;
        let xs: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
        let ys: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
        let cx = xs.iter().sum::<Vector3<f64>>() / n;
        let cy = ys.iter().sum::<Vector3<f64>>() / n;
        let mut s = Matrix3::zeros();
        for (x, y) in xs.iter().zip(&ys) {
            s += (x - cx) * (y - cy).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let nmat = nalgebra::Matrix4::new(
            sxx + syy + szz, syz - szy,       szx - sxz,       sxy - syx,
            syz - szy,       sxx - syy - szz, sxy + syx,       szx + sxz,
            szx - sxz,       sxy + syx,       -sxx + syy - szz, syz + szy,
            sxy - syx,       szx + sxz,       syz + szy,       -sxx - syy + szz,
        );
        let eig = nalgebra::SymmetricEigen::new(nmat);
        let (mut best, mut best_val) = (0, f64::NEG_INFINITY);
        for i in 0..4 {
            if eig.eigenvalues[i] > best_val {
                best_val = eig.eigenvalues[i];
                best = i;
            }
        }
        let q = eig.eigenvectors.column(best);
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        let r: Rotation3<f64> = rot.to_rotation_matrix();
        let t = cy - r * cx;
        let mse = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (r * x + t - y).norm_squared())
            .sum::<f64>()
            / n;
        mse.sqrt() * 100.0
    }

    #[test]
    fn ate_matches_horn_oracle() {
        // [DERIVED] independent quaternion-based alignment oracle.
        let gt = traj(10, 3);
        let mut est = gt.clone();
        est[4].translation += Vector3::new(0.01, 0.0, 0.0);
        let ours = ate_rmse(&est, &gt).unwrap();
        let oracle = horn_rmse(&est, &gt);
        assert!(
            (ours - oracle).abs() < 1e-9,
            "kabsch {ours} vs horn {oracle}"
        );
        assert!(ours > 0.0 && ours < 1.0);
    }

    #[test]
    fn ate_rejects_bad_inputs() {
        let t = traj(5, 4);
        assert!(ate_rmse(&t, &t[..4]).is_err());
        assert!(ate_rmse(&t[..1], &t[..1]).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::new(8, 8, [0.5; 3]);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = RgbImage::new(8, 8, [0.6; 3]);
        // uniform |a-b| = 0.1 -> 10*log10(1/0.01) = 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = RgbImage::new(4, 8, [0.0; 3]);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn depth_l1_closed_forms() {
        let s = GrayImage::new(8, 8, 1.0);
        let a = GrayImage::new(8, 8, 2.0);
        let b = GrayImage::new(8, 8, 2.01);
        let mask = MaskImage::new(8, 8, true);
        assert_eq!(depth_l1(&a, &s, &a, &mask).unwrap(), Some(0.0));
        let v = depth_l1(&b, &s, &a, &mask).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let empty = MaskImage::new(8, 8, false);
        assert_eq!(depth_l1(&a, &s, &a, &empty).unwrap(), None);
    }

    #[test]
    fn depth_l1_matches_summation_oracle() {
        // [DERIVED] direct-summation oracle on a random masked pair.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rendered = GrayImage::new(16, 16, 0.0);
        let mut sil = GrayImage::new(16, 16, 0.0);
        let mut gt = GrayImage::new(16, 16, 0.0);
        let mut mask = MaskImage::new(16, 16, false);
        for i in 0..rendered.len() {
            rendered.as_mut_slice()[i] = rng.gen_range(0.5..3.0);
            sil.as_mut_slice()[i] = rng.gen_range(0.0..1.0);
            gt.as_mut_slice()[i] = rng.gen_range(0.5..3.0);
            mask.as_mut_slice()[i] = rng.gen_bool(0.7);
        }
        let got = depth_l1(&rendered, &sil, &gt, &mask).unwrap().unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..rendered.len() {
            if mask.as_slice()[i] && sil.as_slice()[i] > 0.5 {
                sum += (rendered.as_slice()[i] / sil.as_slice()[i] - gt.as_slice()[i]).abs();
                n += 1;
            }
        }
        assert!((got - sum / n as f64 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn report_round_trip() {
        let mut r = Report::default();
        r.set("ate_rmse_cm", 0.123456);
        r.set("psnr_db", "inf");
        r.set("ate_rmse_cm", 0.5); // overwrite keeps position
        let text = r.to_string_lines();
        let back = Report::parse(&text).unwrap();
        assert_eq!(back.get("ate_rmse_cm"), Some("0.5"));
        assert_eq!(back.get("psnr_db"), Some("inf"));
        assert!(Report::parse("no equals sign").is_err());
    }
}
