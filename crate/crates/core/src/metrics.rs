//! PSNR/SSIM, volume-wise aggregation and report serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::volume::{extract_slices, Axis, Plane, Volume};

pub const DATA_RANGE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: DATA_RANGE,
        }
    }
}

/// `10 log10(R^2 / MSE)`, `+inf` when the inputs are identical.
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    ensure!(a.len() == b.len(), "psnr: length mismatch {} vs {}", a.len(), b.len());
    ensure!(!a.is_empty(), "psnr: empty input");
    ensure!(data_range > 0.0, "psnr: data_range must be positive");
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.len() as f64;
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub fn psnr_volume(a: &Volume, b: &Volume) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "psnr: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    psnr(a.data(), b.data(), DATA_RANGE)
}

fn gaussian_window(params: &SsimParams) -> Vec<f64> {
    let half = (params.window as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..params.window)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * params.sigma * params.sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a `rows x cols` image.
fn filter_valid(img: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let (out_r, out_c) = (rows - k + 1, cols - k + 1);
    let mut horiz = vec![0.0; rows * out_c];
    for r in 0..rows {
        let row = &img[r * cols..(r + 1) * cols];
        for c in 0..out_c {
            horiz[r * out_c + c] = w.iter().zip(&row[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; out_r * out_c];
    for r in 0..out_r {
        for (t, &wt) in w.iter().enumerate() {
            let src = &horiz[(r + t) * out_c..(r + t + 1) * out_c];
            for (o, s) in out[r * out_c..(r + 1) * out_c].iter_mut().zip(src) {
                *o += wt * s;
            }
        }
    }
    out
}

/// Mean local SSIM over valid window positions.
pub fn ssim(a: &Plane, b: &Plane, params: &SsimParams) -> Result<f64> {
    ensure!(
        a.dims() == b.dims(),
        "ssim: shape mismatch {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
    if a.rows() < params.window || a.cols() < params.window {
        return Err(Error::contract(format!(
            "ssim: image {}x{} smaller than the {}x{} window",
            a.rows(),
            a.cols(),
            params.window, params.window
        )));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let w = gaussian_window(params);
    let (rows, cols) = a.dims();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, rows, cols, &w);
    let mu_y = filter_valid(&y, rows, cols, &w);
    let e_xx = filter_valid(&xx, rows, cols, &w);
    let e_yy = filter_valid(&yy, rows, cols, &w);
    let e_xy = filter_valid(&xy, rows, cols, &w);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// PSNR over all voxels, SSIM averaged over axial slices.
    Volume,
    /// PSNR and SSIM over the sagittal slice stack only.
    Sagittal,
}

impl Protocol {
    pub fn slice_axis(self) -> Axis {
        match self {
            Protocol::Volume => Axis::Z,
            Protocol::Sagittal => Axis::X,
        }
    }
}

/// `(psnr dB, ssim)` of `sr` against `gt`.
pub fn volume_metrics(sr: &Volume, gt: &Volume, protocol: Protocol) -> Result<(f64, f64)> {
    ensure!(
        sr.shape() == gt.shape(),
        "volume_metrics: shape mismatch {:?} vs {:?}",
        sr.shape(),
        gt.shape()
    );
    let params = SsimParams::default();
    let axis = protocol.slice_axis();
    let a = extract_slices(sr, axis);
    let b = extract_slices(gt, axis);
    let mut ssim_sum = 0.0;
    for (p, q) in a.slices.iter().zip(&b.slices) {
        ssim_sum += ssim(p, q, &params)?;
    }
    // both protocols cover every voxel once, so PSNR is the volume PSNR
    Ok((psnr_volume(sr, gt)?, ssim_sum / a.slices.len() as f64))
}

/// SHA-256 over the shape and little-endian voxel bytes.
pub fn volume_hash(v: &Volume) -> String {
    let mut h = Sha256::new();
    for n in v.shape() {
        h.update((n as u64).to_le_bytes());
    }
    for x in v.data() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DbRepr {
    Num(f64),
    Str(String),
}

fn db_from_repr<E: serde::de::Error>(r: DbRepr) -> std::result::Result<f64, E> {
    match r {
        DbRepr::Num(v) => Ok(v),
        DbRepr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        DbRepr::Str(s) => Err(E::custom(format!("invalid dB value `{s}`"))),
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    db_from_repr(DbRepr::deserialize(d)?)
}

fn ser_db_list<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    #[derive(Serialize)]
    struct Db(#[serde(serialize_with = "ser_db")] f64);
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        seq.serialize_element(&Db(x))?;
    }
    seq.end()
}

fn de_db_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<DbRepr>::deserialize(d)?.into_iter().map(db_from_repr).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub scale: usize,
    pub variant: String,
    pub protocol: Protocol,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    #[serde(serialize_with = "ser_db_list", deserialize_with = "de_db_list")]
    pub psnr_per_volume: Vec<f64>,
    pub ssim_per_volume: Vec<f64>,
    pub seed_set: Vec<u64>,
    /// Hash of each evaluated output volume, aligned with the per-volume lists.
    pub volume_hashes: Vec<String>,
}

impl ReportRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dataset: &str,
        scale: usize,
        variant: &str,
        protocol: Protocol,
        psnr_per_volume: Vec<f64>,
        ssim_per_volume: Vec<f64>,
        seed_set: Vec<u64>,
        volume_hashes: Vec<String>,
    ) -> Result<Self> {
        ensure!(!psnr_per_volume.is_empty(), "report row needs at least one volume");
        ensure!(
            psnr_per_volume.len() == ssim_per_volume.len() && psnr_per_volume.len() == volume_hashes.len(),
            "report row lists must align"
        );
        Ok(ReportRow {
            dataset: dataset.to_string(),
            scale,
            variant: variant.to_string(),
            protocol,
            psnr_mean: mean(&psnr_per_volume),
            ssim_mean: mean(&ssim_per_volume),
            psnr_per_volume,
            ssim_per_volume,
            seed_set,
            volume_hashes,
        })
    }

    pub fn n_volumes(&self) -> usize {
        self.psnr_per_volume.len()
    }

    /// Stored means equal the means of the per-volume lists.
    pub fn is_consistent(&self) -> bool {
        let same = |a: f64, b: f64| a == b || (a.is_infinite() && b.is_infinite());
        same(self.psnr_mean, mean(&self.psnr_per_volume)) && same(self.ssim_mean, mean(&self.ssim_per_volume))
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    /// Bundle checksums keyed by a label such as `seed3`.
    pub bundles: BTreeMap<String, BTreeMap<String, String>>,
    /// Input volume hashes keyed by volume id.
    pub data: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub provenance: ReportProvenance,
    /// Requested variants that could not be evaluated, with the reason.
    #[serde(default)]
    pub absent: Vec<String>,
}

pub const CSV_HEADER: &str = "dataset,scale,variant,psnr_mean,ssim_mean,n_volumes";

fn fmt_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub fn rows_for(&self, protocol: Protocol) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.protocol == protocol)
    }

    pub fn find(&self, dataset: &str, scale: usize, variant: &str, protocol: Protocol) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.scale == scale && r.variant == variant && r.protocol == protocol)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "eval report",
            reason: e.to_string(),
        })
    }

    pub fn to_csv(&self, protocol: Protocol) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows_for(protocol) {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                r.dataset,
                r.scale,
                r.variant,
                fmt_db(r.psnr_mean),
                r.ssim_mean,
                r.n_volumes()
            );
        }
        out
    }

    /// Writes `report.json`, `report.csv` (volume protocol) and
    /// `report_sagittal.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()),
            ("report.csv", self.to_csv(Protocol::Volume)),
            ("report_sagittal.csv", self.to_csv(Protocol::Sagittal)),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window SSIM with a 2-D Gaussian built from scratch.
    fn ssim_oracle(a: &Plane, b: &Plane) -> f64 {
        let (k, sigma) = (11usize, 1.5f64);
        let mut w2 = vec![0.0f64; k * k];
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                w2[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            }
        }
        let s: f64 = w2.iter().sum();
        w2.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (0.0001f64, 0.0009f64);
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=a.rows() - k {
            for c0 in 0..=a.cols() - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let w = w2[i * k + j];
                        mx += w * a.get(r0 + i, c0 + j) as f64;
                        my += w * b.get(r0 + i, c0 + j) as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let w = w2[i * k + j];
                        let dx = a.get(r0 + i, c0 + j) as f64 - mx;
                        let dy = b.get(r0 + i, c0 + j) as f64 - my;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cov += w * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn psnr_oracle(a: &[f32], b: &[f32]) -> f64 {
        let mut mse = 0.0f64;
        for (p, q) in a.iter().zip(b) {
            mse += ((*p as f64) - (*q as f64)).powi(2) / a.len() as f64;
        }
        -10.0 * mse.log10()
    }

    fn random_plane(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Plane {
        Plane::from_fn(rows, cols, |_, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.25f32; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let zeros = vec![0.0f32; 16];
        let ones = vec![1.0f32; 16];
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
        // d = 2^-7 and R = 100 d are exact, so R^2 / MSE = 10^4 exactly
        let b: Vec<f32> = zeros.iter().map(|v| v + 0.0078125).collect();
        assert_eq!(psnr(&zeros, &b, 0.78125).unwrap(), 40.0);
        assert!(psnr(&zeros, &ones[..4], 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f32> = (0..4096).map(|_| rng.random::<f32>() * 0.5 + 0.25).collect();
        let noise: Vec<f32> = (0..4096).map(|_| rng.random::<f32>() - 0.5).collect();
        let values: Vec<f64> = [0.01f32, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|&s| {
                let noisy: Vec<f32> = base.iter().zip(&noise).map(|(b, n)| b + s * n).collect();
                psnr(&base, &noisy, 1.0).unwrap()
            })
            .collect();
        assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
    }

    #[test]
    fn metrics_match_oracles_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let rows = rng.random_range(11..24);
            let cols = rng.random_range(11..24);
            let a = random_plane(&mut rng, rows, cols);
            let b = Plane::from_fn(rows, cols, |r, c| (a.get(r, c) + 0.2 * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).unwrap();
            assert!((ssim(&a, &b, &SsimParams::default()).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
            assert!((psnr(a.data(), b.data(), 1.0).unwrap() - psnr_oracle(a.data(), b.data())).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_of_binary_complement_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Plane::from_fn(16, 16, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
        let b = Plane::from_fn(16, 16, |r, c| 1.0 - a.get(r, c)).unwrap();
        let s = ssim(&a, &b, &SsimParams::default()).unwrap();
        assert!(s < 0.0);
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Plane::from_fn(10, 30, |_, _| 0.0).unwrap();
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
    }

    #[test]
    fn volume_metrics_is_mean_of_slice_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = Volume::from_fn([12, 13, 14], |_, _, _| rng.random::<f32>()).unwrap();
        let sr = Volume::from_fn([12, 13, 14], |x, y, z| gt.get(x, y, z) * 0.9 + 0.05).unwrap();
        let (p, s) = volume_metrics(&sr, &gt, Protocol::Volume).unwrap();
        let slices: Vec<f64> = (0..14)
            .map(|z| {
                let a = Plane::from_fn(12, 13, |x, y| sr.get(x, y, z)).unwrap();
                let b = Plane::from_fn(12, 13, |x, y| gt.get(x, y, z)).unwrap();
                ssim_oracle(&a, &b)
            })
            .collect();
        assert!((s - mean(&slices)).abs() < 1e-9);
        assert!((p - psnr_oracle(sr.data(), gt.data())).abs() < 1e-9);
        let (_, s_sag) = volume_metrics(&sr, &gt, Protocol::Sagittal).unwrap();
        let sag: Vec<f64> = (0..12)
            .map(|x| {
                let a = Plane::from_fn(13, 14, |y, z| sr.get(x, y, z)).unwrap();
                let b = Plane::from_fn(13, 14, |y, z| gt.get(x, y, z)).unwrap();
                ssim_oracle(&a, &b)
            })
            .collect();
        assert!((s_sag - mean(&sag)).abs() < 1e-9);
        assert_eq!(volume_metrics(&gt, &gt, Protocol::Volume).unwrap(), (f64::INFINITY, 1.0));
        assert!(volume_metrics(&gt, &Volume::zeros([12, 13, 13]).unwrap(), Protocol::Volume).is_err());
    }

    #[test]
    fn report_json_roundtrip_with_infinite_psnr() {
        let row = ReportRow::new(
            "shift0.8",
            4,
            "davsr",
            Protocol::Volume,
            vec![f64::INFINITY, 30.0],
            vec![1.0, 0.9],
            vec![0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(row.is_consistent());
        let report = EvalReport {
            rows: vec![row],
            provenance: ReportProvenance::default(),
            absent: vec![],
        };
        let text = report.to_json();
        assert!(text.contains("\"inf\""));
        assert_eq!(EvalReport::from_json(&text).unwrap(), report);
        let csv = report.to_csv(Protocol::Volume);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("shift0.8,4,davsr,inf,0.950000,2"));
        assert_eq!(report.to_csv(Protocol::Sagittal), format!("{CSV_HEADER}\n"));
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_reflexive(seed in any::<u64>(), rows in 11usize..16, cols in 11usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_plane(&mut rng, rows, cols);
            let b = random_plane(&mut rng, rows, cols);
            let p = SsimParams::default();
            prop_assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
            prop_assert_eq!(ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
        }
    }
}
