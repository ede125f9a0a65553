//! Desk-scale labeled feature datasets and their file formats.
//!
//! Labels follow one convention everywhere: `0..K` are inlier classes, `K`
//! is background, and [`OOD_LABEL`] marks evaluation outliers.
//!
//! CSV: optional header `label,f0,…,f{d-1}`, one record per line, values in
//! shortest round-trip decimal form.
//!
//! Binary (`FFSD`): magic, `u32` version 1, `u32` record count, `u32` d,
//! then per record an `i32` label and `d` `f32` values, all little-endian.
//! The payload is 32-bit, so writing is lossy for values not representable
//! as `f32`.

use std::fmt::Write as _;
use std::path::Path;

use crate::binio::{put_u32, ByteReader};
use crate::error::{invalid, FfsError, Result};
use crate::numerics::SeededRng;

pub const OOD_LABEL: i32 = -1;
pub const BIN_MAGIC: &[u8; 4] = b"FFSD";
pub const BIN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub label: i32,
    pub feature: Vec<f64>,
}

impl FeatureRecord {
    pub fn new(label: i32, feature: Vec<f64>) -> Self {
        Self { label, feature }
    }

    pub fn is_inlier(&self, num_classes: usize) -> bool {
        self.label >= 0 && (self.label as usize) < num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    GaussianMixture,
    Crescents,
    Rings,
}

impl std::str::FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian-mixture" | "gaussian_mixture" | "mixture" => Ok(Generator::GaussianMixture),
            "crescents" => Ok(Generator::Crescents),
            "rings" => Ok(Generator::Rings),
            _ => Err(format!("unknown generator '{s}' (expected gaussian-mixture, crescents or rings)")),
        }
    }
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::GaussianMixture => "gaussian-mixture",
            Generator::Crescents => "crescents",
            Generator::Rings => "rings",
        }
    }
}

/// Parameters of a synthetic feature dataset.
///
/// Geometry, by generator:
/// - crescents: class `c` is the outward half of a circle of `radius` whose
///   center sits at distance `ring_radius` from the origin at angle `2πc/K`;
///   points are spread uniformly across a band of thickness `width`.
/// - rings: class `c` is a circle of radius `(c+1)·radius` with radial
///   Gaussian noise of standard deviation `width`.
/// - gaussian-mixture: class `c` is `N(center_c, width²·I)`; default centers
///   lie on a circle of `radius` in the first two coordinates.
///
/// Coordinates past the second carry `N(0, width²)` noise for the geometric
/// generators. Background records pick a class uniformly and sit uniformly in
/// a widened copy of its support: the crescent or ring band thickened to
/// `background_width`, or the cube of side `background_width` around a
/// mixture center (coordinates past the second are uniform over the same
/// side length). The OOD set is an isotropic Gaussian cluster at
/// `ood_center` with standard deviation `ood_spread`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_background: usize,
    pub n_ood: usize,
    pub radius: f64,
    pub ring_radius: f64,
    pub width: f64,
    pub background_width: f64,
    pub centers: Option<Vec<Vec<f64>>>,
    pub ood_center: Vec<f64>,
    pub ood_spread: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// Three crescents, 2000 training records (1680 inlier + 320 background).
    fn default() -> Self {
        Self {
            generator: Generator::Crescents,
            classes: 3,
            dim: 2,
            n_per_class: 700,
            n_background: 400,
            n_ood: 500,
            radius: 1.0,
            ring_radius: 2.0,
            width: 0.3,
            background_width: 0.6,
            centers: None,
            ood_center: vec![0.0, 0.0],
            ood_spread: 0.25,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return invalid("classes must be at least 1");
        }
        if self.n_per_class < 2 {
            return invalid("n_per_class must be at least 2");
        }
        if self.generator != Generator::GaussianMixture && self.dim < 2 {
            return invalid("geometric generators need dim >= 2");
        }
        if self.dim == 0 {
            return invalid("dim must be at least 1");
        }
        for (name, v) in [("radius", self.radius), ("ring_radius", self.ring_radius), ("width", self.width), ("background_width", self.background_width), ("ood_spread", self.ood_spread)] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be a non-negative finite number, got {v}"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return invalid("train_fraction must lie strictly between 0 and 1");
        }
        if self.ood_center.len() > self.dim {
            return invalid("ood_center has more coordinates than dim");
        }
        if let Some(c) = &self.centers {
            if c.len() != self.classes || c.iter().any(|v| v.len() != self.dim) {
                return invalid("centers must list one dim-length vector per class");
            }
        }
        Ok(())
    }

    /// Largest per-coordinate noise scale of the inlier generator.
    pub fn noise_scale(&self) -> f64 {
        self.width
    }

    fn class_center(&self, c: usize) -> Vec<f64> {
        if let Some(centers) = &self.centers {
            return centers[c].clone();
        }
        let angle = 2.0 * std::f64::consts::PI * c as f64 / self.classes as f64;
        let mut v = vec![0.0; self.dim];
        v[0] = self.radius * angle.cos();
        if self.dim > 1 {
            v[1] = self.radius * angle.sin();
        }
        v
    }

    fn sample_inlier(&self, c: usize, rng: &mut SeededRng) -> Vec<f64> {
        use std::f64::consts::PI;
        let mut v = match self.generator {
            Generator::GaussianMixture => {
                let center = self.class_center(c);
                return center.iter().map(|m| m + self.width * rng.normal()).collect();
            }
            Generator::Crescents => {
                let phi = 2.0 * PI * c as f64 / self.classes as f64;
                let theta = phi - PI / 2.0 + PI * rng.uniform();
                let rho = self.radius + self.width * (rng.uniform() - 0.5);
                vec![self.ring_radius * phi.cos() + rho * theta.cos(), self.ring_radius * phi.sin() + rho * theta.sin()]
            }
            Generator::Rings => {
                let theta = 2.0 * PI * rng.uniform();
                let rho = (c + 1) as f64 * self.radius + self.width * rng.normal();
                vec![rho * theta.cos(), rho * theta.sin()]
            }
        };
        v.extend((2..self.dim).map(|_| self.width * rng.normal()));
        v
    }

    fn sample_background(&self, rng: &mut SeededRng) -> Vec<f64> {
        use std::f64::consts::PI;
        let c = rng.below(self.classes);
        let b = self.background_width;
        let mut v = match self.generator {
            Generator::GaussianMixture => {
                return self.class_center(c).iter().map(|m| m + b * (rng.uniform() - 0.5)).collect();
            }
            Generator::Crescents => {
                let phi = 2.0 * PI * c as f64 / self.classes as f64;
                let theta = phi - PI / 2.0 + PI * rng.uniform();
                let rho = self.radius + b * (rng.uniform() - 0.5);
                vec![self.ring_radius * phi.cos() + rho * theta.cos(), self.ring_radius * phi.sin() + rho * theta.sin()]
            }
            Generator::Rings => {
                let theta = 2.0 * PI * rng.uniform();
                let rho = (c + 1) as f64 * self.radius + b * (rng.uniform() - 0.5);
                vec![rho * theta.cos(), rho * theta.sin()]
            }
        };
        v.extend((2..self.dim).map(|_| b * (rng.uniform() - 0.5)));
        v
    }

    fn sample_ood(&self, rng: &mut SeededRng) -> Vec<f64> {
        (0..self.dim)
            .map(|k| self.ood_center.get(k).copied().unwrap_or(0.0) + self.ood_spread * rng.normal())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<FeatureRecord>,
    pub val: Vec<FeatureRecord>,
    pub ood: Vec<FeatureRecord>,
}

/// Generates train / validation / OOD sets. Each inlier class and the
/// background are split separately by a seeded shuffle, so split sizes are
/// exact per group.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut split = |mut group: Vec<FeatureRecord>, rng: &mut SeededRng| {
        rng.shuffle(&mut group);
        let n_train = (spec.train_fraction * group.len() as f64).round() as usize;
        let rest = group.split_off(n_train);
        train.extend(group);
        val.extend(rest);
    };
    for c in 0..spec.classes {
        let group = (0..spec.n_per_class).map(|_| FeatureRecord::new(c as i32, spec.sample_inlier(c, &mut rng))).collect();
        split(group, &mut rng);
    }
    let background = (0..spec.n_background)
        .map(|_| FeatureRecord::new(spec.classes as i32, spec.sample_background(&mut rng)))
        .collect();
    split(background, &mut rng);
    let ood = (0..spec.n_ood).map(|_| FeatureRecord::new(OOD_LABEL, spec.sample_ood(&mut rng))).collect();
    rng.shuffle(&mut train);
    Ok(Dataset { train, val, ood })
}

fn check_uniform_dim(records: &[FeatureRecord]) -> Result<usize> {
    let d = records.first().map_or(0, |r| r.feature.len());
    if let Some(i) = records.iter().position(|r| r.feature.len() != d) {
        return invalid(format!("record {i} has dimension {}, expected {d}", records[i].feature.len()));
    }
    Ok(d)
}

pub fn to_csv_string(records: &[FeatureRecord]) -> Result<String> {
    let d = check_uniform_dim(records)?;
    let mut out = String::from("label");
    for k in 0..d {
        write!(out, ",f{k}").expect("string write");
    }
    out.push('\n');
    for r in records {
        write!(out, "{}", r.label).expect("string write");
        for v in &r.feature {
            write!(out, ",{v:?}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> Result<Vec<FeatureRecord>> {
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        if idx == 0 && first == "label" {
            dim = Some(line.split(',').count() - 1);
            continue;
        }
        let label: i32 = first
            .parse()
            .map_err(|_| FfsError::Parse { line: line_no, msg: format!("label '{first}' is not an integer") })?;
        let feature = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| FfsError::Parse { line: line_no, msg: format!("'{f}' is not a finite number") })
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(feature.len()),
            Some(d) if d != feature.len() => {
                return Err(FfsError::Parse {
                    line: line_no,
                    msg: format!("expected {d} features, found {}", feature.len()),
                })
            }
            _ => {}
        }
        if feature.is_empty() {
            return Err(FfsError::Parse { line: line_no, msg: "record has no features".into() });
        }
        records.push(FeatureRecord { label, feature });
    }
    Ok(records)
}

pub fn write_csv(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv_string(records)?)?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

pub fn to_bin_bytes(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let d = check_uniform_dim(records)?;
    let mut out = Vec::with_capacity(16 + records.len() * (4 + 4 * d));
    out.extend_from_slice(BIN_MAGIC);
    put_u32(&mut out, BIN_VERSION);
    put_u32(&mut out, records.len() as u32);
    put_u32(&mut out, d as u32);
    for r in records {
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in &r.feature {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_bin(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut r = ByteReader::new(bytes);
    r.magic(BIN_MAGIC)?;
    let version = r.u32()?;
    if version != BIN_VERSION {
        return r.error(format!("unsupported dataset version {version}"));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let label = r.i32()?;
        let feature = (0..d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<f64>>>()?;
        records.push(FeatureRecord { label, feature });
    }
    r.finish()?;
    Ok(records)
}

pub fn write_bin(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bin_bytes(records)?)?;
    Ok(())
}

pub fn read_bin(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    parse_bin(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = DatasetSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn crescent_split_sizes() {
        let spec = DatasetSpec { n_per_class: 500, n_background: 0, ..DatasetSpec::default() };
        let data = generate(&spec).unwrap();
        assert_eq!(data.train.len(), 1200);
        assert_eq!(data.val.len(), 300);
        assert!(data.ood.iter().all(|r| r.label == OOD_LABEL));
        assert!(data.train.iter().chain(&data.val).all(|r| r.label != OOD_LABEL));

        let default = generate(&DatasetSpec::default()).unwrap();
        assert_eq!(default.train.len(), 2000);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let spec = DatasetSpec { radius: -1.0, ..DatasetSpec::default() };
        assert!(matches!(generate(&spec), Err(FfsError::InvalidArgument(_))));
        let spec = DatasetSpec { classes: 0, ..DatasetSpec::default() };
        assert!(generate(&spec).is_err());
        let spec = DatasetSpec { dim: 1, ..DatasetSpec::default() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn mixture_means_match_centers() {
        let centers = vec![vec![1.0, -2.0, 0.5], vec![-3.0, 0.0, 2.0]];
        let spec = DatasetSpec {
            generator: Generator::GaussianMixture,
            classes: 2,
            dim: 3,
            n_per_class: 10_000,
            n_background: 0,
            n_ood: 0,
            width: 1.0,
            centers: Some(centers.clone()),
            ..DatasetSpec::default()
        };
        let data = generate(&spec).unwrap();
        for (c, center) in centers.iter().enumerate() {
            let pts: Vec<&FeatureRecord> = data.train.iter().chain(&data.val).filter(|r| r.label == c as i32).collect();
            for k in 0..3 {
                let m = pts.iter().map(|r| r.feature[k]).sum::<f64>() / pts.len() as f64;
                assert!((m - center[k]).abs() <= 0.05, "class {c} coord {k}: {m}");
            }
        }
    }

    #[test]
    fn default_ood_cluster_is_separated() {
        let spec = DatasetSpec::default();
        let data = generate(&spec).unwrap();
        let k = spec.classes as i32;
        let min_dist = data
            .train
            .iter()
            .chain(&data.val)
            .filter(|r| r.label < k)
            .map(|r| r.feature.iter().zip(&spec.ood_center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(min_dist >= 3.0 * spec.noise_scale(), "{min_dist}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let records = vec![FeatureRecord::new(0, vec![0.1, -2.5e-300]), FeatureRecord::new(-1, vec![1.0 / 3.0, 7.0])];
        let text = to_csv_string(&records).unwrap();
        assert!(text.starts_with("label,f0,f1\n"));
        assert_eq!(parse_csv(&text).unwrap(), records);
        let headerless = "0,1.5,2\n1,3,4\n";
        assert_eq!(parse_csv(headerless).unwrap().len(), 2);

        let ragged = "label,f0,f1\n0,1,2\n1,3\n";
        assert!(matches!(parse_csv(ragged), Err(FfsError::Parse { line: 3, .. })));
        let garbage = "0,1,x\n";
        assert!(matches!(parse_csv(garbage), Err(FfsError::Parse { line: 1, .. })));
        let bad_label = "label,f0\n0.5,1\n";
        assert!(matches!(parse_csv(bad_label), Err(FfsError::Parse { line: 2, .. })));
    }

    #[test]
    fn bin_sizes_and_errors() {
        assert_eq!(to_bin_bytes(&[]).unwrap().len(), 16);
        let records = vec![FeatureRecord::new(0, vec![1.0, 2.0, 3.0]), FeatureRecord::new(2, vec![0.5, -0.25, 8.0])];
        let bytes = to_bin_bytes(&records).unwrap();
        assert_eq!(bytes.len(), 48);
        assert_eq!(parse_bin(&bytes).unwrap(), records);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(parse_bin(&bad), Err(FfsError::Format { offset: 0, .. })));
        assert!(matches!(parse_bin(&bytes[..40]), Err(FfsError::Format { offset: 40, .. })));
    }
}
