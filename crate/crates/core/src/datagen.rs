//! Synthetic deformable shape pairs with known dense ground truth.
//!
//! A pair shares one set of surface samples: the target applies a smooth
//! sinusoidal displacement field (optionally composed with a random rigid
//! motion and Gaussian noise) to the source samples and then permutes the
//! point order, so index-identity matching scores at chance while the true
//! correspondence stays exact.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::geometry::{write_xyz, GeometryError, PointCloud};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseShape {
    Sphere,
    Cylinder,
    TwoLobeBlob,
}

impl BaseShape {
    pub fn name(&self) -> &'static str {
        match self {
            BaseShape::Sphere => "sphere",
            BaseShape::Cylinder => "cylinder",
            BaseShape::TwoLobeBlob => "two-lobe",
        }
    }

    pub fn parse(s: &str) -> Option<BaseShape> {
        match s {
            "sphere" => Some(BaseShape::Sphere),
            "cylinder" => Some(BaseShape::Cylinder),
            "two-lobe" | "blob" | "two_lobe" => Some(BaseShape::TwoLobeBlob),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub base_shape: BaseShape,
    pub n: usize,
    pub deform_amplitude: f64,
    pub deform_frequency: f64,
    pub rigid: bool,
    pub noise_sigma: f64,
    pub seed: u64,
    pub num_pairs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_shape: BaseShape::Sphere,
            n: 256,
            deform_amplitude: 0.15,
            deform_frequency: 2.0,
            rigid: false,
            noise_sigma: 0.0,
            seed: 0,
            num_pairs: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.deform_amplitude < 0.0 {
            return Err(DatagenError::InvalidConfig("negative amplitude".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DatagenError::InvalidConfig("negative noise sigma".into()));
        }
        if self.n < 64 {
            return Err(DatagenError::InvalidConfig(format!(
                "n = {} is below the 64-point minimum",
                self.n
            )));
        }
        if self.num_pairs == 0 {
            return Err(DatagenError::InvalidConfig("num_pairs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        format!(
            "base_shape={}\nn={}\ndeform_amplitude={}\ndeform_frequency={}\nrigid={}\nnoise_sigma={}\nseed={}\nnum_pairs={}\n",
            self.base_shape.name(),
            self.n,
            self.deform_amplitude,
            self.deform_frequency,
            self.rigid,
            self.noise_sigma,
            self.seed,
            self.num_pairs
        )
    }

    pub fn valid_keys() -> &'static [&'static str] {
        &[
            "base_shape",
            "n",
            "deform_amplitude",
            "deform_frequency",
            "rigid",
            "noise_sigma",
            "seed",
            "num_pairs",
        ]
    }

    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<(), DatagenError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, DatagenError> {
            value.parse().map_err(|_| {
                DatagenError::InvalidConfig(format!("cannot parse '{value}' for key '{key}'"))
            })
        }
        match key {
            "base_shape" => {
                self.base_shape = BaseShape::parse(value).ok_or_else(|| {
                    DatagenError::InvalidConfig(format!(
                        "base_shape must be sphere, cylinder, or two-lobe, got '{value}'"
                    ))
                })?
            }
            "n" => self.n = num(key, value)?,
            "deform_amplitude" => self.deform_amplitude = num(key, value)?,
            "deform_frequency" => self.deform_frequency = num(key, value)?,
            "rigid" => self.rigid = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "num_pairs" => self.num_pairs = num(key, value)?,
            other => {
                return Err(DatagenError::InvalidConfig(format!(
                    "unknown key '{other}'; valid keys: {}",
                    SynthConfig::valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses "key=value" lines ('#' comments ignored) over the defaults.
    pub fn from_key_values(text: &str) -> Result<SynthConfig, DatagenError> {
        let mut cfg = SynthConfig::default();
        for raw in text.lines() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DatagenError::InvalidConfig(format!("expected key=value, got '{line}'"))
            })?;
            cfg.apply_key_value(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug)]
pub enum DatagenError {
    InvalidConfig(String),
    Io(String, std::io::Error),
    Geometry(GeometryError),
    Manifest { line: usize, message: String },
}

impl fmt::Display for DatagenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatagenError::InvalidConfig(m) => write!(f, "invalid generator config: {m}"),
            DatagenError::Io(path, e) => write!(f, "{path}: {e}"),
            DatagenError::Geometry(e) => write!(f, "{e}"),
            DatagenError::Manifest { line, message } => {
                write!(f, "manifest line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for DatagenError {}

impl From<GeometryError> for DatagenError {
    fn from(e: GeometryError) -> Self {
        DatagenError::Geometry(e)
    }
}

/// One generated pair. `gt[i]` is the target index of source point i;
/// `rotation`/`translation` record the rigid part (identity when off).
pub struct SynthPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: Vec<u32>,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn sample_shape(shape: BaseShape, n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| match shape {
            BaseShape::Sphere => rng.unit_vector(),
            BaseShape::Cylinder => {
                let theta = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                let z = rng.uniform(-1.0, 1.0);
                [0.5 * theta.cos(), 0.5 * theta.sin(), z]
            }
            BaseShape::TwoLobeBlob => {
                let u = rng.unit_vector();
                let r = 0.55 + 0.45 * u[2] * u[2];
                [r * u[0], r * u[1], r * u[2]]
            }
        })
        .collect()
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply_rotation(r: &[[f64; 3]; 3], p: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Two sinusoidal bending waves, each at amplitude 0.45 A, so the field's
/// Lipschitz constant stays strictly below A * omega.
struct WarpField {
    amplitude: f64,
    frequency: f64,
    wave_dirs: [[f64; 3]; 2],
    out_dirs: [[f64; 3]; 2],
    phases: [f64; 2],
}

impl WarpField {
    fn random(amplitude: f64, frequency: f64, rng: &mut Rng) -> Self {
        WarpField {
            amplitude,
            frequency,
            wave_dirs: [rng.unit_vector(), rng.unit_vector()],
            out_dirs: [rng.unit_vector(), rng.unit_vector()],
            phases: [
                rng.uniform(0.0, 2.0 * std::f64::consts::PI),
                rng.uniform(0.0, 2.0 * std::f64::consts::PI),
            ],
        }
    }

    fn displacement(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for w in 0..2 {
            let a = &self.wave_dirs[w];
            let phase = self.frequency * (a[0] * p[0] + a[1] * p[1] + a[2] * p[2]) + self.phases[w];
            let mag = 0.45 * self.amplitude * phase.sin();
            for c in 0..3 {
                d[c] += mag * self.out_dirs[w][c];
            }
        }
        d
    }
}

/// Generates one (source, target, ground truth) triple deterministically
/// from (config seed, pair seed).
pub fn gen_pair(cfg: &SynthConfig, pair_seed: u64) -> Result<SynthPair, DatagenError> {
    cfg.validate()?;
    let mut rng = Rng::from_seed(cfg.seed).derive(pair_seed);
    let points = sample_shape(cfg.base_shape, cfg.n, &mut rng);

    let warp = WarpField::random(cfg.deform_amplitude, cfg.deform_frequency, &mut rng);
    let (rotation, translation) = if cfg.rigid {
        let axis = rng.unit_vector();
        let angle = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let t = [
            rng.uniform(-0.5, 0.5),
            rng.uniform(-0.5, 0.5),
            rng.uniform(-0.5, 0.5),
        ];
        (rotation_matrix(axis, angle), t)
    } else {
        (
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        )
    };

    let warped: Vec<[f64; 3]> = points
        .iter()
        .map(|p| {
            let d = warp.displacement(p);
            let moved = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
            let mut out = apply_rotation(&rotation, &moved);
            for c in 0..3 {
                out[c] += translation[c];
                if cfg.noise_sigma > 0.0 {
                    out[c] += cfg.noise_sigma * rng.normal();
                }
            }
            out
        })
        .collect();

    let perm = rng.permutation(cfg.n);
    let mut target_points = vec![[0.0; 3]; cfg.n];
    let mut gt = vec![0u32; cfg.n];
    for (i, &dest) in perm.iter().enumerate() {
        target_points[dest] = warped[i];
        gt[i] = dest as u32;
    }

    Ok(SynthPair {
        source: PointCloud::new(points, format!("pair{pair_seed:03}_src")),
        target: PointCloud::new(target_points, format!("pair{pair_seed:03}_tgt")),
        gt,
        rotation,
        translation,
    })
}

/// A manifest row: file names of one generated triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gt: PathBuf,
}

/// Writes num_pairs triples as XYZ + index files plus a manifest that
/// echoes the configuration. Returns the manifest path.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf, DatagenError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DatagenError::Io(out_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for line in cfg.echo().lines() {
        manifest.push_str(&format!("# {line}\n"));
    }
    for p in 0..cfg.num_pairs {
        let pair = gen_pair(cfg, p as u64)?;
        let src_name = format!("pair{p:03}_src.xyz");
        let tgt_name = format!("pair{p:03}_tgt.xyz");
        let gt_name = format!("pair{p:03}_gt.txt");
        write_xyz(&out_dir.join(&src_name), &pair.source)?;
        write_xyz(&out_dir.join(&tgt_name), &pair.target)?;
        let mut gt_text = String::new();
        for &j in &pair.gt {
            gt_text.push_str(&format!("{j}\n"));
        }
        fs::write(out_dir.join(&gt_name), gt_text)
            .map_err(|e| DatagenError::Io(gt_name.clone(), e))?;
        manifest.push_str(&format!("{src_name} {tgt_name} {gt_name}\n"));
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)
        .map_err(|e| DatagenError::Io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

/// Parses a manifest back into absolute entry paths and validates that
/// every listed file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatagenError> {
    let text =
        fs::read_to_string(path).map_err(|e| DatagenError::Io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(DatagenError::Manifest {
                line: idx + 1,
                message: format!("expected 3 paths, found {}", toks.len()),
            });
        }
        let entry = ManifestEntry {
            source: base.join(toks[0]),
            target: base.join(toks[1]),
            gt: base.join(toks[2]),
        };
        for p in [&entry.source, &entry.target, &entry.gt] {
            if !p.exists() {
                return Err(DatagenError::Manifest {
                    line: idx + 1,
                    message: format!("listed file {} does not exist", p.display()),
                });
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn_euclidean, load_auto};

    #[test]
    fn identity_warp_is_permutation_and_gt_inverts_it() {
        let cfg = SynthConfig {
            deform_amplitude: 0.0,
            ..SynthConfig::default()
        };
        let pair = gen_pair(&cfg, 3).unwrap();
        for i in 0..cfg.n {
            assert_eq!(
                pair.target.points[pair.gt[i] as usize], pair.source.points[i],
                "point {i}"
            );
        }
        // actually permuted (astronomically unlikely to be identity)
        assert_ne!(pair.target.points, pair.source.points);
    }

    #[test]
    fn gt_is_a_bijection() {
        let cfg = SynthConfig::default();
        for seed in 0..5 {
            let pair = gen_pair(&cfg, seed).unwrap();
            let mut seen = pair.gt.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..cfg.n as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rigid_transform_recovers_gt_by_nearest_neighbor() {
        let cfg = SynthConfig {
            deform_amplitude: 0.0,
            rigid: true,
            ..SynthConfig::default()
        };
        let pair = gen_pair(&cfg, 7).unwrap();
        for i in 0..cfg.n {
            let p = apply_rotation(&pair.rotation, &pair.source.points[i]);
            let moved = [
                p[0] + pair.translation[0],
                p[1] + pair.translation[1],
                p[2] + pair.translation[2],
            ];
            // nearest target point under the known transform
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, q) in pair.target.points.iter().enumerate() {
                let d = crate::geometry::squared_distance(&moved, q);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            assert_eq!(best_j as u32, pair.gt[i]);
            assert!(best < 1e-18);
        }
    }

    #[test]
    fn noise_displacement_matches_gaussian_radial_mean() {
        let sigma = 0.05;
        let cfg = SynthConfig {
            n: 1000,
            deform_amplitude: 0.0,
            noise_sigma: sigma,
            ..SynthConfig::default()
        };
        let pair = gen_pair(&cfg, 11).unwrap();
        let mean: f64 = (0..cfg.n)
            .map(|i| {
                crate::geometry::squared_distance(
                    &pair.source.points[i],
                    &pair.target.points[pair.gt[i] as usize],
                )
                .sqrt()
            })
            .sum::<f64>()
            / cfg.n as f64;
        // E||N(0, sigma^2 I_3)|| = sigma * sqrt(8 / pi)
        let expect = sigma * (8.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean - expect).abs() / expect < 0.10,
            "mean {mean}, expected {expect}"
        );
    }

    #[test]
    fn warp_is_lipschitz_bounded() {
        let cfg = SynthConfig::default(); // amplitude 0.15, frequency 2.0
        let pair = gen_pair(&cfg, 13).unwrap();
        let graph = knn_euclidean(&pair.source, 1, true).unwrap();
        let bound = cfg.deform_amplitude * cfg.deform_frequency;
        for i in 0..cfg.n {
            let j = graph.row(i)[0] as usize;
            let spacing =
                crate::geometry::squared_distance(&pair.source.points[i], &pair.source.points[j])
                    .sqrt();
            let di = displacement_of(&pair, i);
            let dj = displacement_of(&pair, j);
            let diff =
                ((di[0] - dj[0]).powi(2) + (di[1] - dj[1]).powi(2) + (di[2] - dj[2]).powi(2))
                    .sqrt();
            assert!(
                diff < bound * spacing,
                "point {i}: |du| = {diff}, bound = {}",
                bound * spacing
            );
        }
    }

    fn displacement_of(pair: &SynthPair, i: usize) -> [f64; 3] {
        let t = pair.target.points[pair.gt[i] as usize];
        let s = pair.source.points[i];
        [t[0] - s[0], t[1] - s[1], t[2] - s[2]]
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.n = 10;
        assert!(matches!(
            gen_pair(&cfg, 0),
            Err(DatagenError::InvalidConfig(_))
        ));
        let mut cfg = SynthConfig::default();
        cfg.deform_amplitude = -1.0;
        assert!(gen_pair(&cfg, 0).is_err());
    }

    #[test]
    fn dataset_writes_expected_files_and_round_trips() {
        let dir = std::env::temp_dir().join("pointcorr_datagen_test");
        fs::remove_dir_all(&dir).ok();
        let cfg = SynthConfig {
            n: 64,
            num_pairs: 4,
            ..SynthConfig::default()
        };
        let manifest = gen_dataset(&cfg, &dir).unwrap();
        let xyz_count = fs::read_dir(&dir)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "xyz")
            })
            .count();
        assert_eq!(xyz_count, 8);
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 4);
        for e in &entries {
            let src = load_auto(&e.source).unwrap();
            let tgt = load_auto(&e.target).unwrap();
            assert_eq!(src.len(), 64);
            assert_eq!(tgt.len(), 64);
            let gt = crate::matcher::read_index_file(&e.gt).unwrap();
            assert_eq!(gt.len(), 64);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_deterministic_bytes() {
        let a = std::env::temp_dir().join("pointcorr_datagen_a");
        let b = std::env::temp_dir().join("pointcorr_datagen_b");
        fs::remove_dir_all(&a).ok();
        fs::remove_dir_all(&b).ok();
        let cfg = SynthConfig {
            n: 64,
            num_pairs: 2,
            noise_sigma: 0.02,
            rigid: true,
            ..SynthConfig::default()
        };
        gen_dataset(&cfg, &a).unwrap();
        gen_dataset(&cfg, &b).unwrap();
        for name in [
            "pair000_src.xyz",
            "pair001_tgt.xyz",
            "pair000_gt.txt",
            "manifest.txt",
        ] {
            let fa = fs::read(a.join(name)).unwrap();
            let fb = fs::read(b.join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs between runs");
        }
        fs::remove_dir_all(&a).ok();
        fs::remove_dir_all(&b).ok();
    }
}
