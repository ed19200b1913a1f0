//! Deterministic synthetic labeled image pairs with known ground-truth
//! deformations: smoothed random blob fields thresholded into labeled
//! regions, intensities from per-label bases plus smooth noise, and
//! moving images produced by warping with the inverse flow of a smooth
//! random velocity field.
//!
//! On-disk formats (all little-endian):
//! - HNRG labeled volume: magic "HNRG", version u16, dtype u8 (1 = f32,
//!   2 = f64), rank u8, extents u32 x rank, intensity floats, labels u16,
//!   then a length-prefixed UTF-8 metadata trailer.
//! - HNRV vector field: magic "HNRV", version u16, dtype u8, rank u8,
//!   components u8, extents u32 x rank, component-major floats, metadata
//!   trailer.
//! - manifest.json: pair paths, seeds, split tags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, BinError, BinResult, Reader, Writer};
use crate::ndtensor::{numel_of, Dtype, SampleMode, Scalar, Tape, Tensor};
use crate::regmath::{
    integrate_velocity, min_jacobian_det, warp, VelocityField, DEFAULT_INTEGRATION_STEPS,
};
use crate::rng::{substream_seed, RngStream};

pub const VOLUME_MAGIC: [u8; 4] = *b"HNRG";
pub const FIELD_MAGIC: [u8; 4] = *b"HNRV";
pub const FORMAT_VERSION: u16 = 1;
pub const GENERATOR_VERSION: u32 = 1;

/// Background/foreground split threshold for blob fields, in standard
/// deviations.
const BLOB_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub seed: u64,
    pub generator_version: u32,
}

/// A labeled volume: intensity in [0, 1] plus an integer label map over a
/// contiguous alphabet starting at 0 (background).
#[derive(Debug, Clone)]
pub struct LabeledVolume {
    pub extents: Vec<usize>,
    pub intensity: Vec<f64>,
    pub labels: Vec<u16>,
    pub meta: VolumeMeta,
}

impl LabeledVolume {
    pub fn voxels(&self) -> usize {
        numel_of(&self.extents)
    }

    /// Intensity as a [1, 1, spatial...] tensor in the requested dtype.
    pub fn intensity_tensor<F: Scalar>(&self) -> Tensor<F> {
        let mut shape = vec![1, 1];
        shape.extend_from_slice(&self.extents);
        Tensor::from_f64(&shape, &self.intensity).expect("volume buffers consistent")
    }

    /// Labels as a [1, 1, spatial...] f64 tensor (exact for u16 values).
    pub fn labels_tensor(&self) -> Tensor<f64> {
        let mut shape = vec![1, 1];
        shape.extend_from_slice(&self.extents);
        Tensor::new(shape, self.labels.iter().map(|&l| l as f64).collect())
            .expect("volume buffers consistent")
    }

    /// Sorted foreground labels present in the map.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut set: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// A ground-truth velocity field stored alongside a pair.
#[derive(Debug, Clone)]
pub struct StoredField {
    pub extents: Vec<usize>,
    pub components: usize,
    /// Component-major: all of component 0, then component 1, ...
    pub data: Vec<f64>,
    pub meta: VolumeMeta,
}

impl StoredField {
    pub fn tensor<F: Scalar>(&self) -> Tensor<F> {
        let mut shape = vec![1, self.components];
        shape.extend_from_slice(&self.extents);
        Tensor::from_f64(&shape, &self.data).expect("field buffers consistent")
    }

    pub fn from_tensor(t: &Tensor<f64>, meta: VolumeMeta) -> Self {
        Self {
            extents: t.spatial().to_vec(),
            components: t.channels(),
            data: t.values().to_vec(),
            meta,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// A registration task: register `moving` onto `fixed`.
#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub fixed: LabeledVolume,
    pub moving: LabeledVolume,
    pub gt_velocity: Option<StoredField>,
    pub split: Split,
    pub seed: u64,
}

/// Generation parameters for one volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub extents: Vec<usize>,
    /// Label alphabet size including background (>= 1).
    pub label_count: usize,
    /// Gaussian smoothing sigma (voxels) of the blob fields.
    pub smoothness: f64,
    /// Amplitude of the smooth intensity noise.
    pub noise: f64,
}

impl Default for VolumeSpec {
    fn default() -> Self {
        Self {
            extents: vec![64, 64],
            label_count: 6,
            smoothness: 6.0,
            noise: 0.05,
        }
    }
}

/// Separable Gaussian smoothing with edge renormalization (the truncated
/// kernel is divided by its in-bounds mass).
pub fn gaussian_smooth(values: &[f64], extents: &[usize], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let strides = crate::ndtensor::strides_of(extents);
    let mut cur = values.to_vec();
    let mut next = vec![0.0; values.len()];
    for (axis, &ext) in extents.iter().enumerate() {
        let stride = strides[axis];
        let outer = values.len() / ext;
        for o in 0..outer {
            // Decompose the flat outer index into the base offset of this
            // line along `axis`.
            let block = o / stride;
            let within = o % stride;
            let base = block * stride * ext + within;
            for i in 0..ext {
                let mut acc = 0.0;
                let mut mass = 0.0;
                for (j, &kw) in kernel.iter().enumerate() {
                    let p = i as isize + j as isize - radius;
                    if p < 0 || p >= ext as isize {
                        continue;
                    }
                    acc += kw * cur[base + p as usize * stride];
                    mass += kw;
                }
                next[base + i * stride] = acc / mass;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

fn normalized_noise_field(extents: &[usize], sigma: f64, rng: &mut RngStream) -> Vec<f64> {
    let n = numel_of(extents);
    let white: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let smooth = gaussian_smooth(&white, extents, sigma);
    let mean = smooth.iter().sum::<f64>() / n as f64;
    let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-12);
    smooth.iter().map(|v| (v - mean) / std).collect()
}

/// Deterministic synthetic labeled volume: per-foreground-label smoothed
/// blob fields are thresholded and argmaxed into regions; intensity is a
/// per-label base plus smooth noise, clamped to [0, 1].
pub fn generate_volume(spec: &VolumeSpec, seed: u64) -> LabeledVolume {
    let mut rng = RngStream::new(seed);
    let n = numel_of(&spec.extents);
    let foreground = spec.label_count.saturating_sub(1);

    let mut labels = vec![0u16; n];
    if foreground > 0 {
        let fields: Vec<Vec<f64>> = (0..foreground)
            .map(|_| normalized_noise_field(&spec.extents, spec.smoothness, &mut rng))
            .collect();
        for i in 0..n {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (l, field) in fields.iter().enumerate() {
                if field[i] > best_v {
                    best_v = field[i];
                    best = l;
                }
            }
            if best_v > BLOB_THRESHOLD {
                labels[i] = (best + 1) as u16;
            }
        }
    }

    let noise = normalized_noise_field(&spec.extents, (spec.smoothness * 0.5).max(1.0), &mut rng);
    let base = |label: u16| -> f64 {
        if label == 0 {
            0.08
        } else {
            0.25 + 0.7 * (label as f64 / foreground.max(1) as f64)
        }
    };
    let intensity: Vec<f64> = labels
        .iter()
        .zip(&noise)
        .map(|(&l, &nz)| (base(l) + spec.noise * nz).clamp(0.0, 1.0))
        .collect();

    LabeledVolume {
        extents: spec.extents.clone(),
        intensity,
        labels,
        meta: VolumeMeta {
            seed,
            generator_version: GENERATOR_VERSION,
        },
    }
}

/// A smooth random velocity field with the requested infinity-norm bound.
pub fn random_velocity(
    extents: &[usize],
    smoothness: f64,
    warp_scale: f64,
    rng: &mut RngStream,
) -> Tensor<f64> {
    let d = extents.len();
    let vol = numel_of(extents);
    let mut data = Vec::with_capacity(d * vol);
    for _ in 0..d {
        data.extend(normalized_noise_field(extents, smoothness, rng));
    }
    let max = data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if max > 0.0 { warp_scale / max } else { 0.0 };
    for v in &mut data {
        *v *= scale;
    }
    let mut shape = vec![1, d];
    shape.extend_from_slice(extents);
    Tensor::new(shape, data).expect("velocity buffers consistent")
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] BinError),
    #[error(transparent)]
    Tensor(#[from] crate::ndtensor::TensorError),
    #[error("generated deformation folds (min Jacobian determinant {0:.4}); lower warp_scale or raise smoothness")]
    Folding(f64),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type DataResult<T> = Result<T, DataError>;

/// Derive a moving image from a base volume: draw a smooth velocity v with
/// the given infinity-norm bound, set moving = warp(base, exp(-v)) (linear
/// intensities, nearest labels), and store v as the recovery ground truth.
pub fn generate_pair(
    base: &LabeledVolume,
    warp_scale: f64,
    smoothness: f64,
    seed: u64,
    split: Split,
) -> DataResult<RegistrationPair> {
    let mut rng = RngStream::new(seed);
    let v = random_velocity(&base.extents, smoothness, warp_scale, &mut rng);
    let vf = VelocityField::new(v.clone())?;

    let mut tape = Tape::<f64>::new();
    let phi_fwd = integrate_velocity(&mut tape, &vf, DEFAULT_INTEGRATION_STEPS)?;
    let det = min_jacobian_det(&phi_fwd);
    if det <= 0.0 {
        return Err(DataError::Folding(det));
    }
    let neg = VelocityField::new(tape.neg(&v)?)?;
    let phi_bwd = integrate_velocity(&mut tape, &neg, DEFAULT_INTEGRATION_STEPS)?;

    let moving_intensity = warp(
        &mut tape,
        &base.intensity_tensor::<f64>(),
        &phi_bwd,
        SampleMode::Linear,
    )?;
    let moving_labels = warp(&mut tape, &base.labels_tensor(), &phi_bwd, SampleMode::Nearest)?;

    let moving = LabeledVolume {
        extents: base.extents.clone(),
        intensity: moving_intensity.values().to_vec(),
        labels: moving_labels
            .values()
            .iter()
            .map(|&l| l as u16)
            .collect(),
        meta: VolumeMeta {
            seed,
            generator_version: GENERATOR_VERSION,
        },
    };
    Ok(RegistrationPair {
        fixed: base.clone(),
        moving,
        gt_velocity: Some(StoredField::from_tensor(
            &v,
            VolumeMeta {
                seed,
                generator_version: GENERATOR_VERSION,
            },
        )),
        split,
        seed,
    })
}

fn meta_json(meta: &VolumeMeta) -> String {
    serde_json::to_string(meta).expect("meta serializes")
}

fn parse_meta(text: &str) -> VolumeMeta {
    serde_json::from_str(text).unwrap_or(VolumeMeta {
        seed: 0,
        generator_version: 0,
    })
}

/// Serialize a labeled volume (see module docs for the byte layout).
pub fn volume_bytes(vol: &LabeledVolume, dtype: Dtype) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(&VOLUME_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(dtype.code());
    w.u8(vol.extents.len() as u8);
    for &e in &vol.extents {
        w.u32(e as u32);
    }
    match dtype {
        Dtype::F32 => {
            for &v in &vol.intensity {
                w.raw(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &vol.intensity {
                w.f64(v);
            }
        }
    }
    for &l in &vol.labels {
        w.u16(l);
    }
    w.text(&meta_json(&vol.meta));
    w.bytes()
}

pub fn write_volume(path: &Path, vol: &LabeledVolume, dtype: Dtype) -> DataResult<()> {
    write_atomic(path, &volume_bytes(vol, dtype))?;
    Ok(())
}

pub fn parse_volume(bytes: &[u8]) -> DataResult<LabeledVolume> {
    let mut r = Reader::new(bytes);
    r.magic(VOLUME_MAGIC)?;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(BinError::Unsupported {
            offset: 4,
            what: "version",
            value: version as u64,
        }
        .into());
    }
    let dtype_code = r.u8("dtype")?;
    let dtype = Dtype::from_code(dtype_code).ok_or(BinError::Unsupported {
        offset: 6,
        what: "dtype",
        value: dtype_code as u64,
    })?;
    let rank = r.u8("rank")? as usize;
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents.push(r.u32("extent")? as usize);
    }
    let n = numel_of(&extents);
    let mut intensity = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let raw = r.take(4 * n, "intensity")?;
            for c in raw.chunks_exact(4) {
                intensity.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            let raw = r.take(8 * n, "intensity")?;
            for c in raw.chunks_exact(8) {
                intensity.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
    }
    let raw = r.take(2 * n, "labels")?;
    let labels: Vec<u16> = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let meta = parse_meta(&r.text("metadata")?);
    Ok(LabeledVolume {
        extents,
        intensity,
        labels,
        meta,
    })
}

pub fn read_volume(path: &Path) -> DataResult<LabeledVolume> {
    parse_volume(&std::fs::read(path)?)
}

pub fn field_bytes(field: &StoredField, dtype: Dtype) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(&FIELD_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(dtype.code());
    w.u8(field.extents.len() as u8);
    w.u8(field.components as u8);
    for &e in &field.extents {
        w.u32(e as u32);
    }
    match dtype {
        Dtype::F32 => {
            for &v in &field.data {
                w.raw(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &field.data {
                w.f64(v);
            }
        }
    }
    w.text(&meta_json(&field.meta));
    w.bytes()
}

pub fn write_field(path: &Path, field: &StoredField, dtype: Dtype) -> DataResult<()> {
    write_atomic(path, &field_bytes(field, dtype))?;
    Ok(())
}

pub fn parse_field(bytes: &[u8]) -> DataResult<StoredField> {
    let mut r = Reader::new(bytes);
    r.magic(FIELD_MAGIC)?;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(BinError::Unsupported {
            offset: 4,
            what: "version",
            value: version as u64,
        }
        .into());
    }
    let dtype_code = r.u8("dtype")?;
    let dtype = Dtype::from_code(dtype_code).ok_or(BinError::Unsupported {
        offset: 6,
        what: "dtype",
        value: dtype_code as u64,
    })?;
    let rank = r.u8("rank")? as usize;
    let components = r.u8("components")? as usize;
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents.push(r.u32("extent")? as usize);
    }
    let n = numel_of(&extents) * components;
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let raw = r.take(4 * n, "field data")?;
            for c in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            let raw = r.take(8 * n, "field data")?;
            for c in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
    }
    let meta = parse_meta(&r.text("metadata")?);
    Ok(StoredField {
        extents,
        components,
        data,
        meta,
    })
}

pub fn read_field(path: &Path) -> DataResult<StoredField> {
    parse_field(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub fixed: String,
    pub moving: String,
    pub velocity: Option<String>,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub generator_version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> DataResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> DataResult<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))
    }
}

/// Dataset-level generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub volume: VolumeSpec,
    pub warp_scale: f64,
    /// Smoothing sigma of the random velocity fields.
    pub velocity_smoothness: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            volume: VolumeSpec::default(),
            warp_scale: 3.0,
            velocity_smoothness: 8.0,
            n_train: 40,
            n_val: 10,
            n_test: 10,
            seed: 0,
        }
    }
}

/// Generate one pair (a fresh base volume plus its warped copy).
pub fn generate_dataset_pair(
    cfg: &DatasetConfig,
    split: Split,
    index: usize,
) -> DataResult<RegistrationPair> {
    let tag = format!("{}/{}", split.name(), index);
    let vol_seed = substream_seed(cfg.seed, &format!("volume/{tag}"));
    let warp_seed = substream_seed(cfg.seed, &format!("warp/{tag}"));
    let base = generate_volume(&cfg.volume, vol_seed);
    generate_pair(
        &base,
        cfg.warp_scale,
        cfg.velocity_smoothness,
        warp_seed,
        split,
    )
}

/// Generate the full dataset onto disk and return its manifest.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path, dtype: Dtype) -> DataResult<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    let splits = [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ];
    for (split, count) in splits {
        for i in 0..count {
            let pair = generate_dataset_pair(cfg, split, i)?;
            let stem = format!("pair_{}_{:03}", split.name(), i);
            let fixed_name = format!("{stem}_fixed.hnrg");
            let moving_name = format!("{stem}_moving.hnrg");
            let vel_name = format!("{stem}_vel.hnrv");
            write_volume(&out_dir.join(&fixed_name), &pair.fixed, dtype)?;
            write_volume(&out_dir.join(&moving_name), &pair.moving, dtype)?;
            let velocity = match &pair.gt_velocity {
                Some(field) => {
                    write_field(&out_dir.join(&vel_name), field, dtype)?;
                    Some(vel_name)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                fixed: fixed_name,
                moving: moving_name,
                velocity,
                seed: pair.seed,
                split,
            });
        }
    }
    let manifest = Manifest {
        version: 1,
        generator_version: GENERATOR_VERSION,
        seed: cfg.seed,
        entries,
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load pairs for a split; paths resolve relative to the manifest file.
pub fn load_pairs(
    manifest_path: &Path,
    split: Option<Split>,
) -> DataResult<Vec<RegistrationPair>> {
    let manifest = Manifest::read(manifest_path)?;
    let root: PathBuf = manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let mut pairs = Vec::new();
    for entry in &manifest.entries {
        if let Some(want) = split {
            if entry.split != want {
                continue;
            }
        }
        let fixed = read_volume(&root.join(&entry.fixed))?;
        let moving = read_volume(&root.join(&entry.moving))?;
        let gt_velocity = match &entry.velocity {
            Some(rel) => Some(read_field(&root.join(rel))?),
            None => None,
        };
        pairs.push(RegistrationPair {
            fixed,
            moving,
            gt_velocity,
            split: entry.split,
            seed: entry.seed,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regmath::{dice, endpoint_error};

    fn small_spec() -> VolumeSpec {
        VolumeSpec {
            extents: vec![32, 32],
            label_count: 4,
            smoothness: 4.0,
            noise: 0.05,
        }
    }

    #[test]
    fn volume_generation_is_bit_deterministic() {
        let a = generate_volume(&small_spec(), 7);
        let b = generate_volume(&small_spec(), 7);
        assert_eq!(a.labels, b.labels);
        assert!(a
            .intensity
            .iter()
            .zip(&b.intensity)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_volume(&small_spec(), 8);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn label_count_one_is_all_background() {
        let spec = VolumeSpec {
            label_count: 1,
            ..small_spec()
        };
        let vol = generate_volume(&spec, 3);
        assert!(vol.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn default_spec_covers_full_alphabet() {
        // Seeded check: the default desk-scale spec reaches every label.
        let spec = VolumeSpec::default();
        for seed in [0u64, 1, 2] {
            let vol = generate_volume(&spec, seed);
            let mut seen = vec![false; spec.label_count];
            for &l in &vol.labels {
                seen[l as usize] = true;
            }
            assert!(
                seen.iter().all(|&s| s),
                "seed {seed} missing labels: {seen:?}"
            );
        }
    }

    #[test]
    fn intensities_stay_in_unit_interval() {
        let vol = generate_volume(&small_spec(), 11);
        assert!(vol.intensity.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_warp_scale_pair_is_identical() {
        let base = generate_volume(&small_spec(), 5);
        let pair = generate_pair(&base, 0.0, 6.0, 99, Split::Train).unwrap();
        assert_eq!(pair.moving.labels, pair.fixed.labels);
        let d = dice(
            &pair.moving.labels,
            &pair.fixed.labels,
            &pair.fixed.present_labels(),
        );
        assert_eq!(d.mean, 1.0);
        assert_eq!(pair.gt_velocity.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn velocity_respects_infinity_norm_bound() {
        let base = generate_volume(&small_spec(), 6);
        let pair = generate_pair(&base, 2.0, 6.0, 42, Split::Train).unwrap();
        let v = pair.gt_velocity.unwrap();
        assert!(v.max_abs() <= 2.0 + 1e-12);
        assert!((v.max_abs() - 2.0).abs() < 1e-9, "bound is attained");
    }

    #[test]
    fn stored_velocity_recovers_the_fixed_image() {
        // Warping the moving image with exp(+v) must align it back onto
        // the fixed image.
        let base = generate_volume(&small_spec(), 9);
        let pair = generate_pair(&base, 2.0, 6.0, 17, Split::Train).unwrap();
        let v = pair.gt_velocity.as_ref().unwrap().tensor::<f64>();
        let mut tape = Tape::new();
        let vf = VelocityField::new(v).unwrap();
        let phi = integrate_velocity(&mut tape, &vf, DEFAULT_INTEGRATION_STEPS).unwrap();
        let recovered = warp(
            &mut tape,
            &pair.moving.labels_tensor(),
            &phi,
            SampleMode::Nearest,
        )
        .unwrap();
        let labels: Vec<u16> = recovered.values().iter().map(|&l| l as u16).collect();
        let score = dice(&labels, &pair.fixed.labels, &pair.fixed.present_labels());
        assert!(score.mean >= 0.97, "recovery dice {}", score.mean);
    }

    #[test]
    fn generated_flows_do_not_fold() {
        let base = generate_volume(&small_spec(), 10);
        let pair = generate_pair(&base, 3.0, 8.0, 23, Split::Test).unwrap();
        let v = pair.gt_velocity.unwrap().tensor::<f64>();
        let mut tape = Tape::new();
        let phi = integrate_velocity(
            &mut tape,
            &VelocityField::new(v).unwrap(),
            DEFAULT_INTEGRATION_STEPS,
        )
        .unwrap();
        assert!(min_jacobian_det(&phi) > 0.0);
    }

    #[test]
    fn volume_round_trip_is_bit_identical() {
        let vol = generate_volume(&small_spec(), 12);
        for dtype in [Dtype::F64, Dtype::F32] {
            let bytes = volume_bytes(&vol, dtype);
            let parsed = parse_volume(&bytes).unwrap();
            assert_eq!(parsed.extents, vol.extents);
            assert_eq!(parsed.labels, vol.labels);
            assert_eq!(parsed.meta, vol.meta);
            if dtype == Dtype::F64 {
                assert!(parsed
                    .intensity
                    .iter()
                    .zip(&vol.intensity)
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
                // Re-serialization reproduces the same bytes.
                assert_eq!(volume_bytes(&parsed, dtype), bytes);
            }
        }
    }

    #[test]
    fn truncated_volume_reports_byte_offset() {
        let vol = generate_volume(&small_spec(), 13);
        let bytes = volume_bytes(&vol, Dtype::F64);
        match parse_volume(&bytes[..20]) {
            Err(DataError::Format(BinError::Truncated { offset, .. })) => {
                assert!(offset <= 20, "offset {offset}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        match parse_volume(b"NOPE") {
            Err(DataError::Format(BinError::BadMagic { offset: 0, .. })) => {}
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn field_round_trip() {
        let base = generate_volume(&small_spec(), 14);
        let pair = generate_pair(&base, 1.5, 5.0, 15, Split::Val).unwrap();
        let field = pair.gt_velocity.unwrap();
        let bytes = field_bytes(&field, Dtype::F64);
        let parsed = parse_field(&bytes).unwrap();
        assert_eq!(parsed.components, 2);
        assert_eq!(parsed.extents, field.extents);
        assert!(parsed
            .data
            .iter()
            .zip(&field.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dataset_generation_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            volume: small_spec(),
            warp_scale: 1.5,
            velocity_smoothness: 5.0,
            n_train: 2,
            n_val: 1,
            n_test: 1,
            seed: 3,
        };
        let manifest = generate_dataset(&cfg, dir.path(), Dtype::F64).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        let train = load_pairs(&dir.path().join("manifest.json"), Some(Split::Train)).unwrap();
        assert_eq!(train.len(), 2);
        let all = load_pairs(&dir.path().join("manifest.json"), None).unwrap();
        assert_eq!(all.len(), 4);

        // Regenerating into a second directory is bit-identical.
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir2.path(), Dtype::F64).unwrap();
        for entry in &manifest.entries {
            let a = std::fs::read(dir.path().join(&entry.fixed)).unwrap();
            let b = std::fs::read(dir2.path().join(&entry.fixed)).unwrap();
            assert_eq!(a, b, "{} differs between runs", entry.fixed);
        }

        // Ground truth is loadable and consistent with the stored pair.
        let pair = &train[0];
        let gt = pair.gt_velocity.as_ref().unwrap();
        let mut tape = Tape::new();
        let phi = integrate_velocity(
            &mut tape,
            &VelocityField::new(gt.tensor::<f64>()).unwrap(),
            DEFAULT_INTEGRATION_STEPS,
        )
        .unwrap();
        assert!(endpoint_error(&phi, &phi) == 0.0);
    }

    #[test]
    fn extents_satisfy_grid_divisibility() {
        let cfg = DatasetConfig::default();
        for &e in &cfg.volume.extents {
            assert_eq!(e % 8, 0);
        }
    }
}
