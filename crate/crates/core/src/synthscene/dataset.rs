//! Dataset generation, on-disk layout and view-pair sampling.
//!
//! ```text
//! <root>/manifest.json
//! <root>/latents.bin            17 × f64 LE per view, manifest order
//! <root>/<class>/<instance>/<view>.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::latents::SceneLatents;
use super::objects::{ObjectSpec, CLASS_NAMES, MAX_CLASSES};
use super::render::{render, Image};
use crate::error::{Error, Result};
use crate::geometry::{relative_transform, tait_bryan_to_rotation, RigidTransform, TaitBryanAngles, Vec3};
use crate::tensor::checkpoint::write_atomic;

pub const MANIFEST_VERSION: u32 = 1;
pub const LATENTS_FILE: &str = "latents.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Reals per view in the binary latents sidecar.
pub const LATENT_RECORD_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub instances_per_class: usize,
    pub views: usize,
    pub resolution: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 8,
            instances_per_class: 50,
            views: 25,
            resolution: 64,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::Config(format!("classes must be in 1..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.instances_per_class == 0 {
            return Err(Error::Config("instances_per_class must be positive".into()));
        }
        if self.views < 2 {
            return Err(Error::Config("at least two views per instance are required".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config("resolution must be at least 8".into()));
        }
        Ok(())
    }

    pub fn num_instances(&self) -> usize {
        self.classes * self.instances_per_class
    }

    pub fn num_images(&self) -> usize {
        self.num_instances() * self.views
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class: usize,
    pub instance: usize,
    pub split: Split,
}

/// Stored latents of one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    /// Canonical (w, x, y, z), w ≥ 0.
    pub quaternion: [f64; 4],
    pub angles: TaitBryanAngles,
    /// Object-frame translation t.
    pub translation: Vec3,
    /// Base-frame translation R·t.
    pub base_translation: Vec3,
    pub floor_hue: f64,
    pub light_hue: f64,
    pub light_theta: f64,
    pub light_phi: f64,
}

impl ViewRecord {
    pub fn from_latents(l: &SceneLatents) -> Result<Self> {
        let g = crate::geometry::scene_transform(l)?;
        Ok(Self {
            quaternion: g.rotation.quaternion(),
            angles: l.rotation,
            translation: l.translation,
            base_translation: g.translation,
            floor_hue: l.floor_hue,
            light_hue: l.light_hue,
            light_theta: l.light_theta,
            light_phi: l.light_phi,
        })
    }

    pub fn latents(&self) -> SceneLatents {
        SceneLatents {
            rotation: self.angles,
            translation: self.translation,
            floor_hue: self.floor_hue,
            light_hue: self.light_hue,
            light_theta: self.light_theta,
            light_phi: self.light_phi,
        }
    }

    /// World transform rebuilt from the stored angles and translation.
    pub fn transform(&self) -> RigidTransform {
        let r = tait_bryan_to_rotation(self.angles).expect("stored angles are finite");
        RigidTransform::new(r, self.base_translation)
    }

    pub fn to_reals(&self) -> [f64; LATENT_RECORD_LEN] {
        let q = self.quaternion;
        let a = self.angles;
        let t = self.translation;
        let b = self.base_translation;
        [
            q[0], q[1], q[2], q[3], a.rx, a.ry, a.rz, t[0], t[1], t[2], b[0], b[1], b[2], self.floor_hue,
            self.light_hue, self.light_theta, self.light_phi,
        ]
    }

    pub fn from_reals(r: &[f64]) -> Self {
        Self {
            quaternion: [r[0], r[1], r[2], r[3]],
            angles: TaitBryanAngles::new(r[4], r[5], r[6]),
            translation: [r[7], r[8], r[9]],
            base_translation: [r[10], r[11], r[12]],
            floor_hue: r[13],
            light_hue: r[14],
            light_theta: r[15],
            light_phi: r[16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub instances_per_class: usize,
    pub views: usize,
    pub resolution: usize,
    /// One entry per instance, class-major.
    pub splits: Vec<InstanceRecord>,
    /// One entry per view, instance-major.
    pub latents: Vec<ViewRecord>,
    pub latents_file: String,
    /// SHA-256 over all RGB bytes in manifest order.
    pub images_sha256: String,
    #[serde(skip)]
    pub root: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            classes: self.classes,
            instances_per_class: self.instances_per_class,
            views: self.views,
            resolution: self.resolution,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.splits.len()
    }

    pub fn view_index(&self, instance: usize, view: usize) -> usize {
        instance * self.views + view
    }

    pub fn view(&self, instance: usize, view: usize) -> &ViewRecord {
        &self.latents[self.view_index(instance, view)]
    }

    pub fn instances(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i].split == split).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Content hash of the serialized manifest (hex SHA-256).
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn image_path(&self, root: &Path, instance: usize, view: usize) -> PathBuf {
        let rec = &self.splits[instance];
        root.join(&self.class_names[rec.class])
            .join(format!("{:04}", rec.instance))
            .join(format!("{view:03}.png"))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 finalizer used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHAPE: u64 = 1;
const STREAM_VIEW: u64 = 2;
const STREAM_SPLIT: u64 = 3;

pub fn object_for(cfg: &DatasetConfig, instance: usize) -> Result<ObjectSpec> {
    let class = instance / cfg.instances_per_class;
    let local = instance % cfg.instances_per_class;
    ObjectSpec::generate(class, local, derive_seed(cfg.seed, STREAM_SHAPE, instance as u64))
}

pub fn view_latents(cfg: &DatasetConfig, instance: usize, view: usize) -> SceneLatents {
    let idx = (instance * cfg.views + view) as u64;
    SceneLatents::sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_VIEW, idx)))
}

fn assign_splits(cfg: &DatasetConfig) -> Vec<InstanceRecord> {
    let mut out = Vec::with_capacity(cfg.num_instances());
    for class in 0..cfg.classes {
        let mut order: Vec<usize> = (0..cfg.instances_per_class).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SPLIT, class as u64)));
        let n_train = (cfg.instances_per_class as f64 * 0.8).round() as usize;
        let mut split = vec![Split::Val; cfg.instances_per_class];
        for &i in &order[..n_train] {
            split[i] = Split::Train;
        }
        out.extend((0..cfg.instances_per_class).map(|i| InstanceRecord {
            class,
            instance: i,
            split: split[i],
        }));
    }
    out
}

/// An in-memory dataset: manifest plus every image as RGB bytes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<u8>,
}

impl Dataset {
    /// Renders everything without touching disk.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let px = cfg.resolution * cfg.resolution * 3;
        let per_instance: Vec<(Vec<ViewRecord>, Vec<u8>)> = (0..cfg.num_instances())
            .into_par_iter()
            .map(|inst| -> Result<_> {
                let obj = object_for(cfg, inst)?;
                let mut recs = Vec::with_capacity(cfg.views);
                let mut bytes = Vec::with_capacity(px * cfg.views);
                for v in 0..cfg.views {
                    let l = view_latents(cfg, inst, v);
                    recs.push(ViewRecord::from_latents(&l)?);
                    bytes.extend(render(&obj, &l, cfg.resolution)?.to_u8());
                }
                Ok((recs, bytes))
            })
            .collect::<Result<_>>()?;
        let mut latents = Vec::with_capacity(cfg.num_images());
        let mut images = Vec::with_capacity(cfg.num_images() * px);
        for (recs, bytes) in per_instance {
            latents.extend(recs);
            images.extend(bytes);
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            seed: cfg.seed,
            classes: cfg.classes,
            class_names: CLASS_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect(),
            instances_per_class: cfg.instances_per_class,
            views: cfg.views,
            resolution: cfg.resolution,
            splits: assign_splits(cfg),
            latents,
            latents_file: LATENTS_FILE.into(),
            images_sha256: hex(&Sha256::digest(&images)),
            root: None,
        };
        Ok(Self { manifest, images })
    }

    /// Writes images, the latents sidecar and the manifest under `root`.
    pub fn save(&mut self, root: &Path) -> Result<()> {
        let m = &self.manifest;
        let res = m.resolution as u32;
        let px = self.pixels_per_image();
        for inst in 0..m.num_instances() {
            for v in 0..m.views {
                let path = m.image_path(root, inst, v);
                let dir = path.parent().expect("image path has a parent");
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let start = m.view_index(inst, v) * px;
                write_png(&path, res, &self.images[start..start + px])?;
            }
        }
        let mut bin = Vec::with_capacity(m.latents.len() * LATENT_RECORD_LEN * 8);
        for rec in &m.latents {
            for r in rec.to_reals() {
                bin.extend_from_slice(&r.to_le_bytes());
            }
        }
        write_atomic(&root.join(LATENTS_FILE), &bin)?;
        write_atomic(&root.join(MANIFEST_FILE), m.to_json().as_bytes())?;
        self.manifest.root = Some(root.to_path_buf());
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        manifest.config().validate()?;
        if manifest.latents.len() != manifest.num_instances() * manifest.views {
            return Err(Error::Format("manifest latents count does not match instances × views".into()));
        }
        let bpath = root.join(&manifest.latents_file);
        let bin = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bin.len() != manifest.latents.len() * LATENT_RECORD_LEN * 8 {
            return Err(Error::Format(format!("{}: unexpected length {}", bpath.display(), bin.len())));
        }
        // the binary sidecar is authoritative for exact reals
        for (rec, chunk) in manifest.latents.iter_mut().zip(bin.chunks_exact(LATENT_RECORD_LEN * 8)) {
            let reals: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            *rec = ViewRecord::from_reals(&reals);
        }
        let px = manifest.resolution * manifest.resolution * 3;
        let mut images = Vec::with_capacity(manifest.latents.len() * px);
        for inst in 0..manifest.num_instances() {
            for v in 0..manifest.views {
                let path = manifest.image_path(root, inst, v);
                let bytes = read_png(&path, manifest.resolution)?;
                images.extend(bytes);
            }
        }
        if hex(&Sha256::digest(&images)) != manifest.images_sha256 {
            return Err(Error::Format(format!("{}: image content does not match manifest", root.display())));
        }
        manifest.root = Some(root.to_path_buf());
        Ok(Self { manifest, images })
    }

    pub fn pixels_per_image(&self) -> usize {
        self.manifest.resolution * self.manifest.resolution * 3
    }

    /// RGB bytes of one view.
    pub fn image_bytes(&self, instance: usize, view: usize) -> &[u8] {
        let px = self.pixels_per_image();
        let start = self.manifest.view_index(instance, view) * px;
        &self.images[start..start + px]
    }

    pub fn image(&self, instance: usize, view: usize) -> Image {
        let r = self.manifest.resolution;
        Image::from_u8(r, r, self.image_bytes(instance, view)).expect("stored image size")
    }

    pub fn class_of(&self, instance: usize) -> usize {
        self.manifest.splits[instance].class
    }

    /// Two distinct views of `instance` with their relative transform.
    pub fn sample_view_pair(&self, instance: usize, rng: &mut impl Rng) -> ViewPair {
        let (v1, v2) = sample_distinct_pair(self.manifest.views, rng);
        self.view_pair(instance, v1, v2)
    }

    pub fn view_pair(&self, instance: usize, v1: usize, v2: usize) -> ViewPair {
        let l1 = *self.manifest.view(instance, v1);
        let l2 = *self.manifest.view(instance, v2);
        ViewPair {
            instance,
            views: (v1, v2),
            image1: self.image(instance, v1),
            latents1: l1,
            image2: self.image(instance, v2),
            latents2: l2,
            g_rel: relative_transform(&l1.transform(), &l2.transform()),
        }
    }
}

pub fn sample_distinct_pair(views: usize, rng: &mut impl Rng) -> (usize, usize) {
    assert!(views >= 2, "need two views");
    let v1 = rng.gen_range(0..views);
    let mut v2 = rng.gen_range(0..views - 1);
    if v2 >= v1 {
        v2 += 1;
    }
    (v1, v2)
}

#[derive(Debug, Clone)]
pub struct ViewPair {
    pub instance: usize,
    pub views: (usize, usize),
    pub image1: Image,
    pub latents1: ViewRecord,
    pub image2: Image,
    pub latents2: ViewRecord,
    pub g_rel: RigidTransform,
}

/// Renders and writes a dataset; returns its manifest.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    let mut ds = Dataset::generate(cfg)?;
    ds.save(root)?;
    Ok(ds.manifest)
}

fn write_png(path: &Path, res: u32, rgb: &[u8]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, res, res);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_image_data(rgb)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_png(path: &Path, res: usize) -> Result<Vec<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.width as usize != res
        || info.height as usize != res
        || info.color_type != png::ColorType::Rgb
        || info.bit_depth != png::BitDepth::Eight
    {
        return Err(Error::Format(format!("{}: expected {res}x{res} 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}
