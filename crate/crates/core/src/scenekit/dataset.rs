//! Dataset directories: `manifest.json` plus one folder of view files per object.
//!
//! Views `0..cond_views` of an object are its conditioning views (fixed
//! rig), the remaining `views` are supervision views with random cameras.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, sha256_hex};

use super::camera::{conditioning_rig, sample_camera, CameraPose};
use super::io::{read_view, write_view};
use super::render::{render_ground_truth, ViewRecord};
use super::scene::{make_scene, SceneSpec};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "georefine-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub objects: usize,
    /// Supervision views per object.
    pub views: usize,
    pub cond_views: usize,
    pub res: usize,
    pub seed: u64,
    pub max_primitives: usize,
    pub radius_lo: f64,
    pub radius_hi: f64,
    pub fov_deg: f64,
    pub cond_radius: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            objects: 8,
            views: 8,
            cond_views: 4,
            res: 32,
            seed: 0,
            max_primitives: 4,
            radius_lo: super::camera::RADIUS_LO,
            radius_hi: super::camera::RADIUS_HI,
            fov_deg: super::camera::DEFAULT_FOV_DEG,
            cond_radius: 2.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one object".into()));
        }
        if self.cond_views == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one conditioning view".into()));
        }
        Ok(())
    }

    /// Scene seed of object `i`.
    pub fn object_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, &[0x0b1ec7, i as u64])
    }

    pub fn cameras(&self, i: usize) -> Result<Vec<CameraPose>> {
        let mut cams = conditioning_rig(self.cond_views, self.cond_radius, self.fov_deg)?;
        for k in 0..self.views {
            let s = derive_seed(self.seed, &[0xca3e7a, i as u64, k as u64]);
            cams.push(sample_camera(s, self.radius_lo, self.radius_hi, self.fov_deg)?);
        }
        Ok(cams)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub seed: u64,
    pub scene_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub config_hash: String,
    pub objects: Vec<ObjectEntry>,
    /// SHA-256 over every view file, in object then view order.
    pub content_hash: String,
}

impl Manifest {
    pub fn scene_hashes(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.scene_hash.clone()).collect()
    }
}

pub fn config_hash(cfg: &DatasetConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn object_id(i: usize) -> String {
    format!("obj_{i:04}")
}

pub fn object_scene(cfg: &DatasetConfig, i: usize) -> Result<SceneSpec> {
    make_scene(cfg.object_seed(i), cfg.max_primitives)
}

/// Renders every object and view, then writes the manifest last.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if out.join(MANIFEST).exists() {
        if !force {
            return Err(Error::Dataset(format!(
                "{} already holds a dataset (pass --force to overwrite)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut all_bytes = Vec::new();
    let mut objects = Vec::with_capacity(cfg.objects);
    for i in 0..cfg.objects {
        let scene = object_scene(cfg, i)?;
        let id = object_id(i);
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, cam) in cfg.cameras(i)?.iter().enumerate() {
            let view = render_ground_truth(&scene, cam, cfg.res)?;
            for b in write_view(&dir, k, &view)? {
                all_bytes.extend_from_slice(&b);
            }
        }
        let sp = dir.join("scene.json");
        fs::write(&sp, serde_json::to_string_pretty(&scene)?).map_err(|e| Error::io(&sp, e))?;
        objects.push(ObjectEntry { id, seed: scene.seed, scene_hash: scene.content_hash() });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        objects,
        content_hash: sha256_hex(&all_bytes),
    };
    let mp = out.join(MANIFEST);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::Dataset(format!("{}: unsupported format {} v{}", p.display(), m.format, m.version)));
    }
    if m.objects.len() != m.config.objects {
        return Err(Error::Dataset("manifest object count disagrees with its config".into()));
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct ObjectViews {
    pub id: String,
    pub scene: SceneSpec,
    pub cond: Vec<ViewRecord>,
    pub supervision: Vec<ViewRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub objects: Vec<ObjectViews>,
}

impl Dataset {
    /// Loads and validates every view listed in the manifest.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let cfg = &manifest.config;
        let mut objects = Vec::with_capacity(manifest.objects.len());
        for (i, entry) in manifest.objects.iter().enumerate() {
            let dir = root.join(&entry.id);
            let scene = object_scene(cfg, i)?;
            if scene.content_hash() != entry.scene_hash {
                return Err(Error::Dataset(format!("{}: scene hash mismatch", entry.id)));
            }
            let mut views = Vec::with_capacity(cfg.cond_views + cfg.views);
            for k in 0..cfg.cond_views + cfg.views {
                let v = read_view(&dir, k, cfg.res)?;
                v.validate().map_err(|e| Error::Dataset(format!("{} view {k}: {e}", entry.id)))?;
                views.push(v);
            }
            let supervision = views.split_off(cfg.cond_views);
            objects.push(ObjectViews { id: entry.id.clone(), scene, cond: views, supervision });
        }
        Ok(Self { root: root.to_path_buf(), manifest, objects })
    }
}
