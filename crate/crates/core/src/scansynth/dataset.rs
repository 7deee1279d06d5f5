//! Corpus generation: meshes → partial views → observation files + manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bvh::Bvh;
use super::format::{read_observation, write_observation, PartialObservation, GT_VIEW};
use super::mesh::{normalize_mesh, Transform, TriangleMesh};
use super::meshio::write_ply_mesh;
use super::primitives::{Family, Primitive};
use super::render::{render_partial, sample_cameras, sample_udf, SurfaceSampler};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::Point3;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub corpus: String,
    pub family: Family,
    pub instances: usize,
    pub views: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub n_surface: usize,
    pub n_near: usize,
    pub n_uniform: usize,
    pub sigmas: (f64, f64),
    pub camera_radius: f64,
    /// Points in each complete ground-truth cloud.
    pub n_gt: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            corpus: "primitives".into(),
            family: Family::Box,
            instances: 50,
            views: 30,
            train_views: 6,
            test_views: 2,
            n_surface: 2048,
            n_near: 4000,
            n_uniform: 1000,
            sigmas: (0.05, 0.005),
            camera_radius: 2.0,
            n_gt: 2048,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Small per-view sample counts for CPU training runs.
    pub fn desk() -> Self {
        Self {
            n_surface: 512,
            n_near: 768,
            n_uniform: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.instances == 0 {
            return bad("instances must be at least 1");
        }
        if self.train_views == 0 || self.train_views + self.test_views > self.views {
            return bad("need 1 <= train_views and train_views + test_views <= views");
        }
        if self.n_surface == 0 || self.n_gt == 0 {
            return bad("n_surface and n_gt must be positive");
        }
        if !(self.sigmas.0 > 0.0 && self.sigmas.1 > 0.0) {
            return bad("UDF noise sigmas must be positive");
        }
        if !(self.camera_radius > 1.0) {
            return bad("camera_radius must lie outside the unit sphere");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub view_id: u32,
    pub path: String,
    pub camera: Point3,
    /// Mesh triangles forming the seen surface the UDF is measured against.
    pub visible_triangles: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub instance_id: u32,
    pub source: String,
    pub primitive: Option<Primitive>,
    pub transform: Transform,
    pub views: Vec<ViewEntry>,
    pub skipped_views: Vec<u32>,
    pub train_views: Vec<u32>,
    pub test_views: Vec<u32>,
    pub gt_path: String,
    pub mesh_path: String,
}

impl InstanceEntry {
    pub fn view(&self, view_id: u32) -> Option<&ViewEntry> {
        self.views.iter().find(|v| v.view_id == view_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub corpus: String,
    pub seed: u64,
    pub generation: DatasetConfig,
    pub instances: Vec<InstanceEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks split disjointness and that every referenced file exists.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for inst in &self.instances {
            if let Some(v) = inst.train_views.iter().find(|v| inst.test_views.contains(v)) {
                return Err(Error::Validation(format!(
                    "instance {}: view {v} is in both train and test",
                    inst.instance_id
                )));
            }
            for v in inst.train_views.iter().chain(&inst.test_views) {
                if inst.view(*v).is_none() {
                    return Err(Error::Validation(format!(
                        "instance {}: split references missing view {v}",
                        inst.instance_id
                    )));
                }
            }
            let files = inst
                .views
                .iter()
                .map(|v| &v.path)
                .chain([&inst.gt_path, &inst.mesh_path]);
            for f in files {
                let p = root.join(f);
                if !p.is_file() {
                    return Err(Error::Validation(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn instance(&self, id: u32) -> Option<&InstanceEntry> {
        self.instances.iter().find(|i| i.instance_id == id)
    }
}

/// A source shape before normalization.
#[derive(Clone, Debug)]
pub struct ShapeSource {
    pub name: String,
    pub mesh: TriangleMesh,
    pub primitive: Option<Primitive>,
}

pub fn primitive_sources(cfg: &DatasetConfig) -> Vec<ShapeSource> {
    (0..cfg.instances)
        .map(|i| {
            let prim = Primitive::draw(cfg.family, &mut seeds::rng(cfg.seed, &[i as u64, 0]));
            ShapeSource {
                name: format!("{}-{i:04}", cfg.family),
                mesh: prim.mesh(),
                primitive: Some(prim),
            }
        })
        .collect()
}

fn obs_rel(inst: u32, view: u32) -> String {
    format!("obs/{inst:04}_{view:02}.pudf")
}

/// Uniform area-weighted samples on a closed mesh.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, rng: &mut impl rand::Rng) -> Vec<Point3> {
    let s = SurfaceSampler::new(mesh);
    (0..n).map(|_| s.sample(rng).0).collect()
}

/// Generates every view of every source, writes observation files, ground
/// truth clouds, normalized meshes and `manifest.json` under `out`.
pub fn build_dataset(
    sources: &[ShapeSource],
    cfg: &DatasetConfig,
    out: &Path,
    exec: Execution,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    for d in ["obs", "gt", "meshes"] {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let instances = exec.try_map_range(sources.len(), |i| build_instance(i as u32, &sources[i], cfg, out))?;
    let manifest = DatasetManifest {
        corpus: cfg.corpus.clone(),
        seed: cfg.seed,
        generation: cfg.clone(),
        instances,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn build_instance(id: u32, src: &ShapeSource, cfg: &DatasetConfig, out: &Path) -> Result<InstanceEntry> {
    let (mesh, transform) = normalize_mesh(&src.mesh)
        .map_err(|e| Error::Generation(format!("shape '{}': {e}", src.name)))?;
    let bvh = Bvh::from_mesh(&mesh);
    let i = id as u64;
    let cams = sample_cameras(cfg.views, cfg.camera_radius, &mut seeds::rng(cfg.seed, &[i, 1]));
    let mut views = Vec::new();
    let mut skipped = Vec::new();
    for (v, &cam) in cams.iter().enumerate() {
        let mut rng = seeds::rng(cfg.seed, &[i, 2, v as u64]);
        let rendered = match render_partial(&mesh, &bvh, cam, cfg.n_surface, &mut rng) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("instance {id} view {v} skipped: {e}");
                skipped.push(v as u32);
                continue;
            }
        };
        let partial = Bvh::from_subset(&mesh, &rendered.visible_triangles);
        let udf = sample_udf(&rendered.points, &partial, cfg.n_near, cfg.n_uniform, cfg.sigmas, &mut rng)?;
        let obs = PartialObservation {
            instance_id: id,
            view_id: v as u32,
            camera: cam,
            surface: rendered.points,
            udf,
        };
        let rel = obs_rel(id, v as u32);
        write_observation(&out.join(&rel), &obs)?;
        views.push(ViewEntry {
            view_id: v as u32,
            path: rel,
            camera: cam,
            visible_triangles: rendered.visible_triangles,
        });
    }
    let need = cfg.train_views + cfg.test_views;
    if views.len() < need {
        return Err(Error::Generation(format!(
            "shape '{}': only {} usable views, need {need}",
            src.name,
            views.len()
        )));
    }
    let mut ids: Vec<u32> = views.iter().map(|v| v.view_id).collect();
    ids.shuffle(&mut seeds::rng(cfg.seed, &[i, 4]));
    let mut train_views = ids[..cfg.train_views].to_vec();
    let mut test_views = ids[cfg.train_views..need].to_vec();
    train_views.sort_unstable();
    test_views.sort_unstable();

    let gt = PartialObservation {
        instance_id: id,
        view_id: GT_VIEW,
        camera: [0.0; 3],
        surface: sample_surface(&mesh, cfg.n_gt, &mut seeds::rng(cfg.seed, &[i, 3])),
        udf: Vec::new(),
    };
    let gt_path = format!("gt/{id:04}.pudf");
    write_observation(&out.join(&gt_path), &gt)?;
    let mesh_path = format!("meshes/{id:04}.ply");
    write_ply_mesh(&out.join(&mesh_path), &mesh)?;
    Ok(InstanceEntry {
        instance_id: id,
        source: src.name.clone(),
        primitive: src.primitive.clone(),
        transform,
        views,
        skipped_views: skipped,
        train_views,
        test_views,
        gt_path,
        mesh_path,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A manifest together with the observations it references.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<PartialObservation>,
    pub test: Vec<PartialObservation>,
    /// Complete ground-truth clouds by instance id.
    pub gt: BTreeMap<u32, Vec<Point3>>,
}

impl Dataset {
    /// Loads `manifest.json` (or the given manifest file) and its files.
    pub fn load(path: &Path, exec: Execution) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let manifest = DatasetManifest::load(&file)?;
        manifest.validate(&root)?;
        let refs = |split: Split| -> Vec<PathBuf> {
            manifest
                .instances
                .iter()
                .flat_map(|inst| {
                    let ids = match split {
                        Split::Train => &inst.train_views,
                        Split::Test => &inst.test_views,
                    };
                    ids.iter().map(|&v| root.join(&inst.view(v).expect("validated").path))
                })
                .collect()
        };
        let load_all = |paths: Vec<PathBuf>| -> Result<Vec<PartialObservation>> {
            exec.try_map_range(paths.len(), |k| read_observation(&paths[k]))
        };
        let train = load_all(refs(Split::Train))?;
        let test = load_all(refs(Split::Test))?;
        let gt_paths: Vec<PathBuf> = manifest.instances.iter().map(|i| root.join(&i.gt_path)).collect();
        let gt = load_all(gt_paths)?
            .into_iter()
            .map(|o| (o.instance_id, o.surface))
            .collect();
        Ok(Self {
            root,
            manifest,
            train,
            test,
            gt,
        })
    }

    pub fn split(&self, split: Split) -> &[PartialObservation] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.manifest.instances.len()
    }
}
