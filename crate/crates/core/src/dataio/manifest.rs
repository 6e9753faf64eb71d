//! Dataset directories: sample files plus one JSON manifest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{load_ppm, save_ppm};
use super::ply::{load_ply, save_ply};
use super::synth::{gen_primitive, occlude, render_silhouette, viewpoints, ShapeKind};
use super::CloudSample;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Paths relative to the manifest's directory.
    pub partial: String,
    pub gt: String,
    pub image: String,
    pub category: String,
    /// Direction the occluding half-space faces.
    pub viewpoint: [f64; 3],
    /// Direction the image is rendered from.
    pub image_viewpoint: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub image_size: usize,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

/// What to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Samples per primitive, generated in this order.
    pub counts: Vec<(ShapeKind, usize)>,
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Share of each ground truth removed by the occluding half-space.
    pub occlusion: f64,
}

impl DatasetSpec {
    /// `count` samples cycling through the primitives.
    pub fn balanced(count: usize, n: usize, image_size: usize, seed: u64) -> Self {
        let k = ShapeKind::ALL.len();
        let counts = ShapeKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| (kind, count / k + usize::from(i < count % k)))
            .collect();
        Self {
            counts,
            n,
            image_size,
            seed,
            occlusion: DEFAULT_OCCLUSION,
        }
    }
}

pub const DEFAULT_OCCLUSION: f64 = 0.4;

/// Sample `index` of a dataset, drawn from its own RNG stream.
pub fn gen_sample(kind: ShapeKind, index: usize, spec: &DatasetSpec) -> Result<CloudSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let views = viewpoints();
    let gt = gen_primitive(kind, spec.n, &mut rng)?;
    let viewpoint = views[rng.gen_range(0..views.len())];
    let image_viewpoint = views[rng.gen_range(0..views.len())];
    let partial = occlude(&gt, viewpoint, spec.occlusion, &mut rng)?;
    let image = render_silhouette(&gt, image_viewpoint, spec.image_size, spec.image_size)?;
    Ok(CloudSample {
        partial,
        image,
        gt,
        category: kind.name().into(),
        viewpoint,
        image_viewpoint,
    })
}

/// Generates every sample in memory without touching the file system.
pub fn gen_samples(spec: &DatasetSpec) -> Result<Vec<CloudSample>> {
    let mut out = Vec::new();
    for (kind, count) in &spec.counts {
        for _ in 0..*count {
            out.push(gen_sample(*kind, out.len(), spec)?);
        }
    }
    Ok(out)
}

/// Writes the dataset under `out_dir` and returns its manifest, which is also
/// saved as `out_dir/manifest.json`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut records = Vec::new();
    for (i, s) in gen_samples(spec)?.into_iter().enumerate() {
        let stem = format!("samples/{i:05}_{}", s.category);
        let rec = SampleRecord {
            partial: format!("{stem}_partial.ply"),
            gt: format!("{stem}_gt.ply"),
            image: format!("{stem}_image.ppm"),
            category: s.category.clone(),
            viewpoint: s.viewpoint,
            image_viewpoint: s.image_viewpoint,
        };
        save_ply(out_dir.join(&rec.partial), &s.partial)?;
        save_ply(out_dir.join(&rec.gt), &s.gt)?;
        save_ppm(out_dir.join(&rec.image), &s.image)?;
        records.push(rec);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        n: spec.n,
        image_size: spec.image_size,
        samples: records,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads every sample of a manifest, checking that each file parses and has
/// the declared point count and image size.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<CloudSample>)> {
    let manifest_path = manifest_path.as_ref();
    let m = DatasetManifest::load(manifest_path)?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::with_capacity(m.samples.len());
    for (i, r) in m.samples.iter().enumerate() {
        let partial = load_ply(root.join(&r.partial))?;
        let gt = load_ply(root.join(&r.gt))?;
        let image = load_ppm(root.join(&r.image))?;
        if partial.len() != m.n || gt.len() != m.n {
            return Err(Error::Manifest(format!(
                "sample {i}: clouds have {} and {} points, manifest declares {}",
                partial.len(),
                gt.len(),
                m.n
            )));
        }
        if image.height() != m.image_size || image.width() != m.image_size {
            return Err(Error::Manifest(format!(
                "sample {i}: image is {}x{}, manifest declares {}",
                image.height(),
                image.width(),
                m.image_size
            )));
        }
        out.push(CloudSample {
            partial,
            image,
            gt,
            category: r.category.clone(),
            viewpoint: r.viewpoint,
            image_viewpoint: r.image_viewpoint,
        });
    }
    Ok((m, out))
}
