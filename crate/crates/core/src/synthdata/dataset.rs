//! Task dataset construction: scenes on disk as a JSON manifest plus binary
//! tensor files, with train/val/test splits disjoint by scene.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::rng::split_seed;
use crate::synthdata::caption::{make_caption, merge_view_captions, view_captions, CaptionStyle};
use crate::synthdata::render::{render_object_views, render_topdown};
use crate::synthdata::scene::{generate_scene, Box3, Scene, SceneConfig, Shape};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Option<Split> {
        match name {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Caption,
    Vqa,
    Grounding,
    Generation,
}

pub const TASKS: [Task; 5] = [
    Task::Classification,
    Task::Caption,
    Task::Vqa,
    Task::Grounding,
    Task::Generation,
];

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Caption => "caption",
            Task::Vqa => "vqa",
            Task::Grounding => "grounding",
            Task::Generation => "generation",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        TASKS.iter().copied().find(|t| t.as_str() == name)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub scenes: usize,
    pub scene: SceneConfig,
    /// total sample counts per task name
    pub counts: BTreeMap<String, usize>,
    pub train_fraction: f32,
    pub val_fraction: f32,
    /// scenes eligible for perception samples (these get topdown renders)
    pub perception_scenes: usize,
    pub view_resolution: usize,
    pub topdown_resolution: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        let mut counts = BTreeMap::new();
        counts.insert("classification".to_string(), 128);
        counts.insert("caption".to_string(), 128);
        counts.insert("vqa".to_string(), 128);
        counts.insert("grounding".to_string(), 128);
        counts.insert("generation".to_string(), 96);
        DataConfig {
            scenes: 560,
            scene: SceneConfig::default(),
            counts,
            train_fraction: 0.8,
            val_fraction: 0.1,
            perception_scenes: 80,
            view_resolution: 64,
            topdown_resolution: 224,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub shape: Shape,
    pub hue: String,
    pub rgb: [f32; 3],
    #[serde(rename = "box")]
    pub boxv: Box3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub floor_extent: f32,
    pub objects: Vec<ObjectRecord>,
    /// one points tensor per object, n x 6
    pub points: Vec<String>,
    pub topdown: Option<String>,
    /// object index -> 9 view tensors (8 ring + top)
    pub views: BTreeMap<usize, Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    Label { text: String },
    Text { text: String },
    Boxes { boxes: Vec<Box3> },
    Images { views: Vec<String>, caption: String, merged: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub task: Task,
    pub split: Split,
    pub scene: String,
    pub object: Option<usize>,
    pub instruction: String,
    pub target: Target,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub scenes: Vec<SceneRecord>,
    pub samples: Vec<SampleRecord>,
}

fn number_word(n: usize) -> &'static str {
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"][n.min(8)]
}

fn split_of(i: usize, n: usize, train_fraction: f32, val_fraction: f32) -> Split {
    let b1 = ((n as f32) * train_fraction).round() as usize;
    let b2 = b1 + ((n as f32) * val_fraction).round().max(1.0) as usize;
    if i < b1 {
        Split::Train
    } else if i < b2.min(n) {
        Split::Val
    } else {
        Split::Test
    }
}

struct ScenePick {
    /// scene indices usable per split, in order
    pools: BTreeMap<Split, Vec<usize>>,
    cursors: BTreeMap<Split, usize>,
}

impl ScenePick {
    fn new(pools: BTreeMap<Split, Vec<usize>>) -> ScenePick {
        ScenePick { pools, cursors: BTreeMap::new() }
    }

    fn next(&mut self, split: Split) -> Result<usize> {
        let pool = self.pools.get(&split).filter(|p| !p.is_empty()).ok_or_else(|| {
            Error::Config(format!("no scenes available in split {}", split.as_str()))
        })?;
        let cursor = self.cursors.entry(split).or_insert(0);
        let idx = pool[*cursor % pool.len()];
        *cursor += 1;
        Ok(idx)
    }
}

/// Builds the full dataset under `out_dir`. Pure function of (config, seed):
/// two builds with the same arguments produce byte-identical files.
pub fn build_dataset(config: &DataConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if config.scenes == 0 {
        return Err(Error::Config("dataset needs at least one scene".to_string()));
    }
    if !(0.0..=1.0).contains(&config.train_fraction)
        || !(0.0..=1.0).contains(&config.val_fraction)
        || config.train_fraction + config.val_fraction >= 1.0 + 1e-6
    {
        return Err(Error::Config("split fractions must sum to at most 1".to_string()));
    }
    for task in config.counts.keys() {
        if Task::from_name(task).is_none() {
            return Err(Error::Config(format!("unknown task in counts: {task}")));
        }
    }

    // 1. scenes, with a couple of reseeds if placement fails
    let mut scenes: Vec<Scene> = Vec::with_capacity(config.scenes);
    for i in 0..config.scenes {
        let mut made = None;
        for retry in 0..4u32 {
            let s = split_seed(seed, &format!("scene.{i}.{retry}"));
            match generate_scene(s, &config.scene) {
                Ok(scene) => {
                    made = Some(scene);
                    break;
                }
                Err(Error::Placement(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        scenes.push(made.ok_or(Error::Placement(i))?);
    }
    {
        let mut ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != scenes.len() {
            return Err(Error::Config("scene id collision; pick another seed".to_string()));
        }
    }

    let splits: Vec<Split> = (0..scenes.len())
        .map(|i| split_of(i, scenes.len(), config.train_fraction, config.val_fraction))
        .collect();

    // 2. scene pools: perception tasks draw from a bounded prefix per split
    // so the number of topdown renders stays bounded
    let mut full_pools: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for (i, s) in splits.iter().enumerate() {
        full_pools.entry(*s).or_default().push(i);
    }
    let mut perception_pools: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for (split, pool) in &full_pools {
        let frac = match split {
            Split::Train => config.train_fraction,
            Split::Val => config.val_fraction,
            Split::Test => 1.0 - config.train_fraction - config.val_fraction,
        };
        let cap = ((config.perception_scenes as f32 * frac).round() as usize)
            .clamp(1, pool.len());
        perception_pools.insert(*split, pool[..cap].to_vec());
    }
    let mut perception = ScenePick::new(perception_pools);
    let mut generation = ScenePick::new(full_pools);

    // 3. allocate samples
    let mut samples: Vec<SampleRecord> = Vec::new();
    let mut topdown_needed: BTreeSet<usize> = BTreeSet::new();
    let mut views_needed: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut object_cursor: BTreeMap<usize, usize> = BTreeMap::new();
    for task in TASKS {
        let count = config.counts.get(task.as_str()).copied().unwrap_or(0);
        for i in 0..count {
            let split = split_of(i, count, config.train_fraction, config.val_fraction);
            let picker = if task == Task::Generation { &mut generation } else { &mut perception };
            let scene_idx = picker.next(split)?;
            let scene = &scenes[scene_idx];
            let cursor = object_cursor.entry(scene_idx).or_insert(0);
            let obj_idx = *cursor % scene.objects.len();
            *cursor += 1;
            let obj = &scene.objects[obj_idx];
            let id = format!("{}_{i:06}", task.as_str());
            let (instruction, target) = match task {
                Task::Classification => (
                    "what shape is this object ?".to_string(),
                    Target::Label { text: obj.shape.name().to_string() },
                ),
                Task::Caption => (
                    "describe this object briefly .".to_string(),
                    Target::Text { text: make_caption(obj, CaptionStyle::Short) },
                ),
                Task::Vqa => {
                    let shape_unique = scene
                        .objects
                        .iter()
                        .filter(|o| o.shape == obj.shape)
                        .count()
                        == 1;
                    if i % 2 == 0 && shape_unique {
                        (
                            format!("what color is the {} ?", obj.shape.name()),
                            Target::Label { text: obj.hue.clone() },
                        )
                    } else {
                        (
                            "how many objects are in the scene ?".to_string(),
                            Target::Label { text: number_word(scene.objects.len()).to_string() },
                        )
                    }
                }
                Task::Grounding => (
                    format!("where is the {} {} ?", obj.hue, obj.shape.name()),
                    Target::Boxes { boxes: vec![obj.boxv] },
                ),
                Task::Generation => {
                    views_needed.insert((scene_idx, obj_idx));
                    let caps = view_captions(obj);
                    let merged = merge_view_captions(&caps)?;
                    let views = (0..9)
                        .map(|k| {
                            format!("scenes/{}/views_{obj_idx}/view_{k}.ten", scene.id)
                        })
                        .collect();
                    (
                        format!("generate a {} {}", obj.hue, obj.shape.name()),
                        Target::Images {
                            views,
                            caption: make_caption(obj, CaptionStyle::Short),
                            merged,
                        },
                    )
                }
            };
            if task != Task::Generation {
                topdown_needed.insert(scene_idx);
            }
            samples.push(SampleRecord {
                id,
                task,
                split,
                scene: scene.id.clone(),
                object: Some(obj_idx),
                instruction,
                target,
            });
        }
    }

    // 4. write assets
    let mut records: Vec<SceneRecord> = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let scene_dir = out_dir.join("scenes").join(&scene.id);
        std::fs::create_dir_all(&scene_dir)
            .map_err(|e| Error::Io(scene_dir.display().to_string(), e))?;
        let mut points = Vec::new();
        for (j, obj) in scene.objects.iter().enumerate() {
            let rel = format!("scenes/{}/points_{j}.ten", scene.id);
            obj.points.save(&out_dir.join(&rel))?;
            points.push(rel);
        }
        let topdown = if topdown_needed.contains(&i) {
            let rel = format!("scenes/{}/topdown.ten", scene.id);
            render_topdown(scene, config.topdown_resolution).save(&out_dir.join(&rel))?;
            Some(rel)
        } else {
            None
        };
        let mut views = BTreeMap::new();
        for (j, obj) in scene.objects.iter().enumerate() {
            if !views_needed.contains(&(i, j)) {
                continue;
            }
            let dir = scene_dir.join(format!("views_{j}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io(dir.display().to_string(), e))?;
            let rendered = render_object_views(obj, config.view_resolution);
            let mut paths = Vec::new();
            for (k, img) in rendered.iter().enumerate() {
                let rel = format!("scenes/{}/views_{j}/view_{k}.ten", scene.id);
                img.save(&out_dir.join(&rel))?;
                paths.push(rel);
            }
            views.insert(j, paths);
        }
        records.push(SceneRecord {
            id: scene.id.clone(),
            seed: scene.seed,
            split: splits[i],
            floor_extent: scene.floor_extent,
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    shape: o.shape,
                    hue: o.hue.clone(),
                    rgb: o.rgb,
                    boxv: o.boxv,
                })
                .collect(),
            points,
            topdown,
            views,
        });
    }

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        scenes: records,
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, text.as_bytes())
        .map_err(|e| Error::Io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// A dataset rooted at a directory, with tensors loaded on demand.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Io(path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        Ok(Dataset { root: dir.to_path_buf(), manifest })
    }

    pub fn scene(&self, id: &str) -> Result<&SceneRecord> {
        self.manifest
            .scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Format(format!("scene {id} not in manifest")))
    }

    pub fn tensor(&self, rel: &str) -> Result<Tensor> {
        Tensor::load(&self.root.join(rel))
    }

    pub fn points(&self, scene: &SceneRecord, obj: usize) -> Result<Tensor> {
        let rel = scene
            .points
            .get(obj)
            .ok_or_else(|| Error::Format(format!("scene {} has no object {obj}", scene.id)))?;
        self.tensor(rel)
    }

    pub fn topdown(&self, scene: &SceneRecord) -> Result<Tensor> {
        let rel = scene
            .topdown
            .as_ref()
            .ok_or_else(|| Error::Format(format!("scene {} has no topdown render", scene.id)))?;
        self.tensor(rel)
    }

    pub fn samples(&self, task: Task, split: Split) -> Vec<&SampleRecord> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.task == task && s.split == split)
            .collect()
    }
}

/// SHA-256 over the manifest plus every referenced tensor file, in sorted
/// relative-path order. Two builds of the same (config, seed) match.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let ds = Dataset::load(dir)?;
    let mut rels: Vec<String> = vec!["manifest.json".to_string()];
    for scene in &ds.manifest.scenes {
        rels.extend(scene.points.iter().cloned());
        if let Some(t) = &scene.topdown {
            rels.push(t.clone());
        }
        for paths in scene.views.values() {
            rels.extend(paths.iter().cloned());
        }
    }
    rels.sort_unstable();
    let mut hasher = Sha256::new();
    for rel in rels {
        let bytes = std::fs::read(dir.join(&rel))
            .map_err(|e| Error::Io(rel.clone(), e))?;
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
