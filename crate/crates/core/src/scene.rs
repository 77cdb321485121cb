//! Posed objects and background, plus the scene JSON file format.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, PoseJson, RigidPose};
use crate::volume::{Field, ObjectVolume};

/// Owner id of a ray sample. `BACKGROUND` is reserved; objects use ids >= 1.
pub type ObjectId = u32;
pub const BACKGROUND: ObjectId = 0;

#[derive(Debug)]
pub struct SceneObject<V = ObjectVolume> {
    pub id: ObjectId,
    pub pose: RigidPose,
    pub volume: Arc<V>,
}

impl<V> Clone for SceneObject<V> {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            pose: self.pose,
            volume: Arc::clone(&self.volume),
        }
    }
}

#[derive(Debug)]
pub struct Scene<V = ObjectVolume> {
    pub objects: Vec<SceneObject<V>>,
    /// Background volume, posed in the world (usually identity).
    pub background: Option<(RigidPose, Arc<V>)>,
}

impl<V> Clone for Scene<V> {
    fn clone(&self) -> Self {
        Self {
            objects: self.objects.clone(),
            background: self.background.clone(),
        }
    }
}

impl<V> Default for Scene<V> {
    fn default() -> Self {
        Self {
            objects: Vec::new(),
            background: None,
        }
    }
}

impl<V: Field> Scene<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_background(mut self, volume: Arc<V>) -> Self {
        self.background = Some((RigidPose::identity(), volume));
        self
    }

    /// Adds an object with the next free id and returns that id.
    pub fn add_object(&mut self, volume: Arc<V>, pose: RigidPose) -> ObjectId {
        let id = self
            .objects
            .iter()
            .map(|o| o.id)
            .max()
            .unwrap_or(BACKGROUND)
            + 1;
        self.objects.push(SceneObject { id, pose, volume });
        id
    }

    /// Object ids in ascending order.
    pub fn object_ids(&self) -> Vec<ObjectId> {
        let mut ids: Vec<_> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = self.object_ids();
        let n = ids.len();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Contract("scene object ids are not unique".into()));
        }
        if ids.first() == Some(&BACKGROUND) {
            return Err(Error::Contract(
                "object id 0 is reserved for the background".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObjectJson {
    pub volume: String,
    pub pose: PoseJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<ObjectId>,
}

/// On-disk scene: volume paths are relative to the scene file's directory
/// unless absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    pub objects: Vec<SceneObjectJson>,
    #[serde(default)]
    pub cameras: Vec<Camera>,
}

impl SceneFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("scene serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads every referenced volume; repeated paths share one allocation.
    pub fn load_scene(&self, base_dir: &Path) -> Result<Scene> {
        let mut cache: HashMap<PathBuf, Arc<ObjectVolume>> = HashMap::new();
        let mut load = |rel: &str| -> Result<Arc<ObjectVolume>> {
            let p = resolve(base_dir, rel);
            if let Some(v) = cache.get(&p) {
                return Ok(Arc::clone(v));
            }
            let v = Arc::new(ObjectVolume::load(&p)?);
            cache.insert(p, Arc::clone(&v));
            Ok(v)
        };
        let mut scene = Scene::new();
        if let Some(bg) = &self.background {
            scene = scene.with_background(load(bg)?);
        }
        for (i, o) in self.objects.iter().enumerate() {
            scene.objects.push(SceneObject {
                id: o.id.unwrap_or(i as ObjectId + 1),
                pose: RigidPose::try_from(&o.pose)?,
                volume: load(&o.volume)?,
            });
        }
        scene.validate()?;
        Ok(scene)
    }
}

pub fn resolve(base_dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Reads a scene file and its volumes.
pub fn load_scene_file(path: impl AsRef<Path>) -> Result<(SceneFile, Scene)> {
    let path = path.as_ref();
    let file = SceneFile::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let scene = file.load_scene(base)?;
    Ok((file, scene))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AxisAlignedBox, Vec3};
    use crate::volume::GridDims;

    #[test]
    fn ids_are_assigned_and_checked() {
        let v = Arc::new(
            ObjectVolume::zeros(
                GridDims::cube(2),
                AxisAlignedBox::centered([0.1; 3]).unwrap(),
            )
            .unwrap(),
        );
        let mut s: Scene = Scene::new();
        assert_eq!(s.add_object(Arc::clone(&v), RigidPose::identity()), 1);
        assert_eq!(s.add_object(Arc::clone(&v), RigidPose::identity()), 2);
        s.validate().unwrap();
        s.objects[1].id = 1;
        assert!(s.validate().is_err());
        s.objects[1].id = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn scene_file_roundtrip_shares_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let v = ObjectVolume::zeros(
            GridDims::cube(2),
            AxisAlignedBox::centered([0.1; 3]).unwrap(),
        )
        .unwrap();
        v.save(dir.path().join("a.covv")).unwrap();
        let pose = RigidPose::from_translation(Vec3::new(0.1, 0.2, 0.3));
        let file = SceneFile {
            background: Some("a.covv".into()),
            objects: vec![
                SceneObjectJson {
                    volume: "a.covv".into(),
                    pose: (&pose).into(),
                    id: None,
                },
                SceneObjectJson {
                    volume: "a.covv".into(),
                    pose: (&pose).into(),
                    id: Some(7),
                },
            ],
            cameras: vec![],
        };
        let path = dir.path().join("scene.json");
        file.write(&path).unwrap();
        let (_, scene) = load_scene_file(&path).unwrap();
        assert_eq!(scene.object_ids(), vec![1, 7]);
        assert!(Arc::ptr_eq(
            &scene.objects[0].volume,
            &scene.objects[1].volume
        ));
        assert!((scene.objects[0].pose.translation - pose.translation).norm() < 1e-12);
    }

    #[test]
    fn malformed_scene_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        std::fs::write(&path, "{\n \"objects\": [\n oops\n]}").unwrap();
        match SceneFile::read(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
