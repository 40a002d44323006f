//! Dataset manifest: a TOML index of image/mask pairs plus the label schema.
//!
//! Validation is eager and strict: every referenced raster must parse, the
//! image and mask must share dimensions, and every mask value must be a class
//! index or the ignore label. Training never starts on a bad dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::raster::{load_image, load_mask, ImageBuf, MaskBuf};
use crate::error::{Error, Result};

pub const DEFAULT_IGNORE: u32 = 255;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    classes: usize,
    #[serde(default = "default_ignore")]
    ignore: u32,
    class_names: Vec<String>,
    #[serde(default)]
    samples: Vec<SampleEntry>,
}

fn default_ignore() -> u32 {
    DEFAULT_IGNORE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    image: String,
    mask: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub ignore: u32,
}

impl DatasetManifest {
    /// Parses `manifest.toml` and validates every referenced sample.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest = DatasetManifest {
            pairs: file
                .samples
                .iter()
                .map(|s| (root.join(&s.image), root.join(&s.mask)))
                .collect(),
            root,
            classes: file.classes,
            class_names: file.class_names,
            ignore: file.ignore,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Data(format!("{} classes is not a segmentation task", self.classes)));
        }
        if self.class_names.len() != self.classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            )));
        }
        if (self.ignore as usize) < self.classes {
            return Err(Error::Data(format!(
                "ignore label {} collides with class indices",
                self.ignore
            )));
        }
        for (img_path, mask_path) in &self.pairs {
            let img = load_image(img_path)?;
            let mask = load_mask(mask_path)?;
            if (img.h, img.w) != (mask.h, mask.w) {
                return Err(Error::Data(format!(
                    "{}: image {}x{} but mask {}x{}",
                    img_path.display(),
                    img.h,
                    img.w,
                    mask.h,
                    mask.w
                )));
            }
            if let Some(&bad) = mask
                .px
                .iter()
                .find(|&&v| v as usize >= self.classes && v != self.ignore)
            {
                return Err(Error::Data(format!(
                    "{}: mask value {bad} outside [0,{}) and not ignore={}",
                    mask_path.display(),
                    self.classes,
                    self.ignore
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load_sample(&self, idx: usize) -> Result<(ImageBuf, MaskBuf)> {
        let (img, mask) = &self.pairs[idx];
        Ok((load_image(img)?, load_mask(mask)?))
    }

    /// Writes `manifest.toml` into `root` with paths relative to it.
    pub fn save(&self) -> Result<PathBuf> {
        let rel = |p: &Path| {
            p.strip_prefix(&self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let file = ManifestFile {
            classes: self.classes,
            ignore: self.ignore,
            class_names: self.class_names.clone(),
            samples: self
                .pairs
                .iter()
                .map(|(i, m)| SampleEntry { image: rel(i), mask: rel(m) })
                .collect(),
        };
        let path = self.root.join("manifest.toml");
        let text = toml::to_string_pretty(&file)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::raster::{save_image, save_mask};

    fn scratch(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("manifest_{tag}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_pair(dir: &Path, stem: &str, h: usize, w: usize, mask_vals: &[u32]) {
        save_image(&dir.join(format!("{stem}.ppm")), &ImageBuf::new(h, w)).unwrap();
        let mask = MaskBuf { h, w, px: mask_vals.to_vec() };
        save_mask(&dir.join(format!("{stem}.pgm")), &mask).unwrap();
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_and_resolves_relative_paths() {
        let dir = scratch("ok");
        write_pair(&dir, "a", 2, 2, &[0, 1, 2, 255]);
        let p = write_manifest(
            &dir,
            r#"
classes = 3
class_names = ["bg", "block", "road"]
[[samples]]
image = "a.ppm"
mask = "a.pgm"
"#,
        );
        let m = DatasetManifest::load(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.ignore, 255);
        let (img, mask) = m.load_sample(0).unwrap();
        assert_eq!((img.h, mask.w), (2, 2));
    }

    #[test]
    fn out_of_range_mask_values_fail_validation() {
        let dir = scratch("range");
        write_pair(&dir, "bad", 1, 2, &[0, 7]);
        let p = write_manifest(
            &dir,
            "classes = 3\nclass_names = [\"a\", \"b\", \"c\"]\n[[samples]]\nimage = \"bad.ppm\"\nmask = \"bad.pgm\"\n",
        );
        let err = DatasetManifest::load(&p).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        assert!(err.to_string().contains("7"));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = scratch("dims");
        save_image(&dir.join("x.ppm"), &ImageBuf::new(2, 2)).unwrap();
        save_mask(&dir.join("x.pgm"), &MaskBuf::new(2, 3, 0)).unwrap();
        let p = write_manifest(
            &dir,
            "classes = 2\nclass_names = [\"a\", \"b\"]\n[[samples]]\nimage = \"x.ppm\"\nmask = \"x.pgm\"\n",
        );
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Data(_))));
    }

    #[test]
    fn missing_files_and_unknown_keys_fail() {
        let dir = scratch("missing");
        let p = write_manifest(
            &dir,
            "classes = 2\nclass_names = [\"a\", \"b\"]\n[[samples]]\nimage = \"nope.ppm\"\nmask = \"nope.pgm\"\n",
        );
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Io { .. })));

        let p2 = write_manifest(&dir, "classes = 2\nclass_names = [\"a\", \"b\"]\ntypo_field = 1\n");
        assert!(matches!(DatasetManifest::load(&p2), Err(Error::Data(_))));
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = scratch("save");
        write_pair(&dir, "s", 2, 2, &[0, 0, 1, 1]);
        let m = DatasetManifest {
            root: dir.clone(),
            pairs: vec![(dir.join("s.ppm"), dir.join("s.pgm"))],
            classes: 2,
            class_names: vec!["bg".into(), "fg".into()],
            ignore: 255,
        };
        let path = m.save().unwrap();
        let again = DatasetManifest::load(&path).unwrap();
        assert_eq!(again.pairs, m.pairs);
        assert_eq!(again.class_names, m.class_names);
    }
}
