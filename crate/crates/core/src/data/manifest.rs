//! Dataset manifests: a TOML file listing `(rainy, clean)` pairs and
//! unpaired rainy images. Relative paths resolve against the manifest's
//! directory.
//!
//! ```toml
//! [[labeled]]
//! rainy = "labeled/0000_rainy.png"
//! clean = "labeled/0000_clean.png"
//!
//! [[unlabeled]]
//! rainy = "unlabeled/0000.png"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batch::LabeledSample;
use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub labeled: Vec<LabeledEntry>,
    #[serde(default)]
    pub unlabeled: Vec<UnlabeledEntry>,
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledEntry {
    pub rainy: PathBuf,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Manifest {
            base: base.into(),
            ..Default::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {}", path.display(), e)))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Entry identifier: the rainy file stem.
    pub fn labeled_ids(&self) -> Vec<String> {
        self.labeled
            .iter()
            .map(|e| {
                e.rainy
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect()
    }

    pub fn load_labeled(&self) -> Result<Vec<LabeledSample>> {
        self.labeled
            .iter()
            .map(|e| {
                let rainy = Image::read_png(self.resolve(&e.rainy))?;
                let clean = Image::read_png(self.resolve(&e.clean))?;
                LabeledSample::from_pair(rainy, clean)
            })
            .collect()
    }

    pub fn load_unlabeled(&self) -> Result<Vec<Image>> {
        self.unlabeled
            .iter()
            .map(|e| Image::read_png(self.resolve(&e.rainy)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let img = Image::filled(4, 5, 0.25).unwrap();
        img.write_png(dir.path().join("sub/a.png")).unwrap();
        img.write_png(dir.path().join("sub/b.png")).unwrap();
        let text = "[[labeled]]\nrainy = \"sub/a.png\"\nclean = \"sub/b.png\"\n\n[[unlabeled]]\nrainy = \"sub/a.png\"\n";
        let mp = dir.path().join("manifest.toml");
        std::fs::write(&mp, text).unwrap();
        let m = Manifest::load(&mp).unwrap();
        let l = m.load_labeled().unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].rainy, img.quantized());
        assert_eq!(m.load_unlabeled().unwrap().len(), 1);
        assert_eq!(m.labeled_ids(), vec!["a".to_string()]);
    }

    #[test]
    fn png_round_trip_is_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 4, |c, y, x| ((c + y * 4 + x) as f64 * 0.037) % 1.0).unwrap();
        let p = dir.path().join("x.png");
        img.write_png(&p).unwrap();
        assert_eq!(Image::read_png(&p).unwrap(), img.quantized());
    }

    #[test]
    fn malformed_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.toml");
        std::fs::write(&mp, "[[labeled]]\nrainy = 3\n").unwrap();
        assert_eq!(Manifest::load(&mp).unwrap_err().kind(), "format");
    }
}
