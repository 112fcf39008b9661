//! Bundled input files and loaders shared by the CLI and the acceptance checks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, ErrorKind, Result};
use crate::tree::{Shape, TreeSpec};
use crate::ultra::{UltrametricMatrix, WordFamily};
use crate::weights::WeightSequence;

const MODULE: &str = "cli";

/// `$TREEPOT_FIXTURES`, else the directory shipped with the crate.
pub fn fixture_dir() -> PathBuf {
    match std::env::var_os("TREEPOT_FIXTURES") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures"),
    }
}

/// A path as given if it exists, otherwise looked up in the fixture directory.
pub fn resolve(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    let alt = fixture_dir().join(path);
    if alt.exists() {
        alt
    } else {
        path.to_path_buf()
    }
}

pub fn read(path: &Path) -> Result<String> {
    let p = resolve(path);
    std::fs::read_to_string(&p).map_err(|e| {
        Error::new(ErrorKind::Io, MODULE, format!("cannot read {}: {e}", p.display()))
            .with_context(serde_json::json!({"path": p.display().to_string()}))
    })
}

/// Tree spec with its weights; specs without `"weights"` get `w_n = n + 1`.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: TreeSpec,
    pub shape: Arc<Shape>,
    pub weights: WeightSequence,
}

impl Model {
    pub fn from_spec(spec: TreeSpec) -> Result<Model> {
        let (shape, _) = spec.shape()?;
        let weights = match &spec.weights {
            Some(w) => WeightSequence::from_spec(w)?,
            None => WeightSequence::linear(),
        };
        Ok(Model {
            spec,
            shape: Arc::new(shape),
            weights,
        })
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_spec(TreeSpec::from_json(&read(path)?)?)
    }

    pub fn fixture(name: &str) -> Result<Model> {
        Model::load(&fixture_dir().join(name))
    }
}

pub fn load_matrix(path: &Path) -> Result<UltrametricMatrix> {
    UltrametricMatrix::from_csv(&read(path)?)
}

pub fn load_family(path: &Path) -> Result<WordFamily> {
    WordFamily::from_json(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::build_tree;

    #[test]
    fn bundled_fixtures_load() {
        let f1 = Model::fixture("f1.json").unwrap();
        assert_eq!(build_tree(&f1.spec, 0).unwrap().len(), 5);
        assert_eq!(f1.weights.w(2), 4.0);
        for name in ["homog2.json", "homog3.json", "asym.json", "figure2.json"] {
            let m = Model::fixture(name).unwrap();
            assert!(!m.shape.is_finite(), "{name}");
        }
        assert_eq!(load_matrix(&fixture_dir().join("f4.csv")).unwrap().len(), 3);
        assert_eq!(load_family(&fixture_dir().join("word2.json")).unwrap().body, vec![0, 2]);
        let e = Model::load(Path::new("no/such/file.json")).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Io);
    }
}
