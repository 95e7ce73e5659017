//! Case discovery and the session-level case manifest.
//!
//! A case is one imaging session: a directory holding one `.nii` file per
//! modality. The manifest maps `case_id -> {modality -> path}` with paths
//! stored relative to the manifest root so corpora can be moved.

pub mod nifti;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use crate::error::{Error, Result};
use crate::modality::normalize_modality_name;
use crate::volume::RawVolume;

pub use nifti::{read_volume, write_volume};

/// Reserved manifest key for a segmentation label volume.
pub const LABEL_KEY: &str = "label";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaseManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub case_id: String,
    pub volumes: BTreeMap<String, RawVolume>,
    /// Segmentation reference, when the case carries one.
    pub label: Option<RawVolume>,
}

impl Session {
    pub fn modalities(&self) -> impl Iterator<Item = &str> {
        self.volumes.keys().map(String::as_str)
    }

    /// A copy keeping only the listed modalities (the label is kept).
    pub fn restricted_to(&self, keep: &[String]) -> Session {
        Session {
            case_id: self.case_id.clone(),
            volumes: self
                .volumes
                .iter()
                .filter(|(k, _)| keep.iter().any(|m| m == *k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            label: self.label.clone(),
        }
    }
}

fn is_nifti(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.to_ascii_lowercase().ends_with(".nii"))
        .unwrap_or(false)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn rel_string(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn walk(root: &Path, dir: &Path, manifest: &mut CaseManifest) -> Result<()> {
    let mut files = BTreeMap::new();
    for path in sorted_dir(dir)? {
        if path.is_dir() {
            walk(root, &path, manifest)?;
        } else if is_nifti(&path) {
            let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let modality = normalize_modality_name(stem)?;
            let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
            // a session directory lists modalities by file stem; unreadable files fail here
            fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            if files.insert(modality.clone(), rel_string(&rel)).is_some() {
                return Err(Error::DuplicateModality {
                    case_id: case_id_for(root, dir),
                    modality,
                });
            }
        }
    }
    if !files.is_empty() {
        manifest.entries.insert(case_id_for(root, dir), files);
    }
    Ok(())
}

fn case_id_for(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let id = rel_string(rel);
    if id.is_empty() {
        root.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into())
    } else {
        id
    }
}

/// Build a manifest from a directory tree: every directory that directly holds
/// `.nii` files is one case, identified by its path relative to `root`.
pub fn scan_corpus(root: impl AsRef<Path>) -> Result<CaseManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut manifest = CaseManifest {
        root: root.to_path_buf(),
        entries: BTreeMap::new(),
    };
    walk(root, root, &mut manifest)?;
    Ok(manifest)
}

/// Relative path from directory `base` to `target`; both must be absolute.
fn relative_path(base: &Path, target: &Path) -> PathBuf {
    let b: Vec<Component> = base.components().collect();
    let t: Vec<Component> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

impl CaseManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn case_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// JSON text with paths relative to `base_dir` (sorted keys).
    pub fn to_json(&self, base_dir: &Path) -> Result<String> {
        let base = fs::canonicalize(base_dir).map_err(|e| Error::io(base_dir, e))?;
        let root = fs::canonicalize(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut out: BTreeMap<&str, BTreeMap<&str, String>> = BTreeMap::new();
        for (case, mods) in &self.entries {
            let row = out.entry(case).or_default();
            for (m, rel) in mods {
                let abs = if Path::new(rel).is_absolute() {
                    PathBuf::from(rel)
                } else {
                    root.join(rel)
                };
                row.insert(m, rel_string(&relative_path(&base, &abs)));
            }
        }
        serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let entries: BTreeMap<String, BTreeMap<String, String>> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let mut normalized = BTreeMap::new();
        for (case, mods) in entries {
            let mut row = BTreeMap::new();
            for (m, p) in mods {
                let canonical = normalize_modality_name(&m)?;
                if row.insert(canonical.clone(), p).is_some() {
                    return Err(Error::DuplicateModality {
                        case_id: case.clone(),
                        modality: canonical,
                    });
                }
            }
            normalized.insert(case, row);
        }
        Ok(Self {
            root: root.into(),
            entries: normalized,
        })
    }

    /// Write atomically (temp file in the same directory, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let text = self.to_json(&dir)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Self::from_json(&text, root)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Read every modality of one case. Modalities come back in lexicographic order.
pub fn load_session(m: &CaseManifest, case_id: &str) -> Result<Session> {
    let mods = m
        .entries
        .get(case_id)
        .ok_or_else(|| Error::NotFound(format!("case '{case_id}'")))?;
    let mut volumes = BTreeMap::new();
    let mut label = None;
    for (name, rel) in mods {
        let v = read_volume(m.resolve(rel), name)?;
        if name == LABEL_KEY {
            label = Some(v);
        } else {
            volumes.insert(name.clone(), v);
        }
    }
    if volumes.is_empty() {
        return Err(Error::NotFound(format!("case '{case_id}' has no image modalities")));
    }
    Ok(Session {
        case_id: case_id.to_string(),
        volumes,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(modality: &str) -> RawVolume {
        RawVolume::new([2, 2, 2], [1.0; 3], (0..8).map(f64::from).collect(), modality).unwrap()
    }

    #[test]
    fn scan_builds_sorted_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("sub_01");
        fs::create_dir(&case).unwrap();
        write_volume(&tiny("t1"), case.join("t1.nii")).unwrap();
        write_volume(&tiny("flair"), case.join("FLAIR.nii")).unwrap();
        fs::write(case.join("notes.txt"), "ignored").unwrap();
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        let row = &m.entries["sub_01"];
        assert_eq!(row.keys().collect::<Vec<_>>(), ["flair", "t1"]);
        assert_eq!(row["t1"], "sub_01/t1.nii");
        assert_eq!(m, scan_corpus(dir.path()).unwrap());
    }

    #[test]
    fn nested_sessions_are_separate_cases() {
        let dir = tempfile::tempdir().unwrap();
        for ses in ["ses_1", "ses_2"] {
            let d = dir.path().join("sub_01").join(ses);
            fs::create_dir_all(&d).unwrap();
            write_volume(&tiny("t1"), d.join("t1.nii")).unwrap();
        }
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.case_ids().collect::<Vec<_>>(), ["sub_01/ses_1", "sub_01/ses_2"]);
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn case_insensitive_duplicates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("sub_01");
        fs::create_dir(&case).unwrap();
        write_volume(&tiny("t1"), case.join("t1.nii")).unwrap();
        write_volume(&tiny("t1"), case.join("T1.nii")).unwrap();
        match scan_corpus(dir.path()) {
            Err(Error::DuplicateModality { case_id, modality }) => {
                assert_eq!((case_id.as_str(), modality.as_str()), ("sub_01", "t1"));
            }
            other => panic!("expected DuplicateModality, got {other:?}"),
        }
    }

    #[test]
    fn manifest_json_round_trip_and_session_loading() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("a");
        fs::create_dir(&case).unwrap();
        write_volume(&tiny("t1"), case.join("t1.nii")).unwrap();
        write_volume(&tiny("flair"), case.join("flair.nii")).unwrap();
        let m = scan_corpus(dir.path()).unwrap();

        let out = dir.path().join("elsewhere");
        fs::create_dir(&out).unwrap();
        let path = out.join("manifest.json");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("../a/t1.nii"));
        let back = CaseManifest::load(&path).unwrap();
        assert_eq!(back.entries.len(), 1);

        let s = load_session(&back, "a").unwrap();
        assert_eq!(s.modalities().collect::<Vec<_>>(), ["flair", "t1"]);
        assert_eq!(s.volumes["t1"].voxels, tiny("t1").voxels);
        assert!(matches!(load_session(&back, "zzz"), Err(Error::NotFound(_))));
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let v = tiny("t1");
        assert!(matches!(
            write_volume(&v, "/nonexistent-dir/for/sure/t1.nii"),
            Err(Error::Io { .. })
        ));
    }
}
