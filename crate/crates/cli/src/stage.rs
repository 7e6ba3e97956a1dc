//! Outputs are written into a hidden staging directory next to their final
//! location and moved into place only once every file has been hashed. A
//! failed command leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use finn_core::datagen::content_hash;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tempfile::TempDir;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "finn-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Path relative to the directory holding the manifest.
    pub path: String,
    pub content_hash: String,
}

/// Record of one command invocation. Contains no timestamps or absolute
/// paths so that identical runs write identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub config: Value,
    /// Content hashes of consumed inputs, keyed by role.
    #[serde(default)]
    pub inputs: Vec<(String, String)>,
    #[serde(default)]
    pub summary: Value,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

fn relative_files(root: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    let mut names: Vec<String> = files
        .iter()
        .map(|p| p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"))
        .filter(|p| p != MANIFEST_FILE)
        .collect();
    names.sort();
    Ok(names)
}

/// Hashes every file under `dir` except the manifest.
pub fn hash_tree(dir: &Path) -> Result<Vec<Artifact>> {
    relative_files(dir)?
        .into_iter()
        .map(|path| {
            let content_hash = hash_file(&dir.join(&path))?;
            Ok(Artifact { path, content_hash })
        })
        .collect()
}

/// Checks that the files under `dir` are exactly those of the manifest.
pub fn validate(dir: &Path, manifest: &Manifest) -> Result<()> {
    let found = hash_tree(dir)?;
    if found != manifest.artifacts {
        bail!("artifacts in {} do not match their manifest", dir.display());
    }
    Ok(())
}

/// Checks the files listed in the manifest; later outputs nested in the
/// same directory are ignored.
pub fn verify(dir: &Path, manifest: &Manifest) -> Result<()> {
    for a in &manifest.artifacts {
        let found = hash_file(&dir.join(&a.path))?;
        if found != a.content_hash {
            bail!("{} in {} does not match its manifest", a.path, dir.display());
        }
    }
    Ok(())
}

/// A staged output directory that replaces `target` on commit.
pub struct Stage {
    dir: TempDir,
    target: PathBuf,
    created: Vec<PathBuf>,
}

impl Stage {
    pub fn new(target: &Path) -> Result<Self> {
        let parent = target.parent().context("output path has no parent")?;
        let mut created = Vec::new();
        let mut p = parent.to_path_buf();
        while !p.as_os_str().is_empty() && !p.exists() {
            created.push(p.clone());
            p = match p.parent() {
                Some(q) => q.to_path_buf(),
                None => break,
            };
        }
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(parent)
            .with_context(|| format!("staging in {}", parent.display()))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
            created,
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    /// Hashes the staged files, writes the manifest and checks it.
    pub fn seal(&self, command: &str, config: Value, inputs: Vec<(String, String)>, summary: Value) -> Result<Manifest> {
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA.to_string(),
            command: command.to_string(),
            config,
            inputs,
            summary,
            artifacts: hash_tree(self.path())?,
        };
        fs::write(self.path().join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        validate(self.path(), &manifest)?;
        Ok(manifest)
    }

    /// Removes parent directories created for this stage if they are empty.
    pub fn abandon(self) {
        let created = self.created.clone();
        drop(self.dir);
        for p in created {
            let _ = fs::remove_dir(p);
        }
    }
}

/// Moves every sealed stage into place, then validates the results.
/// Either all targets are replaced or none is touched.
pub fn commit_all(stages: Vec<(Stage, Manifest)>) -> Result<()> {
    let mut moved: Vec<PathBuf> = Vec::new();
    let mut backups: Vec<(PathBuf, PathBuf)> = Vec::new();
    let mut failure = None;
    for (stage, manifest) in stages {
        if failure.is_some() {
            stage.abandon();
            continue;
        }
        let target = stage.target.clone();
        if target.exists() {
            let name = target.file_name().unwrap_or_default().to_string_lossy();
            let backup = target.with_file_name(format!(".previous-{name}"));
            let saved = (|| -> Result<()> {
                if backup.exists() {
                    fs::remove_dir_all(&backup)?;
                }
                fs::rename(&target, &backup)?;
                Ok(())
            })();
            if let Err(e) = saved {
                failure = Some(e);
                stage.abandon();
                continue;
            }
            backups.push((target.clone(), backup));
        }
        match fs::rename(stage.path(), &target) {
            Ok(()) => {
                moved.push(target.clone());
                if let Err(e) = validate(&target, &manifest) {
                    failure = Some(e);
                }
            }
            Err(e) => {
                failure = Some(anyhow::Error::new(e).context(format!("moving outputs to {}", target.display())));
                stage.abandon();
            }
        }
    }
    if let Some(e) = failure {
        for t in &moved {
            let _ = fs::remove_dir_all(t);
        }
        for (t, b) in backups {
            let _ = fs::rename(b, t);
        }
        return Err(e);
    }
    for (_, b) in backups {
        fs::remove_dir_all(b)?;
    }
    Ok(())
}
