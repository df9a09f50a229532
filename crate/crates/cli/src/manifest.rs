use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One record per invocation: enough to re-run it and audit its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub command: String,
    /// Arguments after the program name, replayable with `gdm replay`.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: args.to_vec(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings_s.insert(label.to_string(), t.elapsed().as_secs_f64());
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        anyhow::ensure!(
            m.schema_version == MANIFEST_SCHEMA_VERSION,
            "manifest schema {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
            m.schema_version
        );
        Ok(m)
    }
}

/// Output files are written under temporary names and only moved into
/// place by [`Staging::commit`]; dropping an uncommitted staging area removes
/// everything written so far.
pub struct Staging {
    pending: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    pub fn new() -> Self {
        Self { pending: Vec::new(), committed: false }
    }

    /// Temporary path for `target`, keeping the extension so format
    /// detection still works. The pair is registered for commit.
    pub fn path(&mut self, target: impl AsRef<Path>) -> Result<PathBuf> {
        let target = target.as_ref().to_path_buf();
        let tmp = self.temp_base(&target)?;
        let tmp = match target.extension() {
            Some(ext) => with_suffix(&tmp, &ext.to_string_lossy()),
            None => tmp,
        };
        self.pending.push((tmp.clone(), target));
        Ok(tmp)
    }

    /// Unregistered temporary basename next to `target` (parent directory
    /// created); pair it with real targets through [`Staging::adopt`].
    pub fn temp_base(&self, target: &Path) -> Result<PathBuf> {
        if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let name = target
            .file_name()
            .with_context(|| format!("{} has no file name", target.display()))?
            .to_string_lossy()
            .into_owned();
        Ok(target.with_file_name(format!(".{name}.{}.partial", std::process::id())))
    }

    pub fn adopt(&mut self, tmp: PathBuf, target: PathBuf) {
        self.pending.push((tmp, target));
    }

    pub fn write(&mut self, target: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
        let tmp = self.path(target)?;
        fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))
    }

    pub fn targets(&self) -> Vec<PathBuf> {
        self.pending.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        for (tmp, target) in &self.pending {
            fs::rename(tmp, target).with_context(|| format!("moving output into {}", target.display()))?;
        }
        self.committed = true;
        Ok(self.targets())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.pending {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}

/// `dir/stem.suffix` next to (or under `out_dir` instead of) `input`.
pub fn sibling(input: &Path, out_dir: Option<&Path>, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| input.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    dir.join(format!("{stem}.{suffix}"))
}

/// `base` with `.suffix` appended to the full file name.
pub fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
