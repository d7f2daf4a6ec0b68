//! Run directory layout and stage manifests.
//!
//! Every stage writes `<slot>/<stage>.stage.json` next to its outputs. The
//! manifest records the merged configuration, the digest of every output
//! file and the digest of each upstream manifest it consumed, so the
//! manifests form a hash chain that later stages verify before reading.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{sha256_hex, stage_keys, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Gen,
    Bank,
    Synth,
    Train,
    Score,
    Eval,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Gen, Stage::Bank, Stage::Synth, Stage::Train, Stage::Score, Stage::Eval, Stage::Ablate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Bank => "bank",
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }

    /// Directory under the run root holding this stage's outputs.
    pub fn slot(self) -> &'static str {
        match self {
            Stage::Gen => "dataset",
            Stage::Bank => "banks",
            Stage::Synth => "pool",
            Stage::Train => "checkpoints",
            Stage::Score => "scores",
            Stage::Eval | Stage::Ablate => "reports",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Bank => &[Stage::Gen],
            Stage::Synth => &[Stage::Gen, Stage::Bank],
            Stage::Train => &[Stage::Synth, Stage::Bank],
            Stage::Score => &[Stage::Train, Stage::Bank, Stage::Gen],
            Stage::Eval => &[Stage::Score, Stage::Gen],
            Stage::Ablate => &[Stage::Train, Stage::Bank, Stage::Gen],
        }
    }

    /// Whether the stage owns its whole slot (else it shares it and only
    /// tracks the files it wrote).
    fn owns_slot(self) -> bool {
        !matches!(self, Stage::Eval | Stage::Ablate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    /// Hash of the full merged configuration.
    pub config_hash: String,
    /// Hash of the stage's own configuration keys and upstream digests;
    /// equal values mean a rerun would reproduce the same outputs.
    pub stage_hash: String,
    pub config: Value,
    /// Upstream stage name → digest of its manifest file.
    pub upstream: BTreeMap<String, String>,
    /// Path relative to the run root → SHA-256 of the file.
    pub outputs: BTreeMap<String, String>,
}

/// A run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn slot(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.slot())
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.slot(stage).join(format!("{}.stage.json", stage.name()))
    }

    pub fn manifest(&self, stage: Stage) -> CliResult<Option<StageManifest>> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        serde_json::from_slice(&read(&path)?)
            .map(Some)
            .map_err(|e| CliError::stale(format!("{}: unreadable manifest ({e})", path.display())))
    }

    fn manifest_digest(&self, stage: Stage) -> CliResult<String> {
        Ok(sha256_hex(&read(&self.manifest_path(stage))?))
    }

    /// Checks that `stage`'s outputs are intact and that its recorded
    /// upstream digests match the manifests on disk, recursively.
    pub fn verify(&self, stage: Stage) -> CliResult<()> {
        self.verify_memo(stage, &mut HashSet::new())
    }

    fn verify_memo(&self, stage: Stage, seen: &mut HashSet<Stage>) -> CliResult<()> {
        if seen.contains(&stage) {
            return Ok(());
        }
        let m = self.manifest(stage)?.ok_or_else(|| {
            CliError::stale(format!("`{}` has not been run in {}", stage.name(), self.root.display()))
        })?;
        for (rel, digest) in &m.outputs {
            let path = self.root.join(rel);
            let bytes =
                fs::read(&path).map_err(|_| CliError::stale(format!("{}: output `{rel}` is missing", stage.name())))?;
            if sha256_hex(&bytes) != *digest {
                return Err(CliError::stale(format!("{}: output `{rel}` was modified", stage.name())));
            }
        }
        for up in stage.upstream() {
            let recorded = m
                .upstream
                .get(up.name())
                .ok_or_else(|| CliError::stale(format!("{} manifest does not record `{}`", stage.name(), up.name())))?;
            self.verify_memo(*up, seen)?;
            if *recorded != self.manifest_digest(*up)? {
                return Err(CliError::stale(format!(
                    "`{}` was produced from an older `{}`; rerun it",
                    stage.name(),
                    up.name()
                )));
            }
        }
        seen.insert(stage);
        Ok(())
    }

    /// Verifies every upstream of `stage` and returns their digests.
    pub fn check_upstream(&self, stage: Stage) -> CliResult<BTreeMap<String, String>> {
        let mut digests = BTreeMap::new();
        for up in stage.upstream() {
            self.verify(*up)?;
            digests.insert(up.name().to_string(), self.manifest_digest(*up)?);
        }
        Ok(digests)
    }

    /// Configuration values recorded by the upstream stages of `stage`
    /// (transitively): each contributes the keys it depends on, later stages
    /// taking precedence. Stages not run yet are skipped.
    pub fn inherited(&self, stage: Stage) -> CliResult<Map<String, Value>> {
        let mut wanted = HashSet::new();
        let mut todo = stage.upstream().to_vec();
        while let Some(s) = todo.pop() {
            if wanted.insert(s) {
                todo.extend_from_slice(s.upstream());
            }
        }
        let mut out = Map::new();
        for s in Stage::ALL.into_iter().filter(|s| wanted.contains(s)) {
            if let Some(m) = self.manifest(s)? {
                for key in stage_keys(s.name()) {
                    if let Some(v) = m.config.get(*key) {
                        out.insert((*key).to_string(), v.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Makes room for a rerun of `stage`: refuses when it already ran unless
    /// `force`, otherwise removes its previous outputs.
    pub fn prepare(&self, stage: Stage, stage_hash: &str, force: bool) -> CliResult<()> {
        if let Some(old) = self.manifest(stage)? {
            if !force {
                let why = if old.stage_hash == stage_hash {
                    "is up to date"
                } else {
                    "exists with a different configuration"
                };
                return Err(CliError::config(format!(
                    "`{}` output in {} {why}; pass --force to overwrite",
                    stage.name(),
                    self.slot(stage).display()
                )));
            }
            for rel in old.outputs.keys() {
                let _ = fs::remove_file(self.root.join(rel));
            }
            let _ = fs::remove_file(self.manifest_path(stage));
        }
        if stage.owns_slot() && self.slot(stage).exists() {
            if !force && fs::read_dir(self.slot(stage)).map(|mut d| d.next().is_some()).unwrap_or(false) {
                return Err(CliError::config(format!(
                    "{} is not empty; pass --force to overwrite",
                    self.slot(stage).display()
                )));
            }
            fs::remove_dir_all(self.slot(stage)).map_err(|e| CliError::io(self.slot(stage), e))?;
        }
        let slot = self.slot(stage);
        fs::create_dir_all(&slot).map_err(|e| CliError::io(&slot, e))?;
        Ok(())
    }

    /// Records `outputs` (or, when `None`, every file in the stage's slot).
    pub fn finish(
        &self,
        stage: Stage,
        cfg: &RunConfig,
        upstream: BTreeMap<String, String>,
        outputs: Option<&[PathBuf]>,
    ) -> CliResult<StageManifest> {
        let mut files = Vec::new();
        match outputs {
            Some(list) => files.extend(list.iter().cloned()),
            None => files_under(&self.slot(stage), &mut files)?,
        }
        let manifest_path = self.manifest_path(stage);
        let mut digests = BTreeMap::new();
        for f in files.into_iter().filter(|f| *f != manifest_path) {
            let rel = f
                .strip_prefix(&self.root)
                .expect("outputs live under the run root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            digests.insert(rel, sha256_hex(&read(&f)?));
        }
        let m = StageManifest {
            stage: stage.name().to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            stage_hash: stage_hash(stage, cfg, &upstream),
            config: cfg.to_json(),
            upstream,
            outputs: digests,
        };
        let bytes = serde_json::to_vec_pretty(&m).map_err(g2sf::Error::from)?;
        fs::write(&manifest_path, bytes).map_err(|e| CliError::io(&manifest_path, e))?;
        Ok(m)
    }
}

pub fn stage_hash(stage: Stage, cfg: &RunConfig, upstream: &BTreeMap<String, String>) -> String {
    let v = serde_json::json!({
        "stage": stage.name(),
        "config": cfg.section(stage.name()),
        "upstream": upstream,
    });
    sha256_hex(v.to_string().as_bytes())
}
