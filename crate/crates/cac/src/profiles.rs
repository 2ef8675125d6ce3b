//! Backend profiles: TOML files naming which agent or teacher backend to use.
//!
//! ```toml
//! kind = "scripted"      # scripted | remote | replay (agent only)
//! script = "agent.toml"  # scripted: rule table, relative to this file
//! transcript = "t.jsonl" # replay: backend transcript
//! [remote]               # remote: chat-completions endpoint
//! url = "http://127.0.0.1:8000/v1/chat/completions"
//! model = "qwen2.5"
//! ```
//!
//! A file without `kind` is read directly as a scripted table.

use std::path::{Path, PathBuf};

use cac_core::backend::{ModelBackend, ReplayBackend, ScriptedBackend, ScriptedTable};
use cac_core::embedder::{Embedder, EmbedderConfig, EmbedderKind, ReferenceEmbedder};
use cac_core::store;
use cac_core::teacher::{ScriptedTeacher, ScriptedTeacherTable, TeacherBackend};
use serde::{Deserialize, Serialize};

use crate::remote::{RemoteBackend, RemoteChatConfig, RemoteEmbedder, RemoteTeacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Scripted,
    Remote,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub kind: ProfileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteChatConfig>,
}

/// Where a profile came from, for error messages and run manifests.
#[derive(Debug, Clone)]
pub struct LoadedProfile<T> {
    pub source: PathBuf,
    pub kind: ProfileKind,
    pub backend: T,
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read profile {}: {e}", path.display()))
}

fn relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn parse_profile(path: &Path, text: &str) -> Result<Option<Profile>, String> {
    let value: toml::Table = toml::from_str(text).map_err(|e| format!("{}: {e}", path.display()))?;
    if !value.contains_key("kind") {
        return Ok(None);
    }
    toml::from_str(text)
        .map(Some)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn scripted_table(path: &Path) -> Result<ScriptedTable, String> {
    ScriptedTable::from_toml(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

/// Loads an agent backend. Remote backends are probed for logprob support.
pub fn load_agent(path: &Path) -> Result<LoadedProfile<Box<dyn ModelBackend>>, String> {
    let text = read(path)?;
    let Some(profile) = parse_profile(path, &text)? else {
        let table = ScriptedTable::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let backend = ScriptedBackend::new(table).map_err(|e| e.to_string())?;
        return Ok(LoadedProfile {
            source: path.to_owned(),
            kind: ProfileKind::Scripted,
            backend: Box::new(backend),
        });
    };
    let backend: Box<dyn ModelBackend> = match profile.kind {
        ProfileKind::Scripted => {
            let script = profile.script.ok_or("scripted profile needs `script`")?;
            let table = scripted_table(&relative(path, &script))?;
            Box::new(ScriptedBackend::new(table).map_err(|e| e.to_string())?)
        }
        ProfileKind::Replay => {
            let t = profile.transcript.ok_or("replay profile needs `transcript`")?;
            let entries = store::load_transcript(&relative(path, &t)).map_err(|e| e.to_string())?;
            Box::new(ReplayBackend::new(entries))
        }
        ProfileKind::Remote => {
            let cfg = profile.remote.ok_or("remote profile needs a [remote] table")?;
            let backend = RemoteBackend::new(cfg).map_err(|e| e.to_string())?;
            backend.probe().map_err(|e| format!("backend {} unavailable: {e}", path.display()))?;
            Box::new(backend)
        }
    };
    Ok(LoadedProfile {
        source: path.to_owned(),
        kind: profile.kind,
        backend,
    })
}

pub fn load_teacher(path: &Path) -> Result<LoadedProfile<Box<dyn TeacherBackend>>, String> {
    let text = read(path)?;
    let parse_table = |text: &str, path: &Path| -> Result<ScriptedTeacherTable, String> {
        toml::from_str(text).map_err(|e| format!("{}: {e}", path.display()))
    };
    let Some(profile) = parse_profile(path, &text)? else {
        return Ok(LoadedProfile {
            source: path.to_owned(),
            kind: ProfileKind::Scripted,
            backend: Box::new(ScriptedTeacher::new(parse_table(&text, path)?)),
        });
    };
    let backend: Box<dyn TeacherBackend> = match profile.kind {
        ProfileKind::Scripted => {
            let script = relative(path, &profile.script.ok_or("scripted profile needs `script`")?);
            Box::new(ScriptedTeacher::new(parse_table(&read(&script)?, &script)?))
        }
        ProfileKind::Remote => {
            let cfg = profile.remote.ok_or("remote profile needs a [remote] table")?;
            Box::new(RemoteTeacher::new(cfg).map_err(|e| e.to_string())?)
        }
        ProfileKind::Replay => return Err("teacher profiles cannot be `replay`; use `cac replay` on the run".into()),
    };
    Ok(LoadedProfile {
        source: path.to_owned(),
        kind: profile.kind,
        backend,
    })
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(match cfg.kind {
        EmbedderKind::Reference => Box::new(ReferenceEmbedder::new(cfg.dimension)),
        EmbedderKind::Remote => Box::new(RemoteEmbedder::new(cfg.clone()).map_err(|e| e.to_string())?),
    })
}
