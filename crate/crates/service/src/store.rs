use std::fs;
use std::path::{Path, PathBuf};

use flowtrace_core::dataio::{read_session, write_session, TraceStorage};

use crate::error::ServiceError;
use crate::live::{LiveSession, LiveState};

/// On-disk layout: `{dir}/{id}.json` holds the session document (readable by
/// the batch tools), `{dir}/{id}_traces/` its trial traces and
/// `{dir}/live/{id}.json` the protocol position.
#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("live"))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn session_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn state_path(&self, id: &str) -> PathBuf {
        self.dir.join("live").join(format!("{id}.json"))
    }

    pub fn save(&self, session: &LiveSession) -> Result<(), ServiceError> {
        write_session(&session.data, &self.session_path(session.id()), TraceStorage::ReferencedAppend)?;
        let bytes = serde_json::to_vec_pretty(&session.state)?;
        let tmp = self.dir.join("live").join(format!(".{}.tmp", session.id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.state_path(session.id()))?;
        Ok(())
    }

    /// Every session with a saved protocol position.
    pub fn load_all(&self) -> Result<Vec<LiveSession>, ServiceError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.dir.join("live"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                let state: LiveState = serde_json::from_slice(&fs::read(&p)?)?;
                let data = read_session(&self.session_path(&state.id))?;
                Ok(LiveSession::restore(state, data)?)
            })
            .collect()
    }
}
