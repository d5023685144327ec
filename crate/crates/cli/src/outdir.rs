use std::fs;
use std::path::{Path, PathBuf};

use qsat_core::Result;

fn occupied(dir: &Path) -> bool {
    dir.exists() && fs::read_dir(dir).map_or(true, |mut entries| entries.next().is_some())
}

/// Directory to write run outputs into: `requested` unless it already holds
/// something, in which case the first free `requested-N`. `force` reuses
/// `requested` as is.
pub fn prepare(requested: &Path, force: bool) -> Result<PathBuf> {
    let mut dir = requested.to_path_buf();
    if !force && occupied(&dir) {
        let base = requested
            .as_os_str()
            .to_string_lossy()
            .trim_end_matches('/')
            .to_string();
        dir = (1..)
            .map(|i| PathBuf::from(format!("{base}-{i}")))
            .find(|p| !occupied(p))
            .expect("unbounded suffix search");
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}
