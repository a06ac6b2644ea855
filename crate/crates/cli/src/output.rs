//! Artifact paths and atomic file writes.

use std::path::{Path, PathBuf};

use hullsplat::carve::{encode_volume, header_path, read_volume, VolumeHeader, VoxelGrid};
use hullsplat::splat::{encode_particles, read_particles, GaussianParticle};

use crate::error::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sibling temp path that keeps the extension, so format inference still works.
fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".tmp-{}-{name}", std::process::id()))
}

/// Runs `write` against a temporary sibling of `path`, then renames it into place.
pub fn write_atomically<E>(path: &Path, write: impl FnOnce(&Path) -> Result<(), E>) -> Result<(), CliError>
where
    CliError: From<E>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = temp_path(path);
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomically(path, |tmp| std::fs::write(tmp, bytes).map_err(io_err(tmp)))
}

pub fn frame_file(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("frame_{index:05}.{ext}"))
}

/// Volume binary plus its header sidecar.
pub fn write_volume(path: &Path, grid: &VoxelGrid) -> Result<(), CliError> {
    let header = toml::to_string(&VolumeHeader::from_spec(&grid.spec))
        .map_err(|e| CliError::InvalidConfig(format!("cannot serialize volume header: {e}")))?;
    write_bytes(&header_path(path), header.as_bytes())?;
    write_bytes(path, &encode_volume(grid))
}

pub fn load_volume(path: &Path) -> Result<VoxelGrid, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer: "carve",
        });
    }
    Ok(read_volume(path)?)
}

pub fn write_particles(path: &Path, particles: &[GaussianParticle]) -> Result<(), CliError> {
    write_bytes(path, &encode_particles(particles))
}

pub fn load_particles(path: &Path, producer: &'static str) -> Result<Vec<GaussianParticle>, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    Ok(read_particles(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.csv");
        write_bytes(&path, b"one").unwrap();
        write_bytes(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn failed_write_keeps_old_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_bytes(&path, b"old").unwrap();
        let r = write_atomically(&path, |_| Err(CliError::InvalidConfig("boom".into())));
        assert!(r.is_err());
        assert_eq!(std::fs::read(&path).unwrap(), b"old");
    }
}
