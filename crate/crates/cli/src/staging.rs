use anyhow::{bail, Context, Result};
use std::fs;
use std::path::{Path, PathBuf};

/// Output directory that is written under a hidden sibling and renamed into
/// place on [`Staged::commit`]. Dropping it uncommitted removes the partial
/// output.
pub struct Staged {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn new(dest: &Path) -> Result<Self> {
        if dest.exists() {
            let empty = dest.is_dir() && fs::read_dir(dest)?.next().is_none();
            if !empty {
                bail!("{} already exists and is not an empty directory", dest.display());
            }
        }
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = dest
            .file_name()
            .with_context(|| format!("{} has no final component", dest.display()))?
            .to_string_lossy();
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.tmp.join(rel)
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir(&self.dest)?;
        }
        fs::rename(&self.tmp, &self.dest)
            .with_context(|| format!("moving output into {}", self.dest.display()))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_and_drop_cleans() {
        let root = tempfile::tempdir().unwrap();
        let dest = root.path().join("run");
        let s = Staged::new(&dest).unwrap();
        s.write("a/b.txt", "x").unwrap();
        assert!(!dest.exists());
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(dest.join("a/b.txt")).unwrap(), "x");

        let other = root.path().join("aborted");
        {
            let s = Staged::new(&other).unwrap();
            s.write("f", "y").unwrap();
        }
        assert!(!other.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);
    }

    #[test]
    fn refuses_non_empty_destination() {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("f"), "1").unwrap();
        assert!(Staged::new(root.path()).is_err());
        let empty = root.path().join("empty");
        fs::create_dir(&empty).unwrap();
        Staged::new(&empty).unwrap().commit().unwrap();
    }
}
