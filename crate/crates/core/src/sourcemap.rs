//! Source files for the code preview, confined to a user-supplied root.

use std::io::Read;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

/// Files larger than this are not served.
pub const MAX_SOURCE_BYTES: u64 = 4 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("path escapes the source root")]
    EscapesRoot,
    #[error("file not found")]
    NotFound,
    #[error("not a regular file")]
    NotAFile,
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("file is larger than {MAX_SOURCE_BYTES} bytes")]
    TooLarge,
    #[error("read failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SourceRoot {
    root_path: PathBuf,
    allow_absolute: bool,
    strip_prefix: Option<String>,
}

impl SourceRoot {
    /// `root_path` must exist; it is canonicalized here.
    pub fn new(root_path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(SourceRoot {
            root_path: root_path.as_ref().canonicalize()?,
            allow_absolute: false,
            strip_prefix: None,
        })
    }

    /// Accept absolute paths that point inside the root.
    pub fn allow_absolute(mut self, allow: bool) -> Self {
        self.allow_absolute = allow;
        self
    }

    /// Remove `prefix` from recorded paths before resolving them.
    pub fn strip_prefix(mut self, prefix: Option<String>) -> Self {
        self.strip_prefix = prefix.filter(|p| !p.is_empty());
        self
    }

    pub fn root_path(&self) -> &Path {
        &self.root_path
    }

    /// Maps a file name recorded in a frame to a canonical path inside the
    /// root.
    pub fn resolve(&self, file: &str) -> Result<PathBuf, ResolveError> {
        if file.is_empty() || file.contains('\0') {
            return Err(ResolveError::NotFound);
        }
        let file = match &self.strip_prefix {
            Some(prefix) => file.strip_prefix(prefix.as_str()).unwrap_or(file),
            None => file,
        };
        let path = Path::new(file);
        let relative = if path.has_root() {
            if !self.allow_absolute {
                return Err(ResolveError::EscapesRoot);
            }
            let normalized = normalize(path).ok_or(ResolveError::EscapesRoot)?;
            normalized
                .strip_prefix(&self.root_path)
                .map_err(|_| ResolveError::EscapesRoot)?
                .to_path_buf()
        } else {
            normalize(path).ok_or(ResolveError::EscapesRoot)?
        };
        let candidate = self.root_path.join(relative);
        let canonical = candidate.canonicalize().map_err(|_| ResolveError::NotFound)?;
        // Symlinks inside the root may still point elsewhere.
        if !canonical.starts_with(&self.root_path) {
            return Err(ResolveError::EscapesRoot);
        }
        if !canonical.is_file() {
            return Err(ResolveError::NotAFile);
        }
        Ok(canonical)
    }
}

/// Lexical normalization. `None` if `..` climbs above the start.
fn normalize(path: &Path) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    let mut depth = 0usize;
    for c in path.components() {
        match c {
            Component::Prefix(_) => return None,
            Component::RootDir => out.push(Component::RootDir),
            Component::CurDir => {}
            Component::ParentDir => {
                if depth == 0 {
                    return None;
                }
                out.pop();
                depth -= 1;
            }
            Component::Normal(part) => {
                out.push(part);
                depth += 1;
            }
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SourceText {
    pub lines: Vec<String>,
    pub line_count: usize,
    /// Invalid UTF-8 was replaced.
    pub lossy: bool,
}

/// Reads a resolved file, refusing anything over [`MAX_SOURCE_BYTES`].
pub fn fetch_bytes(path: &Path) -> Result<Vec<u8>, FetchError> {
    let file = std::fs::File::open(path)?;
    if file.metadata()?.len() > MAX_SOURCE_BYTES {
        return Err(FetchError::TooLarge);
    }
    let mut bytes = Vec::new();
    file.take(MAX_SOURCE_BYTES + 1).read_to_end(&mut bytes)?;
    if bytes.len() as u64 > MAX_SOURCE_BYTES {
        return Err(FetchError::TooLarge);
    }
    Ok(bytes)
}

/// Reads a resolved source file as lines.
pub fn fetch(path: &Path) -> Result<SourceText, FetchError> {
    let bytes = fetch_bytes(path)?;
    let (text, lossy) = match String::from_utf8(bytes) {
        Ok(s) => (s, false),
        Err(e) => (String::from_utf8_lossy(e.as_bytes()).into_owned(), true),
    };
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    Ok(SourceText {
        line_count: lines.len(),
        lines,
        lossy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root() -> (tempfile::TempDir, SourceRoot) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("main.c"), "int main() {\n  return 0;\n}\n").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let root = SourceRoot::new(dir.path()).unwrap();
        (dir, root)
    }

    #[test]
    fn resolves_inside_root() {
        let (_d, root) = root();
        assert_eq!(root.resolve("main.c").unwrap(), root.root_path().join("main.c"));
        assert_eq!(root.resolve("./sub/../main.c").unwrap(), root.root_path().join("main.c"));
    }

    #[test]
    fn rejects_traversal() {
        let (_d, root) = root();
        assert_eq!(root.resolve("../../etc/passwd"), Err(ResolveError::EscapesRoot));
        assert_eq!(root.resolve("sub/../../x"), Err(ResolveError::EscapesRoot));
        assert_eq!(root.resolve("/etc/passwd"), Err(ResolveError::EscapesRoot));
    }

    #[test]
    fn missing_and_directories() {
        let (_d, root) = root();
        assert_eq!(root.resolve("missing.c"), Err(ResolveError::NotFound));
        assert_eq!(root.resolve("sub"), Err(ResolveError::NotAFile));
    }

    #[test]
    fn absolute_paths_inside_root_when_allowed() {
        let (_d, root) = root();
        let abs = root.root_path().join("main.c");
        let root = root.allow_absolute(true);
        assert_eq!(root.resolve(abs.to_str().unwrap()).unwrap(), abs);
        assert_eq!(root.resolve("/etc/passwd"), Err(ResolveError::EscapesRoot));
    }

    #[test]
    fn strip_prefix_maps_recorded_paths() {
        let (_d, root) = root();
        let root = root.strip_prefix(Some("/build/project/".into()));
        assert!(root.resolve("/build/project/main.c").is_ok());
    }

    #[cfg(unix)]
    #[test]
    fn symlink_out_of_root_is_rejected() {
        let (d, root) = root();
        let outside = tempfile::tempdir().unwrap();
        std::fs::write(outside.path().join("secret"), "x").unwrap();
        std::os::unix::fs::symlink(outside.path().join("secret"), d.path().join("link")).unwrap();
        assert_eq!(root.resolve("link"), Err(ResolveError::EscapesRoot));
    }

    #[test]
    fn fetch_splits_lines() {
        let (_d, root) = root();
        let text = fetch(&root.resolve("main.c").unwrap()).unwrap();
        assert_eq!(text.line_count, 3);
        assert_eq!(text.lines[1], "  return 0;");
    }

    #[test]
    fn fetch_empty_and_oversize() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("empty"), "").unwrap();
        assert_eq!(fetch(&dir.path().join("empty")).unwrap().line_count, 0);
        std::fs::write(dir.path().join("big"), vec![b'a'; 5 << 20]).unwrap();
        assert!(matches!(fetch(&dir.path().join("big")), Err(FetchError::TooLarge)));
    }

    #[test]
    fn fetch_flags_invalid_utf8() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bin"), b"ok\n\xff\xfe\n").unwrap();
        let text = fetch(&dir.path().join("bin")).unwrap();
        assert!(text.lossy);
        assert_eq!(text.line_count, 2);
    }
}
