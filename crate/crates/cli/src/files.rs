//! Directory walking and file naming helpers.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Files under `dir` (recursively) with extension `ext`, as paths relative
/// to `dir`, sorted.
pub fn walk(dir: &Path, ext: &str) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(dir.join(&rel))? {
            let entry = entry?;
            let path = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == ext) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walk_is_recursive_sorted_and_filtered() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir_all(d.path().join("b/c")).unwrap();
        for f in ["z.wav", "a.wav", "b/c/x.wav", "b/y.txt"] {
            fs::write(d.path().join(f), b"").unwrap();
        }
        let got = walk(d.path(), "wav").unwrap();
        let want: Vec<PathBuf> = ["a.wav", "b/c/x.wav", "z.wav"].iter().map(PathBuf::from).collect();
        assert_eq!(got, want);
        assert_eq!(stem(&want[1]), "x");
        assert_eq!(file_name(&want[1]), "x.wav");
    }
}
