//! Tab-separated dataset manifests: `split  cloud  labels  [instances]`.
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use squeezeseg::io;
use squeezeseg::projection::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub split: Split,
    pub cloud: PathBuf,
    pub labels: PathBuf,
    pub instances: Option<PathBuf>,
}

/// One frame as loaded from disk.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub instances: Option<Vec<u16>>,
}

impl Entry {
    pub fn load(&self) -> Result<Sample, squeezeseg::Error> {
        let labels = io::read_labels(&self.labels)?;
        let cloud = io::read_cloud(&self.cloud)?.with_labels(labels)?;
        let instances = match &self.instances {
            Some(p) => {
                let ids = io::read_instances(p)?;
                if ids.len() != cloud.len() {
                    return Err(squeezeseg::Error::Format(format!(
                        "{}: {} instance ids for {} points",
                        p.display(),
                        ids.len(),
                        cloud.len()
                    )));
                }
                Some(ids)
            }
            None => None,
        };
        Ok(Sample { cloud, instances })
    }

    /// File stem of the cloud, used to name per-frame outputs.
    pub fn stem(&self) -> String {
        self.cloud
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "frame".into())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

fn err(path: &Path, line: usize, msg: impl fmt::Display) -> squeezeseg::Error {
    squeezeseg::Error::Format(format!("{}:{line}: {msg}", path.display()))
}

/// Canonical directory of `path`, so that entries stay valid when a
/// manifest is written elsewhere.
fn absolute_dir(path: &Path) -> PathBuf {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf())
}

fn file_len(p: &Path) -> Result<u64, String> {
    std::fs::metadata(p).map(|m| m.len()).map_err(|e| format!("{}: {e}", p.display()))
}

impl Manifest {
    /// Parses and checks that every file exists with matching point counts.
    pub fn load(path: &Path) -> Result<Manifest, squeezeseg::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| squeezeseg::Error::Format(format!("{}: {e}", path.display())))?;
        let base = absolute_dir(path);
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let n = n + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(err(path, n, format!("expected 3 or 4 tab-separated columns, got {}", cols.len())));
            }
            let split: Split = cols[0].parse().map_err(|e| err(path, n, e))?;
            let resolve = |c: &str| base.join(c);
            let e = Entry {
                split,
                cloud: resolve(cols[1]),
                labels: resolve(cols[2]),
                instances: cols.get(3).map(|c| resolve(c)),
            };
            let points = file_len(&e.cloud).map_err(|m| err(path, n, m))?;
            if points % 16 != 0 {
                return Err(err(path, n, "cloud size is not a multiple of 16 bytes"));
            }
            let points = points / 16;
            let labels = file_len(&e.labels).map_err(|m| err(path, n, m))?;
            if labels != points {
                return Err(err(path, n, format!("{points} points but {labels} labels")));
            }
            if let Some(p) = &e.instances {
                let ids = file_len(p).map_err(|m| err(path, n, m))?;
                if ids != 2 * points {
                    return Err(err(path, n, format!("{points} points but {} instance ids", ids / 2)));
                }
            }
            entries.push(e);
        }
        Ok(Manifest { entries })
    }

    /// Writes paths relative to `dir` when they live under it.
    pub fn to_text(&self, dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(e.split.name());
            s.push('\t');
            s.push_str(&rel(&e.cloud));
            s.push('\t');
            s.push_str(&rel(&e.labels));
            if let Some(i) = &e.instances {
                s.push('\t');
                s.push_str(&rel(i));
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text(&absolute_dir(path)))
    }

    pub fn select(&self, split: Option<Split>) -> Vec<&Entry> {
        self.entries.iter().filter(|e| split.map_or(true, |s| e.split == s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use squeezeseg::projection::Point;

    fn write_frame(dir: &Path, name: &str, n: usize) {
        let cloud = PointCloud::new(vec![Point::new(5.0, 0.0, 0.0, 0.1); n]).unwrap();
        io::write_cloud(dir.join(format!("{name}.bin")), &cloud).unwrap();
        io::write_labels(dir.join(format!("{name}.labels")), &vec![1; n]).unwrap();
    }

    #[test]
    fn round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        write_frame(dir.path(), "a", 3);
        write_frame(dir.path(), "b", 2);
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "# frames\ntrain\ta.bin\ta.labels\nval\tb.bin\tb.labels\n").unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.select(Some(Split::Val)).len(), 1);
        assert_eq!(m.entries[0].load().unwrap().cloud.len(), 3);
        let canon = std::fs::canonicalize(dir.path()).unwrap();
        assert_eq!(m.to_text(&canon), "train\ta.bin\ta.labels\nval\tb.bin\tb.labels\n");

        std::fs::write(&path, "train\ta.bin\tb.labels\n").unwrap();
        assert!(Manifest::load(&path).is_err());
        std::fs::write(&path, "test\ta.bin\ta.labels\n").unwrap();
        assert!(Manifest::load(&path).is_err());
        std::fs::write(&path, "train\tmissing.bin\ta.labels\n").unwrap();
        assert!(Manifest::load(&path).is_err());
    }
}
