//! Dataset manifest: one case per line, tab-separated, UTF-8.
//!
//! ```text
//! # path    label    seed    group
//! case_000.nii    1    1234567    trainval
//! case_001.nii    0    -    test
//! ```
//!
//! `path` is relative to the manifest's directory, `label` is 0 (no embolism)
//! or 1, `seed` is the phantom seed or `-` for acquired data, and the optional
//! `group` is `trainval` (default) or `test`. Lines starting with `#` and
//! blank lines are ignored.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(Error::Argument(format!(
                "label must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    TrainVal,
    Test,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::TrainVal => "trainval",
            Group::Test => "test",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainval" => Ok(Group::TrainVal),
            "test" => Ok(Group::Test),
            other => Err(Error::Format(format!("unknown group {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub path: PathBuf,
    pub label: Label,
    pub seed: Option<u64>,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    /// Directory case paths are relative to.
    pub base_dir: PathBuf,
    pub cases: Vec<Case>,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>, cases: Vec<Case>) -> Result<Self> {
        let m = DatasetManifest {
            base_dir: base_dir.into(),
            cases,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(&c.path) {
                return Err(Error::Config(format!(
                    "duplicate manifest path {}",
                    c.path.display()
                )));
            }
        }
        for label in [Label::Negative, Label::Positive] {
            if !self
                .cases
                .iter()
                .any(|c| c.group == Group::TrainVal && c.label == label)
            {
                return Err(Error::Config(format!(
                    "manifest has no trainval case with label {}",
                    label.as_u8()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, case: &Case) -> PathBuf {
        self.base_dir.join(&case.path)
    }

    /// Indices of cases in `group`, in manifest order.
    pub fn indices(&self, group: Group) -> Vec<usize> {
        (0..self.cases.len())
            .filter(|&i| self.cases[i].group == group)
            .collect()
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cases = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| {
                Error::Format(format!("manifest line {}: {what}: {line:?}", lineno + 1))
            };
            if !(3..=4).contains(&fields.len()) {
                return Err(bad("expected 3 or 4 tab-separated fields"));
            }
            let label = match fields[1] {
                "0" => Label::Negative,
                "1" => Label::Positive,
                _ => return Err(bad("label must be 0 or 1")),
            };
            let seed = match fields[2] {
                "-" => None,
                s => Some(s.parse::<u64>().map_err(|_| bad("bad seed"))?),
            };
            let group = match fields.get(3) {
                Some(g) => g
                    .parse()
                    .map_err(|_| bad("group must be trainval or test"))?,
                None => Group::TrainVal,
            };
            cases.push(Case {
                path: PathBuf::from(fields[0]),
                label,
                seed,
                group,
            });
        }
        DatasetManifest::new(base_dir, cases)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# path\tlabel\tseed\tgroup\n");
        for c in &self.cases {
            let seed = c.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.path.display(),
                c.label.as_u8(),
                seed,
                c.group
            ));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::parse(&text, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text =
            "# comment\ncase_a.nii\t1\t42\ncase_b.nii\t0\t-\ttrainval\n\ncase_c.nii\t0\t7\ttest\n";
        let m = DatasetManifest::parse(text, "/data").unwrap();
        assert_eq!(m.cases.len(), 3);
        assert_eq!(m.cases[0].label, Label::Positive);
        assert_eq!(m.cases[0].group, Group::TrainVal);
        assert_eq!(m.cases[1].seed, None);
        assert_eq!(m.cases[2].group, Group::Test);
        assert_eq!(m.resolve(&m.cases[0]), PathBuf::from("/data/case_a.nii"));
        let again = DatasetManifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_invalid_manifests() {
        assert!(DatasetManifest::parse("a\t2\t1\n", ".").is_err());
        assert!(DatasetManifest::parse("a\t1\t1\na\t0\t1\n", ".").is_err());
        assert!(DatasetManifest::parse("a\t1\t1\nb\t1\t1\n", ".").is_err());
        assert!(DatasetManifest::parse("a\t1\t1\nb\t0\t1\tvalidation\n", ".").is_err());
        assert!(DatasetManifest::parse("a 1 1\n", ".").is_err());
    }
}
