use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{parse_statements, Statement, Vocab, VocabBuilder};
use crate::error::{Error, Result};

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Train/valid/test statements over one shared vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Statement>,
    pub valid: Vec<Statement>,
    pub test: Vec<Statement>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Statement] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Statement> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`, in that
    /// order, into one vocabulary. A missing `valid.txt` yields an empty split.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut builder = VocabBuilder::new();
        let mut splits = Vec::with_capacity(3);
        for name in SPLIT_FILES {
            let path = dir.join(name);
            if name == "valid.txt" && !path.exists() {
                splits.push(Vec::new());
                continue;
            }
            splits.push(parse_statements(&path, &mut builder)?);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            vocab: builder.finish(),
            train,
            valid,
            test,
        })
    }

    /// Hex SHA-256 over the split files present in `dir`.
    pub fn hash_dir(dir: &Path) -> Result<String> {
        let mut hasher = Sha256::new();
        for name in SPLIT_FILES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hasher.update(name.as_bytes());
            hasher.update(&bytes);
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Hex SHA-256 of the dataset in its on-disk form.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, split) in SPLIT_FILES.iter().zip([&self.train, &self.valid, &self.test]) {
            hasher.update(name.as_bytes());
            for s in split {
                hasher.update(crate::data::format_statement(s, &self.vocab).as_bytes());
                hasher.update(b"\n");
            }
        }
        format!("{:x}", hasher.finalize())
    }
}
