use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Gender {
    M,
    F,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Location {
    US,
    UK,
    RoW,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl std::str::FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "US" => Ok(Location::US),
            "UK" => Ok(Location::UK),
            "RoW" => Ok(Location::RoW),
            other => Err(Error::Config(format!(
                "unknown region `{other}` (expected US, UK or RoW)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Parody,
    Humor,
    Sarcasm,
    Mlm,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Parody => "parody",
            Task::Humor => "humor",
            Task::Sarcasm => "sarcasm",
            Task::Mlm => "mlm",
        }
    }
}

/// One social media post. `label` is 1 for parody (or for the positive class of
/// an auxiliary task) and is absent for plain MLM text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default)]
    pub account: String,
    #[serde(default)]
    pub gender: Gender,
    #[serde(default)]
    pub location: Location,
    pub task: Task,
}

impl Post {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label.unwrap_or(0))
    }
}

/// Checks the per-corpus invariants: unique ids, binary labels present on
/// labelled tasks, and an account key on every parody post.
pub fn validate_corpus(posts: &[Post]) -> Result<()> {
    let mut seen = HashSet::with_capacity(posts.len());
    for p in posts {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Data(format!("duplicate post id `{}`", p.id)));
        }
        match (p.task, p.label) {
            (Task::Mlm, _) => {}
            (_, None) => return Err(Error::Data(format!("post `{}` has no label", p.id))),
            (_, Some(l)) if l > 1 => {
                return Err(Error::Data(format!(
                    "post `{}` has non-binary label {l}",
                    p.id
                )))
            }
            _ => {}
        }
        if p.task == Task::Parody && p.account.is_empty() {
            return Err(Error::Data(format!(
                "parody post `{}` has no account",
                p.id
            )));
        }
    }
    Ok(())
}

/// Reads a JSON-lines corpus. Blank lines are skipped; unknown fields are ignored.
pub fn read_jsonl(path: &Path) -> Result<Vec<Post>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut posts = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        posts.push(post);
    }
    validate_corpus(&posts)?;
    Ok(posts)
}

pub fn write_jsonl(path: &Path, posts: &[Post]) -> Result<()> {
    let mut buf = Vec::new();
    for p in posts {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}

/// Writes any serialisable rows as JSON lines.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    crate::io::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults_and_ignores_unknown_fields() {
        let line =
            r#"{"id":"a1","text":"hi","label":1,"account":"x","task":"parody","retweets":3}"#;
        let p: Post = serde_json::from_str(line).unwrap();
        assert_eq!(p.gender, Gender::Unknown);
        assert_eq!(p.location, Location::Unknown);
        assert_eq!(p.label, Some(1));

        let line = r#"{"id":"a2","text":"hi","gender":"F","location":"RoW","task":"mlm"}"#;
        let p: Post = serde_json::from_str(line).unwrap();
        assert_eq!(
            (p.gender, p.location, p.label),
            (Gender::F, Location::RoW, None)
        );
    }

    #[test]
    fn validation_catches_contract_violations() {
        let ok = Post {
            id: "1".into(),
            text: "t".into(),
            label: Some(0),
            account: "acc".into(),
            gender: Gender::M,
            location: Location::US,
            task: Task::Parody,
        };
        assert!(validate_corpus(std::slice::from_ref(&ok)).is_ok());
        assert!(validate_corpus(&[ok.clone(), ok.clone()]).is_err());
        assert!(validate_corpus(&[Post {
            label: None,
            ..ok.clone()
        }])
        .is_err());
        assert!(validate_corpus(&[Post {
            label: Some(2),
            ..ok.clone()
        }])
        .is_err());
        assert!(validate_corpus(&[Post {
            account: String::new(),
            ..ok.clone()
        }])
        .is_err());
        assert!(validate_corpus(&[Post {
            label: None,
            task: Task::Mlm,
            ..ok
        }])
        .is_ok());
    }
}
