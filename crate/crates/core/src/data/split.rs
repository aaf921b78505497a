use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{write_jsonl, Gender, Location, Post};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Person,
    Gender,
    Location,
    Random,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "person" => Ok(SplitMode::Person),
            "gender" => Ok(SplitMode::Gender),
            "location" => Ok(SplitMode::Location),
            "random" => Ok(SplitMode::Random),
            other => Err(Error::Config(format!(
                "unknown split mode `{other}` (expected person, gender, location or random)"
            ))),
        }
    }
}

/// Grouped split protocol. `direction` is `"M->F"`/`"F->M"` for gender mode
/// (train gender, then test gender) and the held-out region for location mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    #[serde(default = "default_train")]
    pub train: f64,
    #[serde(default = "default_dev")]
    pub dev: f64,
}

fn default_train() -> f64 {
    0.8
}

fn default_dev() -> f64 {
    0.1
}

/// What the test side of a split is constrained to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holdout {
    None,
    Gender(Gender),
    Region(Location),
}

impl SplitSpec {
    pub fn new(mode: SplitMode, direction: Option<&str>) -> Self {
        Self {
            mode,
            direction: direction.map(str::to_string),
            train: default_train(),
            dev: default_dev(),
        }
    }

    pub fn with_fractions(mut self, train: f64, dev: f64) -> Self {
        self.train = train;
        self.dev = dev;
        self
    }

    pub fn validate(&self) -> Result<Holdout> {
        if !(self.train > 0.0 && self.dev > 0.0 && self.train + self.dev <= 1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "split fractions train={} dev={} must be positive with train+dev <= 1",
                self.train, self.dev
            )));
        }
        match (self.mode, self.direction.as_deref()) {
            (SplitMode::Person | SplitMode::Random, None) => Ok(Holdout::None),
            (SplitMode::Person | SplitMode::Random, Some(d)) => Err(Error::Config(format!(
                "{:?} split takes no direction (got `{d}`)",
                self.mode
            ))),
            (SplitMode::Gender, Some(d)) => match d.replace('→', "->").as_str() {
                "M->F" => Ok(Holdout::Gender(Gender::F)),
                "F->M" => Ok(Holdout::Gender(Gender::M)),
                other => Err(Error::Config(format!(
                    "gender direction `{other}` must be M->F or F->M"
                ))),
            },
            (SplitMode::Location, Some(d)) => Ok(Holdout::Region(d.parse()?)),
            (mode, None) => Err(Error::Config(format!(
                "{mode:?} split requires a direction"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Post>,
    pub dev: Vec<Post>,
    pub test: Vec<Post>,
    /// Group key (account, or post id in random mode) to split.
    pub assignments: BTreeMap<String, SplitName>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[Post] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub seed: u64,
    pub counts: BTreeMap<SplitName, usize>,
    pub assignments: BTreeMap<String, SplitName>,
}

fn round_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).min(n)
}

/// Partitions `corpus` following `spec`. Train/dev/test are disjoint on post
/// ids; apart from random mode, no account ever spans two splits, so a real
/// account and its parody counterpart (sharing the same account key) stay together.
pub fn make_splits<R: Rng + ?Sized>(
    corpus: &[Post],
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<Splits> {
    let holdout = spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }

    let group_of = |p: &Post| -> Result<String> {
        if spec.mode == SplitMode::Random {
            return Ok(p.id.clone());
        }
        if p.account.is_empty() {
            return Err(Error::Data(format!(
                "post `{}` lacks the account key",
                p.id
            )));
        }
        Ok(p.account.clone())
    };
    let in_test = |p: &Post| -> Result<bool> {
        match holdout {
            Holdout::None => Ok(false),
            Holdout::Gender(g) => match p.gender {
                Gender::Unknown => Err(Error::Data(format!("post `{}` lacks a gender", p.id))),
                pg => Ok(pg == g),
            },
            Holdout::Region(r) => match p.location {
                Location::Unknown => Err(Error::Data(format!("post `{}` lacks a location", p.id))),
                pl => Ok(pl == r),
            },
        }
    };

    let mut assignments = BTreeMap::new();
    let mut pool: BTreeSet<String> = BTreeSet::new();
    for p in corpus {
        let g = group_of(p)?;
        if in_test(p)? {
            assignments.insert(g, SplitName::Test);
        } else {
            pool.insert(g);
        }
    }
    if let Some(g) = pool.iter().find(|g| assignments.contains_key(*g)) {
        return Err(Error::Data(format!(
            "account `{g}` has posts on both sides of the held-out attribute"
        )));
    }

    let mut groups: Vec<String> = pool.into_iter().collect();
    groups.shuffle(rng);
    let n = groups.len();
    let (n_train, n_dev) = match holdout {
        Holdout::None => {
            let n_train = round_count(n, spec.train);
            (n_train, round_count(n, spec.dev).min(n - n_train))
        }
        _ => {
            let n_dev = round_count(n, spec.dev / (spec.train + spec.dev));
            (n - n_dev, n_dev)
        }
    };
    for (i, g) in groups.into_iter().enumerate() {
        let which = if i < n_train {
            SplitName::Train
        } else if i < n_train + n_dev {
            SplitName::Dev
        } else {
            SplitName::Test
        };
        assignments.insert(g, which);
    }

    let mut splits = Splits::default();
    for p in corpus {
        let dest = match assignments[&group_of(p)?] {
            SplitName::Train => &mut splits.train,
            SplitName::Dev => &mut splits.dev,
            SplitName::Test => &mut splits.test,
        };
        dest.push(p.clone());
    }
    for (name, part) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        if part.is_empty() {
            return Err(Error::Data(format!(
                "{:?} split leaves the {name} set empty",
                spec.mode
            )));
        }
    }
    splits.assignments = assignments;
    Ok(splits)
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
pub fn write_splits(
    dir: &Path,
    splits: &Splits,
    spec: &SplitSpec,
    seed: u64,
) -> Result<SplitManifest> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    write_jsonl(&dir.join("dev.jsonl"), &splits.dev)?;
    write_jsonl(&dir.join("test.jsonl"), &splits.test)?;
    let manifest = SplitManifest {
        spec: spec.clone(),
        seed,
        counts: [
            (SplitName::Train, splits.train.len()),
            (SplitName::Dev, splits.dev.len()),
            (SplitName::Test, splits.test.len()),
        ]
        .into_iter()
        .collect(),
        assignments: splits.assignments.clone(),
    };
    crate::io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::Task;
    use crate::rng::stream;

    fn post(id: usize, account: &str, gender: Gender, location: Location) -> Post {
        Post {
            id: format!("p{id}"),
            text: "x".into(),
            label: Some((id % 2) as u8),
            account: account.into(),
            gender,
            location,
            task: Task::Parody,
        }
    }

    fn corpus() -> Vec<Post> {
        (0..120)
            .map(|i| {
                let acc = i % 12;
                let g = if acc % 2 == 0 { Gender::M } else { Gender::F };
                let l = [Location::US, Location::UK, Location::RoW][acc % 3];
                post(i, &format!("acc{acc}"), g, l)
            })
            .collect()
    }

    #[test]
    fn direction_rules() {
        assert!(SplitSpec::new(SplitMode::Gender, None).validate().is_err());
        assert!(SplitSpec::new(SplitMode::Person, Some("M->F"))
            .validate()
            .is_err());
        assert_eq!(
            SplitSpec::new(SplitMode::Gender, Some("M→F"))
                .validate()
                .unwrap(),
            Holdout::Gender(Gender::F)
        );
        assert!(SplitSpec::new(SplitMode::Location, Some("Mars"))
            .validate()
            .is_err());
        assert!(SplitSpec::new(SplitMode::Person, None)
            .with_fractions(0.9, 0.2)
            .validate()
            .is_err());
        assert!(SplitSpec::new(SplitMode::Person, None)
            .with_fractions(0.0, 0.2)
            .validate()
            .is_err());
        assert_eq!(
            "location".parse::<SplitMode>().unwrap(),
            SplitMode::Location
        );
        assert!("people".parse::<SplitMode>().is_err());
    }

    #[test]
    fn person_split_keeps_accounts_together() {
        let s = make_splits(
            &corpus(),
            &SplitSpec::new(SplitMode::Person, None),
            &mut stream(1, "data"),
        )
        .unwrap();
        let accounts = |ps: &[Post]| {
            ps.iter()
                .map(|p| p.account.clone())
                .collect::<BTreeSet<_>>()
        };
        let (a, b, c) = (accounts(&s.train), accounts(&s.dev), accounts(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 120);
    }

    #[test]
    fn gender_and_location_tests_are_pure() {
        let s = make_splits(
            &corpus(),
            &SplitSpec::new(SplitMode::Gender, Some("M->F")),
            &mut stream(2, "data"),
        )
        .unwrap();
        assert!(s.test.iter().all(|p| p.gender == Gender::F));
        assert!(s.train.iter().chain(&s.dev).all(|p| p.gender == Gender::M));

        let s = make_splits(
            &corpus(),
            &SplitSpec::new(SplitMode::Location, Some("UK")),
            &mut stream(2, "data"),
        )
        .unwrap();
        assert!(s.test.iter().all(|p| p.location == Location::UK));
        assert!(s
            .train
            .iter()
            .chain(&s.dev)
            .all(|p| p.location != Location::UK));
    }

    #[test]
    fn missing_attribute_is_an_error() {
        let mut c = corpus();
        c[5].gender = Gender::Unknown;
        let err = make_splits(
            &c,
            &SplitSpec::new(SplitMode::Gender, Some("F->M")),
            &mut stream(0, "d"),
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn empty_side_is_an_error() {
        let c: Vec<Post> = corpus()
            .into_iter()
            .filter(|p| p.gender == Gender::M)
            .collect();
        let err = make_splits(
            &c,
            &SplitSpec::new(SplitMode::Gender, Some("M->F")),
            &mut stream(0, "d"),
        );
        assert!(err.is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let spec = SplitSpec::new(SplitMode::Person, None);
        let a = make_splits(&corpus(), &spec, &mut stream(9, "data")).unwrap();
        let b = make_splits(&corpus(), &spec, &mut stream(9, "data")).unwrap();
        assert_eq!(a, b);
    }
}
