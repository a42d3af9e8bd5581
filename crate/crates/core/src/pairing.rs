//! Image roster ingestion and the image × case-fact pair grid.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{CaseFact, Split};
use crate::digest::seeded_key;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

/// Intersectional race × gender group. Declaration order is report order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Group {
    WM,
    BM,
    WF,
    BF,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::WM, Group::BM, Group::WF, Group::BF];

    pub fn from_parts(race: Race, gender: Gender) -> Option<Group> {
        match (race, gender) {
            (Race::White, Gender::Male) => Some(Group::WM),
            (Race::Black, Gender::Male) => Some(Group::BM),
            (Race::White, Gender::Female) => Some(Group::WF),
            (Race::Black, Gender::Female) => Some(Group::BF),
            (Race::Other, _) => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::WM => "WM",
            Group::BM => "BM",
            Group::WF => "WF",
            Group::BF => "BF",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WM" => Ok(Group::WM),
            "BM" => Ok(Group::BM),
            "WF" => Ok(Group::WF),
            "BF" => Ok(Group::BF),
            other => Err(Error::Config(format!("unknown group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub uri: String,
    pub race: Race,
    pub gender: Gender,
    #[serde(default)]
    pub offense_types: Vec<String>,
}

impl ImageRecord {
    pub fn group(&self) -> Option<Group> {
        Group::from_parts(self.race, self.gender)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub image_id: String,
    pub case_id: String,
    pub group: Group,
    pub split: Split,
}

fn parse_race(value: &str) -> Race {
    match value.trim().to_ascii_lowercase().as_str() {
        "white" | "w" => Race::White,
        "black" | "b" => Race::Black,
        _ => Race::Other,
    }
}

fn parse_gender(value: &str) -> Option<Gender> {
    match value.trim().to_ascii_lowercase().as_str() {
        "male" | "m" => Some(Gender::Male),
        "female" | "f" => Some(Gender::Female),
        _ => None,
    }
}

/// Roster plus per-group retention counts.
#[derive(Debug, Clone, Default)]
pub struct Roster {
    pub records: Vec<ImageRecord>,
    pub per_group: BTreeMap<Group, usize>,
    pub skipped: usize,
}

/// Loads a roster CSV (`image_id,uri,race,gender,offense_types`, offense
/// types `;`-separated) keeping only records whose group is in `filter`.
/// Rows with an unresolvable race or gender are skipped with a warning.
pub fn load_roster(path: &Path, filter: &BTreeSet<Group>) -> Result<Roster> {
    let roster_err = |reason: String| Error::Roster {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| roster_err(e.to_string()))?;

    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        // An empty file has no header row; treat it as an empty roster.
        Err(e) if is_empty_input(&e) => return Ok(Roster::default()),
        Err(e) => return Err(roster_err(e.to_string())),
    };
    if headers.is_empty() {
        return Ok(Roster::default());
    }
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = column("image_id").ok_or_else(|| roster_err("missing `image_id` column".into()))?;
    let race_col = column("race").ok_or_else(|| roster_err("missing `race` column".into()))?;
    let gender_col =
        column("gender").ok_or_else(|| roster_err("missing `gender` column".into()))?;
    let uri_col = column("uri");
    let offense_col = column("offense_types");

    let mut roster = Roster::default();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| roster_err(e.to_string()))?;
        let field = |idx: Option<usize>| idx.and_then(|i| record.get(i)).unwrap_or("");
        let image_id = field(Some(id_col)).to_string();
        if image_id.is_empty() {
            return Err(roster_err(format!("row {}: empty image_id", row + 2)));
        }
        if !seen.insert(image_id.clone()) {
            return Err(roster_err(format!("duplicate image_id `{image_id}`")));
        }
        let race = parse_race(field(Some(race_col)));
        let gender = parse_gender(field(Some(gender_col)));
        let group = gender.and_then(|g| Group::from_parts(race, g));
        let (Some(gender), Some(group)) = (gender, group) else {
            warn!(
                image_id,
                race = field(Some(race_col)),
                gender = field(Some(gender_col)),
                "skipping roster record outside the intersectional groups"
            );
            roster.skipped += 1;
            continue;
        };
        if !filter.contains(&group) {
            continue;
        }
        let offense_types = field(offense_col)
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        *roster.per_group.entry(group).or_default() += 1;
        roster.records.push(ImageRecord {
            image_id,
            uri: field(uri_col).to_string(),
            race,
            gender,
            offense_types,
        });
    }
    Ok(roster)
}

fn is_empty_input(err: &csv::Error) -> bool {
    matches!(err.kind(), csv::ErrorKind::Io(e) if e.kind() == std::io::ErrorKind::UnexpectedEof)
}

/// The full pair grid, enumerated on demand. Index `i·M + j` is image `i`
/// with fact `j` (roster order major, fact order minor).
#[derive(Debug, Clone, Copy)]
pub struct PairSet<'a> {
    roster: &'a [ImageRecord],
    facts: &'a [CaseFact],
}

pub fn generate_pairs<'a>(roster: &'a [ImageRecord], facts: &'a [CaseFact]) -> Result<PairSet<'a>> {
    if roster.is_empty() || facts.is_empty() {
        return Err(Error::Input("pairing needs a non-empty roster and fact list".into()));
    }
    for image in roster {
        if image.group().is_none() {
            return Err(Error::Input(format!(
                "image `{}` has no intersectional group",
                image.image_id
            )));
        }
    }
    for fact in facts {
        if fact.split.is_none() {
            return Err(Error::Input(format!(
                "fact `{}` has no split assigned",
                fact.case_id
            )));
        }
    }
    Ok(PairSet { roster, facts })
}

impl<'a> PairSet<'a> {
    pub fn len(&self) -> usize {
        self.roster.len() * self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Option<Pair> {
        if index >= self.len() {
            return None;
        }
        let image = &self.roster[index / self.facts.len()];
        let fact = &self.facts[index % self.facts.len()];
        Some(make_pair(image, fact))
    }

    pub fn iter(&self) -> impl Iterator<Item = Pair> + 'a {
        let facts = self.facts;
        self.roster
            .iter()
            .flat_map(move |image| facts.iter().map(move |fact| make_pair(image, fact)))
    }

    /// Pairs with at most `limit` images per fact. Images are chosen by
    /// seeded key over `(case_id, image_id)`; output keeps grid order.
    pub fn iter_limited(&self, limit: usize, seed: u64) -> Vec<Pair> {
        if limit >= self.roster.len() {
            return self.iter().collect();
        }
        let chosen: Vec<HashSet<usize>> = self
            .facts
            .iter()
            .map(|fact| {
                let mut keyed: Vec<(u64, usize)> = self
                    .roster
                    .iter()
                    .enumerate()
                    .map(|(i, img)| {
                        (seeded_key(seed, &format!("{}|{}", fact.case_id, img.image_id)), i)
                    })
                    .collect();
                keyed.sort_unstable();
                keyed.into_iter().take(limit).map(|(_, i)| i).collect()
            })
            .collect();
        let mut out = Vec::with_capacity(limit * self.facts.len());
        for (i, image) in self.roster.iter().enumerate() {
            for (j, fact) in self.facts.iter().enumerate() {
                if chosen[j].contains(&i) {
                    out.push(make_pair(image, fact));
                }
            }
        }
        out
    }
}

fn make_pair(image: &ImageRecord, fact: &CaseFact) -> Pair {
    Pair {
        image_id: image.image_id.clone(),
        case_id: fact.case_id.clone(),
        // Both checked in generate_pairs.
        group: image.group().expect("grouped image"),
        split: fact.split.expect("split assigned"),
    }
}

/// Picks one image for a training fact, uniformly, from an RNG seeded by
/// `(seed, case_id)`.
pub fn sample_training_pair(fact: &CaseFact, roster: &[ImageRecord], seed: u64) -> Result<Pair> {
    if roster.is_empty() {
        return Err(Error::Sampling("roster is empty".into()));
    }
    if fact.split != Some(Split::Train) {
        return Err(Error::Sampling(format!(
            "fact `{}` is not in the training split",
            fact.case_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_key(seed, &fact.case_id));
    let image = &roster[rng.random_range(0..roster.len())];
    if image.group().is_none() {
        return Err(Error::Sampling(format!(
            "image `{}` has no intersectional group",
            image.image_id
        )));
    }
    Ok(make_pair(image, fact))
}
