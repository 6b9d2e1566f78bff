//! Fragment records, locomotion scores, manifests and cow-disjoint splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = [
    "fragment_id",
    "cow_id",
    "view",
    "modality",
    "score",
    "clip_path",
];

/// Expert gait rating, 1 (healthy) to 5 (most severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LocomotionScore(u8);

impl LocomotionScore {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=5).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!(
                "locomotion score must be 1..=5, got {value}"
            )))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (1..=5).map(Self)
    }
}

impl TryFrom<u8> for LocomotionScore {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LocomotionScore> for u8 {
    fn from(s: LocomotionScore) -> u8 {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Healthy,
    Lame,
}

impl BinaryLabel {
    pub fn is_lame(self) -> bool {
        self == BinaryLabel::Lame
    }

    /// Class index used by the classifier: 0 healthy, 1 lame.
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Score 1 is healthy, 2 through 5 are lame.
pub fn binary_label(score: LocomotionScore) -> BinaryLabel {
    if score.value() == 1 {
        BinaryLabel::Healthy
    } else {
        BinaryLabel::Lame
    }
}

macro_rules! closed_set {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

closed_set!(View { Side => "side", Top => "top" });
closed_set!(Modality { Rgb => "rgb", Depth => "depth" });

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FragmentRecord {
    pub fragment_id: String,
    pub cow_id: String,
    pub view: View,
    pub modality: Modality,
    pub score: LocomotionScore,
    /// Fragment directory, relative to the clip root. The modality selects
    /// the `rgb/` or `depth/` subdirectory inside it.
    pub clip_path: String,
}

impl FragmentRecord {
    pub fn label(&self) -> BinaryLabel {
        binary_label(self.score)
    }
}

fn manifest_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        msg: msg.into(),
    }
}

/// Parse a manifest. An empty input yields no records; otherwise the first
/// line must be the header.
pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<FragmentRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut header_seen = false;
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            manifest_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if !header_seen {
            let fields: Vec<&str> = row.iter().map(str::trim).collect();
            if fields != MANIFEST_HEADER {
                return Err(manifest_err(
                    line,
                    format!("expected header `{}`", MANIFEST_HEADER.join(",")),
                ));
            }
            header_seen = true;
            continue;
        }
        if row.len() != MANIFEST_HEADER.len() {
            return Err(manifest_err(
                line,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let field = |i: usize| row[i].trim();
        let nonempty = |i: usize| {
            let v = field(i);
            if v.is_empty() {
                Err(manifest_err(line, format!("empty {}", MANIFEST_HEADER[i])))
            } else {
                Ok(v.to_string())
            }
        };
        let fragment_id = nonempty(0)?;
        let cow_id = nonempty(1)?;
        let view = field(2)
            .parse::<View>()
            .map_err(|e| manifest_err(line, e.to_string()))?;
        let modality = field(3)
            .parse::<Modality>()
            .map_err(|e| manifest_err(line, e.to_string()))?;
        let score = field(4)
            .parse::<u8>()
            .map_err(|_| manifest_err(line, format!("score `{}` is not an integer", field(4))))
            .and_then(|v| LocomotionScore::new(v).map_err(|e| manifest_err(line, e.to_string())))?;
        let clip_path = nonempty(5)?;
        if !seen.insert(fragment_id.clone()) {
            return Err(Error::DuplicateFragment {
                id: fragment_id,
                line,
            });
        }
        records.push(FragmentRecord {
            fragment_id,
            cow_id,
            view,
            modality,
            score,
            clip_path,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<FragmentRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(file)
}

pub fn manifest_to_string(records: &[FragmentRecord]) -> String {
    let mut out = MANIFEST_HEADER.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.fragment_id,
            r.cow_id,
            r.view,
            r.modality,
            r.score.value(),
            r.clip_path
        ));
    }
    out
}

pub fn write_manifest(path: &Path, records: &[FragmentRecord]) -> Result<()> {
    if let Some(r) = records
        .iter()
        .find(|r| [&r.fragment_id, &r.cow_id, &r.clip_path].iter().any(|f| f.contains([',', '\n', '"'])))
    {
        return Err(Error::InvalidArgument(format!(
            "fragment `{}` has a field containing a separator",
            r.fragment_id
        )));
    }
    fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

/// Fragment counts per locomotion score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    /// Index `s - 1` holds the count for score `s`.
    pub per_score: [usize; 5],
    pub total: usize,
}

impl Distribution {
    pub fn count(&self, score: u8) -> usize {
        self.per_score[usize::from(score) - 1]
    }

    pub fn healthy(&self) -> usize {
        self.per_score[0]
    }

    pub fn lame(&self) -> usize {
        self.per_score[1..].iter().sum()
    }
}

pub fn distribution<'a>(records: impl IntoIterator<Item = &'a FragmentRecord>) -> Distribution {
    let mut d = Distribution::default();
    for r in records {
        d.per_score[usize::from(r.score.value()) - 1] += 1;
        d.total += 1;
    }
    d
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<FragmentRecord>,
    pub validation: Vec<FragmentRecord>,
    /// Sorted.
    pub validation_cows: Vec<String>,
}

/// Cows grouped by eligibility: all visits healthy, or at least one lame visit.
fn eligible_cows(records: &[FragmentRecord]) -> (Vec<&str>, Vec<&str>) {
    let mut any_lame: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        *any_lame.entry(r.cow_id.as_str()).or_default() |= r.label().is_lame();
    }
    let (lame, healthy): (Vec<_>, Vec<_>) = any_lame.into_iter().partition(|(_, l)| *l);
    (
        healthy.into_iter().map(|(c, _)| c).collect(),
        lame.into_iter().map(|(c, _)| c).collect(),
    )
}

/// Hold out every fragment of `n_healthy_cows` all-healthy cows and
/// `n_lame_cows` cows with at least one lame visit. Everything else trains.
///
/// Cows are drawn uniformly from each eligible set with a generator seeded
/// by `seed`; both output lists keep the input order.
pub fn split_by_cow(
    records: &[FragmentRecord],
    n_healthy_cows: usize,
    n_lame_cows: usize,
    seed: u64,
) -> Result<SplitResult> {
    let (mut healthy, mut lame) = eligible_cows(records);
    let mut shortfalls = Vec::new();
    if healthy.len() < n_healthy_cows {
        shortfalls.push(format!(
            "need {n_healthy_cows} all-healthy cows, found {}",
            healthy.len()
        ));
    }
    if lame.len() < n_lame_cows {
        shortfalls.push(format!(
            "need {n_lame_cows} cows with a lame visit, found {}",
            lame.len()
        ));
    }
    if !shortfalls.is_empty() {
        return Err(Error::Infeasible(shortfalls.join("; ")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    healthy.shuffle(&mut rng);
    lame.shuffle(&mut rng);
    let held_out: BTreeSet<&str> = healthy[..n_healthy_cows]
        .iter()
        .chain(&lame[..n_lame_cows])
        .copied()
        .collect();

    let (validation, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| held_out.contains(r.cow_id.as_str()));
    Ok(SplitResult {
        train,
        validation,
        validation_cows: held_out.into_iter().map(str::to_string).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, cow: &str, score: u8) -> FragmentRecord {
        FragmentRecord {
            fragment_id: id.into(),
            cow_id: cow.into(),
            view: View::Side,
            modality: Modality::Rgb,
            score: LocomotionScore::new(score).unwrap(),
            clip_path: format!("frag/{id}"),
        }
    }

    #[test]
    fn label_mapping() {
        let label = |s| binary_label(LocomotionScore::new(s).unwrap());
        assert_eq!(label(1), BinaryLabel::Healthy);
        assert_eq!(label(2), BinaryLabel::Lame);
        assert_eq!(label(5), BinaryLabel::Lame);
        for s in LocomotionScore::all() {
            assert_eq!(binary_label(s).is_lame(), s.value() >= 2);
        }
        assert!(LocomotionScore::new(0).is_err());
        assert!(LocomotionScore::new(6).is_err());
    }

    #[test]
    fn empty_manifest_is_empty_list() {
        assert!(read_manifest("".as_bytes()).unwrap().is_empty());
        let header = MANIFEST_HEADER.join(",") + "\n";
        assert!(read_manifest(header.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let head = MANIFEST_HEADER.join(",");
        let dup = format!("{head}\na,c1,side,rgb,1,p\nb,c1,side,rgb,2,p\na,c2,top,depth,1,p\n");
        match read_manifest(dup.as_bytes()) {
            Err(Error::DuplicateFragment { id, line }) => assert_eq!((id.as_str(), line), ("a", 4)),
            other => panic!("{other:?}"),
        }

        let bad_view = format!("{head}\na,c1,front,rgb,1,p\n");
        assert!(matches!(
            read_manifest(bad_view.as_bytes()),
            Err(Error::Manifest { line: 2, .. })
        ));
        let bad_modality = format!("{head}\na,c1,side,ir,1,p\n");
        assert!(matches!(
            read_manifest(bad_modality.as_bytes()),
            Err(Error::Manifest { line: 2, .. })
        ));
        let bad_score = format!("{head}\na,c1,side,rgb,1,p\nb,c1,side,rgb,7,p\n");
        assert!(matches!(
            read_manifest(bad_score.as_bytes()),
            Err(Error::Manifest { line: 3, .. })
        ));
        let short = format!("{head}\na,c1,side\n");
        assert!(matches!(
            read_manifest(short.as_bytes()),
            Err(Error::Manifest { line: 2, .. })
        ));
        assert!(matches!(
            read_manifest("a,c1,side,rgb,1,p\n".as_bytes()),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_text_round_trip() {
        let records = vec![rec("f1", "c1", 1), rec("f2", "c2", 3)];
        let text = manifest_to_string(&records);
        assert_eq!(read_manifest(text.as_bytes()).unwrap(), records);
    }

    #[test]
    fn published_side_view_distribution() {
        // Table 1 side view: 607, 240, 17, 3, 2
        let mut records = Vec::new();
        for (score, n) in [(1u8, 607), (2, 240), (3, 17), (4, 3), (5, 2)] {
            for i in 0..n {
                records.push(rec(&format!("{score}-{i}"), "c", score));
            }
        }
        let d = distribution(&records);
        assert_eq!(d.total, 869);
        assert_eq!(d.per_score, [607, 240, 17, 3, 2]);
        assert_eq!(d.per_score.iter().sum::<usize>(), d.total);
        assert_eq!(distribution(&[]), Distribution::default());
    }

    #[test]
    fn single_cow_cannot_fill_both_sides() {
        let records = vec![rec("a", "c1", 1), rec("b", "c1", 1)];
        let err = split_by_cow(&records, 1, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref m) if m.contains("lame")), "{err}");
    }

    #[test]
    fn lame_cow_brings_its_healthy_visits() {
        let records = vec![
            rec("a", "h1", 1),
            rec("b", "l1", 1),
            rec("c", "l1", 2),
            rec("d", "h2", 1),
        ];
        let split = split_by_cow(&records, 1, 1, 3).unwrap();
        assert!(split.validation.iter().any(|r| r.fragment_id == "b"));
        assert_eq!(split.validation.len() + split.train.len(), 4);
        assert_eq!(split.validation_cows.len(), 2);
    }
}
