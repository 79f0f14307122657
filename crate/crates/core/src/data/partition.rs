use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the training set treated as labeled.
///
/// `Full` is not a semi-supervised protocol; it exists for fully supervised
/// sanity runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LabelRatio {
    Sixteenth,
    Eighth,
    Quarter,
    Half,
    Full,
}

impl LabelRatio {
    pub const PROTOCOLS: [LabelRatio; 4] = [
        LabelRatio::Sixteenth,
        LabelRatio::Eighth,
        LabelRatio::Quarter,
        LabelRatio::Half,
    ];

    pub fn denominator(self) -> usize {
        match self {
            LabelRatio::Sixteenth => 16,
            LabelRatio::Eighth => 8,
            LabelRatio::Quarter => 4,
            LabelRatio::Half => 2,
            LabelRatio::Full => 1,
        }
    }

    /// floor(N / d), at least one.
    pub fn labeled_count(self, n: usize) -> usize {
        (n / self.denominator()).max(1).min(n)
    }

    pub fn as_f64(self) -> f64 {
        1.0 / self.denominator() as f64
    }
}

impl fmt::Display for LabelRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.denominator())
    }
}

impl FromStr for LabelRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/16" => Ok(LabelRatio::Sixteenth),
            "1/8" => Ok(LabelRatio::Eighth),
            "1/4" => Ok(LabelRatio::Quarter),
            "1/2" => Ok(LabelRatio::Half),
            "1/1" | "1" => Ok(LabelRatio::Full),
            other => Err(Error::Config(format!(
                "unsupported label ratio '{other}' (expected 1/16, 1/8, 1/4, 1/2 or 1/1)"
            ))),
        }
    }
}

impl TryFrom<String> for LabelRatio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LabelRatio> for String {
    fn from(r: LabelRatio) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub ratio: LabelRatio,
    pub seed: u64,
}

/// Seeded Fisher–Yates shuffle; the first floor(ratio·N) ids become labeled.
pub fn make_partition(ids: &[String], ratio: LabelRatio, seed: u64) -> Result<Partition> {
    if ids.is_empty() {
        return Err(Error::Config("cannot partition an empty id list".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled_ids = shuffled.split_off(ratio.labeled_count(ids.len()));
    Ok(Partition {
        labeled_ids: shuffled,
        unlabeled_ids,
        ratio,
        seed,
    })
}

impl Partition {
    fn header(&self) -> String {
        format!("#ratio={} seed={}", self.ratio, self.seed)
    }

    /// Writes `labeled.txt` and `unlabeled.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ids) in [("labeled.txt", &self.labeled_ids), ("unlabeled.txt", &self.unlabeled_ids)] {
            let mut text = self.header();
            text.push('\n');
            for id in ids {
                text.push_str(id);
                text.push('\n');
            }
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read_one = |name: &str| -> Result<(LabelRatio, u64, Vec<String>)> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut lines = text.lines();
            let bad = |msg: &str| Error::Format {
                path: path.clone(),
                msg: msg.to_string(),
            };
            let header = lines.next().ok_or_else(|| bad("empty partition file"))?;
            let rest = header.strip_prefix("#ratio=").ok_or_else(|| bad("missing #ratio header"))?;
            let (ratio, seed) = rest.split_once(" seed=").ok_or_else(|| bad("missing seed in header"))?;
            let ratio = ratio.parse().map_err(|_| bad("bad ratio"))?;
            let seed = seed.trim().parse().map_err(|_| bad("bad seed"))?;
            let ids = lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
            Ok((ratio, seed, ids))
        };
        let (ratio, seed, labeled_ids) = read_one("labeled.txt")?;
        let (ratio_u, seed_u, unlabeled_ids) = read_one("unlabeled.txt")?;
        if ratio != ratio_u || seed != seed_u {
            return Err(Error::Format {
                path: dir.to_path_buf(),
                msg: "labeled/unlabeled headers disagree".into(),
            });
        }
        Ok(Partition {
            labeled_ids,
            unlabeled_ids,
            ratio,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    #[test]
    fn floor_arithmetic() {
        let p = make_partition(&ids(16), LabelRatio::Sixteenth, 0).unwrap();
        assert_eq!((p.labeled_ids.len(), p.unlabeled_ids.len()), (1, 15));
        let p = make_partition(&ids(16), LabelRatio::Half, 0).unwrap();
        assert_eq!((p.labeled_ids.len(), p.unlabeled_ids.len()), (8, 8));
        let p = make_partition(&ids(5), LabelRatio::Sixteenth, 0).unwrap();
        assert_eq!(p.labeled_ids.len(), 1);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = make_partition(&ids(40), LabelRatio::Eighth, 7).unwrap();
        assert_eq!(a, make_partition(&ids(40), LabelRatio::Eighth, 7).unwrap());
        assert_ne!(a, make_partition(&ids(40), LabelRatio::Eighth, 8).unwrap());
    }

    #[test]
    fn empty_ids_rejected() {
        assert!(make_partition(&[], LabelRatio::Half, 0).is_err());
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("1/8".parse::<LabelRatio>().unwrap(), LabelRatio::Eighth);
        assert!("1/3".parse::<LabelRatio>().is_err());
        assert_eq!(LabelRatio::Sixteenth.to_string(), "1/16");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = make_partition(&ids(20), LabelRatio::Quarter, 3).unwrap();
        p.write(dir.path()).unwrap();
        let first = std::fs::read_to_string(dir.path().join("labeled.txt")).unwrap();
        assert!(first.starts_with("#ratio=1/4 seed=3\n"));
        assert_eq!(Partition::read(dir.path()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn disjoint_and_exhaustive(n in 1usize..200, r in 0usize..4, seed in any::<u64>()) {
            let all = ids(n);
            let p = make_partition(&all, LabelRatio::PROTOCOLS[r], seed).unwrap();
            let l: BTreeSet<_> = p.labeled_ids.iter().collect();
            let u: BTreeSet<_> = p.unlabeled_ids.iter().collect();
            prop_assert!(l.is_disjoint(&u));
            prop_assert_eq!(l.len() + u.len(), n);
            prop_assert_eq!(l.len(), (n / LabelRatio::PROTOCOLS[r].denominator()).max(1));
        }
    }
}
