//! Reader audiences and the seven modelled indicators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Reader status group. `Total` counts every reader, including those whose
/// status is unspecified or "Other".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sector {
    Lecturers,
    Librarians,
    Professors,
    Researchers,
    Students,
    Total,
}

impl Sector {
    pub const ALL: [Sector; 6] = [
        Sector::Lecturers,
        Sector::Librarians,
        Sector::Professors,
        Sector::Researchers,
        Sector::Students,
        Sector::Total,
    ];

    /// The five status-derived sectors, without the union.
    pub const NAMED: [Sector; 5] = [
        Sector::Lecturers,
        Sector::Librarians,
        Sector::Professors,
        Sector::Researchers,
        Sector::Students,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sector::Lecturers => "Lecturers",
            Sector::Librarians => "Librarians",
            Sector::Professors => "Professors",
            Sector::Researchers => "Researchers",
            Sector::Students => "Students",
            Sector::Total => "Total",
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sector::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown sector {s:?}"))
    }
}

/// Result of mapping one raw reader status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusClass {
    Sector(Sector),
    /// Documented status that only feeds `Total` ("Unspecified", "Other").
    TotalOnly,
    /// Not in the documented vocabulary; also only feeds `Total`.
    Unknown,
}

/// The documented reader status vocabulary and its sector.
pub const STATUS_VOCABULARY: [(&str, Option<Sector>); 13] = [
    ("Lecturer", Some(Sector::Lecturers)),
    ("Lecturer > Senior Lecturer", Some(Sector::Lecturers)),
    ("Librarian", Some(Sector::Librarians)),
    ("Professor", Some(Sector::Professors)),
    ("Professor > Associate Professor", Some(Sector::Professors)),
    ("Researcher", Some(Sector::Researchers)),
    ("Student > Bachelor", Some(Sector::Students)),
    ("Student > Doctoral Student", Some(Sector::Students)),
    ("Student > Master", Some(Sector::Students)),
    ("Student > Ph. D. Student", Some(Sector::Students)),
    ("Student > Postgraduate", Some(Sector::Students)),
    ("Unspecified", None),
    ("Other", None),
];

pub fn classify_status(raw: &str) -> StatusClass {
    match STATUS_VOCABULARY.iter().find(|(s, _)| *s == raw) {
        Some((_, Some(sector))) => StatusClass::Sector(*sector),
        Some((_, None)) => StatusClass::TotalOnly,
        None => StatusClass::Unknown,
    }
}

/// Sector of a raw status string. Unknown strings map to `None` and are
/// logged; they still count towards `Total` when merged.
pub fn map_status_to_sector(raw: &str) -> Option<Sector> {
    match classify_status(raw) {
        StatusClass::Sector(s) => Some(s),
        StatusClass::TotalOnly => None,
        StatusClass::Unknown => {
            tracing::warn!(status = raw, "unknown reader status");
            None
        }
    }
}

/// One of the seven modelled top-10% indicators, in model order: the six
/// reader sectors followed by citations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Indicator {
    Readers(Sector),
    Citations,
}

impl Indicator {
    pub const ALL: [Indicator; 7] = [
        Indicator::Readers(Sector::Lecturers),
        Indicator::Readers(Sector::Librarians),
        Indicator::Readers(Sector::Professors),
        Indicator::Readers(Sector::Researchers),
        Indicator::Readers(Sector::Students),
        Indicator::Readers(Sector::Total),
        Indicator::Citations,
    ];

    pub fn index(self) -> usize {
        Indicator::ALL.iter().position(|&i| i == self).expect("indicator listed in ALL")
    }

    pub fn name(self) -> &'static str {
        match self {
            Indicator::Readers(s) => s.name(),
            Indicator::Citations => "Citations",
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Indicator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("citations") {
            Ok(Indicator::Citations)
        } else {
            s.parse().map(Indicator::Readers)
        }
    }
}

impl From<Indicator> for String {
    fn from(i: Indicator) -> String {
        i.name().to_string()
    }
}

impl TryFrom<String> for Indicator {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_maps_to_documented_sectors() {
        assert_eq!(map_status_to_sector("Student > Ph. D. Student"), Some(Sector::Students));
        assert_eq!(map_status_to_sector("Lecturer > Senior Lecturer"), Some(Sector::Lecturers));
        assert_eq!(map_status_to_sector("Professor > Associate Professor"), Some(Sector::Professors));
        assert_eq!(map_status_to_sector("Librarian"), Some(Sector::Librarians));
        assert_eq!(map_status_to_sector("Researcher"), Some(Sector::Researchers));
        assert_eq!(map_status_to_sector("Unspecified"), None);
        assert_eq!(classify_status("Other"), StatusClass::TotalOnly);
    }

    #[test]
    fn empty_status_is_unknown() {
        assert_eq!(classify_status(""), StatusClass::Unknown);
        assert_eq!(map_status_to_sector(""), None);
    }

    #[test]
    fn every_named_sector_has_a_status() {
        for s in Sector::NAMED {
            assert!(STATUS_VOCABULARY.iter().any(|(_, x)| *x == Some(s)));
        }
        let students = STATUS_VOCABULARY.iter().filter(|(_, x)| *x == Some(Sector::Students)).count();
        assert_eq!(students, 5);
    }

    #[test]
    fn indicators_round_trip_through_names() {
        for (k, i) in Indicator::ALL.into_iter().enumerate() {
            assert_eq!(i.index(), k);
            assert_eq!(i.name().parse::<Indicator>().unwrap(), i);
            let json = serde_json::to_string(&i).unwrap();
            assert_eq!(serde_json::from_str::<Indicator>(&json).unwrap(), i);
        }
    }
}
