//! Subject areas: the two-digit prefix of a four-digit ASJC code, plus the
//! "All subject areas" roll-up.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

const AREAS: [(u16, &str); 27] = [
    (1000, "Multidisciplinary"),
    (1100, "Agricultural and Biological Sciences"),
    (1200, "Arts and Humanities"),
    (1300, "Biochemistry, Genetics and Molecular Biology"),
    (1400, "Business, Management and Accounting"),
    (1500, "Chemical Engineering"),
    (1600, "Chemistry"),
    (1700, "Computer Science"),
    (1800, "Decision Sciences"),
    (1900, "Earth and Planetary Sciences"),
    (2000, "Economics, Econometrics and Finance"),
    (2100, "Energy"),
    (2200, "Engineering"),
    (2300, "Environmental Science"),
    (2400, "Immunology and Microbiology"),
    (2500, "Materials Science"),
    (2600, "Mathematics"),
    (2700, "Medicine"),
    (2800, "Neuroscience"),
    (2900, "Nursing"),
    (3000, "Pharmacology, Toxicology and Pharmaceutics"),
    (3100, "Physics and Astronomy"),
    (3200, "Psychology"),
    (3300, "Social Sciences"),
    (3400, "Veterinary"),
    (3500, "Dentistry"),
    (3600, "Health Professions"),
];

/// Whether `code` is a four-digit ASJC code in a known area.
pub fn valid_asjc(code: u16) -> bool {
    (1000..=3699).contains(&code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Subject {
    /// Area code, a multiple of 100.
    Area(u16),
    All,
}

impl Subject {
    pub fn of_asjc(code: u16) -> Subject {
        Subject::Area(code / 100 * 100)
    }

    pub fn name(self) -> &'static str {
        match self {
            Subject::All => "All subject areas",
            Subject::Area(a) => AREAS
                .iter()
                .find(|(c, _)| *c == a)
                .map(|(_, n)| *n)
                .unwrap_or("Unknown area"),
        }
    }

    /// Stable file-name component.
    pub fn slug(self) -> String {
        match self {
            Subject::All => "all".into(),
            Subject::Area(a) => a.to_string(),
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

impl FromStr for Subject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Subject::All);
        }
        match s.parse::<u16>() {
            Ok(c) if valid_asjc(c) && c % 100 == 0 => Ok(Subject::Area(c)),
            _ => Err(format!("not a subject area code: {s:?}")),
        }
    }
}

impl From<Subject> for String {
    fn from(s: Subject) -> String {
        s.slug()
    }
}

impl TryFrom<String> for Subject {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}
