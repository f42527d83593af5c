//! System prompts for the four REF main-panel groups and the per-article
//! user prompt.
//!
//! The system prompts ship as resource files under `prompts/` together with
//! a `MANIFEST` of SHA-256 checksums. The same files are compiled into the
//! crate; [`PromptRegistry::load_dir`] reads an external copy and refuses it
//! when any checksum disagrees with the manifest.

use std::fmt;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checksum::sha256_hex;
use crate::corpus::Article;

/// First line of every user prompt.
pub const USER_PROMPT_LEAD: &str = "Score this article:";
/// Separator line between title and abstract.
pub const ABSTRACT_SEPARATOR: &str = "Abstract";
pub const MANIFEST_FILE: &str = "MANIFEST";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("UoA {0} outside 1..=34")]
    UoaOutOfRange(i64),
    #[error("article {0} has an empty abstract")]
    EmptyAbstract(String),
    #[error("article {0} has an empty title")]
    EmptyTitle(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{file}: checksum {actual} does not match manifest {expected}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UoaGroup {
    LifeSciences,
    PhysicalSciences,
    SocialSciences,
    ArtsHumanities,
}

impl UoaGroup {
    pub const ALL: [UoaGroup; 4] = [
        UoaGroup::LifeSciences,
        UoaGroup::PhysicalSciences,
        UoaGroup::SocialSciences,
        UoaGroup::ArtsHumanities,
    ];

    pub fn uoa_range(self) -> RangeInclusive<u8> {
        match self {
            UoaGroup::LifeSciences => 1..=6,
            UoaGroup::PhysicalSciences => 7..=12,
            UoaGroup::SocialSciences => 13..=24,
            UoaGroup::ArtsHumanities => 25..=34,
        }
    }

    /// Manifest name of the group.
    pub fn key(self) -> &'static str {
        match self {
            UoaGroup::LifeSciences => "life_sciences",
            UoaGroup::PhysicalSciences => "physical_sciences",
            UoaGroup::SocialSciences => "social_sciences",
            UoaGroup::ArtsHumanities => "arts_humanities",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.key() == key)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for UoaGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

pub fn group_for_uoa(uoa: i64) -> Result<UoaGroup, PromptError> {
    UoaGroup::ALL
        .into_iter()
        .find(|g| {
            let r = g.uoa_range();
            (i64::from(*r.start())..=i64::from(*r.end())).contains(&uoa)
        })
        .ok_or(PromptError::UoaOutOfRange(uoa))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemPrompt {
    pub group: UoaGroup,
    pub file_name: String,
    pub text: String,
    pub sha256: String,
}

/// The four system prompts, indexed by group.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    prompts: [SystemPrompt; 4],
    source: String,
}

const BUNDLED_MANIFEST: &str = include_str!("../prompts/MANIFEST");
const BUNDLED: [(&str, &str); 4] = [
    (
        "life_sciences_uoa01-06.txt",
        include_str!("../prompts/life_sciences_uoa01-06.txt"),
    ),
    (
        "physical_sciences_uoa07-12.txt",
        include_str!("../prompts/physical_sciences_uoa07-12.txt"),
    ),
    (
        "social_sciences_uoa13-24.txt",
        include_str!("../prompts/social_sciences_uoa13-24.txt"),
    ),
    (
        "arts_humanities_uoa25-34.txt",
        include_str!("../prompts/arts_humanities_uoa25-34.txt"),
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sha256: String,
    pub file_name: String,
    pub group: UoaGroup,
}

/// Parses manifest lines of the form `<sha256>  <file>  <group>  <uoas>`.
/// Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, PromptError> {
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [sha, file, group, uoas] = parts[..] else {
            return Err(PromptError::Manifest(format!(
                "line {}: expected 4 fields, found {}",
                no + 1,
                parts.len()
            )));
        };
        if sha.len() != 64 || !sha.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(PromptError::Manifest(format!("line {}: malformed checksum", no + 1)));
        }
        let group = UoaGroup::from_key(group)
            .ok_or_else(|| PromptError::Manifest(format!("line {}: unknown group `{group}`", no + 1)))?;
        let r = group.uoa_range();
        if uoas != format!("{}-{}", r.start(), r.end()) {
            return Err(PromptError::Manifest(format!(
                "line {}: group {group} covers {}-{}, manifest says {uoas}",
                no + 1,
                r.start(),
                r.end()
            )));
        }
        entries.push(ManifestEntry {
            sha256: sha.to_ascii_lowercase(),
            file_name: file.to_owned(),
            group,
        });
    }
    Ok(entries)
}

impl PromptRegistry {
    /// Prompts compiled into the crate, verified against the bundled manifest.
    pub fn bundled() -> Self {
        Self::from_parts("bundled", BUNDLED_MANIFEST, |name| {
            BUNDLED
                .iter()
                .find(|(f, _)| *f == name)
                .map(|(_, text)| (*text).to_owned())
                .ok_or_else(|| PromptError::Manifest(format!("no bundled file {name}")))
        })
        .expect("bundled prompts match their manifest")
    }

    /// Loads prompts from a directory holding `MANIFEST` and the four files.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |path: PathBuf| std::fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source });
        let manifest = read(dir.join(MANIFEST_FILE))?;
        Self::from_parts(&dir.display().to_string(), &manifest, |name| read(dir.join(name)))
    }

    fn from_parts(
        source: &str,
        manifest: &str,
        mut fetch: impl FnMut(&str) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let entries = parse_manifest(manifest)?;
        let mut slots: [Option<SystemPrompt>; 4] = Default::default();
        for entry in entries {
            let text = fetch(&entry.file_name)?;
            let actual = sha256_hex(text.as_bytes());
            if actual != entry.sha256 {
                return Err(PromptError::ChecksumMismatch {
                    file: entry.file_name,
                    expected: entry.sha256,
                    actual,
                });
            }
            let slot = &mut slots[entry.group.index()];
            if slot.is_some() {
                return Err(PromptError::Manifest(format!("group {} listed twice", entry.group)));
            }
            *slot = Some(SystemPrompt {
                group: entry.group,
                file_name: entry.file_name,
                text,
                sha256: actual,
            });
        }
        let [a, b, c, d] = slots;
        match (a, b, c, d) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok(Self {
                prompts: [a, b, c, d],
                source: source.to_owned(),
            }),
            _ => Err(PromptError::Manifest("manifest must list all four groups".to_owned())),
        }
    }

    pub fn system_prompt(&self, group: UoaGroup) -> &SystemPrompt {
        &self.prompts[group.index()]
    }

    pub fn prompts(&self) -> &[SystemPrompt] {
        &self.prompts
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// `(file name, sha256)` for every prompt, in group order.
    pub fn checksums(&self) -> Vec<(String, String)> {
        self.prompts
            .iter()
            .map(|p| (p.file_name.clone(), p.sha256.clone()))
            .collect()
    }

    /// Builds the prompt pair for one article.
    ///
    /// The user prompt is four lines: the lead, the title, `Abstract`, and
    /// the abstract, with line breaks inside title and abstract replaced by
    /// single spaces.
    pub fn build_prompt(&self, article: &Article) -> Result<PromptPair, PromptError> {
        let title = single_line(&article.title);
        let abstract_text = single_line(&article.abstract_text);
        if title.trim().is_empty() {
            return Err(PromptError::EmptyTitle(article.article_id.clone()));
        }
        if abstract_text.trim().is_empty() {
            return Err(PromptError::EmptyAbstract(article.article_id.clone()));
        }
        let group = group_for_uoa(i64::from(article.uoa.get()))?;
        Ok(PromptPair {
            system_text: self.system_prompt(group).text.clone(),
            user_text: format!("{USER_PROMPT_LEAD}\n{title}\n{ABSTRACT_SEPARATOR}\n{abstract_text}"),
        })
    }
}

pub fn build_prompt(registry: &PromptRegistry, article: &Article) -> Result<PromptPair, PromptError> {
    registry.build_prompt(article)
}

/// Drops leading/trailing line breaks and collapses each internal run of
/// line breaks (`\n`, `\r\n`, `\r`) into one space. Other whitespace stays.
pub fn single_line(text: &str) -> String {
    let is_break = |c: char| c == '\n' || c == '\r';
    let trimmed = text.trim_matches(is_break);
    let mut out = String::with_capacity(trimmed.len());
    let mut in_break = false;
    for c in trimmed.chars() {
        if is_break(c) {
            if !in_break {
                out.push(' ');
                in_break = true;
            }
        } else {
            out.push(c);
            in_break = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Uoa;

    fn article(uoa: i64, title: &str, abstract_text: &str) -> Article {
        Article {
            article_id: "a".into(),
            title: title.into(),
            abstract_text: abstract_text.into(),
            uoa: Uoa::new(uoa).unwrap(),
            institution_id: "i".into(),
            pub_year: 2017,
            doi: None,
        }
    }

    #[test]
    fn groups_partition_all_uoas() {
        assert_eq!(group_for_uoa(1).unwrap(), UoaGroup::LifeSciences);
        assert_eq!(group_for_uoa(24).unwrap(), UoaGroup::SocialSciences);
        assert!(matches!(group_for_uoa(35), Err(PromptError::UoaOutOfRange(35))));
        assert!(group_for_uoa(0).is_err());
        for uoa in 1..=34 {
            let hits = UoaGroup::ALL
                .iter()
                .filter(|g| g.uoa_range().contains(&(uoa as u8)))
                .count();
            assert_eq!(hits, 1, "uoa {uoa}");
            assert!(group_for_uoa(uoa).is_ok());
        }
        let boundaries: Vec<_> = [6, 7, 12, 13, 24, 25, 34]
            .iter()
            .map(|&u| group_for_uoa(u).unwrap())
            .collect();
        assert_eq!(
            boundaries,
            [
                UoaGroup::LifeSciences,
                UoaGroup::PhysicalSciences,
                UoaGroup::PhysicalSciences,
                UoaGroup::SocialSciences,
                UoaGroup::SocialSciences,
                UoaGroup::ArtsHumanities,
                UoaGroup::ArtsHumanities
            ]
        );
    }

    #[test]
    fn four_line_user_prompt() {
        let reg = PromptRegistry::bundled();
        let pair = reg.build_prompt(&article(3, "T", "A")).unwrap();
        let lines: Vec<&str> = pair.user_text.split('\n').collect();
        assert_eq!(lines, ["Score this article:", "T", "Abstract", "A"]);
    }

    #[test]
    fn abstract_collapsed_to_one_line() {
        let reg = PromptRegistry::bundled();
        let pair = reg
            .build_prompt(&article(3, "Multi\nline title", "line1\nline2\r\n\r\nline3  x"))
            .unwrap();
        let lines: Vec<&str> = pair.user_text.split('\n').collect();
        assert_eq!(lines[1], "Multi line title");
        assert_eq!(lines[3], "line1 line2 line3  x");
        assert_eq!(lines.iter().filter(|l| **l == "Abstract").count(), 1);
    }

    #[test]
    fn empty_abstract_refused() {
        let reg = PromptRegistry::bundled();
        assert!(matches!(
            reg.build_prompt(&article(3, "T", " \n ")),
            Err(PromptError::EmptyAbstract(_))
        ));
    }

    #[test]
    fn arts_prompt_selected_for_uoa_30() {
        let reg = PromptRegistry::bundled();
        let pair = reg.build_prompt(&article(30, "T", "A")).unwrap();
        let expected = include_str!("../prompts/arts_humanities_uoa25-34.txt");
        assert_eq!(pair.system_text.as_bytes(), expected.as_bytes());
    }

    #[test]
    fn every_prompt_defines_all_star_levels() {
        let reg = PromptRegistry::bundled();
        for p in reg.prompts() {
            for phrase in [
                "world-leading",
                "internationally excellent",
                "recognised internationally",
                "recognised nationally",
            ] {
                assert!(p.text.contains(phrase), "{} lacks {phrase}", p.file_name);
            }
            assert!(p.text.starts_with("You are an academic expert"));
        }
    }

    #[test]
    fn deterministic() {
        let reg = PromptRegistry::bundled();
        let a = article(12, "Title", "Body\ntext");
        assert_eq!(reg.build_prompt(&a).unwrap(), reg.build_prompt(&a).unwrap());
    }

    #[test]
    fn load_dir_detects_drift() {
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts");
        let reg = PromptRegistry::load_dir(&src).unwrap();
        assert_eq!(reg.checksums(), PromptRegistry::bundled().checksums());

        let tmp = tempfile::tempdir().unwrap();
        for entry in std::fs::read_dir(&src).unwrap() {
            let entry = entry.unwrap();
            std::fs::copy(entry.path(), tmp.path().join(entry.file_name())).unwrap();
        }
        let target = tmp.path().join("social_sciences_uoa13-24.txt");
        let mut text = std::fs::read_to_string(&target).unwrap();
        text.push(' ');
        std::fs::write(&target, text).unwrap();
        assert!(matches!(
            PromptRegistry::load_dir(tmp.path()),
            Err(PromptError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn manifest_errors() {
        assert!(parse_manifest("abc file group 1-6").is_err());
        let sha = "0".repeat(64);
        assert!(parse_manifest(&format!("{sha} f life_sciences 1-7")).is_err());
        assert!(parse_manifest(&format!("{sha} f nonsense 1-6")).is_err());
        assert_eq!(
            parse_manifest(&format!("# c\n\n{sha} f life_sciences 1-6"))
                .unwrap()
                .len(),
            1
        );
    }
}
