use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An absolute location in the catalog hierarchy.
///
/// Canonical text form is `/` followed by the segments joined with `/`; the
/// root is `/` with no segments. Parsing collapses repeated and trailing
/// slashes, so every node has exactly one canonical spelling.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Path {
    segments: Vec<String>,
}

/// Lexical rule shared by path segments, entry names and attribute names:
/// `[A-Za-z0-9_.-]+`, excluding the relative markers `.` and `..`.
pub fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

impl Path {
    pub fn root() -> Path {
        Path { segments: Vec::new() }
    }

    pub fn parse(text: &str) -> Result<Path> {
        let rest = text.strip_prefix('/').ok_or(Error::BadName)?;
        let mut segments = Vec::new();
        for seg in rest.split('/') {
            if seg.is_empty() {
                continue;
            }
            if !valid_name(seg) {
                return Err(Error::BadName);
            }
            segments.push(seg.to_string());
        }
        Ok(Path { segments })
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    /// Last segment, `None` for the root.
    pub fn name(&self) -> Option<&str> {
        self.segments.last().map(String::as_str)
    }

    pub fn parent(&self) -> Option<Path> {
        if self.is_root() {
            return None;
        }
        Some(Path { segments: self.segments[..self.segments.len() - 1].to_vec() })
    }

    /// Appends one segment. The name must satisfy [`valid_name`].
    pub fn child(&self, name: &str) -> Result<Path> {
        if !valid_name(name) {
            return Err(Error::BadName);
        }
        let mut segments = self.segments.clone();
        segments.push(name.to_string());
        Ok(Path { segments })
    }

    /// True when `self` equals `other` or lies beneath it.
    pub fn starts_with(&self, other: &Path) -> bool {
        self.segments.len() >= other.segments.len()
            && self.segments[..other.segments.len()] == other.segments[..]
    }

    /// True when one path is an ancestor of, or equal to, the other.
    pub fn overlaps(&self, other: &Path) -> bool {
        self.starts_with(other) || other.starts_with(self)
    }

    /// Splits an entry path into its directory and entry name.
    pub fn split_entry(&self) -> Result<(Path, String)> {
        let parent = self.parent().ok_or(Error::BadName)?;
        Ok((parent, self.segments.last().cloned().unwrap_or_default()))
    }

    /// Every ancestor from the root down to (excluding) `self`.
    pub fn ancestors(&self) -> impl Iterator<Item = Path> + '_ {
        (0..self.segments.len()).map(|n| Path { segments: self.segments[..n].to_vec() })
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segments.is_empty() {
            return f.write_str("/");
        }
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Path({self})")
    }
}

impl FromStr for Path {
    type Err = Error;

    fn from_str(s: &str) -> Result<Path> {
        Path::parse(s)
    }
}

impl TryFrom<String> for Path {
    type Error = Error;

    fn try_from(s: String) -> Result<Path> {
        Path::parse(&s)
    }
}

impl From<Path> for String {
    fn from(p: Path) -> String {
        p.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn root_forms() {
        assert_eq!(Path::parse("/").unwrap(), Path::root());
        assert_eq!(Path::parse("//").unwrap().to_string(), "/");
        assert!(Path::root().is_root());
        assert_eq!(Path::root().parent(), None);
    }

    #[test]
    fn normalization() {
        assert_eq!(Path::parse("/a//b/").unwrap().to_string(), "/a/b");
        assert_eq!(Path::parse("/exp").unwrap().parent().unwrap(), Path::root());
    }

    #[test]
    fn rejects_bad_names() {
        for bad in ["", "a/b", "/a b", "/a/./b", "/a/../b", "/é", "/a\tb"] {
            assert_eq!(Path::parse(bad), Err(Error::BadName), "{bad:?}");
        }
    }

    #[test]
    fn prefix_relations() {
        let a = Path::parse("/a").unwrap();
        let ab = Path::parse("/a/b").unwrap();
        let abc = Path::parse("/abc").unwrap();
        assert!(ab.starts_with(&a));
        assert!(!abc.starts_with(&a));
        assert!(a.overlaps(&ab) && ab.overlaps(&a));
        assert!(!a.overlaps(&abc));
        assert!(a.starts_with(&Path::root()));
    }

    proptest! {
        #[test]
        fn canonical_form_is_a_fixed_point(segs in prop::collection::vec("[A-Za-z0-9_-][A-Za-z0-9_.-]{0,6}", 0..6), slashes in 1usize..3) {
            let sep = "/".repeat(slashes);
            let text = format!("{sep}{}", segs.join(&sep));
            let p = Path::parse(&text).unwrap();
            let canon = p.to_string();
            prop_assert!(canon.starts_with('/'));
            prop_assert_eq!(Path::parse(&canon).unwrap().to_string(), canon.clone());
            prop_assert_eq!(p.depth(), segs.len());
        }
    }
}
