//! Identifier newtypes and stable seed derivation.
//!
//! Image and object identifiers are strings in GQA exports, but are almost
//! always decimal numbers. They order numerically when both sides are pure
//! digit strings and lexicographically otherwise, so `"9" < "10"`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

fn is_numeric(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Total order used for every identifier in the crate.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (is_numeric(a), is_numeric(b)) {
        (true, true) => {
            let ta = a.trim_start_matches('0');
            let tb = b.trim_start_matches('0');
            ta.len()
                .cmp(&tb.len())
                .then_with(|| ta.cmp(tb))
                .then_with(|| a.cmp(b))
        }
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => a.cmp(b),
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl Ord for $name {
            fn cmp(&self, other: &Self) -> Ordering {
                natural_cmp(&self.0, &other.0)
            }
        }

        impl PartialOrd for $name {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of an image in a corpus.
    ImageId
);
string_id!(
    /// Identifier of an object, unique within its image.
    ObjectId
);

/// FNV-1a over a sequence of string parts, each terminated by a separator
/// byte, finished with a splitmix64 round. Stable across platforms and
/// compiler versions, unlike `std::hash`.
pub fn stable_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_ids_order_by_value() {
        let mut ids: Vec<ObjectId> = ["10", "9", "100", "a", "2"].iter().map(|s| (*s).into()).collect();
        ids.sort();
        let got: Vec<&str> = ids.iter().map(|i| i.as_str()).collect();
        assert_eq!(got, ["2", "9", "10", "100", "a"]);
    }

    #[test]
    fn leading_zeros_are_distinct_but_adjacent() {
        assert_eq!(natural_cmp("007", "7"), Ordering::Less);
        assert_eq!(natural_cmp("007", "8"), Ordering::Less);
        assert_ne!(natural_cmp("007", "7"), Ordering::Equal);
    }

    #[test]
    fn seed_depends_on_every_part() {
        let a = stable_seed(1, &["img", "3"]);
        assert_eq!(a, stable_seed(1, &["img", "3"]));
        assert_ne!(a, stable_seed(2, &["img", "3"]));
        assert_ne!(a, stable_seed(1, &["img3"]));
        assert_ne!(a, stable_seed(1, &["img", "4"]));
    }
}
