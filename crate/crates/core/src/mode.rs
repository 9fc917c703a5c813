use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A transport system. Bike sharing is the prediction target; the others
/// are auxiliary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bike,
    Subway,
    Ridehail,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Bike, Mode::Subway, Mode::Ridehail];
    pub const AUXILIARY: [Mode; 2] = [Mode::Subway, Mode::Ridehail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Bike => "bike",
            Mode::Subway => "subway",
            Mode::Ridehail => "ridehail",
        }
    }

    pub fn is_auxiliary(self) -> bool {
        self != Mode::Bike
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bike" | "b" => Ok(Mode::Bike),
            "subway" | "s" => Ok(Mode::Subway),
            "ridehail" | "ride-hailing" | "h" => Ok(Mode::Ridehail),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Parses `bike,subway,ridehail` style lists into a sorted, deduplicated set.
pub fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    let mut modes = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Mode>>>()?;
    modes.sort();
    modes.dedup();
    Ok(modes)
}

/// One optional value per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMap<T>([Option<T>; 3]);

impl<T> Default for ModeMap<T> {
    fn default() -> Self {
        Self([None, None, None])
    }
}

impl<T> ModeMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mode: Mode, value: T) -> Option<T> {
        self.0[mode.index()].replace(value)
    }

    pub fn get(&self, mode: Mode) -> Option<&T> {
        self.0[mode.index()].as_ref()
    }

    pub fn get_mut(&mut self, mode: Mode) -> Option<&mut T> {
        self.0[mode.index()].as_mut()
    }

    pub fn remove(&mut self, mode: Mode) -> Option<T> {
        self.0[mode.index()].take()
    }

    pub fn contains(&self, mode: Mode) -> bool {
        self.0[mode.index()].is_some()
    }

    /// Present modes in canonical order (bike, subway, ridehail).
    pub fn modes(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|m| self.contains(*m)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, &T)> {
        Mode::ALL
            .into_iter()
            .filter_map(move |m| self.get(m).map(|v| (m, v)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Mode, &T) -> U) -> ModeMap<U> {
        let mut out = ModeMap::new();
        for (m, v) in self.iter() {
            out.insert(m, f(m, v));
        }
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(Mode, &T) -> std::result::Result<U, E>) -> std::result::Result<ModeMap<U>, E> {
        let mut out = ModeMap::new();
        for (m, v) in self.iter() {
            out.insert(m, f(m, v)?);
        }
        Ok(out)
    }

    /// Looks up a mode that callers guarantee is present.
    pub fn expect(&self, mode: Mode) -> &T {
        self.get(mode)
            .unwrap_or_else(|| panic!("mode {mode} missing from ModeMap"))
    }
}

impl<T> FromIterator<(Mode, T)> for ModeMap<T> {
    fn from_iter<I: IntoIterator<Item = (Mode, T)>>(iter: I) -> Self {
        let mut out = ModeMap::new();
        for (m, v) in iter {
            out.insert(m, v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_modes_sorts_and_dedups() {
        assert_eq!(
            parse_modes("ridehail, bike,bike").unwrap(),
            vec![Mode::Bike, Mode::Ridehail]
        );
        assert!(parse_modes("bike,tram").is_err());
    }

    #[test]
    fn mode_map_iterates_in_canonical_order() {
        let m: ModeMap<i32> = [(Mode::Ridehail, 3), (Mode::Bike, 1)].into_iter().collect();
        assert_eq!(m.modes(), vec![Mode::Bike, Mode::Ridehail]);
        assert_eq!(m.iter().map(|(_, v)| *v).collect::<Vec<_>>(), vec![1, 3]);
    }
}
