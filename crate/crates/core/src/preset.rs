//! Config values that may be written either as a preset name or as a table.

use std::fmt;
use std::marker::PhantomData;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use crate::detkernels::ExecutionProfile;
use crate::rlcore::LossConfig;

pub(crate) trait Preset: Sized {
    const WHAT: &'static str;
    fn preset(name: &str) -> Option<Self>;
}

impl Preset for ExecutionProfile {
    const WHAT: &'static str = "execution profile";
    fn preset(name: &str) -> Option<Self> {
        ExecutionProfile::preset(name)
    }
}

impl Preset for LossConfig {
    const WHAT: &'static str = "loss";
    fn preset(name: &str) -> Option<Self> {
        LossConfig::named(name)
    }
}

struct PresetVisitor<T>(PhantomData<T>);

impl<'de, T: Preset + Deserialize<'de>> Visitor<'de> for PresetVisitor<T> {
    type Value = T;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a {} preset name or table", T::WHAT)
    }

    fn visit_str<E: de::Error>(self, s: &str) -> Result<T, E> {
        T::preset(s).ok_or_else(|| E::custom(format!("unknown {} preset `{s}`", T::WHAT)))
    }

    fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<T, A::Error> {
        T::deserialize(de::value::MapAccessDeserializer::new(map))
    }
}

pub(crate) fn deserialize<'de, D, T>(d: D) -> Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: Preset + Deserialize<'de>,
{
    d.deserialize_any(PresetVisitor(PhantomData))
}
