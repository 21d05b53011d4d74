use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Physical quantity measured by a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantityKind {
    Acceleration,
    Temperature,
    Humidity,
    Pressure,
    AirSpeed,
    RotationalSpeed,
    Dimensionless,
}

impl QuantityKind {
    pub const ALL: [QuantityKind; 7] = [
        QuantityKind::Acceleration,
        QuantityKind::Temperature,
        QuantityKind::Humidity,
        QuantityKind::Pressure,
        QuantityKind::AirSpeed,
        QuantityKind::RotationalSpeed,
        QuantityKind::Dimensionless,
    ];

    /// The single canonical unit of this quantity.
    pub fn unit(self) -> Unit {
        match self {
            QuantityKind::Acceleration => Unit::MetrePerSecondSquared,
            QuantityKind::Temperature => Unit::DegreeCelsius,
            QuantityKind::Humidity => Unit::PercentRh,
            QuantityKind::Pressure => Unit::Hectopascal,
            QuantityKind::AirSpeed => Unit::MetrePerSecond,
            QuantityKind::RotationalSpeed => Unit::Rpm,
            QuantityKind::Dimensionless => Unit::One,
        }
    }
}

/// Canonical engineering units. Anything else is rejected at decode time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    MetrePerSecondSquared,
    DegreeCelsius,
    PercentRh,
    Hectopascal,
    MetrePerSecond,
    Rpm,
    One,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::MetrePerSecondSquared => "m/s²",
            Unit::DegreeCelsius => "°C",
            Unit::PercentRh => "%RH",
            Unit::Hectopascal => "hPa",
            Unit::MetrePerSecond => "m/s",
            Unit::Rpm => "rpm",
            Unit::One => "1",
        }
    }

    pub fn quantity(self) -> QuantityKind {
        QuantityKind::ALL
            .into_iter()
            .find(|k| k.unit() == self)
            .expect("every unit belongs to one quantity")
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown unit {0:?}")]
pub struct UnknownUnit(pub String);

impl FromStr for Unit {
    type Err = UnknownUnit;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuantityKind::ALL
            .into_iter()
            .map(QuantityKind::unit)
            .find(|u| u.as_str() == s)
            .ok_or_else(|| UnknownUnit(s.to_owned()))
    }
}

impl Serialize for Unit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Unit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A quantity together with its unit. The unit is implied by the kind; it is
/// carried explicitly in documents and must agree with the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Quantity {
    pub kind: QuantityKind,
}

impl Quantity {
    pub fn new(kind: QuantityKind) -> Self {
        Self { kind }
    }

    pub fn unit(&self) -> Unit {
        self.kind.unit()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantityDoc {
    kind: QuantityKind,
    unit: Unit,
}

impl Serialize for Quantity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        QuantityDoc {
            kind: self.kind,
            unit: self.unit(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = QuantityDoc::deserialize(d)?;
        if doc.kind.unit() != doc.unit {
            return Err(serde::de::Error::custom(format!(
                "unit {} does not belong to quantity {:?}",
                doc.unit, doc.kind
            )));
        }
        Ok(Quantity { kind: doc.kind })
    }
}
