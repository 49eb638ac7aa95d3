//! Extended nonnegative scalar: a finite `f64` or a distinguished `+inf`.
//!
//! Reversibility coefficients and tangent-kernel condition numbers are
//! genuinely infinite in degenerate cases (symmetric drive matrix,
//! rank-deficient Jacobian). An enum variant keeps that case exact under
//! comparison and serializes unambiguously as the string `"inf"` instead of
//! leaking a large float into reports.

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::cmp::Ordering;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    /// Wraps a float, promoting IEEE infinities to the `Infinite` variant.
    pub fn from_f64(x: f64) -> Self {
        if x.is_infinite() && x > 0.0 {
            ExtReal::Infinite
        } else {
            ExtReal::Finite(x)
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, ExtReal::Infinite)
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    /// Collapses to `f64`, mapping `Infinite` to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtReal::Finite(x) => x,
            ExtReal::Infinite => f64::INFINITY,
        }
    }

    /// The finite payload, if any.
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(x) => Some(x),
            ExtReal::Infinite => None,
        }
    }
}

impl From<f64> for ExtReal {
    fn from(x: f64) -> Self {
        ExtReal::from_f64(x)
    }
}

impl PartialOrd for ExtReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (ExtReal::Infinite, ExtReal::Infinite) => Some(Ordering::Equal),
            (ExtReal::Infinite, ExtReal::Finite(_)) => Some(Ordering::Greater),
            (ExtReal::Finite(_), ExtReal::Infinite) => Some(Ordering::Less),
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(x) => write!(f, "{x}"),
            ExtReal::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            ExtReal::Finite(x) => ser.serialize_f64(*x),
            ExtReal::Infinite => ser.serialize_str("inf"),
        }
    }
}

struct ExtRealVisitor;

impl<'de> Visitor<'de> for ExtRealVisitor {
    type Value = ExtReal;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a number or the string \"inf\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<ExtReal, E> {
        Ok(ExtReal::from_f64(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<ExtReal, E> {
        Ok(ExtReal::Finite(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<ExtReal, E> {
        Ok(ExtReal::Finite(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<ExtReal, E> {
        match v {
            "inf" => Ok(ExtReal::Infinite),
            _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        de.deserialize_any(ExtRealVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_puts_infinite_on_top() {
        assert!(ExtReal::Infinite > ExtReal::Finite(1e300));
        assert!(ExtReal::Finite(2.0) > ExtReal::Finite(1.0));
        assert_eq!(
            ExtReal::Infinite.partial_cmp(&ExtReal::Infinite),
            Some(Ordering::Equal)
        );
    }

    #[test]
    fn serializes_infinity_as_string() {
        let s = serde_json::to_string(&ExtReal::Infinite).unwrap();
        assert_eq!(s, "\"inf\"");
        let back: ExtReal = serde_json::from_str(&s).unwrap();
        assert!(back.is_infinite());
        let f: ExtReal = serde_json::from_str("2.5").unwrap();
        assert_eq!(f, ExtReal::Finite(2.5));
    }

    #[test]
    fn promotes_ieee_infinity() {
        assert!(ExtReal::from_f64(f64::INFINITY).is_infinite());
        assert!(ExtReal::from_f64(1.0).is_finite());
    }
}
