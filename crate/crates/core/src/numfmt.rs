//! Decimal float encoding with 17 significant digits.
//!
//! Every f64 written to disk or the wire goes through [`fmt_f64`]; 17
//! significant digits round-trip any finite double exactly.

use serde::{Deserialize, Deserializer, Serializer};

pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{:.16e}", x)
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Serde adapter: a single f64 as a 17-digit decimal string.
pub mod f17 {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_f64(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        parse_f64(&s).ok_or_else(|| serde::de::Error::custom(format!("bad float `{s}`")))
    }
}

/// Serde adapter: a vector of f64 as one space-separated string.
pub mod f17_vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let joined = xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
        s.serialize_str(&joined)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        s.split_ascii_whitespace()
            .map(|tok| {
                parse_f64(tok)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad float `{tok}`")))
            })
            .collect()
    }
}
