//! Unit-suffixed quantities in scenario files.
//!
//! Config values are either bare numbers (interpreted as strict SI) or
//! strings of the form "<number> <unit>", converted to SI on ingestion.
//! Temperatures additionally accept degC with the 273.15 offset.

use crate::error::{CliError, Result};

pub const EPS0: f64 = 8.8541878128e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Time,
    Voltage,
    ElectricField,
    Conductivity,
    Permittivity,
    ThermalConductivity,
    HeatCapacity,
    Temperature,
    Dimensionless,
}

impl Dimension {
    fn table(self) -> &'static [(&'static str, f64, f64)] {
        // (suffix, factor, offset)
        match self {
            Dimension::Length => &[("m", 1.0, 0.0), ("cm", 1e-2, 0.0), ("mm", 1e-3, 0.0)],
            Dimension::Time => &[("s", 1.0, 0.0), ("ms", 1e-3, 0.0), ("us", 1e-6, 0.0)],
            Dimension::Voltage => &[("V", 1.0, 0.0), ("kV", 1e3, 0.0), ("MV", 1e6, 0.0)],
            Dimension::ElectricField => &[
                ("V/m", 1.0, 0.0),
                ("kV/m", 1e3, 0.0),
                ("V/mm", 1e3, 0.0),
                ("kV/mm", 1e6, 0.0),
            ],
            Dimension::Conductivity => &[("S/m", 1.0, 0.0)],
            Dimension::Permittivity => &[("F/m", 1.0, 0.0), ("eps0", EPS0, 0.0)],
            Dimension::ThermalConductivity => &[("W/(m.K)", 1.0, 0.0), ("W/mK", 1.0, 0.0)],
            Dimension::HeatCapacity => &[
                ("J/(K.m3)", 1.0, 0.0),
                ("J/(K.m^3)", 1.0, 0.0),
                ("J/Km3", 1.0, 0.0),
            ],
            Dimension::Temperature => &[("K", 1.0, 0.0), ("degC", 1.0, 273.15)],
            Dimension::Dimensionless => &[],
        }
    }

    pub fn expected(self) -> String {
        let units: Vec<&str> = self.table().iter().map(|(u, _, _)| *u).collect();
        if units.is_empty() {
            "a bare number".into()
        } else {
            units.join(", ")
        }
    }
}

/// Parse "<number> <unit>" (or a bare numeric string) into SI. The unit is
/// separated from the number by whitespace.
pub fn parse_quantity(text: &str, dim: Dimension, key: &str) -> Result<f64> {
    let s = text.trim();
    let (num_str, unit) = match s.find(char::is_whitespace) {
        Some(pos) => (&s[..pos], s[pos..].trim()),
        None => (s, ""),
    };
    let value: f64 = num_str.trim().parse().map_err(|_| {
        CliError::Config(format!("{key}: cannot parse number in '{text}'"))
    })?;
    if unit.is_empty() {
        return Ok(value);
    }
    for &(suffix, factor, offset) in dim.table() {
        if unit == suffix {
            return Ok(value * factor + offset);
        }
    }
    Err(CliError::Config(format!(
        "{key}: unknown unit '{unit}' (expected one of: {})",
        dim.expected()
    )))
}

/// A config value that is either a bare SI number or a unit-suffixed string.
pub fn from_toml(value: &toml::Value, dim: Dimension, key: &str) -> Result<f64> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => parse_quantity(s, dim, key),
        other => Err(CliError::Config(format!(
            "{key}: expected a number or a '<value> <unit>' string, got {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_numbers_pass_through() {
        assert_eq!(parse_quantity("3.5", Dimension::Length, "k").unwrap(), 3.5);
        assert_eq!(parse_quantity("1e-10", Dimension::Conductivity, "k").unwrap(), 1e-10);
    }

    #[test]
    fn unit_suffixes_convert() {
        assert_eq!(parse_quantity("0.7 kV/mm", Dimension::ElectricField, "p2").unwrap(), 0.7e6);
        assert_eq!(parse_quantity("0.7 kV/m", Dimension::ElectricField, "p2").unwrap(), 700.0);
        assert_eq!(parse_quantity("30 ms", Dimension::Time, "t").unwrap(), 30e-3);
        assert_eq!(parse_quantity("320 kV", Dimension::Voltage, "u").unwrap(), 320e3);
        assert_eq!(parse_quantity("65 degC", Dimension::Temperature, "th").unwrap(), 338.15);
        assert_eq!(parse_quantity("2.3 eps0", Dimension::Permittivity, "e").unwrap(), 2.3 * EPS0);
    }

    #[test]
    fn bad_units_are_rejected_with_the_key() {
        let err = parse_quantity("3 furlong", Dimension::Length, "geometry.h_target")
            .unwrap_err()
            .to_string();
        assert!(err.contains("geometry.h_target"), "{err}");
        assert!(err.contains("furlong"), "{err}");
    }
}
