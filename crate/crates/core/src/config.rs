//! `key=value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Constraint(String),
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped. Later
/// duplicates override earlier ones.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let mut v = parse_kv(s)?;
    match v.len() {
        1 => Ok(v.remove(0)),
        _ => Err(ConfigError::Syntax {
            line: 1,
            text: s.to_string(),
        }),
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Renders pairs as a `key=value` file body.
pub fn render_kv(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn to_map(pairs: &[(String, String)]) -> BTreeMap<String, String> {
    pairs.iter().cloned().collect()
}

/// `%g`-style rendering with `digits` significant digits: fixed notation for
/// decimal exponents in `-4..digits`, scientific otherwise, trailing zeros
/// trimmed.
pub fn format_sig(v: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_rendering() {
        assert_eq!(format_sig(0.0, 6), "0");
        assert_eq!(format_sig(1.0, 6), "1");
        assert_eq!(format_sig(0.001, 6), "0.001");
        assert_eq!(format_sig(123.456789, 6), "123.457");
        assert_eq!(format_sig(5.05e-4, 6), "0.000505");
        assert_eq!(format_sig(1e-5, 6), "1e-05");
        assert_eq!(format_sig(1234567.0, 6), "1.23457e+06");
        assert_eq!(format_sig(-0.70710678, 4), "-0.7071");
        assert_eq!(format_sig(0.12, 4), "0.12");
        assert_eq!(format_sig(999999.5, 6), "1e+06");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let kv = parse_kv("# header\n\na = 1\nb=two # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
    }

    #[test]
    fn missing_equals_reports_line() {
        assert_eq!(
            parse_kv("a=1\nnope\n"),
            Err(ConfigError::Syntax {
                line: 2,
                text: "nope".into()
            })
        );
    }
}

/// Declares a flat configuration struct whose fields double as `key=value`
/// keys, with defaults and one-line help used by `--help` listings.
#[macro_export]
macro_rules! kv_config {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $field:ident : $ty:ty = $default:expr => $help:literal, )*
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            /// `(key, help)` for every field, in declaration order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[ $( (stringify!($field), $help), )* ];

            /// Applies one override; `Ok(false)` when the key is not ours.
            pub fn set(&mut self, key: &str, value: &str) -> Result<bool, $crate::config::ConfigError> {
                match key {
                    $( stringify!($field) => {
                        self.$field = $crate::config::parse_value(key, value)?;
                        Ok(true)
                    } )*
                    _ => Ok(false),
                }
            }

            pub fn pairs(&self) -> Vec<(String, String)> {
                vec![ $( (stringify!($field).to_string(), self.$field.to_string()), )* ]
            }
        }
    };
}
