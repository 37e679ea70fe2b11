//! Canonical, type-marked JSON encoding and the definition hash.
//!
//! Output is compact JSON with byte-ordered object keys and every non-ASCII
//! code point escaped as UTF-16 `\uXXXX` units. Values JSON cannot represent
//! natively are wrapped as `{"__t__":<type>,"v":<form>}`, so a timestamp never
//! encodes the same as its string rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{DateTime, SecondsFormat, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::AgentDefinition;

pub const TYPE_TAG: &str = "__t__";

const MAX_SAFE_INT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CanonicalError {
    #[error("unsupported value type: {0}")]
    UnsupportedValueType(String),
    #[error("map key {TYPE_TAG:?} is reserved for type wrappers")]
    ReservedKey,
    #[error("malformed canonical input: {0}")]
    Malformed(String),
}

/// A tree of values that can be canonically encoded.
#[derive(Debug, Clone, PartialEq)]
pub enum CanonicalValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
    List(Vec<CanonicalValue>),
    Map(BTreeMap<String, CanonicalValue>),
    Timestamp(DateTime<Utc>),
    Bytes(Vec<u8>),
    Decimal(Decimal),
    Set(Vec<CanonicalValue>),
}

impl CanonicalValue {
    pub fn str(s: impl Into<String>) -> Self {
        CanonicalValue::String(s.into())
    }

    pub fn string_list<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CanonicalValue::List(items.into_iter().map(|s| CanonicalValue::String(s.into())).collect())
    }

    pub fn string_set<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CanonicalValue::Set(items.into_iter().map(|s| CanonicalValue::String(s.into())).collect())
    }

    pub fn opt_str(s: Option<&str>) -> Self {
        s.map_or(CanonicalValue::Null, CanonicalValue::str)
    }

    /// Plain JSON rendering for display. Wrapped types lose their marker.
    pub fn to_display_json(&self) -> Value {
        match self {
            CanonicalValue::Null => Value::Null,
            CanonicalValue::Bool(b) => Value::Bool(*b),
            CanonicalValue::Int(i) => Value::from(*i),
            CanonicalValue::Float(f) => serde_json::Number::from_f64(*f).map_or(Value::Null, Value::Number),
            CanonicalValue::String(s) => Value::String(s.clone()),
            CanonicalValue::List(items) | CanonicalValue::Set(items) => {
                Value::Array(items.iter().map(|v| v.to_display_json()).collect())
            }
            CanonicalValue::Map(m) => {
                Value::Object(m.iter().map(|(k, v)| (k.clone(), v.to_display_json())).collect())
            }
            CanonicalValue::Timestamp(t) => Value::String(format_timestamp(t)),
            CanonicalValue::Bytes(b) => Value::String(B64.encode(b)),
            CanonicalValue::Decimal(d) => Value::String(d.normalize().to_string()),
        }
    }
}

impl From<&Value> for CanonicalValue {
    fn from(v: &Value) -> Self {
        match v {
            Value::Null => CanonicalValue::Null,
            Value::Bool(b) => CanonicalValue::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) => CanonicalValue::Int(i),
                None => CanonicalValue::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            Value::String(s) => CanonicalValue::String(s.clone()),
            Value::Array(items) => CanonicalValue::List(items.iter().map(CanonicalValue::from).collect()),
            Value::Object(m) => {
                CanonicalValue::Map(m.iter().map(|(k, v)| (k.clone(), CanonicalValue::from(v))).collect())
            }
        }
    }
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Encode a value to canonical bytes.
pub fn canonical_bytes(value: &CanonicalValue) -> Result<Vec<u8>, CanonicalError> {
    let mut out = String::new();
    write_value(&mut out, value)?;
    Ok(out.into_bytes())
}

/// Canonical bytes of a plain JSON document.
pub fn canonical_json(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    canonical_bytes(&CanonicalValue::from(value))
}

fn write_value(out: &mut String, value: &CanonicalValue) -> Result<(), CanonicalError> {
    match value {
        CanonicalValue::Null => out.push_str("null"),
        CanonicalValue::Bool(true) => out.push_str("true"),
        CanonicalValue::Bool(false) => out.push_str("false"),
        CanonicalValue::Int(i) => out.push_str(&i.to_string()),
        CanonicalValue::Float(f) => write_float(out, *f)?,
        CanonicalValue::String(s) => write_string(out, s),
        CanonicalValue::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item)?;
            }
            out.push(']');
        }
        CanonicalValue::Map(m) => {
            if m.contains_key(TYPE_TAG) {
                return Err(CanonicalError::ReservedKey);
            }
            out.push('{');
            for (i, (k, v)) in m.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(out, k);
                out.push(':');
                write_value(out, v)?;
            }
            out.push('}');
        }
        CanonicalValue::Timestamp(t) => write_wrapper(out, "datetime", |o| {
            write_string(o, &format_timestamp(t));
            Ok(())
        })?,
        CanonicalValue::Bytes(b) => write_wrapper(out, "bytes", |o| {
            write_string(o, &B64.encode(b));
            Ok(())
        })?,
        CanonicalValue::Decimal(d) => write_wrapper(out, "decimal", |o| {
            write_string(o, &d.normalize().to_string());
            Ok(())
        })?,
        CanonicalValue::Set(items) => {
            let mut encoded = items
                .iter()
                .map(|item| {
                    let mut s = String::new();
                    write_value(&mut s, item).map(|_| s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            encoded.sort_unstable_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
            encoded.dedup();
            write_wrapper(out, "set", |o| {
                o.push('[');
                o.push_str(&encoded.join(","));
                o.push(']');
                Ok(())
            })?;
        }
    }
    Ok(())
}

fn write_wrapper(
    out: &mut String,
    type_name: &str,
    inner: impl FnOnce(&mut String) -> Result<(), CanonicalError>,
) -> Result<(), CanonicalError> {
    out.push_str("{\"__t__\":");
    write_string(out, type_name);
    out.push_str(",\"v\":");
    inner(out)?;
    out.push('}');
    Ok(())
}

fn write_float(out: &mut String, f: f64) -> Result<(), CanonicalError> {
    if !f.is_finite() {
        return Err(CanonicalError::UnsupportedValueType(format!("non-finite float {f}")));
    }
    let abs = f.abs();
    if f == f.trunc() && abs < MAX_SAFE_INT {
        out.push_str(&(f as i64).to_string());
    } else if abs >= MAX_SAFE_INT || abs < 1e-6 {
        out.push_str(&format!("{f:e}"));
    } else {
        out.push_str(&f.to_string());
    }
    Ok(())
}

fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\u{08}' => out.push_str("\\b"),
            '\u{0c}' => out.push_str("\\f"),
            c if (c as u32) < 0x20 || (c as u32) > 0x7e => {
                let mut units = [0u16; 2];
                for unit in c.encode_utf16(&mut units) {
                    out.push_str(&format!("\\u{unit:04x}"));
                }
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Decode canonical bytes, restoring wrapped types.
pub fn parse_canonical(bytes: &[u8]) -> Result<CanonicalValue, CanonicalError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| CanonicalError::Malformed(e.to_string()))?;
    decode(&v)
}

fn decode(v: &Value) -> Result<CanonicalValue, CanonicalError> {
    match v {
        Value::Array(items) => Ok(CanonicalValue::List(items.iter().map(decode).collect::<Result<_, _>>()?)),
        Value::Object(m) if m.contains_key(TYPE_TAG) => {
            let malformed = || CanonicalError::Malformed(format!("bad wrapper {v}"));
            if m.len() != 2 {
                return Err(malformed());
            }
            let inner = m.get("v").ok_or_else(malformed)?;
            match m[TYPE_TAG].as_str().ok_or_else(malformed)? {
                "datetime" => {
                    let s = inner.as_str().ok_or_else(malformed)?;
                    let t = DateTime::parse_from_rfc3339(s).map_err(|_| malformed())?;
                    Ok(CanonicalValue::Timestamp(t.with_timezone(&Utc)))
                }
                "bytes" => {
                    let s = inner.as_str().ok_or_else(malformed)?;
                    Ok(CanonicalValue::Bytes(B64.decode(s).map_err(|_| malformed())?))
                }
                "decimal" => {
                    let s = inner.as_str().ok_or_else(malformed)?;
                    Ok(CanonicalValue::Decimal(s.parse().map_err(|_| malformed())?))
                }
                "set" => {
                    let items = inner.as_array().ok_or_else(malformed)?;
                    Ok(CanonicalValue::Set(items.iter().map(decode).collect::<Result<_, _>>()?))
                }
                other => Err(CanonicalError::UnsupportedValueType(other.to_string())),
            }
        }
        Value::Object(m) => Ok(CanonicalValue::Map(
            m.iter()
                .map(|(k, v)| decode(v).map(|d| (k.clone(), d)))
                .collect::<Result<_, _>>()?,
        )),
        other => Ok(CanonicalValue::from(other)),
    }
}

/// The policy-bearing fields that feed the definition hash.
pub const HASHED_FIELDS: [&str; 18] = [
    "name",
    "description",
    "system_prompt",
    "model",
    "tools",
    "denied_tools",
    "human_loop",
    "access_level",
    "can_override",
    "can_revert",
    "can_delegate_to",
    "required_roles",
    "extends",
    "data_classes",
    "security_caps",
    "provenance",
    "model_trust",
    "compliance_scope",
];

/// The 18-field projection of a definition.
pub fn project(def: &AgentDefinition) -> BTreeMap<String, CanonicalValue> {
    use CanonicalValue as C;
    let entries: [(&str, CanonicalValue); 18] = [
        ("name", C::str(&def.name)),
        ("description", C::str(&def.description)),
        ("system_prompt", C::str(&def.system_prompt)),
        ("model", C::str(&def.model)),
        ("tools", C::string_list(def.tools.iter().cloned())),
        ("denied_tools", C::string_list(def.denied_tools.iter().cloned())),
        ("human_loop", C::str(def.human_loop.as_str())),
        ("access_level", C::str(def.access_level.as_str())),
        ("can_override", C::Bool(def.can_override)),
        ("can_revert", C::Bool(def.can_revert)),
        ("can_delegate_to", C::string_list(def.can_delegate_to.iter().cloned())),
        ("required_roles", C::string_list(def.required_roles.iter().cloned())),
        ("extends", C::opt_str(def.extends.as_deref())),
        ("data_classes", C::string_set(def.data_classes.iter().map(|d| d.as_str()))),
        ("security_caps", C::string_set(def.security_caps.iter().map(|c| c.as_str()))),
        ("provenance", C::str(def.provenance.as_str())),
        ("model_trust", C::str(def.model_trust.as_str())),
        ("compliance_scope", C::string_set(def.compliance_scope.iter().cloned())),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// SHA-256 over the canonical encoding of a definition's projection.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DefinitionHash(pub [u8; 32]);

impl DefinitionHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for DefinitionHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for DefinitionHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DefinitionHash({})", self.to_hex())
    }
}

impl FromStr for DefinitionHash {
    type Err = CanonicalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| CanonicalError::Malformed(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CanonicalError::Malformed("hash must be 32 bytes".into()))?;
        Ok(DefinitionHash(arr))
    }
}

impl Serialize for DefinitionHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for DefinitionHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub fn hash_projection(projection: &BTreeMap<String, CanonicalValue>) -> DefinitionHash {
    let bytes = canonical_bytes(&CanonicalValue::Map(projection.clone()))
        .expect("projection holds only strings, bools, lists and sets");
    DefinitionHash(Sha256::digest(bytes).into())
}

pub fn definition_hash(def: &AgentDefinition) -> DefinitionHash {
    hash_projection(&project(def))
}
