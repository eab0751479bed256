//! Self-describing length-prefixed tagged binary encoding with seven value
//! kinds. This is the command channel's native serialization; a command
//! message is a list of [tag, name, params] triples built from these values.
//!
//! Wire format: one kind byte (0=null, 1=bool, 2=int, 3=bytes, 4=text,
//! 5=list, 6=map) followed by kind-specific big-endian length/content fields.

use crate::{Error, Result};

const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Bytes(Vec<u8>),
    Text(String),
    List(Vec<Value>),
    Map(Vec<(Value, Value)>),
}

impl Value {
    pub fn text(s: &str) -> Value {
        Value::Text(s.to_string())
    }

    pub fn bytes(b: &[u8]) -> Value {
        Value::Bytes(b.to_vec())
    }

    pub fn as_text(&self) -> Result<&str> {
        match self {
            Value::Text(s) => Ok(s),
            other => Err(Error::Encoding(format!("expected text, got {}", other.kind_name()))),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match self {
            Value::Bytes(b) => Ok(b),
            other => Err(Error::Encoding(format!("expected bytes, got {}", other.kind_name()))),
        }
    }

    pub fn as_int(&self) -> Result<i64> {
        match self {
            Value::Int(i) => Ok(*i),
            other => Err(Error::Encoding(format!("expected int, got {}", other.kind_name()))),
        }
    }

    pub fn as_list(&self) -> Result<&[Value]> {
        match self {
            Value::List(l) => Ok(l),
            other => Err(Error::Encoding(format!("expected list, got {}", other.kind_name()))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Bytes(_) => "bytes",
            Value::Text(_) => "text",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::Null => out.push(0),
            Value::Bool(b) => {
                out.push(1);
                out.push(*b as u8);
            }
            Value::Int(i) => {
                out.push(2);
                out.extend_from_slice(&i.to_be_bytes());
            }
            Value::Bytes(b) => {
                out.push(3);
                out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                out.extend_from_slice(b);
            }
            Value::Text(s) => {
                out.push(4);
                out.extend_from_slice(&(s.len() as u32).to_be_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Value::List(items) => {
                out.push(5);
                out.extend_from_slice(&(items.len() as u32).to_be_bytes());
                for item in items {
                    item.encode_into(out);
                }
            }
            Value::Map(pairs) => {
                out.push(6);
                out.extend_from_slice(&(pairs.len() as u32).to_be_bytes());
                for (k, v) in pairs {
                    k.encode_into(out);
                    v.encode_into(out);
                }
            }
        }
    }

    /// Strict decode: the whole buffer must be exactly one value.
    pub fn decode(bytes: &[u8]) -> Result<Value> {
        let mut at = 0;
        let v = Self::decode_at(bytes, &mut at, 0)?;
        if at != bytes.len() {
            return Err(Error::Encoding(format!("{} trailing bytes after value", bytes.len() - at)));
        }
        Ok(v)
    }

    fn decode_at(bytes: &[u8], at: &mut usize, depth: usize) -> Result<Value> {
        if depth > MAX_DEPTH {
            return Err(Error::Encoding("value nesting too deep".into()));
        }
        let kind = *bytes.get(*at).ok_or_else(|| Error::Encoding("truncated value".into()))?;
        *at += 1;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > bytes.len() {
                return Err(Error::Encoding("truncated value".into()));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let len32 = |at: &mut usize| -> Result<usize> {
            let raw = take(at, 4)?;
            Ok(u32::from_be_bytes(raw.try_into().unwrap()) as usize)
        };
        match kind {
            0 => Ok(Value::Null),
            1 => match take(at, 1)?[0] {
                0 => Ok(Value::Bool(false)),
                1 => Ok(Value::Bool(true)),
                other => Err(Error::Encoding(format!("bad bool byte {other}"))),
            },
            2 => Ok(Value::Int(i64::from_be_bytes(take(at, 8)?.try_into().unwrap()))),
            3 => {
                let n = len32(at)?;
                Ok(Value::Bytes(take(at, n)?.to_vec()))
            }
            4 => {
                let n = len32(at)?;
                let raw = take(at, n)?;
                String::from_utf8(raw.to_vec())
                    .map(Value::Text)
                    .map_err(|_| Error::Encoding("invalid utf-8 in text".into()))
            }
            5 => {
                let n = len32(at)?;
                if n > bytes.len() {
                    return Err(Error::Encoding("list count exceeds buffer".into()));
                }
                let mut items = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    items.push(Self::decode_at(bytes, at, depth + 1)?);
                }
                Ok(Value::List(items))
            }
            6 => {
                let n = len32(at)?;
                if n > bytes.len() {
                    return Err(Error::Encoding("map count exceeds buffer".into()));
                }
                let mut pairs = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let k = Self::decode_at(bytes, at, depth + 1)?;
                    let v = Self::decode_at(bytes, at, depth + 1)?;
                    pairs.push((k, v));
                }
                Ok(Value::Map(pairs))
            }
            other => Err(Error::Encoding(format!("unknown value kind {other}"))),
        }
    }

    /// JSON view for the client CLI: bytes render as {"__bytes_hex": ...},
    /// maps with non-text keys as {"__map": [[k, v], ...]}.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Value::Null => serde_json::Value::Null,
            Value::Bool(b) => json!(b),
            Value::Int(i) => json!(i),
            Value::Bytes(b) => json!({ "__bytes_hex": hex::encode(b) }),
            Value::Text(s) => json!(s),
            Value::List(items) => serde_json::Value::Array(items.iter().map(Value::to_json).collect()),
            Value::Map(pairs) => {
                if pairs.iter().all(|(k, _)| matches!(k, Value::Text(_))) {
                    let mut obj = serde_json::Map::new();
                    for (k, v) in pairs {
                        obj.insert(k.as_text().unwrap().to_string(), v.to_json());
                    }
                    serde_json::Value::Object(obj)
                } else {
                    json!({ "__map": pairs.iter().map(|(k, v)| json!([k.to_json(), v.to_json()])).collect::<Vec<_>>() })
                }
            }
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Value> {
        match v {
            serde_json::Value::Null => Ok(Value::Null),
            serde_json::Value::Bool(b) => Ok(Value::Bool(*b)),
            serde_json::Value::Number(n) => n
                .as_i64()
                .map(Value::Int)
                .ok_or_else(|| Error::Encoding(format!("non-integer number {n}"))),
            serde_json::Value::String(s) => Ok(Value::Text(s.clone())),
            serde_json::Value::Array(items) => {
                Ok(Value::List(items.iter().map(Value::from_json).collect::<Result<_>>()?))
            }
            serde_json::Value::Object(obj) => {
                if let Some(h) = obj.get("__bytes_hex") {
                    let s = h.as_str().ok_or_else(|| Error::Encoding("__bytes_hex must be a string".into()))?;
                    return Ok(Value::Bytes(hex::decode(s).map_err(|e| Error::Encoding(e.to_string()))?));
                }
                if let Some(m) = obj.get("__map") {
                    let arr = m.as_array().ok_or_else(|| Error::Encoding("__map must be an array".into()))?;
                    let mut pairs = Vec::new();
                    for entry in arr {
                        let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                            Error::Encoding("__map entries must be [key, value] pairs".into())
                        })?;
                        pairs.push((Value::from_json(&pair[0])?, Value::from_json(&pair[1])?));
                    }
                    return Ok(Value::Map(pairs));
                }
                let mut pairs = Vec::new();
                for (k, val) in obj {
                    pairs.push((Value::Text(k.clone()), Value::from_json(val)?));
                }
                Ok(Value::Map(pairs))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::Int),
            proptest::collection::vec(any::<u8>(), 0..64).prop_map(Value::Bytes),
            "[a-zA-Z0-9 /._-]{0,24}".prop_map(Value::Text),
        ];
        leaf.prop_recursive(3, 64, 8, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
                proptest::collection::vec((inner.clone(), inner), 0..4).prop_map(Value::Map),
            ]
        })
    }

    proptest! {
        #[test]
        fn encoding_roundtrips(v in arb_value()) {
            let bytes = v.encode();
            prop_assert_eq!(Value::decode(&bytes).unwrap(), v);
        }

        #[test]
        fn decode_never_panics_on_noise(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Value::decode(&bytes);
        }
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = Value::Text("hello".into()).encode();
        assert!(Value::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes;
        extended.push(0);
        assert!(Value::decode(&extended).is_err());
    }

    #[test]
    fn json_bridge_roundtrips_typical_params() {
        let v = Value::List(vec![
            Value::text("LISTDIR"),
            Value::bytes(&[1, 2, 3]),
            Value::Int(-5),
            Value::Map(vec![(Value::text("k"), Value::Null)]),
        ]);
        let j = v.to_json();
        assert_eq!(Value::from_json(&j).unwrap(), v);
    }
}
