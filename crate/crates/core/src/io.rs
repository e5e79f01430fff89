//! Versioned JSON files with lossless float encoding.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter};

use crate::error::{Error, Result};

/// Compact JSON with every float written to 17 significant digits, which
/// round-trips binary64 exactly.
struct Sig17(CompactFormatter);

impl Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(CompactFormatter));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Write through a sibling temporary file and rename, so readers never see
/// a partially written file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_string(value)?)
}

/// Parse a JSON document whose top-level `schema` field must equal `expected`.
pub fn from_json_str<T: DeserializeOwned>(text: &str, expected: &'static str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == expected => {}
        Some(s) => {
            return Err(Error::Schema {
                found: s.to_string(),
                expected,
            })
        }
        None => return Err(Error::Format("missing 'schema' field".into())),
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, expected: &'static str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    from_json_str(&text, expected).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Doc {
        schema: String,
        x: Vec<f64>,
    }

    #[test]
    fn floats_round_trip_bitwise() {
        let x = vec![
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            6.02214076e23,
            0.0,
            f64::MIN_POSITIVE,
        ];
        let doc = Doc {
            schema: "s-v1".into(),
            x,
        };
        let text = to_json_string(&doc).unwrap();
        let back: Doc = from_json_str(&text, "s-v1").unwrap();
        let bits = |d: &Doc| d.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&doc));
        assert!(text.contains("3.3333333333333331e-1"));
    }

    #[test]
    fn foreign_schema_is_rejected() {
        let err = from_json_str::<Doc>(r#"{"schema":"other-v9","x":[]}"#, "s-v1").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
        assert!(err.to_string().contains("other-v9"));
    }

    #[test]
    fn truncated_text_is_a_format_error() {
        let err = from_json_str::<Doc>(r#"{"schema":"s-v1","x":[1.0,"#, "s-v1").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
