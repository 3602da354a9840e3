//! JSON serialization with fixed-width float formatting.
//!
//! Records and reports write every f64 in scientific notation with 17
//! significant digits, which round-trips exactly and keeps golden files
//! byte-stable across runs.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::{Error, Result};

struct SciFloats;

// serde_json never routes non-finite floats here (they serialize as null,
// which a reload then rejects as a type error).
impl Formatter for SciFloats {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serialize to a JSON string with 17-significant-digit floats.
pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Json(e))?;
    String::from_utf8(out).map_err(|e| Error::Format(format!("json is not utf8: {e}")))
}

/// Serialize and write to a file, creating parent directories.
pub fn write_file<T: Serialize>(value: &T, path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, to_string(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn floats_use_scientific_notation() {
        let s = to_string(&0.5f64).unwrap();
        assert_eq!(s, "5.0000000000000000e-1");
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let s = to_string(&v).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(v.to_bits(), back.to_bits());
        }
    }
}
