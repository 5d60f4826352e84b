use std::collections::BTreeMap;

use serde::Deserialize;

use super::{DType, TensorHandle};
use crate::error::{Error, Result};

/// Upper bound on the declared JSON header length.
pub const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Reads the little-endian header length from the first 8 bytes.
pub fn header_len(prefix: &[u8], context: &str) -> Result<u64> {
    let len_bytes: [u8; 8] = prefix
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::malformed(context, "file shorter than the 8-byte length prefix"))?;
    let len = u64::from_le_bytes(len_bytes);
    if len > MAX_HEADER_BYTES {
        return Err(Error::malformed(
            context,
            format!("declared header length {len} exceeds {MAX_HEADER_BYTES}"),
        ));
    }
    Ok(len)
}

/// Parses a safetensors prefix (length + JSON header) into tensor handles.
///
/// Handles are returned with `shard = 0`, keyed and iterated by name.
pub fn parse_header(prefix_bytes: &[u8]) -> Result<BTreeMap<String, TensorHandle>> {
    parse_header_in(prefix_bytes, "header", 0)
}

pub(crate) fn parse_header_in(
    prefix: &[u8],
    context: &str,
    shard: usize,
) -> Result<BTreeMap<String, TensorHandle>> {
    let len = header_len(prefix, context)? as usize;
    let json = prefix.get(8..8 + len).ok_or_else(|| {
        Error::malformed(
            context,
            format!(
                "declared header length {len} but only {} bytes follow",
                prefix.len() - 8
            ),
        )
    })?;
    let text = std::str::from_utf8(json)
        .map_err(|e| Error::malformed(context, format!("header is not UTF-8: {e}")))?;
    let object: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| Error::malformed(context, format!("header is not a JSON object: {e}")))?;

    let mut tensors = BTreeMap::new();
    for (name, value) in object {
        if name == "__metadata__" {
            continue;
        }
        let raw: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::malformed(context, format!("entry {name:?}: {e}")))?;
        let dtype = DType::from_tag(&raw.dtype).ok_or_else(|| Error::UnsupportedDType {
            tensor: name.clone(),
            dtype: raw.dtype.clone(),
        })?;
        let [start, end] = raw.data_offsets;
        if end < start {
            return Err(Error::malformed(
                context,
                format!("entry {name:?}: data_offsets [{start}, {end}] are reversed"),
            ));
        }
        let expected = raw
            .shape
            .iter()
            .try_fold(dtype.byte_size() as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::malformed(context, format!("entry {name:?}: shape overflows")))?;
        if end - start != expected {
            return Err(Error::SizeMismatch {
                tensor: name,
                expected,
                actual: end - start,
            });
        }
        let shape = raw
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::malformed(context, format!("entry {name:?}: dimension too large")))?;
        tensors.insert(
            name.clone(),
            TensorHandle {
                name,
                dtype,
                shape,
                byte_range: (start, end),
                shard,
            },
        );
    }

    let mut spans: Vec<(u64, u64, &str)> = tensors
        .values()
        .filter(|h| h.byte_range.1 > h.byte_range.0)
        .map(|h| (h.byte_range.0, h.byte_range.1, h.name.as_str()))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        let (_, prev_end, prev) = pair[0];
        let (start, _, cur) = pair[1];
        if start < prev_end {
            return Err(Error::malformed(
                context,
                format!("byte ranges of {prev:?} and {cur:?} overlap"),
            ));
        }
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prefix(json: &str) -> Vec<u8> {
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(json.as_bytes());
        out
    }

    #[test]
    fn f32_2x2() {
        let map = parse_header(&prefix(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
        ))
        .unwrap();
        let h = &map["w"];
        assert_eq!(h.byte_range, (0, 16));
        assert_eq!(h.shape, vec![2, 2]);
        assert_eq!(h.dtype, DType::F32);
    }

    #[test]
    fn size_mismatch() {
        let err = parse_header(&prefix(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}}"#,
        ))
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::SizeMismatch {
                    expected: 16,
                    actual: 12,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn int8_rejected() {
        let err = parse_header(&prefix(
            r#"{"w":{"dtype":"I8","shape":[4],"data_offsets":[0,4]}}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedDType { ref dtype, .. } if dtype == "I8"));
    }

    #[test]
    fn metadata_skipped_and_names_sorted() {
        let map = parse_header(&prefix(
            r#"{"__metadata__":{"format":"pt"},"b":{"dtype":"BF16","shape":[3],"data_offsets":[8,14]},"a":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#,
        ))
        .unwrap();
        assert_eq!(map.keys().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn truncated_and_garbage_headers() {
        assert!(matches!(
            parse_header(&[1, 2, 3]),
            Err(Error::HeaderMalformed { .. })
        ));
        let mut p = prefix("{}");
        p[0] = 50;
        assert!(matches!(parse_header(&p), Err(Error::HeaderMalformed { .. })));
        assert!(matches!(
            parse_header(&prefix("[1,2]")),
            Err(Error::HeaderMalformed { .. })
        ));
        assert!(matches!(
            parse_header(&prefix(r#"{"w":{"dtype":"F32","shape":[1]}}"#)),
            Err(Error::HeaderMalformed { .. })
        ));
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let err = parse_header(&prefix(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn zero_sized_tensors_allowed() {
        let map = parse_header(&prefix(
            r#"{"a":{"dtype":"F32","shape":[0,4],"data_offsets":[0,0]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
        ))
        .unwrap();
        assert_eq!(map["a"].element_count(), 0);
    }
}
