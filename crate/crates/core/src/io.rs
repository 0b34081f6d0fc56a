//! Feature files and parameter checkpoints.
//!
//! Binary feature file:
//!
//! ```text
//! OCCREC1 <M> <D> <count> <has_labels:0|1>\n
//! {"image_id":..,"person_id":..,"camera_id":..,"visibility":[M floats]}\n
//! <M*D little-endian f32>
//! ... one JSON line + payload per image
//! ```
//!
//! Files ending in `.json` hold the same content as one JSON document with
//! features inline. Checkpoints reuse the container idea: one text header
//! line followed by a raw little-endian f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, PartFeatureSet, Split};

pub const FEATURE_MAGIC: &str = "OCCREC1";

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    image_id: String,
    person_id: Option<i64>,
    camera_id: Option<i64>,
    visibility: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    image_id: String,
    person_id: Option<i64>,
    camera_id: Option<i64>,
    visibility: Vec<f64>,
    features: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct JsonFeatureFile {
    format: String,
    m: usize,
    d: usize,
    count: usize,
    has_labels: bool,
    items: Vec<JsonRecord>,
}

/// Split implied by a file name: the stem must contain `train`, `query` or
/// `gallery`; anything else reads as a gallery.
pub fn split_from_path(path: &Path) -> Split {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if stem.contains("train") {
        Split::Train
    } else if stem.contains("query") {
        Split::Query
    } else {
        Split::Gallery
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn write_feature_file(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = if is_json(path) {
        encode_json(ds)?
    } else {
        encode_binary(ds)?
    };
    write_atomic(path, &bytes)
}

/// Reads a feature file, inferring the split from the file name.
pub fn read_feature_file(path: &Path) -> Result<Dataset> {
    read_feature_file_as(path, split_from_path(path))
}

pub fn read_feature_file_as(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if is_json(path) {
        decode_json(&bytes, path, split)
    } else {
        decode_binary(&bytes, path, split)
    }
}

pub fn encode_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let (m, d) = (ds.parts(), ds.dim());
    let mut out = Vec::with_capacity(64 + ds.len() * (m * d * 4 + 128));
    writeln!(
        out,
        "{FEATURE_MAGIC} {m} {d} {} {}",
        ds.len(),
        u8::from(ds.has_labels())
    )?;
    for it in ds.items() {
        let head = RecordHeader {
            image_id: it.image_id.clone(),
            person_id: it.person_id,
            camera_id: it.camera_id,
            visibility: it.visibility_scores().to_vec(),
        };
        serde_json::to_writer(&mut out, &head)?;
        out.push(b'\n');
        for v in it.features() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    let bad = |msg: String| Error::format(path, msg);
    let (header, mut pos) = next_line(bytes, 0).ok_or_else(|| bad("missing header".into()))?;
    let tokens: Vec<&str> = header.split_ascii_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != FEATURE_MAGIC {
        return Err(bad(format!("bad header {header:?}")));
    }
    let num = |i: usize| -> Result<usize> {
        tokens[i]
            .parse()
            .map_err(|_| bad(format!("bad header field {:?}", tokens[i])))
    };
    let (m, d, count, has_labels) = (num(1)?, num(2)?, num(3)?, num(4)?);
    if m == 0 || d == 0 || has_labels > 1 {
        return Err(bad(format!("bad header {header:?}")));
    }
    let payload = m * d * 4;
    let mut items = Vec::with_capacity(count);
    for n in 0..count {
        let (line, after) =
            next_line(bytes, pos).ok_or_else(|| bad(format!("truncated at record {n}")))?;
        let head: RecordHeader = serde_json::from_str(line)
            .map_err(|e| bad(format!("record {n}: {e}")))?;
        if after + payload > bytes.len() {
            return Err(bad(format!("truncated payload in record {n}")));
        }
        let feats = bytes[after..after + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos = after + payload;
        if has_labels == 1 && head.person_id.is_none() {
            return Err(bad(format!("record {n}: header promises labels")));
        }
        items.push(
            PartFeatureSet::new(
                head.image_id,
                head.person_id,
                head.camera_id,
                m,
                d,
                feats,
                head.visibility,
            )
            .map_err(|e| bad(format!("record {n}: {e}")))?,
        );
    }
    if pos != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - pos
        )));
    }
    Dataset::new(split, m, d, items)
}

fn encode_json(ds: &Dataset) -> Result<Vec<u8>> {
    let doc = JsonFeatureFile {
        format: FEATURE_MAGIC.to_string(),
        m: ds.parts(),
        d: ds.dim(),
        count: ds.len(),
        has_labels: ds.has_labels(),
        items: ds
            .items()
            .iter()
            .map(|it| JsonRecord {
                image_id: it.image_id.clone(),
                person_id: it.person_id,
                camera_id: it.camera_id,
                visibility: it.visibility_scores().to_vec(),
                features: (0..it.parts()).map(|p| it.part(p).to_vec()).collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc)?;
    out.push(b'\n');
    Ok(out)
}

fn decode_json(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    let bad = |msg: String| Error::format(path, msg);
    let doc: JsonFeatureFile =
        serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
    if doc.format != FEATURE_MAGIC {
        return Err(bad(format!("unknown format {:?}", doc.format)));
    }
    if doc.count != doc.items.len() {
        return Err(bad(format!(
            "count {} but {} items",
            doc.count,
            doc.items.len()
        )));
    }
    let mut items = Vec::with_capacity(doc.items.len());
    for (n, rec) in doc.items.into_iter().enumerate() {
        if rec.features.len() != doc.m || rec.features.iter().any(|f| f.len() != doc.d) {
            return Err(bad(format!("record {n}: feature shape differs from header")));
        }
        if doc.has_labels && rec.person_id.is_none() {
            return Err(bad(format!("record {n}: header promises labels")));
        }
        items.push(
            PartFeatureSet::new(
                rec.image_id,
                rec.person_id,
                rec.camera_id,
                doc.m,
                doc.d,
                rec.features.concat(),
                rec.visibility,
            )
            .map_err(|e| bad(format!("record {n}: {e}")))?,
        );
    }
    Dataset::new(split, doc.m, doc.d, items)
}

fn next_line(bytes: &[u8], start: usize) -> Option<(&str, usize)> {
    let rel = bytes.get(start..)?.iter().position(|&b| b == b'\n')?;
    let line = std::str::from_utf8(&bytes[start..start + rel]).ok()?;
    Some((line, start + rel + 1))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Binary checkpoint: `<magic> <fields...>\n` then little-endian f32 values.
pub fn write_container(path: &Path, magic: &str, fields: &[usize], payload: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(64 + payload.len() * 4);
    write!(out, "{magic}")?;
    for f in fields {
        write!(out, " {f}")?;
    }
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

/// Reads a container written by [`write_container`]; the payload length
/// must equal `expected_len(fields)`.
pub fn read_container(
    path: &Path,
    magic: &str,
    num_fields: usize,
    expected_len: impl Fn(&[usize]) -> usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::format(path, msg);
    let (header, pos) = next_line(&bytes, 0).ok_or_else(|| bad("missing header".into()))?;
    let tokens: Vec<&str> = header.split_ascii_whitespace().collect();
    if tokens.first() != Some(&magic) || tokens.len() != num_fields + 1 {
        return Err(bad(format!("expected {magic} header, got {header:?}")));
    }
    let fields = tokens[1..]
        .iter()
        .map(|t| t.parse().map_err(|_| bad(format!("bad header field {t:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let body = &bytes[pos..];
    let want = expected_len(&fields);
    if body.len() != want * 4 {
        return Err(bad(format!(
            "payload has {} bytes, header implies {}",
            body.len(),
            want * 4
        )));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((fields, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let items = (0..3)
            .map(|i| {
                PartFeatureSet::new(
                    format!("img{i}"),
                    Some(i as i64 % 2),
                    if i == 1 { None } else { Some(3) },
                    2,
                    3,
                    (0..6).map(|k| (k as f32 + 0.1) * (i as f32 + 1.0)).collect(),
                    vec![0.25 * i as f64, 1.0],
                )
                .unwrap()
            })
            .collect();
        Dataset::new(Split::Gallery, 2, 3, items).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.occ");
        let ds = sample();
        write_feature_file(&ds, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), ds);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.json");
        let ds = sample();
        write_feature_file(&ds, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), ds);
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("query.occ");
        let ds = Dataset::new(Split::Query, 6, 4, vec![]).unwrap();
        write_feature_file(&ds, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.split, Split::Query);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode_binary(&sample()).unwrap();
        let p = Path::new("x.occ");
        for cut in [bytes.len() - 1, bytes.len() - 30, 10] {
            assert!(decode_binary(&bytes[..cut], p, Split::Gallery).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_binary(&long, p, Split::Gallery).is_err());
    }

    #[test]
    fn header_mismatch_rejected() {
        let bytes = encode_binary(&sample()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let p = Path::new("x.occ");
        // count too large -> runs out of records
        let more = text.replacen("OCCREC1 2 3 3", "OCCREC1 2 3 4", 1);
        assert!(decode_binary(more.as_bytes(), p, Split::Gallery).is_err());
        let wrong_magic = [b"OCCREC2".as_slice(), &bytes[7..]].concat();
        assert!(decode_binary(&wrong_magic, p, Split::Gallery).is_err());
        // D smaller than the payload -> records misalign
        let small_d = [b"OCCREC1 2 2".as_slice(), &bytes[11..]].concat();
        assert!(decode_binary(&small_d, p, Split::Gallery).is_err());
    }

    #[test]
    fn duplicate_id_rejected_on_read() {
        let ds = sample();
        let mut bytes = encode_binary(&ds).unwrap();
        let pos = bytes.windows(4).position(|w| w == b"img1").unwrap();
        bytes[pos + 3] = b'0';
        assert!(matches!(
            decode_binary(&bytes, Path::new("x.occ"), Split::Gallery),
            Err(Error::DuplicateImage(_))
        ));
    }

    #[test]
    fn split_inferred_from_name() {
        assert_eq!(split_from_path(Path::new("a/train.occ")), Split::Train);
        assert_eq!(split_from_path(Path::new("query_raw.json")), Split::Query);
        assert_eq!(split_from_path(Path::new("foo.occ")), Split::Gallery);
    }

    #[test]
    fn container_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        write_container(&path, "OCCTEST1", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (fields, payload) = read_container(&path, "OCCTEST1", 2, |f| f[0] * f[1]).unwrap();
        assert_eq!(fields, vec![2, 3]);
        assert_eq!(payload.len(), 6);
        assert!(read_container(&path, "OCCTEST1", 2, |f| f[0] * f[1] + 1).is_err());
        assert!(read_container(&path, "OCCOTHER", 2, |_| 6).is_err());
    }
}
