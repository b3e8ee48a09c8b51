//! Line-delimited JSON catalog and interaction files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Catalog, CatalogSchema, CorpusError, Dataset, ImageGrid, InteractionSequence, Item, Modality};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    item_id: String,
    modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_tokens: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<Vec<Vec<Vec<i64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, i64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractionRecord {
    user_id: String,
    items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, i64>>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRecord { line, reason: reason.into() }
}

fn features_from(line: usize, raw: Option<BTreeMap<String, i64>>) -> Result<BTreeMap<String, u32>, CorpusError> {
    raw.unwrap_or_default()
        .into_iter()
        .map(|(k, v)| {
            u32::try_from(v).map(|v| (k.clone(), v)).map_err(|_| malformed(line, format!("feature `{k}` has invalid id {v}")))
        })
        .collect()
}

fn item_from_record(line: usize, rec: ItemRecord, schema: &mut CatalogSchema) -> Result<Item, CorpusError> {
    let features = features_from(line, rec.features)?;
    let (text_tokens, image) = match rec.modality {
        Modality::Text => {
            if rec.image.is_some() {
                return Err(malformed(line, "text item carries an image"));
            }
            let raw = rec.text_tokens.ok_or_else(|| malformed(line, "text item without text_tokens"))?;
            if raw.is_empty() {
                return Err(malformed(line, "text item with empty text_tokens"));
            }
            let mut tokens = Vec::with_capacity(raw.len());
            for t in raw {
                let in_range = t >= 0 && schema.vocab_size.map_or(t <= u32::MAX as i64, |v| (t as u64) < v as u64);
                if !in_range {
                    return Err(CorpusError::TokenOutOfRange {
                        item_id: rec.item_id,
                        token: t,
                        vocab_size: schema.vocab_size.unwrap_or(u32::MAX as usize),
                    });
                }
                tokens.push(t as u32);
            }
            (Some(tokens), None)
        }
        Modality::Vision => {
            if rec.text_tokens.is_some() {
                return Err(malformed(line, "vision item carries text_tokens"));
            }
            let raw = rec.image.ok_or_else(|| malformed(line, "vision item without image"))?;
            (None, Some(image_from_nested(line, &rec.item_id, raw, schema)?))
        }
        Modality::Id => {
            if rec.text_tokens.is_some() || rec.image.is_some() {
                return Err(malformed(line, "id item carries content"));
            }
            (None, None)
        }
    };
    Ok(Item { item_id: rec.item_id, modality: rec.modality, text_tokens, image, features })
}

fn image_from_nested(
    line: usize,
    item_id: &str,
    raw: Vec<Vec<Vec<i64>>>,
    schema: &mut CatalogSchema,
) -> Result<ImageGrid, CorpusError> {
    let c = raw.len();
    let h = raw.first().map_or(0, |p| p.len());
    let w = raw.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    let rectangular = raw.iter().all(|plane| plane.len() == h && plane.iter().all(|row| row.len() == w));
    let found = vec![c, h, w];
    if !rectangular || c == 0 || h == 0 || w == 0 {
        let expected = schema.image_shape.unwrap_or([c, h, w]);
        return Err(CorpusError::BadImageShape { item_id: item_id.to_string(), expected, found });
    }
    match schema.image_shape {
        Some(expected) if expected != [c, h, w] => {
            return Err(CorpusError::BadImageShape { item_id: item_id.to_string(), expected, found });
        }
        None => schema.image_shape = Some([c, h, w]),
        _ => {}
    }
    let mut pixels = Vec::with_capacity(c * h * w);
    for v in raw.into_iter().flatten().flatten() {
        let p = u8::try_from(v).map_err(|_| malformed(line, format!("pixel value {v} outside 0..=255")))?;
        pixels.push(p);
    }
    Ok(ImageGrid { channels: c, height: h, width: w, pixels })
}

/// Reads a catalog file, validating every record against `schema`.
pub fn load_catalog(path: impl AsRef<Path>, schema: &CatalogSchema) -> Result<Catalog, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut schema = schema.clone();
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        items.push(item_from_record(line_no, rec, &mut schema)?);
    }
    let mut catalog = Catalog::new(schema);
    for item in items {
        catalog.insert(item)?;
    }
    Ok(catalog)
}

/// Reads an interactions file against a loaded catalog.
pub fn load_interactions(
    path: impl AsRef<Path>,
    catalog: Arc<Catalog>,
    domain_name: &str,
    max_seq_len: usize,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        if !seen.insert(rec.user_id.clone()) {
            return Err(malformed(line_no, format!("duplicate user `{}`", rec.user_id)));
        }
        let mut items = Vec::with_capacity(rec.items.len());
        for id in &rec.items {
            let idx = catalog
                .index_of(id)
                .ok_or_else(|| CorpusError::UnknownItemRef { user_id: rec.user_id.clone(), item_id: id.clone() })?;
            items.push(idx);
        }
        let features = features_from(line_no, rec.features)?;
        users.push(InteractionSequence { user_id: rec.user_id, items, features });
    }
    Dataset::new(catalog, users, domain_name, max_seq_len)
}

pub fn write_catalog(path: impl AsRef<Path>, catalog: &Catalog) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in catalog.items() {
        let image = item.image.as_ref().map(|g| {
            (0..g.channels)
                .map(|c| (0..g.height).map(|y| (0..g.width).map(|x| g.at(c, y, x) as i64).collect()).collect())
                .collect()
        });
        let rec = ItemRecord {
            item_id: item.item_id.clone(),
            modality: item.modality,
            text_tokens: item.text_tokens.as_ref().map(|t| t.iter().map(|&v| v as i64).collect()),
            image,
            features: (!item.features.is_empty())
                .then(|| item.features.iter().map(|(k, &v)| (k.clone(), v as i64)).collect()),
        };
        let line = serde_json::to_string(&rec).expect("item record serialises");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_interactions(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for u in &dataset.users {
        let rec = InteractionRecord {
            user_id: u.user_id.clone(),
            items: u.items.iter().map(|&i| dataset.catalog.item(i).item_id.clone()).collect(),
            features: (!u.features.is_empty()).then(|| u.features.iter().map(|(k, &v)| (k.clone(), v as i64)).collect()),
        };
        let line = serde_json::to_string(&rec).expect("interaction record serialises");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn schema(vocab: usize) -> CatalogSchema {
        CatalogSchema { vocab_size: Some(vocab), image_shape: None }
    }

    #[test]
    fn text_record_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", r#"{"item_id":"a1","modality":"text","text_tokens":[3,7,7]}"#);
        let cat = load_catalog(&p, &schema(10)).unwrap();
        let item = cat.get("a1").unwrap();
        assert_eq!(item.modality, Modality::Text);
        assert_eq!(item.text_tokens.as_deref(), Some(&[3u32, 7, 7][..]));
    }

    #[test]
    fn duplicate_item_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"item_id\":\"a1\",\"modality\":\"text\",\"text_tokens\":[1]}\n\
                    {\"item_id\":\"a1\",\"modality\":\"text\",\"text_tokens\":[2]}\n";
        let p = write(&dir, "c.jsonl", body);
        assert!(matches!(load_catalog(&p, &schema(10)), Err(CorpusError::DuplicateItemId(id)) if id == "a1"));
    }

    #[test]
    fn token_equal_to_vocab_size_is_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", r#"{"item_id":"a1","modality":"text","text_tokens":[0,10]}"#);
        assert!(matches!(load_catalog(&p, &schema(10)), Err(CorpusError::TokenOutOfRange { token: 10, .. })));
    }

    #[test]
    fn image_shape_is_checked_against_declaration_and_first_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = r#"{"item_id":"v1","modality":"vision","image":[[[0,1],[2,3]]]}"#;
        let p = write(&dir, "c.jsonl", img);
        let declared = CatalogSchema { vocab_size: None, image_shape: Some([1, 2, 3]) };
        assert!(matches!(load_catalog(&p, &declared), Err(CorpusError::BadImageShape { .. })));

        let body = format!("{img}\n{}", r#"{"item_id":"v2","modality":"vision","image":[[[0,1,2],[2,3,4]]]}"#);
        let p = write(&dir, "c2.jsonl", &body);
        assert!(matches!(load_catalog(&p, &CatalogSchema::default()), Err(CorpusError::BadImageShape { .. })));

        let ragged = r#"{"item_id":"v3","modality":"vision","image":[[[0,1],[2]]]}"#;
        let p = write(&dir, "c3.jsonl", ragged);
        assert!(matches!(load_catalog(&p, &CatalogSchema::default()), Err(CorpusError::BadImageShape { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"item_id\":\"a\",\"modality\":\"id\"}\nnot json\n";
        let p = write(&dir, "c.jsonl", body);
        assert!(matches!(load_catalog(&p, &schema(10)), Err(CorpusError::MalformedRecord { line: 2, .. })));
        let p = write(&dir, "d.jsonl", r#"{"item_id":"a","modality":"text"}"#);
        assert!(matches!(load_catalog(&p, &schema(10)), Err(CorpusError::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn interactions_resolve_truncate_and_drop() {
        let dir = tempfile::tempdir().unwrap();
        let cat_body: String = (0..40).map(|i| format!("{{\"item_id\":\"i{i}\",\"modality\":\"id\"}}\n")).collect();
        let cat = Arc::new(load_catalog(write(&dir, "c.jsonl", &cat_body), &schema(1)).unwrap());

        let long: Vec<String> = (0..30).map(|i| format!("\"i{i}\"")).collect();
        let body = format!(
            "{{\"user_id\":\"u1\",\"items\":[{}]}}\n{{\"user_id\":\"u2\",\"items\":[\"i1\",\"i2\"]}}\n",
            long.join(",")
        );
        let ds = load_interactions(write(&dir, "x.jsonl", &body), cat.clone(), "d", 25).unwrap();
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.dropped_users, 1);
        assert_eq!(ds.users[0].items, (5..30).collect::<Vec<_>>());

        let bad = r#"{"user_id":"u3","items":["i1","nope","i2"]}"#;
        let err = load_interactions(write(&dir, "y.jsonl", bad), cat, "d", 25).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownItemRef { item_id, .. } if item_id == "nope"));
    }

    #[test]
    fn written_files_load_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"item_id\":\"t\",\"modality\":\"text\",\"text_tokens\":[1,2],\"features\":{\"category\":3}}\n\
                    {\"item_id\":\"v\",\"modality\":\"vision\",\"image\":[[[0,255],[7,8]]]}\n\
                    {\"item_id\":\"n\",\"modality\":\"id\"}\n";
        let p = write(&dir, "c.jsonl", body);
        let cat = load_catalog(&p, &schema(5)).unwrap();
        let out = dir.path().join("c_out.jsonl");
        write_catalog(&out, &cat).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), body);
    }
}
