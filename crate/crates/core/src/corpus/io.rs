use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, Corpus, CorpusConfig, Narrative, Region, Scene};
use crate::emotion::EmotionArc;
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
const CORPUS_FORMAT: &str = "vinter-corpus";
const FEATURES_MAGIC: &str = "vinter-features";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    feature_dim: usize,
    features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<CorpusConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRef {
    row: u64,
    rows: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene_id: u64,
    /// (left, top, right, bottom) per region.
    boxes: Vec<[f32; 4]>,
    category_ids: Vec<usize>,
    features: FeatureRef,
    sentences: Vec<String>,
    gold_arc: EmotionArc,
}

/// Writes `corpus.jsonl` and `features.bin` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = corpus.feature_dim;
    let total_rows: usize = corpus.scenes.iter().map(|s| s.regions.len()).sum();

    let mut rows = BTreeMap::new();
    let mut blob = BufWriter::new(File::create(dir.join(FEATURES_FILE))?);
    writeln!(blob, "{FEATURES_MAGIC} {VERSION} {d} {total_rows}")?;
    let mut next_row = 0u64;
    for scene in &corpus.scenes {
        rows.insert(scene.scene_id, next_row);
        for r in &scene.regions {
            for v in &r.feature {
                blob.write_all(&v.to_le_bytes())?;
            }
        }
        next_row += scene.regions.len() as u64;
    }
    blob.flush()?;

    let mut out = BufWriter::new(File::create(dir.join(CORPUS_FILE))?);
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: VERSION,
        feature_dim: d,
        features: FEATURES_FILE.into(),
        generator: corpus.generator.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for n in &corpus.narratives {
        let scene = corpus.scene(n.scene_id).expect("validated scene reference");
        let record = Record {
            scene_id: n.scene_id,
            boxes: scene
                .regions
                .iter()
                .map(|r| [r.bbox.left, r.bbox.top, r.bbox.right, r.bbox.bottom])
                .collect(),
            category_ids: scene.regions.iter().map(|r| r.category_id).collect(),
            features: FeatureRef {
                row: rows[&n.scene_id],
                rows: scene.regions.len(),
            },
            sentences: n.sentences.clone(),
            gold_arc: n.gold_arc,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_features(path: &Path, dim: usize) -> Result<Vec<f32>> {
    let format_err = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parsed = match fields.as_slice() {
        [magic, version, d, rows] if *magic == FEATURES_MAGIC => {
            match (version.parse::<u32>(), d.parse::<usize>(), rows.parse::<usize>()) {
                (Ok(v), Ok(d), Ok(rows)) => Some((v, d, rows)),
                _ => None,
            }
        }
        _ => None,
    };
    let (version, file_dim, rows) = parsed.ok_or_else(|| format_err(0, "malformed feature header".into()))?;
    if version != VERSION {
        return Err(format_err(0, format!("unsupported feature blob version {version}")));
    }
    if file_dim != dim {
        return Err(format_err(
            0,
            format!("feature dim {file_dim} disagrees with corpus dim {dim}"),
        ));
    }
    let expected = rows * dim * 4;
    let mut bytes = Vec::with_capacity(expected);
    reader.read_to_end(&mut bytes)?;
    let start = header.len() as u64;
    if bytes.len() != expected {
        return Err(format_err(
            start + bytes.len().min(expected) as u64,
            format!("feature block holds {} bytes, header promises {expected}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(CORPUS_FILE);
    let reader = BufReader::new(File::open(&path)?);
    let mut lines = reader.lines();
    let format_err = |offset: u64, message: String| Error::Format {
        path: path.clone(),
        offset,
        message,
    };
    let header_line = lines
        .next()
        .ok_or_else(|| format_err(0, "empty corpus file".into()))??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| format_err(0, format!("bad header: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != VERSION {
        return Err(format_err(
            0,
            format!("unsupported corpus format {} v{}", header.format, header.version),
        ));
    }
    let d = header.feature_dim;
    let blob = read_features(&dir.join(&header.features), d)?;

    let mut offset = header_line.len() as u64 + 1;
    let mut scenes: BTreeMap<u64, Scene> = BTreeMap::new();
    let mut narratives = Vec::new();
    for line in lines {
        let line = line?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| format_err(line_offset, e.to_string()))?;
        if rec.boxes.len() != rec.category_ids.len() || rec.boxes.len() != rec.features.rows {
            return Err(format_err(
                line_offset,
                "boxes, categories and feature rows disagree".into(),
            ));
        }
        let start = rec.features.row as usize * d;
        let end = start + rec.features.rows * d;
        if end > blob.len() {
            return Err(format_err(
                line_offset,
                format!("feature rows {start}..{end} outside the blob"),
            ));
        }
        let regions: Vec<Region> = rec
            .boxes
            .iter()
            .zip(&rec.category_ids)
            .enumerate()
            .map(|(i, (b, &category_id))| Region {
                category_id,
                bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
                feature: blob[start + i * d..start + (i + 1) * d].to_vec(),
            })
            .collect();
        let scene = Scene {
            scene_id: rec.scene_id,
            regions,
        };
        match scenes.get(&rec.scene_id) {
            Some(existing) if *existing != scene => {
                return Err(format_err(line_offset, format!("scene {} redefined", rec.scene_id)));
            }
            Some(_) => {}
            None => {
                scenes.insert(rec.scene_id, scene);
            }
        }
        narratives.push(Narrative {
            scene_id: rec.scene_id,
            sentences: rec.sentences,
            gold_arc: rec.gold_arc,
        });
    }
    let mut corpus = Corpus::new(d, scenes.into_values().collect(), narratives)?;
    corpus.generator = header.generator;
    Ok(corpus)
}
