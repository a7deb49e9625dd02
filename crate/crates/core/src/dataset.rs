//! Line-delimited JSON datasets of precomputed region features,
//! scored attributes and reference captions.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use glied_metrics::tokenize;
use glied_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ImageInput;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAttribute {
    pub word: String,
    pub score: f64,
}

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    /// Base64 of `k×d_r` little-endian f32 values, row-major.
    pub regions: String,
    pub k: usize,
    pub d_r: usize,
    pub attributes: Vec<ScoredAttribute>,
    pub captions: Vec<String>,
}

impl DatasetRecord {
    /// Encodes `rows` as f32; values are rounded to the nearest f32.
    pub fn new(
        image_id: String,
        rows: &[Vec<f64>],
        attributes: Vec<ScoredAttribute>,
        captions: Vec<String>,
    ) -> Result<Self> {
        let k = rows.len();
        let d_r = rows.first().map_or(0, Vec::len);
        if k == 0 || d_r == 0 || rows.iter().any(|r| r.len() != d_r) {
            return Err(CoreError::Data(format!("{image_id}: ragged or empty regions")));
        }
        let bytes: Vec<u8> = rows
            .iter()
            .flatten()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        Ok(Self {
            image_id,
            regions: STANDARD.encode(bytes),
            k,
            d_r,
            attributes,
            captions,
        })
    }

    /// The `k×d_r` region matrix, widened to f64.
    pub fn region_matrix(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.regions)
            .map_err(|e| CoreError::Data(format!("{}: bad base64: {e}", self.image_id)))?;
        if self.k == 0 || self.d_r == 0 || bytes.len() != self.k * self.d_r * 4 {
            return Err(CoreError::Data(format!(
                "{}: {} region bytes for {}×{} f32",
                self.image_id,
                bytes.len(),
                self.k,
                self.d_r
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor::matrix(self.k, self.d_r, data)?)
    }

    pub fn caption_tokens(&self) -> Vec<Vec<String>> {
        self.captions.iter().map(|c| tokenize(c)).collect()
    }
}

/// A record resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptioningExample {
    pub image_id: String,
    pub input: ImageInput,
    /// Scores of the kept attributes, aligned with `input.attributes`.
    pub attribute_scores: Vec<f64>,
    /// Tokenized references, for metrics.
    pub references: Vec<Vec<String>>,
    /// `[BOS, …, EOS]` id sequences, for training.
    pub reference_ids: Vec<Vec<usize>>,
}

/// Keeps the `k` best attributes by score, ties to the lower token id.
/// Repeated ids keep their best score.
pub fn truncate_attributes(scored: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for &(id, s) in scored {
        let e = best.entry(id).or_insert(s);
        if s > *e {
            *e = s;
        }
    }
    let mut v: Vec<(usize, f64)> = best.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    /// Rejected-record counts by reason.
    pub rejected: BTreeMap<String, usize>,
    pub unknown_attribute_words: usize,
    pub errors: Vec<String>,
}

impl LoadReport {
    fn reject(&mut self, reason: &str, detail: String) {
        *self.rejected.entry(reason.to_string()).or_default() += 1;
        self.errors.push(detail);
    }
}

impl CaptioningExample {
    pub fn from_record(
        rec: &DatasetRecord,
        vocab: &Vocabulary,
        d_r: Option<usize>,
        report: &mut LoadReport,
    ) -> Option<Self> {
        if rec.captions.is_empty() {
            report.reject("missing_references", format!("{}: no captions", rec.image_id));
            return None;
        }
        if let Some(d) = d_r.filter(|&d| d != rec.d_r) {
            report.reject(
                "feature_dimension",
                format!("{}: d_r {} but expected {d}", rec.image_id, rec.d_r),
            );
            return None;
        }
        let regions = match rec.region_matrix() {
            Ok(r) => r,
            Err(e) => {
                report.reject("feature_dimension", e.to_string());
                return None;
            }
        };
        let mut scored = Vec::with_capacity(rec.attributes.len());
        for a in &rec.attributes {
            match vocab.get(&a.word) {
                Some(id) if id >= crate::vocab::RESERVED.len() => scored.push((id, a.score)),
                _ => report.unknown_attribute_words += 1,
            }
        }
        let kept = truncate_attributes(&scored, rec.k);
        if kept.is_empty() {
            report.reject(
                "no_known_attributes",
                format!("{}: no attribute word is in the vocabulary", rec.image_id),
            );
            return None;
        }
        let references = rec.caption_tokens();
        let reference_ids = references.iter().map(|t| vocab.encode_caption(t)).collect();
        report.loaded += 1;
        Some(Self {
            image_id: rec.image_id.clone(),
            input: ImageInput {
                regions,
                attributes: kept.iter().map(|a| a.0).collect(),
            },
            attribute_scores: kept.iter().map(|a| a.1).collect(),
            references,
            reference_ids,
        })
    }
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CoreError::Data(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Resolves records against `vocab`, skipping bad ones into the report.
pub fn load_examples(
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    d_r: Option<usize>,
) -> (Vec<CaptioningExample>, LoadReport) {
    let mut report = LoadReport::default();
    let examples = records
        .iter()
        .filter_map(|r| CaptioningExample::from_record(r, vocab, d_r, &mut report))
        .collect();
    (examples, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words = ["a", "dog", "red", "cat", "big", "sits", "blue"];
        let caps: Vec<Vec<&str>> = vec![words.to_vec()];
        Vocabulary::build(&caps, 1)
    }

    fn record(k: usize, attrs: &[(&str, f64)]) -> DatasetRecord {
        let rows: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64 * 0.5, 1.25]).collect();
        DatasetRecord::new(
            "img".into(),
            &rows,
            attrs
                .iter()
                .map(|(w, s)| ScoredAttribute {
                    word: w.to_string(),
                    score: *s,
                })
                .collect(),
            vec!["A red dog.".into()],
        )
        .unwrap()
    }

    #[test]
    fn attributes_truncate_to_region_count() {
        let v = vocab();
        let attrs = [
            ("dog", 0.9),
            ("red", 0.8),
            ("cat", 0.7),
            ("big", 0.6),
            ("sits", 0.5),
            ("blue", 0.4),
            ("a", 0.3),
        ];
        let mut rep = LoadReport::default();
        let ex = CaptioningExample::from_record(&record(3, &attrs), &v, Some(2), &mut rep).unwrap();
        let ids: Vec<usize> = ["dog", "red", "cat"].iter().map(|w| v.id(w)).collect();
        assert_eq!(ex.input.attributes, ids);
        assert_eq!(ex.input.regions.shape(), &[3, 2]);
        assert_eq!(ex.references, vec![vec!["a", "red", "dog"]]);
    }

    #[test]
    fn score_ties_keep_lower_id() {
        let kept = truncate_attributes(&[(9, 0.5), (5, 0.5), (7, 0.5)], 2);
        assert_eq!(kept, vec![(5, 0.5), (7, 0.5)]);
        let kept = truncate_attributes(&[(9, 0.1), (9, 0.8), (5, 0.5)], 1);
        assert_eq!(kept, vec![(9, 0.8)]);
    }

    #[test]
    fn bad_records_are_reported() {
        let v = vocab();
        let mut no_caps = record(2, &[("dog", 1.0)]);
        no_caps.captions.clear();
        let mut wrong_dim = record(2, &[("dog", 1.0)]);
        wrong_dim.k = 3;
        let unknown = record(2, &[("zebra", 1.0)]);
        let good = record(2, &[("zebra", 1.0), ("cat", 0.2)]);
        let (ex, rep) = load_examples(&[no_caps, wrong_dim, unknown, good], &v, Some(2));
        assert_eq!(ex.len(), 1);
        assert_eq!(rep.loaded, 1);
        assert_eq!(rep.rejected["missing_references"], 1);
        assert_eq!(rep.rejected["feature_dimension"], 1);
        assert_eq!(rep.rejected["no_known_attributes"], 1);
        assert_eq!(rep.unknown_attribute_words, 2);
        let (_, rep) = load_examples(&[record(2, &[("dog", 1.0)])], &v, Some(5));
        assert_eq!(rep.rejected["feature_dimension"], 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![record(2, &[("dog", 1.0)]), record(3, &[("cat", 0.5)])];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[1].region_matrix().unwrap().row(2).unwrap(), &[1.0, 1.25]);
        assert!(read_records("{\n".as_bytes()).is_err());
    }
}
