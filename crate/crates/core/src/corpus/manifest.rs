//! JSON-lines manifest plus a little-endian f32 feature blob.
//!
//! Line 1 is a header carrying the format version, alphabet, utterance
//! count, blob file name, and (for generated corpora) the generator
//! provenance. Every following line describes one utterance and the byte
//! range of its features in the blob.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Alphabet, Corpus, CorpusError, Provenance, Utterance};

pub const MANIFEST_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dust-corpus";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    alphabet: Alphabet,
    n_utts: usize,
    blob: String,
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    domain: String,
    n_frames: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    blob_offset: u64,
    blob_len: u64,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_manifest(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    corpus.check_unique_ids()?;
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CorpusError::InvalidSpec(format!("bad manifest path {}", path.display())))?
        .to_owned();

    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        format: FORMAT_TAG.to_owned(),
        version: MANIFEST_VERSION,
        alphabet: corpus.alphabet.clone(),
        n_utts: corpus.len(),
        blob: blob_name,
        provenance: corpus.provenance.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;

    let mut bytes: Vec<u8> = Vec::new();
    for utt in &corpus.utterances {
        let offset = bytes.len() as u64;
        for v in utt.features.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let record = Record {
            id: utt.id.clone(),
            domain: utt.domain.clone(),
            n_frames: utt.n_frames(),
            dim: utt.dim(),
            transcript: utt.transcript.as_ref().map(|t| corpus.alphabet.decode(t)),
            blob_offset: offset,
            blob_len: bytes.len() as u64 - offset,
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    out.flush()?;
    fs::write(blob, bytes)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let shown = path.display().to_string();
    let malformed = |reason: String| CorpusError::Malformed { path: shown.clone(), reason };

    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let header: serde_json::Value =
        serde_json::from_str(header_line).map_err(|e| malformed(format!("header: {e}")))?;
    if header.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(malformed("missing format tag".into()));
    }
    let version = header
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing version".into()))?;
    if version != u64::from(MANIFEST_VERSION) {
        return Err(CorpusError::Version {
            path: shown.clone(),
            found: version as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(header).map_err(|e| malformed(format!("header: {e}")))?;

    let blob_file = path.with_file_name(&header.blob);
    let blob = fs::read(&blob_file)?;
    let mut utterances = Vec::with_capacity(header.n_utts);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| malformed(format!("line {}: {e}", lineno + 2)))?;
        let start = rec.blob_offset as usize;
        let end = start + rec.blob_len as usize;
        if rec.blob_len as usize != rec.n_frames * rec.dim * 4 || end > blob.len() {
            return Err(malformed(format!("utterance {} points outside the blob", rec.id)));
        }
        let values: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let features = Array2::from_shape_vec((rec.n_frames, rec.dim), values)
            .map_err(|e| malformed(format!("utterance {}: {e}", rec.id)))?;
        let transcript = rec
            .transcript
            .as_deref()
            .map(|t| header.alphabet.encode(t))
            .transpose()?;
        utterances.push(Utterance { id: rec.id, features, transcript, domain: rec.domain });
    }
    if utterances.len() != header.n_utts {
        return Err(malformed(format!(
            "header promises {} utterances, found {}",
            header.n_utts,
            utterances.len()
        )));
    }
    let corpus = Corpus {
        alphabet: header.alphabet,
        utterances,
        provenance: header.provenance,
    };
    corpus.check_unique_ids()?;
    Ok(corpus)
}
