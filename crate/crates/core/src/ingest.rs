//! Document intake: text normalization, OCR delegation, corpus manifests and
//! corpus statistics.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::analytics::median;
use crate::model::SimilarityCriterion;

#[derive(Debug, Error)]
pub enum OcrError {
    #[error("ocr command not found: {0}")]
    CommandNotFound(String),
    #[error("ocr command `{command}` exited with {status}: {stderr}")]
    Failed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("ocr command `{0}` timed out")]
    Timeout(String),
    #[error("ocr output is not valid UTF-8")]
    NotUtf8,
    #[error("ocr is not configured")]
    NotConfigured,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: String, source: std::io::Error },
    #[error("{0} is empty after ingestion")]
    Empty(String),
    #[error("ocr failed for {doc}: {source}")]
    Ocr { doc: String, source: OcrError },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Ehr,
    Literature,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Origin::Ehr => "ehr",
            Origin::Literature => "literature",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Media {
    Text,
    Pdf,
    Image,
}

impl Media {
    pub fn from_path(path: &Path) -> Media {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_lowercase)
            .as_deref()
        {
            Some("pdf") => Media::Pdf,
            Some("png" | "jpg" | "jpeg" | "tif" | "tiff" | "bmp" | "gif" | "webp" | "pnm" | "pbm" | "pgm" | "ppm") => {
                Media::Image
            }
            _ => Media::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub origin: Origin,
    pub media: Media,
    pub text: String,
    pub pages: u32,
    pub chars: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_hint: Option<String>,
}

/// Turns scanned bytes into text.
pub trait OcrAdapter: Send + Sync {
    fn recognize(&self, bytes: &[u8], media: Media) -> Result<String, OcrError>;
}

/// Treats the input bytes as UTF-8 text.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassthroughOcr;

impl OcrAdapter for PassthroughOcr {
    fn recognize(&self, bytes: &[u8], _media: Media) -> Result<String, OcrError> {
        String::from_utf8(bytes.to_vec()).map_err(|_| OcrError::NotUtf8)
    }
}

/// Runs an external OCR program. `argv` may contain `{input}`, replaced by
/// the path of a temporary file holding the bytes; the program must print
/// recognized text on stdout.
#[derive(Debug, Clone)]
pub struct CommandOcr {
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl CommandOcr {
    pub fn new(argv: Vec<String>, timeout: Duration) -> Self {
        CommandOcr { argv, timeout }
    }

    /// `tesseract {input} stdout`
    pub fn tesseract() -> Self {
        CommandOcr::new(
            vec!["tesseract".into(), "{input}".into(), "stdout".into()],
            Duration::from_secs(120),
        )
    }
}

impl OcrAdapter for CommandOcr {
    fn recognize(&self, bytes: &[u8], media: Media) -> Result<String, OcrError> {
        let program = self.argv.first().ok_or(OcrError::NotConfigured)?;
        let suffix = match media {
            Media::Pdf => ".pdf",
            Media::Image => ".png",
            Media::Text => ".txt",
        };
        let mut input = tempfile::Builder::new().suffix(suffix).tempfile()?;
        input.write_all(bytes)?;
        input.flush()?;
        let input_path = input.path().to_string_lossy().into_owned();
        let args: Vec<String> = self.argv[1..]
            .iter()
            .map(|a| a.replace("{input}", &input_path))
            .collect();

        let mut child = match Command::new(program)
            .args(&args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
        {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(OcrError::CommandNotFound(program.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(OcrError::Timeout(program.clone()));
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let out = out_reader.join().expect("reader thread panicked")?;
        let err = err_reader.join().expect("reader thread panicked");
        if !status.success() {
            return Err(OcrError::Failed {
                command: program.clone(),
                status: status.to_string(),
                stderr: String::from_utf8_lossy(&err).trim().to_string(),
            });
        }
        String::from_utf8(out).map_err(|_| OcrError::NotUtf8)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizeOptions {
    /// Join words split by a hyphen at a line end.
    pub dehyphenate: bool,
}

/// NFC, `\n` line endings, optional de-hyphenation.
pub fn normalize_text(raw: &str, opts: NormalizeOptions) -> String {
    let mut s: String = raw.replace("\r\n", "\n").replace('\r', "\n").nfc().collect();
    if opts.dehyphenate {
        let re = regex::Regex::new(r"(\p{L})-\n(\p{Ll})").expect("static regex");
        s = re.replace_all(&s, "$1$2").into_owned();
    }
    s
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Pages are separated by form feeds, as OCR engines emit them.
fn count_pages(text: &str) -> u32 {
    let pages = text.split('\x0c').filter(|p| !p.trim().is_empty()).count();
    pages.max(1) as u32
}

pub fn ingest_bytes(
    bytes: &[u8],
    media: Media,
    origin: Origin,
    patient_hint: Option<String>,
    ocr: &dyn OcrAdapter,
    name: &str,
) -> Result<SourceDocument, IngestError> {
    let raw = match media {
        Media::Text => String::from_utf8_lossy(bytes).into_owned(),
        _ => ocr.recognize(bytes, media).map_err(|source| IngestError::Ocr {
            doc: name.to_string(),
            source,
        })?,
    };
    let text = normalize_text(&raw, NormalizeOptions::default());
    if text.trim().is_empty() {
        return Err(IngestError::Empty(name.to_string()));
    }
    Ok(SourceDocument {
        doc_id: content_hash(&text),
        origin,
        media,
        pages: count_pages(&text),
        chars: text.chars().count() as u64,
        text,
        patient_hint,
    })
}

/// Reads one source file. The file itself is never modified.
pub fn ingest(
    path: &Path,
    origin: Origin,
    patient_hint: Option<String>,
    ocr: &dyn OcrAdapter,
) -> Result<SourceDocument, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    ingest_bytes(
        &bytes,
        Media::from_path(path),
        origin,
        patient_hint,
        ocr,
        &path.display().to_string(),
    )
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub origin: Origin,
    pub media: Media,
    pub pages: u32,
    pub chars: u64,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_hint: Option<String>,
    /// Publication or record reference carried into the twin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
    /// Similarity flags assigned by the operator.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub similarity: BTreeSet<SimilarityCriterion>,
}

impl ManifestEntry {
    pub fn for_document(doc: &SourceDocument, path: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            doc_id: doc.doc_id.clone(),
            origin: doc.origin,
            media: doc.media,
            pages: doc.pages,
            chars: doc.chars,
            path: path.into(),
            patient_hint: doc.patient_hint.clone(),
            source_ref: None,
            similarity: BTreeSet::new(),
        }
    }

    /// Subject key: the patient hint, else the document itself.
    pub fn subject(&self) -> &str {
        self.patient_hint.as_deref().unwrap_or(&self.doc_id)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let err = |message: String| IngestError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> std::io::Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest serialization is infallible"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub median_pages: f64,
    pub median_chars: f64,
    pub max_chars: u64,
}

pub fn corpus_stats(entries: &[ManifestEntry]) -> Result<CorpusStats, IngestError> {
    if entries.is_empty() {
        return Err(IngestError::EmptyCorpus);
    }
    let pages: Vec<f64> = entries.iter().map(|e| e.pages as f64).collect();
    let chars: Vec<f64> = entries.iter().map(|e| e.chars as f64).collect();
    Ok(CorpusStats {
        count: entries.len(),
        median_pages: median(&pages).map_err(|_| IngestError::EmptyCorpus)?,
        median_chars: median(&chars).map_err(|_| IngestError::EmptyCorpus)?,
        max_chars: entries.iter().map(|e| e.chars).max().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCounts {
    pub subjects: usize,
    pub median: f64,
    pub min: usize,
    pub max: usize,
}

/// Documents per subject.
pub fn documents_per_subject(entries: &[ManifestEntry]) -> Result<SubjectCounts, IngestError> {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for e in entries {
        *counts.entry(e.subject()).or_insert(0) += 1;
    }
    let values: Vec<f64> = counts.values().map(|c| *c as f64).collect();
    Ok(SubjectCounts {
        subjects: counts.len(),
        median: median(&values).map_err(|_| IngestError::EmptyCorpus)?,
        min: counts.values().copied().min().unwrap_or(0),
        max: counts.values().copied().max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(pages: u32, chars: u64) -> ManifestEntry {
        ManifestEntry {
            doc_id: format!("d{chars}"),
            origin: Origin::Literature,
            media: Media::Text,
            pages,
            chars,
            path: PathBuf::from("x"),
            patient_hint: None,
            source_ref: None,
            similarity: BTreeSet::new(),
        }
    }

    #[test]
    fn text_ingestion_counts_chars() {
        let text = "a".repeat(4340);
        let doc = ingest_bytes(text.as_bytes(), Media::Text, Origin::Ehr, None, &PassthroughOcr, "n").unwrap();
        assert_eq!(doc.chars, 4340);
        assert_eq!(doc.pages, 1);
        assert_eq!(doc.doc_id, content_hash(&text));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(
            ingest(&p, Origin::Ehr, None, &PassthroughOcr),
            Err(IngestError::Empty(_))
        ));
    }

    #[test]
    fn normalization_is_stable() {
        let composed = "Gr\u{00fc}n\r\nline";
        let decomposed = "Gru\u{0308}n\nline";
        assert_eq!(
            normalize_text(composed, NormalizeOptions::default()),
            normalize_text(decomposed, NormalizeOptions::default())
        );
        assert_eq!(
            normalize_text("thera-\npy", NormalizeOptions { dehyphenate: true }),
            "therapy"
        );
        assert_eq!(normalize_text("thera-\npy", NormalizeOptions::default()), "thera-\npy");
    }

    #[test]
    fn pages_split_on_form_feed() {
        let doc = ingest_bytes(
            b"one\x0ctwo\x0cthree",
            Media::Text,
            Origin::Ehr,
            None,
            &PassthroughOcr,
            "n",
        )
        .unwrap();
        assert_eq!(doc.pages, 3);
    }

    #[test]
    fn passthrough_ocr_returns_input() {
        assert_eq!(PassthroughOcr.recognize(b"hello", Media::Image).unwrap(), "hello");
    }

    #[test]
    fn missing_ocr_command() {
        let ocr = CommandOcr::new(
            vec!["definitely-not-an-ocr-binary".into(), "{input}".into()],
            Duration::from_secs(5),
        );
        let err = ocr.recognize(b"x", Media::Image).unwrap_err();
        assert!(err.to_string().starts_with("ocr command not found"));
    }

    #[test]
    fn command_ocr_runs_program() {
        let ocr = CommandOcr::new(vec!["cat".into(), "{input}".into()], Duration::from_secs(5));
        assert_eq!(ocr.recognize(b"scanned", Media::Image).unwrap(), "scanned");
        let failing = CommandOcr::new(vec!["false".into()], Duration::from_secs(5));
        assert!(matches!(
            failing.recognize(b"x", Media::Pdf),
            Err(OcrError::Failed { .. })
        ));
    }

    #[test]
    fn corpus_stats_examples() {
        let s = corpus_stats(&[entry(1, 1), entry(2, 2), entry(3, 3), entry(4, 100)]).unwrap();
        assert_eq!(s.median_chars, 2.5);
        assert_eq!(s.max_chars, 100);
        let s = corpus_stats(&[entry(7, 27995)]).unwrap();
        assert_eq!((s.count, s.median_pages, s.median_chars), (1, 7.0, 27995.0));
        assert!(matches!(corpus_stats(&[]), Err(IngestError::EmptyCorpus)));
    }
}
