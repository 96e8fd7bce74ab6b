//! Corpus ingestion: split SGML-tagged files into documents.
//!
//! A document is the byte region between an opening and a closing marker
//! (`<DOC>` and `</DOC>` by default). Files are read as raw bytes; text is
//! decoded permissively, replacing invalid sequences.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memchr::memmem;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus contains no documents")]
    NoDocuments,
    #[error("file name {name} appears more than once ({first} and {second}); document ids would collide")]
    DuplicateBasename {
        name: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{path} changed since ingest (content digest mismatch)")]
    Changed { path: PathBuf },
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("corpus index: {0}")]
    Index(#[from] serde_json::Error),
}

/// Marker strings and storage options for splitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub open_tag: String,
    pub close_tag: String,
    /// Documents longer than this many bytes are not kept in memory; their
    /// text is re-read from the source file on demand.
    pub inline_text_limit: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            open_tag: "<DOC>".to_string(),
            close_tag: "</DOC>".to_string(),
            inline_text_limit: 64 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ByteSpan {
    pub start: usize,
    pub end: usize,
}

impl ByteSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_file: PathBuf,
    pub ordinal: usize,
    /// Region strictly between the opening and closing markers.
    pub byte_span: ByteSpan,
    pub line_count: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    #[serde(skip)]
    text: Option<Arc<str>>,
}

impl Document {
    /// The text, if it is held in memory.
    pub fn inline_text(&self) -> Option<&str> {
        self.text.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitWarning {
    /// An opening marker was not closed before the next opening marker or
    /// end of file; the document was emitted as truncated.
    Unclosed { ordinal: usize, offset: usize },
    /// A closing marker with no open document was ignored.
    StrayClose { offset: usize },
}

#[derive(Debug, Clone, Default)]
pub struct SplitResult {
    pub documents: Vec<Document>,
    pub warnings: Vec<SplitWarning>,
}

/// `<file-basename>#<ordinal>`.
pub fn doc_id_for(source_file: &Path, ordinal: usize) -> String {
    format!("{}#{}", basename(source_file), ordinal)
}

fn basename(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Splits one file's bytes into documents, in file order.
pub fn split_documents(raw: &[u8], source_file: &Path, config: &SplitConfig) -> SplitResult {
    let open = config.open_tag.as_bytes();
    let close = config.close_tag.as_bytes();

    #[derive(Clone, Copy)]
    enum Marker {
        Open(usize),
        Close(usize),
    }
    let mut markers: Vec<Marker> = memmem::find_iter(raw, open)
        .map(Marker::Open)
        .chain(memmem::find_iter(raw, close).map(Marker::Close))
        .collect();
    markers.sort_by_key(|m| match *m {
        Marker::Open(p) | Marker::Close(p) => p,
    });

    let mut out = SplitResult::default();
    let mut open_at: Option<(usize, usize)> = None; // (marker offset, content start)
    let emit = |out: &mut SplitResult, start: usize, end: usize, truncated: bool| {
        let ordinal = out.documents.len();
        let bytes = &raw[start..end];
        let text = String::from_utf8_lossy(bytes);
        let line_count = text.lines().count();
        let text = (bytes.len() <= config.inline_text_limit).then(|| Arc::<str>::from(text));
        out.documents.push(Document {
            doc_id: doc_id_for(source_file, ordinal),
            source_file: source_file.to_path_buf(),
            ordinal,
            byte_span: ByteSpan { start, end },
            line_count,
            truncated,
            text,
        });
    };

    for marker in markers {
        match (marker, open_at) {
            (Marker::Open(p), None) => open_at = Some((p, p + open.len())),
            (Marker::Open(p), Some((q, start))) => {
                out.warnings.push(SplitWarning::Unclosed {
                    ordinal: out.documents.len(),
                    offset: q,
                });
                emit(&mut out, start, p, true);
                open_at = Some((p, p + open.len()));
            }
            (Marker::Close(p), Some((_, start))) if p >= start => {
                emit(&mut out, start, p, false);
                open_at = None;
            }
            (Marker::Close(p), _) => out.warnings.push(SplitWarning::StrayClose { offset: p }),
        }
    }
    if let Some((q, start)) = open_at {
        out.warnings.push(SplitWarning::Unclosed {
            ordinal: out.documents.len(),
            offset: q,
        });
        emit(&mut out, start, raw.len(), true);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
    pub documents: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<SplitWarning>,
}

/// An ingested corpus. The serialized form is the corpus index: files,
/// document ids, byte spans and line counts, without document text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub schema_version: u32,
    pub corpus_id: String,
    pub split: SplitConfig,
    pub files: Vec<CorpusFile>,
    pub documents: Vec<Document>,
    pub total_count: usize,
}

/// Reads and splits every file (in parallel), keeping file order.
pub fn ingest_corpus<P: AsRef<Path> + Sync>(
    files: &[P],
    config: &SplitConfig,
) -> Result<Corpus, CorpusError> {
    let per_file: Vec<(CorpusFile, Vec<Document>)> = files
        .par_iter()
        .map(|p| {
            let given = p.as_ref();
            let read_err = |source| CorpusError::Read {
                path: given.to_path_buf(),
                source,
            };
            let path = fs::canonicalize(given).map_err(read_err)?;
            let raw = fs::read(&path).map_err(read_err)?;
            let split = split_documents(&raw, &path, config);
            for w in &split.warnings {
                tracing::warn!(file = %path.display(), warning = ?w, "malformed document markers");
            }
            let file = CorpusFile {
                path,
                sha256: hex::encode(Sha256::digest(&raw)),
                bytes: raw.len() as u64,
                documents: split.documents.len(),
                warnings: split.warnings,
            };
            Ok((file, split.documents))
        })
        .collect::<Result<_, CorpusError>>()?;

    let mut seen: HashMap<String, PathBuf> = HashMap::new();
    for (file, _) in &per_file {
        let name = basename(&file.path);
        if let Some(first) = seen.insert(name.clone(), file.path.clone()) {
            return Err(CorpusError::DuplicateBasename {
                name,
                first,
                second: file.path.clone(),
            });
        }
    }

    let mut hasher = Sha256::new();
    let mut corpus_files = Vec::with_capacity(per_file.len());
    let mut documents = Vec::new();
    for (file, docs) in per_file {
        hasher.update(basename(&file.path).as_bytes());
        hasher.update([0]);
        hasher.update(file.sha256.as_bytes());
        corpus_files.push(file);
        documents.extend(docs);
    }
    if documents.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    let digest = hex::encode(hasher.finalize());
    Ok(Corpus {
        schema_version: CORPUS_SCHEMA_VERSION,
        corpus_id: format!("corpus-{}", &digest[..16]),
        split: config.clone(),
        files: corpus_files,
        total_count: documents.len(),
        documents,
    })
}

impl Corpus {
    pub fn from_index_json(json: &str) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_index_json(&self) -> Result<String, CorpusError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load_index(path: &Path) -> Result<Self, CorpusError> {
        let json = fs::read_to_string(path).map_err(|source| CorpusError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_index_json(&json)
    }

    pub fn find(&self, doc_id: &str) -> Option<&Document> {
        // ids are `<basename>#<ordinal>` and documents are stored in file order
        let (name, ordinal) = doc_id.rsplit_once('#')?;
        let ordinal: usize = ordinal.parse().ok()?;
        let mut offset = 0;
        for f in &self.files {
            if basename(&f.path) == name {
                return self.documents.get(offset + ordinal).filter(|d| d.doc_id == doc_id);
            }
            offset += f.documents;
        }
        None
    }

    /// Document text, re-read from the source file if not held in memory.
    pub fn text<'a>(&self, doc: &'a Document) -> Result<Cow<'a, str>, CorpusError> {
        if let Some(t) = doc.inline_text() {
            return Ok(Cow::Borrowed(t));
        }
        let raw = fs::read(&doc.source_file).map_err(|source| CorpusError::Read {
            path: doc.source_file.clone(),
            source,
        })?;
        let span = doc.byte_span;
        if span.end > raw.len() {
            return Err(CorpusError::Changed {
                path: doc.source_file.clone(),
            });
        }
        Ok(Cow::Owned(
            String::from_utf8_lossy(&raw[span.start..span.end]).into_owned(),
        ))
    }

    pub fn text_by_id(&self, doc_id: &str) -> Result<String, CorpusError> {
        let doc = self
            .find(doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument(doc_id.to_string()))?;
        Ok(self.text(doc)?.into_owned())
    }

    /// Applies `f` to every document with its text, reading each source file
    /// at most once. Results are in document order.
    pub fn map_documents<T, F>(&self, f: F) -> Result<Vec<T>, CorpusError>
    where
        T: Send,
        F: Fn(&Document, &str) -> T + Sync,
    {
        let mut ranges = Vec::with_capacity(self.files.len());
        let mut offset = 0;
        for file in &self.files {
            ranges.push((file, offset..offset + file.documents));
            offset += file.documents;
        }
        let chunks: Vec<Vec<T>> = ranges
            .par_iter()
            .map(|(file, range)| {
                let docs = &self.documents[range.clone()];
                let needs_read = docs.iter().any(|d| d.inline_text().is_none());
                let raw = if needs_read {
                    let raw = fs::read(&file.path).map_err(|source| CorpusError::Read {
                        path: file.path.clone(),
                        source,
                    })?;
                    if hex::encode(Sha256::digest(&raw)) != file.sha256 {
                        return Err(CorpusError::Changed {
                            path: file.path.clone(),
                        });
                    }
                    Some(raw)
                } else {
                    None
                };
                Ok(docs
                    .iter()
                    .map(|d| match (d.inline_text(), &raw) {
                        (Some(t), _) => f(d, t),
                        (None, Some(raw)) => {
                            f(d, &String::from_utf8_lossy(&raw[d.byte_span.start..d.byte_span.end]))
                        }
                        (None, None) => unreachable!("file read when any text is out of line"),
                    })
                    .collect())
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}
