//! Flat-file formats: sketch files, stream ingestion, token dictionaries,
//! release stamps and evaluation reports.
//!
//! All JSON is UTF-8 and newline-terminated, and every key list is emitted
//! in ascending order.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::MergedSketch;
use crate::mg::Sketch;
use crate::oracle::{max_error, mean_squared_error, ExactHistogram};
use crate::summary::PrivateSummary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Mg,
    Merged,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SketchFile {
    version: u32,
    kind: Kind,
    k: usize,
    d: u64,
    n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<u64>,
    entries: Vec<Entry>,
}

/// A sketch as stored on disk: either a single-stream sketch (all `k`
/// slots, dummies included, plus `gamma`) or a merged sketch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SerializedSketch {
    Mg(Sketch),
    Merged(MergedSketch),
}

impl SerializedSketch {
    pub fn k(&self) -> usize {
        match self {
            Self::Mg(s) => s.k(),
            Self::Merged(m) => m.k(),
        }
    }

    pub fn d(&self) -> u64 {
        match self {
            Self::Mg(s) => s.d(),
            Self::Merged(m) => m.d(),
        }
    }

    pub fn n(&self) -> u64 {
        match self {
            Self::Mg(s) => s.n(),
            Self::Merged(m) => m.n(),
        }
    }

    /// Merged (canonical) form; single-stream sketches drop dummies and
    /// zero counters.
    pub fn to_merged(&self) -> MergedSketch {
        match self {
            Self::Mg(s) => MergedSketch::from(s),
            Self::Merged(m) => m.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Self::Mg(s) => SketchFile {
                version: FORMAT_VERSION,
                kind: Kind::Mg,
                k: s.k(),
                d: s.d(),
                n: s.n(),
                gamma: Some(s.gamma()),
                entries: s
                    .entries()
                    .map(|(key, count)| Entry { key, count })
                    .collect(),
            },
            Self::Merged(m) => SketchFile {
                version: FORMAT_VERSION,
                kind: Kind::Merged,
                k: m.k(),
                d: m.d(),
                n: m.n(),
                gamma: None,
                entries: m
                    .entries()
                    .map(|(key, count)| Entry { key, count })
                    .collect(),
            },
        };
        let mut text = serde_json::to_string(&file)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SketchFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::InconsistentSketch(format!(
                "unsupported sketch format version {}",
                file.version
            )));
        }
        if file.entries.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::InconsistentSketch(
                "entry keys must be strictly ascending".into(),
            ));
        }
        let entries = file.entries.iter().map(|e| (e.key, e.count));
        match (file.kind, file.gamma) {
            (Kind::Mg, Some(gamma)) => Ok(Self::Mg(Sketch::from_parts(
                file.k, file.d, file.n, gamma, entries,
            )?)),
            (Kind::Mg, None) => Err(Error::InconsistentSketch(
                "sketch file is missing gamma".into(),
            )),
            (Kind::Merged, None) => Ok(Self::Merged(MergedSketch::from_parts(
                file.k, file.d, file.n, entries,
            )?)),
            (Kind::Merged, Some(_)) => Err(Error::InconsistentSketch(
                "merged sketches carry no gamma".into(),
            )),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// How stream lines are turned into universe items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StreamFormat {
    /// One integer in `[1, d]` per line.
    #[default]
    Integers,
    /// One arbitrary token per line, mapped to ids by a [`TokenDictionary`].
    Tokens,
}

impl std::str::FromStr for StreamFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int" | "integers" => Ok(Self::Integers),
            "token" | "tokens" => Ok(Self::Tokens),
            other => Err(Error::InvalidConfig(format!(
                "unknown stream format '{other}'"
            ))),
        }
    }
}

/// Bijection between tokens and ids `1, 2, ...`, assigned in order of first
/// appearance. Stored as `token<TAB>id` lines. The dictionary is not
/// privatized: it is public metadata describing the universe.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenDictionary {
    ids: HashMap<String, u64>,
    tokens: Vec<String>,
}

impl TokenDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u64> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u64) -> Option<&str> {
        let index = usize::try_from(id).ok()?.checked_sub(1)?;
        self.tokens.get(index).map(String::as_str)
    }

    /// Id of `token`, assigning the next free id when it is new. Fails once
    /// the universe `[1, d]` is exhausted.
    pub fn intern(&mut self, token: &str, d: u64) -> Result<u64> {
        if let Some(id) = self.id(token) {
            return Ok(id);
        }
        if token.contains('\t') {
            return Err(Error::InvalidConfig(
                "tokens may not contain tab characters".into(),
            ));
        }
        let id = self.tokens.len() as u64 + 1;
        if id > d {
            return Err(Error::InvalidConfig(format!(
                "more than d={d} distinct tokens; increase the universe size"
            )));
        }
        self.tokens.push(token.to_owned());
        self.ids.insert(token.to_owned(), id);
        Ok(id)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dict = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let (token, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected token<TAB>id".into(),
            })?;
            let id: u64 = id.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid id '{id}'"),
            })?;
            if id != dict.tokens.len() as u64 + 1 || dict.ids.contains_key(token) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "ids must be 1, 2, ... without repeated tokens; got {token:?} -> {id}"
                    ),
                });
            }
            dict.tokens.push(token.to_owned());
            dict.ids.insert(token.to_owned(), id);
        }
        Ok(dict)
    }

    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{}\n", i + 1))
            .collect()
    }

    /// Loads `path`, or returns an empty dictionary if it does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Reads a stream line by line and calls `f` with each item. Blank lines
/// are skipped; errors carry the 1-based line number.
pub fn for_each_item(
    reader: impl BufRead,
    format: StreamFormat,
    d: u64,
    dict: &mut TokenDictionary,
    mut f: impl FnMut(u64) -> Result<()>,
) -> Result<u64> {
    let mut items = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let raw = line.strip_suffix('\r').unwrap_or(&line);
        if raw.trim().is_empty() {
            continue;
        }
        let item = match format {
            StreamFormat::Integers => {
                let text = raw.trim();
                let item: u64 = text.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("'{text}' is not a non-negative integer"),
                })?;
                if item == 0 || item > d {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("item {item} outside the universe [1, {d}]"),
                    });
                }
                item
            }
            StreamFormat::Tokens => dict.intern(raw, d).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
        };
        f(item)?;
        items += 1;
    }
    Ok(items)
}

/// Opens `path` for buffered reading, or stdin when `path` is `None` or `-`.
pub fn open_input(path: Option<&Path>) -> Result<Box<dyn BufRead>> {
    match path {
        Some(p) if p != Path::new("-") => Ok(Box::new(BufReader::new(File::open(p)?))),
        _ => Ok(Box::new(BufReader::new(io::stdin()))),
    }
}

/// Builds a sketch from a stream.
pub fn build_sketch(
    reader: impl BufRead,
    k: usize,
    d: u64,
    format: StreamFormat,
    dict: &mut TokenDictionary,
) -> Result<Sketch> {
    let mut sketch = Sketch::new(k, d)?;
    for_each_item(reader, format, d, dict, |x| sketch.update(x).map(|_| ()))?;
    Ok(sketch)
}

/// Exact histogram of a stream.
pub fn read_histogram(
    reader: impl BufRead,
    d: u64,
    format: StreamFormat,
    dict: &mut TokenDictionary,
) -> Result<ExactHistogram> {
    let mut items = Vec::new();
    for_each_item(reader, format, d, dict, |x| {
        items.push(x);
        Ok(())
    })?;
    ExactHistogram::from_stream(&items, d)
}

/// Path of the stamp that marks `sketch` as released.
pub fn stamp_path(sketch: &Path) -> PathBuf {
    let mut name = sketch.as_os_str().to_owned();
    name.push(".released");
    PathBuf::from(name)
}

/// Atomically creates the release stamp for `sketch`, failing with
/// [`Error::AlreadyReleased`] if it already exists.
pub fn claim_release(sketch: &Path, note: &str) -> Result<()> {
    let path = stamp_path(sketch);
    match OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(file) => {
            let mut w = BufWriter::new(file);
            w.write_all(note.as_bytes())?;
            w.flush()?;
            Ok(())
        }
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::AlreadyReleased),
        Err(e) => Err(e.into()),
    }
}

/// Reads a whole file, or stdin for `-`.
pub fn read_text(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut text = String::new();
        io::stdin().read_to_string(&mut text)?;
        Ok(text)
    } else {
        Ok(fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyError {
    pub key: u64,
    pub true_count: u64,
    pub released: f64,
    pub error: f64,
}

/// Accuracy of a release against the exact histogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mechanism: String,
    pub n: u64,
    pub max_error: f64,
    /// Mean over the universe of the squared error.
    pub mse: f64,
    pub beta: Option<f64>,
    /// Whether every deviation lies in the recorded error interval; `None`
    /// when the summary carries no interval.
    pub inside_interval: Option<bool>,
    /// Keys that were released or occur in the stream.
    pub per_key: Vec<KeyError>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        Ok(text)
    }
}

pub fn evaluate(summary: &PrivateSummary, hist: &ExactHistogram) -> Result<EvalReport> {
    if let Some((key, _)) = hist.counts().find(|&(key, _)| key > summary.d) {
        return Err(Error::Mismatch(format!(
            "stream item {key} outside the summary universe [1, {}]",
            summary.d
        )));
    }
    let mut keys: Vec<u64> = summary
        .keys()
        .chain(hist.counts().map(|(key, _)| key))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let per_key = keys
        .into_iter()
        .map(|key| {
            let (true_count, released) = (hist.count(key), summary.count(key));
            KeyError {
                key,
                true_count,
                released,
                error: released - true_count as f64,
            }
        })
        .collect::<Vec<_>>();
    let inside_interval = summary.error_bound.map(|b| {
        // absent keys with zero frequency have deviation 0, which every
        // interval contains
        per_key.iter().all(|e| b.contains(e.error))
    });
    Ok(EvalReport {
        mechanism: summary.mechanism.to_string(),
        n: hist.n(),
        max_error: max_error(summary, hist),
        mse: mean_squared_error(summary, hist),
        beta: summary.error_bound.map(|b| b.beta),
        inside_interval,
        per_key,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ZeroNoise;
    use crate::release::{privatize_mg_with_threshold, PrivacyParams};

    fn build(text: &str, k: usize, d: u64) -> Result<Sketch> {
        build_sketch(
            text.as_bytes(),
            k,
            d,
            StreamFormat::Integers,
            &mut TokenDictionary::new(),
        )
    }

    #[test]
    fn build_traces() {
        let s = build("1\n2\n3", 2, 3).unwrap();
        assert_eq!(s.entries().collect::<Vec<_>>(), vec![(1, 0), (2, 0)]);
        assert_eq!((s.gamma(), s.n()), (1, 3));

        let s = build("", 2, 3).unwrap();
        assert_eq!(s.n(), 0);
        assert!(s.real_entries().next().is_none());

        assert!(matches!(
            build("abc\n", 2, 3),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            build("1\n\n9\n", 2, 3),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn sketch_json_round_trip() {
        let s = SerializedSketch::Mg(build("1\n1\n2\n3\n4\n", 2, 4).unwrap());
        let text = s.to_json().unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(SerializedSketch::from_json(&text).unwrap(), s);

        let m =
            SerializedSketch::Merged(MergedSketch::from_parts(2, 4, 9, [(1, 3), (2, 1)]).unwrap());
        assert_eq!(
            SerializedSketch::from_json(&m.to_json().unwrap()).unwrap(),
            m
        );
    }

    #[test]
    fn sketch_json_rejects_bad_files() {
        let bad = [
            r#"{"version":2,"kind":"mg","k":1,"d":2,"n":0,"gamma":0,"entries":[{"key":3,"count":0}]}"#,
            r#"{"version":1,"kind":"mg","k":1,"d":2,"n":0,"entries":[{"key":3,"count":0}]}"#,
            r#"{"version":1,"kind":"mg","k":2,"d":2,"n":0,"gamma":0,"entries":[{"key":4,"count":0},{"key":3,"count":0}]}"#,
            r#"{"version":1,"kind":"merged","k":1,"d":2,"n":1,"entries":[{"key":1,"count":0}]}"#,
            r#"{"version":1,"kind":"merged","k":1,"d":2,"n":1,"gamma":0,"entries":[]}"#,
            r#"{"version":1,"kind":"mg","k":1,"d":2,"n":0,"gamma":0,"entries":[],"extra":1}"#,
        ];
        for text in bad {
            assert!(SerializedSketch::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn token_mode_assigns_ids_in_order() {
        let mut dict = TokenDictionary::new();
        let s = build_sketch(
            "apple\npear\napple\nfig\r\n".as_bytes(),
            3,
            5,
            StreamFormat::Tokens,
            &mut dict,
        )
        .unwrap();
        assert_eq!(dict.id("apple"), Some(1));
        assert_eq!(dict.id("fig"), Some(3));
        assert_eq!(dict.token(2), Some("pear"));
        assert_eq!(s.estimate(1).unwrap(), 2);
        let text = dict.to_text();
        assert_eq!(text, "apple\t1\npear\t2\nfig\t3\n");
        assert_eq!(TokenDictionary::parse(&text).unwrap(), dict);

        let mut small = TokenDictionary::new();
        let err = build_sketch(
            "a\nb\nc\n".as_bytes(),
            2,
            2,
            StreamFormat::Tokens,
            &mut small,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(TokenDictionary::parse("a\t2\n").is_err());
    }

    #[test]
    fn stamps_are_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let sketch = dir.path().join("s.json");
        claim_release(&sketch, "approx").unwrap();
        assert!(stamp_path(&sketch).exists());
        assert!(matches!(
            claim_release(&sketch, "approx"),
            Err(Error::AlreadyReleased)
        ));
    }

    #[test]
    fn eval_examples() {
        let p = PrivacyParams::new(1.0, 0.05, 0.05).unwrap();
        let mut s = Sketch::from_stream(2, 3, &[1, 1, 1]).unwrap();
        let summary = privatize_mg_with_threshold(&mut s, &p, 0.0, &mut ZeroNoise).unwrap();
        let hist = ExactHistogram::from_stream(&[1, 1, 1], 3).unwrap();
        let report = evaluate(&summary, &hist).unwrap();
        assert_eq!(report.max_error, 0.0);
        assert_eq!(report.inside_interval, Some(true));

        let mut empty = Sketch::new(2, 3).unwrap();
        let summary = privatize_mg_with_threshold(&mut empty, &p, 0.0, &mut ZeroNoise).unwrap();
        let hist = ExactHistogram::from_stream(&[2; 5], 3).unwrap();
        let report = evaluate(&summary, &hist).unwrap();
        assert_eq!(report.max_error, 5.0);
        assert_eq!(
            report.per_key,
            vec![KeyError {
                key: 2,
                true_count: 5,
                released: 0.0,
                error: -5.0
            }]
        );

        let wide = ExactHistogram::from_stream(&[4], 4).unwrap();
        assert!(matches!(evaluate(&summary, &wide), Err(Error::Mismatch(_))));
    }
}
