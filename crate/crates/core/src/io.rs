//! File formats: pose records, dictionary documents and result tables.
//!
//! Pose files hold one record per line, `id P v1 v2 ...`, with the joint
//! coordinates joint-major (`x0 y0 z0 x1 ...` for 3D, `x0 y0 x1 ...` for 2D).
//! Blank lines and lines starting with `#` are ignored. Numbers are written
//! in the shortest form that parses back to the same `f64`.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dictlearn::DictLearnConfig;
use crate::error::{Error, Result};
use crate::pose::{DictKind, Pose2D, Pose3D, PoseDictionary, DICT_VALIDATION_TOL};

/// A pose type that can be stored as a flat record.
pub trait PoseRecord: Sized {
    const DIM: usize;
    fn from_flat(values: &[f64]) -> Result<Self>;
    fn values(&self) -> &[f64];
    fn joint_count(&self) -> usize;
}

impl PoseRecord for Pose3D {
    const DIM: usize = 3;
    fn from_flat(values: &[f64]) -> Result<Self> {
        Pose3D::from_flat(values)
    }
    fn values(&self) -> &[f64] {
        self.as_slice()
    }
    fn joint_count(&self) -> usize {
        self.num_joints()
    }
}

impl PoseRecord for Pose2D {
    const DIM: usize = 2;
    fn from_flat(values: &[f64]) -> Result<Self> {
        Pose2D::from_flat(values)
    }
    fn values(&self) -> &[f64] {
        self.as_slice()
    }
    fn joint_count(&self) -> usize {
        self.num_joints()
    }
}

/// A pose with its record id.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled<T> {
    pub id: String,
    pub pose: T,
}

impl<T> Labeled<T> {
    pub fn new(id: impl Into<String>, pose: T) -> Self {
        Self { id: id.into(), pose }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a pose file. Every record must have the same joint count.
pub fn read_poses<T: PoseRecord>(path: impl AsRef<Path>) -> Result<Vec<Labeled<T>>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out: Vec<Labeled<T>> = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let id = fields.next().expect("line is not empty");
        let joints: usize = fields
            .next()
            .ok_or_else(|| parse_error(path, line_no, "missing joint count"))?
            .parse()
            .map_err(|_| parse_error(path, line_no, "joint count is not a nonnegative integer"))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_error(path, line_no, format!("'{f}' is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != T::DIM * joints {
            return Err(parse_error(
                path,
                line_no,
                format!("expected {} values for {joints} joints, found {}", T::DIM * joints, values.len()),
            ));
        }
        let pose = T::from_flat(&values).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        if let Some(first) = out.first() {
            if first.pose.joint_count() != joints {
                return Err(Error::DimensionMismatch(format!(
                    "{}:{line_no}: record has {joints} joints, earlier records have {}",
                    path.display(),
                    first.pose.joint_count()
                )));
            }
        }
        out.push(Labeled::new(id, pose));
    }
    Ok(out)
}

/// Writes a pose file, replacing any existing content.
pub fn write_poses<T: PoseRecord>(path: impl AsRef<Path>, records: &[Labeled<T>]) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!("# pose records ({}D): id joints coordinates\n", T::DIM);
    for r in records {
        if r.id.is_empty() || r.id.contains(char::is_whitespace) || r.id.starts_with('#') {
            return Err(Error::InvalidPose(format!("record id '{}' cannot be stored", r.id)));
        }
        text.push_str(&r.id);
        text.push(' ');
        text.push_str(&r.pose.joint_count().to_string());
        for v in r.pose.values() {
            text.push(' ');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    }
    write_text(path, &text)
}

/// Provenance stored alongside learned dictionaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub config: DictLearnConfig,
    pub iterations: usize,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct DictionaryBlock {
    kind: DictKind,
    atoms: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryDocument {
    format: String,
    version: u32,
    num_joints: usize,
    k_u: usize,
    k_v: usize,
    learn: Option<LearnSummary>,
    dict_u: DictionaryBlock,
    dict_v: DictionaryBlock,
}

const DICTIONARY_FORMAT: &str = "sdm-dictionary";

fn block(d: &PoseDictionary) -> DictionaryBlock {
    DictionaryBlock {
        kind: d.kind(),
        atoms: d.atoms().iter().map(|a| a.as_slice().to_vec()).collect(),
    }
}

fn unblock(b: DictionaryBlock, slot: DictKind, num_joints: usize) -> Result<PoseDictionary> {
    if b.kind != slot {
        return Err(Error::InvalidDictionary(format!("{slot} slot holds a {} dictionary", b.kind)));
    }
    let atoms = b
        .atoms
        .iter()
        .map(|values| {
            if values.len() != 3 * num_joints {
                return Err(Error::InvalidDictionary(format!(
                    "atom has {} values, expected {}",
                    values.len(),
                    3 * num_joints
                )));
            }
            Pose3D::from_flat(values).map_err(|e| Error::InvalidDictionary(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    PoseDictionary::with_tolerance(atoms, slot, DICT_VALIDATION_TOL)
}

/// Dictionaries as read back from disk.
#[derive(Clone, Debug)]
pub struct DictionaryFile {
    pub dict_u: PoseDictionary,
    pub dict_v: PoseDictionary,
    pub learn: Option<LearnSummary>,
}

/// Writes both dictionaries as one JSON document.
pub fn write_dictionary(
    path: impl AsRef<Path>,
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    learn: Option<&LearnSummary>,
) -> Result<()> {
    let path = path.as_ref();
    if dict_u.kind() != DictKind::GlobalStructure || dict_v.kind() != DictKind::Deformation {
        return Err(Error::InvalidDictionary("dictionaries passed in the wrong slots".into()));
    }
    if dict_u.num_joints() != dict_v.num_joints() {
        return Err(Error::DimensionMismatch("dictionaries disagree on joint count".into()));
    }
    let doc = DictionaryDocument {
        format: DICTIONARY_FORMAT.into(),
        version: 1,
        num_joints: dict_u.num_joints(),
        k_u: dict_u.size(),
        k_v: dict_v.size(),
        learn: learn.cloned(),
        dict_u: block(dict_u),
        dict_v: block(dict_v),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("dictionary documents serialize");
    text.push('\n');
    write_text(path, &text)
}

/// Reads and validates a dictionary document.
pub fn read_dictionary(path: impl AsRef<Path>) -> Result<DictionaryFile> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let doc: DictionaryDocument =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e.to_string()))?;
    if doc.format != DICTIONARY_FORMAT || doc.version != 1 {
        return Err(parse_error(path, 1, format!("unsupported document {} v{}", doc.format, doc.version)));
    }
    if doc.dict_u.atoms.len() != doc.k_u || doc.dict_v.atoms.len() != doc.k_v {
        return Err(Error::InvalidDictionary("atom counts disagree with the header".into()));
    }
    Ok(DictionaryFile {
        dict_u: unblock(doc.dict_u, DictKind::GlobalStructure, doc.num_joints)?,
        dict_v: unblock(doc.dict_v, DictKind::Deformation, doc.num_joints)?,
        learn: doc.learn,
    })
}

/// A results table with named columns. Cells are kept as text; numbers go
/// through [`format_number`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest text that parses back to the same value.
pub fn format_number(v: f64) -> String {
    v.to_string()
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::SchemaMismatch(format!(
                "row has {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric value of a cell.
    pub fn number(&self, row: usize, column: &str) -> Option<f64> {
        let c = self.column(column)?;
        self.rows.get(row)?.get(c)?.parse().ok()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => parse_error(path, line, format!("{other:?}")),
    }
}

fn check_header(columns: &[String]) -> Result<()> {
    let unique: BTreeSet<&String> = columns.iter().collect();
    if columns.is_empty() || unique.len() != columns.len() {
        return Err(Error::SchemaMismatch("header needs distinct, non-empty column names".into()));
    }
    Ok(())
}

/// Writes a table as CSV with a header row.
pub fn write_results(path: impl AsRef<Path>, table: &Table) -> Result<()> {
    let path = path.as_ref();
    check_header(&table.columns)?;
    if let Some(bad) = table.rows.iter().find(|r| r.len() != table.columns.len()) {
        return Err(Error::SchemaMismatch(format!(
            "row has {} cells for {} columns",
            bad.len(),
            table.columns.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(&table.columns).map_err(|e| csv_error(path, e))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV table written by [`write_results`].
pub fn read_results(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let columns: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let mut table = Table::new(columns);
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        table.rows.push(record.iter().map(String::from).collect());
    }
    Ok(table)
}

/// Appends one row given as `(column, value)` pairs. A missing file is
/// created with the pairs' order as header; otherwise the pairs must name
/// exactly the existing columns.
pub fn append_results(path: impl AsRef<Path>, row: &[(&str, String)]) -> Result<()> {
    let path = path.as_ref();
    let names: Vec<String> = row.iter().map(|(c, _)| c.to_string()).collect();
    check_header(&names)?;
    if !path.exists() {
        let mut table = Table::new(names);
        table.push(row.iter().map(|(_, v)| v.clone()).collect())?;
        return write_results(path, &table);
    }
    let existing = {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect::<Vec<_>>()
    };
    let given: BTreeSet<&String> = names.iter().collect();
    let expected: BTreeSet<&String> = existing.iter().collect();
    if given != expected {
        return Err(Error::SchemaMismatch(format!(
            "row columns [{}] do not match header [{}]",
            names.join(", "),
            existing.join(", ")
        )));
    }
    let ordered: Vec<&String> = existing
        .iter()
        .map(|c| &row.iter().find(|(name, _)| name == c).expect("checked above").1)
        .collect();
    let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record(ordered).map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
