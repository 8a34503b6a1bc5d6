//! Column-labeled numeric datasets, their role assignment, and a
//! content-addressed local object store standing in for remote object
//! storage.
//!
//! A dataset serializes to one canonical byte layout — a JSON header line
//! naming columns and roles, followed by column-major little-endian f64
//! payloads — and its store key is the SHA-256 of those bytes, so storing
//! the same data twice is idempotent and any mutation changes the key.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column '{0}' not found")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column '{col}': {text:?}")]
    NonNumericCell { row: usize, col: String, text: String },
    #[error("non-finite value at row {row}, column '{col}'")]
    NonFiniteCell { row: usize, col: String },
    #[error("dataset needs at least 2 observations, got {0}")]
    EmptyData(usize),
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("column '{0}' assigned to more than one role")]
    RoleOverlap(String),
    #[error("x_cols must be non-empty")]
    NoControls,
    #[error("column '{col}' has {got} values, expected {expected}")]
    RaggedColumn { col: String, got: usize, expected: usize },
    #[error("object store root '{root}' not writable: {source}")]
    StoreUnavailable { root: PathBuf, source: std::io::Error },
    #[error("unknown store key '{0}'")]
    UnknownKey(String),
    #[error("schema digest mismatch: reference {expected}, stored content {actual}")]
    SchemaMismatch { expected: String, actual: String },
    #[error("stored payload for key '{key}' is corrupt: {reason}")]
    CorruptPayload { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column roles: the outcome, the treatment, and the controls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub y_col: String,
    pub d_col: String,
    pub x_cols: Vec<String>,
}

/// An immutable numeric table with designated outcome/treatment/control
/// columns. All invariants (equal column lengths, finite values, disjoint
/// existing roles) are enforced at construction; no public operation can
/// violate them afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlDataset {
    n_obs: usize,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
    roles: Roles,
}

impl DmlDataset {
    pub fn new(columns: Vec<(String, Vec<f64>)>, roles: Roles) -> Result<Self, DatasetError> {
        let n_obs = columns.first().map(|(_, v)| v.len()).unwrap_or(0);
        if n_obs < 2 {
            return Err(DatasetError::EmptyData(n_obs));
        }
        let mut seen = HashSet::new();
        for (name, vals) in &columns {
            if !seen.insert(name.clone()) {
                return Err(DatasetError::DuplicateColumn(name.clone()));
            }
            if vals.len() != n_obs {
                return Err(DatasetError::RaggedColumn {
                    col: name.clone(),
                    got: vals.len(),
                    expected: n_obs,
                });
            }
            if let Some(row) = vals.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteCell { row, col: name.clone() });
            }
        }
        if roles.x_cols.is_empty() {
            return Err(DatasetError::NoControls);
        }
        let mut role_names = HashSet::new();
        for name in [&roles.y_col, &roles.d_col].into_iter().chain(&roles.x_cols) {
            if !seen.contains(name) {
                return Err(DatasetError::MissingColumn(name.clone()));
            }
            if !role_names.insert(name.clone()) {
                return Err(DatasetError::RoleOverlap(name.clone()));
            }
        }
        let (names, values) = columns.into_iter().unzip();
        Ok(Self { n_obs, names, values, roles })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[f64], DatasetError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    }

    /// Row-major feature matrix for the given columns restricted to `rows`.
    pub fn feature_rows(&self, cols: &[String], rows: &[usize]) -> Result<Vec<Vec<f64>>, DatasetError> {
        let col_refs: Vec<&[f64]> = cols
            .iter()
            .map(|c| self.column(c))
            .collect::<Result<_, _>>()?;
        Ok(rows
            .iter()
            .map(|&r| col_refs.iter().map(|c| c[r]).collect())
            .collect())
    }

    pub fn target_values(&self, col: &str, rows: &[usize]) -> Result<Vec<f64>, DatasetError> {
        let c = self.column(col)?;
        Ok(rows.iter().map(|&r| c[r]).collect())
    }

    /// Canonical bytes: JSON header line, then each column in order as
    /// little-endian f64. This single layout is what gets hashed.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let header = Header {
            n_obs: self.n_obs,
            columns: self.names.clone(),
            y: self.roles.y_col.clone(),
            d: self.roles.d_col.clone(),
            x: self.roles.x_cols.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for col in &self.values {
            for v in col {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let corrupt = |reason: &str| DatasetError::CorruptPayload {
            key: String::new(),
            reason: reason.to_string(),
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let body = &bytes[newline + 1..];
        let expected = header.n_obs * header.columns.len() * 8;
        if body.len() != expected {
            return Err(corrupt(&format!(
                "payload has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut columns = Vec::with_capacity(header.columns.len());
        for (i, name) in header.columns.iter().enumerate() {
            let start = i * header.n_obs * 8;
            let vals: Vec<f64> = body[start..start + header.n_obs * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            columns.push((name.clone(), vals));
        }
        Self::new(
            columns,
            Roles { y_col: header.y, d_col: header.d, x_cols: header.x },
        )
    }

    /// Digest over column names and role assignment only (not the values).
    pub fn schema_digest(&self) -> String {
        let schema = Schema {
            columns: self.names.clone(),
            y: self.roles.y_col.clone(),
            d: self.roles.d_col.clone(),
            x: self.roles.x_cols.clone(),
        };
        sha256_hex(&serde_json::to_vec(&schema).expect("schema serializes"))
    }

    /// Writes the dataset as CSV: header row, one shortest-round-trip
    /// decimal per cell.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        out.push_str(&self.names.join(","));
        out.push('\n');
        for row in 0..self.n_obs {
            let mut first = true;
            for col in &self.values {
                if !first {
                    out.push(',');
                }
                out.push_str(&format!("{}", col[row]));
                first = false;
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_obs: usize,
    columns: Vec<String>,
    y: String,
    d: String,
    x: Vec<String>,
}

#[derive(Serialize)]
struct Schema {
    columns: Vec<String>,
    y: String,
    d: String,
    x: Vec<String>,
}

/// Pointer to a stored dataset: content hash plus a digest of the schema,
/// so a fetch can detect both missing payloads and role drift.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub store_key: String,
    pub schema_digest: String,
}

/// Content-addressed store: one file per key under `root`, the filename
/// being the hex SHA-256 of the payload. Writes of identical content may
/// race benignly (same key, same bytes); reads are lock-free.
#[derive(Debug, Clone)]
pub struct ObjectStore {
    root: PathBuf,
}

impl ObjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        fs::create_dir_all(&root)
            .map_err(|source| DatasetError::StoreUnavailable { root: root.clone(), source })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String, DatasetError> {
        let key = sha256_hex(bytes);
        let path = self.root.join(&key);
        if path.exists() {
            return Ok(key);
        }
        // Write to a unique temp file then rename, so concurrent writers
        // of the same content never expose a torn payload.
        let tmp = self
            .root
            .join(format!(".{key}.{}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp)
            .map_err(|source| DatasetError::StoreUnavailable { root: self.root.clone(), source })?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(key)
    }

    pub fn get(&self, key: &str) -> Result<Vec<u8>, DatasetError> {
        let path = self.root.join(key);
        if !path.exists() {
            return Err(DatasetError::UnknownKey(key.to_string()));
        }
        Ok(fs::read(path)?)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.root.join(key).exists()
    }
}

/// Serializes the dataset canonically and persists it. Idempotent: the key
/// is a pure function of the canonical bytes.
pub fn store_dataset(ds: &DmlDataset, store: &ObjectStore) -> Result<DatasetRef, DatasetError> {
    let bytes = ds.to_canonical_bytes();
    let store_key = store.put(&bytes)?;
    Ok(DatasetRef { store_key, schema_digest: ds.schema_digest() })
}

/// Fetches and revalidates a stored dataset. The payload is re-hashed
/// against the reference key and the schema digest is checked against the
/// stored content.
pub fn fetch_dataset(r: &DatasetRef, store: &ObjectStore) -> Result<DmlDataset, DatasetError> {
    let bytes = store.get(&r.store_key)?;
    if sha256_hex(&bytes) != r.store_key {
        return Err(DatasetError::CorruptPayload {
            key: r.store_key.clone(),
            reason: "content hash does not match key".to_string(),
        });
    }
    let ds = DmlDataset::from_canonical_bytes(&bytes)?;
    let actual = ds.schema_digest();
    if actual != r.schema_digest {
        return Err(DatasetError::SchemaMismatch {
            expected: r.schema_digest.clone(),
            actual,
        });
    }
    Ok(ds)
}

/// Loads a CSV file (header row, comma delimiter, decimal-point floats)
/// and validates it under the given roles.
pub fn load_csv(path: &Path, roles: Roles) -> Result<DmlDataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DatasetError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: {e}", path.display()),
            )),
            _ => DatasetError::Io(std::io::Error::other(e.to_string())),
        })?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Io(std::io::Error::other(e.to_string())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut columns: Vec<(String, Vec<f64>)> =
        names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Io(std::io::Error::other(e.to_string())))?;
        for (col_idx, cell) in record.iter().enumerate() {
            let col_name = names
                .get(col_idx)
                .cloned()
                .unwrap_or_else(|| format!("#{col_idx}"));
            let v: f64 = cell.parse().map_err(|_| DatasetError::NonNumericCell {
                row: row_idx,
                col: col_name.clone(),
                text: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NonFiniteCell { row: row_idx, col: col_name });
            }
            columns[col_idx].1.push(v);
        }
    }
    DmlDataset::new(columns, roles)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn roles_yd(x: &[&str]) -> Roles {
        Roles {
            y_col: "y".into(),
            d_col: "d".into(),
            x_cols: x.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn small_dataset() -> DmlDataset {
        DmlDataset::new(
            vec![
                ("y".into(), vec![1.0, 2.0, 3.0, 4.0]),
                ("d".into(), vec![0.0, 1.0, 0.0, 1.0]),
                ("x1".into(), vec![0.5, -0.5, 1.5, -1.5]),
            ],
            roles_yd(&["x1"]),
        )
        .unwrap()
    }

    #[test]
    fn load_minimal_csv() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "y,d,x1\n1,0,0.5\n2,1,-0.5\n3,0,1.5\n4,1,-1.5\n").unwrap();
        let ds = load_csv(&path, roles_yd(&["x1"])).unwrap();
        assert_eq!(ds.n_obs(), 4);
        assert_eq!(ds.column_names().len(), 3);
        assert_eq!(ds.column("x1").unwrap(), &[0.5, -0.5, 1.5, -1.5]);
    }

    #[test]
    fn load_csv_with_bonus_style_roles() {
        let x_names = [
            "female", "black", "othrace", "dep1", "dep2", "q2", "q3", "q4", "q5", "q6",
            "agelt35", "agegt54", "durable", "lusd", "husd",
        ];
        let mut header = String::from("inuidur1,tg");
        for n in &x_names {
            header.push(',');
            header.push_str(n);
        }
        let mut body = String::new();
        for i in 0..4 {
            body.push_str(&format!("\n{}.5,{}", i, i % 2));
            for j in 0..15 {
                body.push_str(&format!(",{}", (i * 15 + j) % 3));
            }
        }
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bonus.csv");
        fs::write(&path, format!("{header}{body}\n")).unwrap();
        let roles = Roles {
            y_col: "inuidur1".into(),
            d_col: "tg".into(),
            x_cols: x_names.iter().map(|s| s.to_string()).collect(),
        };
        let ds = load_csv(&path, roles).unwrap();
        assert_eq!(ds.roles().x_cols.len(), 15);
        assert_eq!(ds.column_names().len(), 17);
    }

    #[test]
    fn load_csv_missing_role_column() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "y,x1\n1,2\n3,4\n").unwrap();
        let err = load_csv(
            &path,
            Roles { y_col: "y".into(), d_col: "tg".into(), x_cols: vec!["x1".into()] },
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn(ref c) if c == "tg"));
    }

    #[test]
    fn load_csv_rejects_non_numeric_and_non_finite() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "y,d,x1\n1,0,oops\n2,1,3\n").unwrap();
        let err = load_csv(&path, roles_yd(&["x1"])).unwrap_err();
        assert!(matches!(err, DatasetError::NonNumericCell { row: 0, .. }));

        fs::write(&path, "y,d,x1\n1,0,NaN\n2,1,3\n").unwrap();
        let err = load_csv(&path, roles_yd(&["x1"])).unwrap_err();
        assert!(matches!(err, DatasetError::NonFiniteCell { row: 0, .. }));
    }

    #[test]
    fn single_row_is_empty_data() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "y,d,x1\n1,0,2\n").unwrap();
        assert!(matches!(
            load_csv(&path, roles_yd(&["x1"])).unwrap_err(),
            DatasetError::EmptyData(1)
        ));
    }

    #[test]
    fn role_overlap_rejected() {
        let err = DmlDataset::new(
            vec![
                ("y".into(), vec![1.0, 2.0]),
                ("x1".into(), vec![0.0, 1.0]),
            ],
            Roles { y_col: "y".into(), d_col: "y".into(), x_cols: vec!["x1".into()] },
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::RoleOverlap(_)));
    }

    #[test]
    fn store_is_idempotent_and_hash_sensitive() {
        let dir = TempDir::new().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let ds = small_dataset();
        let r1 = store_dataset(&ds, &store).unwrap();
        let r2 = store_dataset(&ds, &store).unwrap();
        assert_eq!(r1, r2);

        let mut cols: Vec<(String, Vec<f64>)> = ds
            .column_names()
            .iter()
            .map(|n| (n.clone(), ds.column(n).unwrap().to_vec()))
            .collect();
        cols[2].1[0] += 1e-9;
        let mutated = DmlDataset::new(cols, ds.roles().clone()).unwrap();
        let r3 = store_dataset(&mutated, &store).unwrap();
        assert_ne!(r1.store_key, r3.store_key);
        assert_eq!(r1.schema_digest, r3.schema_digest);
    }

    #[test]
    fn store_round_trip_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let ds = small_dataset();
        let bytes = ds.to_canonical_bytes();
        let key = store.put(&bytes).unwrap();
        assert_eq!(store.get(&key).unwrap(), bytes);

        let r = store_dataset(&ds, &store).unwrap();
        let back = fetch_dataset(&r, &store).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn fetch_detects_schema_mismatch_and_unknown_key() {
        let dir = TempDir::new().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let r = store_dataset(&small_dataset(), &store).unwrap();

        let bad = DatasetRef { schema_digest: "deadbeef".into(), ..r.clone() };
        assert!(matches!(
            fetch_dataset(&bad, &store).unwrap_err(),
            DatasetError::SchemaMismatch { .. }
        ));

        let missing = DatasetRef { store_key: "0".repeat(64), schema_digest: r.schema_digest };
        assert!(matches!(
            fetch_dataset(&missing, &store).unwrap_err(),
            DatasetError::UnknownKey(_)
        ));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("out.csv");
        let ds = small_dataset();
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path, ds.roles().clone()).unwrap();
        assert_eq!(back, ds);
    }
}
