use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "rzd";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub features: String,
    pub labels: String,
    pub attributes: String,
    pub train_seen: String,
    pub test_seen: String,
    pub test_unseen: String,
}

impl Default for ManifestFiles {
    fn default() -> Self {
        ManifestFiles {
            features: "features.bin".into(),
            labels: "labels.bin".into(),
            attributes: "attributes.bin".into(),
            train_seen: "train_seen_idx.bin".into(),
            test_seen: "test_seen_idx.bin".into(),
            test_unseen: "test_unseen_idx.bin".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub n: usize,
    pub d_x: usize,
    pub d_s: usize,
    pub n_classes: usize,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub files: ManifestFiles,
}

/// Which test pool a class or row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

/// Visual features, class attributes and the seen/unseen protocol splits.
#[derive(Clone, Debug, PartialEq)]
pub struct GzslDataset {
    pub name: String,
    /// `[n × d_x]`
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[n_classes × d_s]`, values in `[0, 1]`.
    pub attributes: Tensor<f32>,
    pub train_seen: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

/// The only slice of a dataset the training path receives.
#[derive(Clone, Debug)]
pub struct SeenTrainView {
    /// `[n × d_x]`
    pub features: Tensor<f32>,
    /// Class attribute of each row, `[n × d_s]` in `[0, 1]`.
    pub semantics: Tensor<f32>,
    /// Position of each row's class within `seen_classes`.
    pub targets: Vec<usize>,
    pub seen_classes: Vec<usize>,
    /// Dataset row index of each view row.
    pub source_rows: Vec<usize>,
}

impl SeenTrainView {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn invalid(msg: String) -> Error {
    Error::Dataset(msg)
}

impl GzslDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d_x(&self) -> usize {
        self.features.cols()
    }

    pub fn d_s(&self) -> usize {
        self.attributes.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        if self.seen_classes.contains(&class) {
            Some(Split::Seen)
        } else if self.unseen_classes.contains(&class) {
            Some(Split::Unseen)
        } else {
            None
        }
    }

    /// Checks every structural invariant; each failure has its own message.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.dims().len() != 2 || self.features.rows() != n {
            return Err(invalid(format!(
                "features have dims {:?} but there are {n} labels",
                self.features.dims()
            )));
        }
        if self.attributes.dims().len() != 2 || self.attributes.rows() == 0 {
            return Err(invalid(format!(
                "attributes must be a non-empty matrix, got dims {:?}",
                self.attributes.dims()
            )));
        }
        if !self.features.is_finite() || !self.attributes.is_finite() {
            return Err(invalid(
                "features or attributes contain non-finite values".into(),
            ));
        }
        let n_classes = self.n_classes();
        if let Some(v) = self
            .attributes
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(invalid(format!("attribute value {v} outside [0, 1]")));
        }
        for c in 0..n_classes {
            if self.attributes.row(c).iter().all(|&v| v == 0.0) {
                return Err(invalid(format!("class {c} has an all-zero attribute row")));
            }
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= n_classes)
        {
            return Err(invalid(format!(
                "label {l} at row {i} exceeds n_classes = {n_classes}"
            )));
        }
        let seen: HashSet<_> = self.seen_classes.iter().copied().collect();
        let unseen: HashSet<_> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return Err(invalid("class id lists contain duplicates".into()));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(invalid(
                "seen and unseen class sets must both be non-empty".into(),
            ));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(invalid(format!("class {c} is both seen and unseen")));
        }
        if let Some(c) = seen.union(&unseen).find(|&&c| c >= n_classes) {
            return Err(invalid(format!(
                "class id {c} exceeds n_classes = {n_classes}"
            )));
        }
        let mut used = HashSet::new();
        for (split, idx, allowed) in [
            ("train_seen", &self.train_seen, &seen),
            ("test_seen", &self.test_seen, &seen),
            ("test_unseen", &self.test_unseen, &unseen),
        ] {
            for &i in idx.iter() {
                if i >= n {
                    return Err(invalid(format!("{split} index {i} exceeds n = {n}")));
                }
                if !used.insert(i) {
                    return Err(invalid(format!("row {i} appears in more than one split")));
                }
                if !allowed.contains(&self.labels[i]) {
                    return Err(invalid(format!(
                        "{split} row {i} has label {} from the wrong class set",
                        self.labels[i]
                    )));
                }
            }
        }
        if self.train_seen.is_empty() {
            return Err(invalid("train_seen split is empty".into()));
        }
        Ok(())
    }

    /// Seen-train rows with their class attributes; nothing else is exposed.
    pub fn seen_train(&self) -> SeenTrainView {
        let labels: Vec<usize> = self.train_seen.iter().map(|&i| self.labels[i]).collect();
        let targets = labels
            .iter()
            .map(|l| {
                self.seen_classes
                    .iter()
                    .position(|c| c == l)
                    .expect("validated seen label")
            })
            .collect();
        SeenTrainView {
            features: self.features.select_rows(&self.train_seen),
            semantics: self.attributes.select_rows(&labels),
            targets,
            seen_classes: self.seen_classes.clone(),
            source_rows: self.train_seen.clone(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            name: self.name.clone(),
            n: self.n(),
            d_x: self.d_x(),
            d_s: self.d_s(),
            n_classes: self.n_classes(),
            seen_classes: self.seen_classes.clone(),
            unseen_classes: self.unseen_classes.clone(),
            files: ManifestFiles::default(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = self.manifest();
        let write = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(&m.files.features, f32_bytes(self.features.data()))?;
        write(&m.files.labels, u32_bytes(&self.labels)?)?;
        write(&m.files.attributes, f32_bytes(self.attributes.data()))?;
        write(&m.files.train_seen, u32_bytes(&self.train_seen)?)?;
        write(&m.files.test_seen, u32_bytes(&self.test_seen)?)?;
        write(&m.files.test_unseen, u32_bytes(&self.test_unseen)?)?;
        write("manifest.json", serde_json::to_vec_pretty(&m)?)
    }

    /// Loads and fully validates an RZD v1 directory.
    ///
    /// Attributes outside `[0, 1]` are min-max normalized per dimension.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_slice(&text)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(invalid(format!(
                "unsupported format {} v{} (expected {FORMAT} v{VERSION})",
                m.format, m.version
            )));
        }
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let features = read_f32(&read(&m.files.features)?, "features", m.n, m.d_x)?;
        let labels = read_u32(&read(&m.files.labels)?, "labels")?;
        if labels.len() != m.n {
            return Err(invalid(format!(
                "manifest n = {} but labels has {} entries",
                m.n,
                labels.len()
            )));
        }
        let raw = read(&m.files.attributes)?;
        if raw.len() % (4 * m.d_s.max(1)) != 0 {
            return Err(invalid(format!(
                "attributes has {} bytes, not a multiple of d_s = {} floats",
                raw.len(),
                m.d_s
            )));
        }
        let rows = raw.len() / (4 * m.d_s.max(1));
        if rows != m.n_classes {
            return Err(invalid(format!(
                "manifest n_classes = {} but attributes has {rows} rows",
                m.n_classes
            )));
        }
        let mut attributes = read_f32(&raw, "attributes", rows, m.d_s)?;
        normalize_attributes(&mut attributes);
        let ds = GzslDataset {
            name: m.name,
            features,
            labels,
            attributes,
            train_seen: read_u32(&read(&m.files.train_seen)?, "train_seen")?,
            test_seen: read_u32(&read(&m.files.test_seen)?, "test_seen")?,
            test_unseen: read_u32(&read(&m.files.test_unseen)?, "test_unseen")?,
            seen_classes: m.seen_classes,
            unseen_classes: m.unseen_classes,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Per-dimension min-max scaling, applied only when some value lies outside `[0, 1]`.
pub fn normalize_attributes(a: &mut Tensor<f32>) {
    if a.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return;
    }
    let (rows, cols) = (a.rows(), a.cols());
    for j in 0..cols {
        let col = (0..rows).map(|i| a.data()[i * cols + j]);
        let (lo, hi) = col.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for i in 0..rows {
            let v = &mut a.data_mut()[i * cols + j];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

/// Writes a matrix as headerless little-endian float32.
pub fn write_f32_matrix(path: impl AsRef<Path>, m: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, f32_bytes(m.data())).map_err(|e| Error::io(path, e))
}

/// Reads a headerless float32 file as rows of width `cols`.
pub fn read_f32_matrix(path: impl AsRef<Path>, cols: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    if cols == 0 || bytes.len() % (4 * cols) != 0 {
        return Err(Error::DimMismatch {
            op: "read_f32_matrix",
            lhs: vec![bytes.len() / 4],
            rhs: vec![cols],
        });
    }
    read_f32(&bytes, &what, bytes.len() / (4 * cols), cols)
}

pub(crate) fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn u32_bytes(v: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 * v.len());
    for &x in v {
        let x = u32::try_from(x).map_err(|_| invalid(format!("index {x} does not fit in u32")))?;
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn read_f32(bytes: &[u8], what: &str, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    if bytes.len() != 4 * rows * cols {
        return Err(invalid(format!(
            "{what} has {} bytes, expected {rows}×{cols} float32 = {}",
            bytes.len(),
            4 * rows * cols
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn read_u32(bytes: &[u8], what: &str) -> Result<Vec<usize>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(invalid(format!(
            "{what} length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect())
}
