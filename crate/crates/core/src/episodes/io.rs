//! Dataset persistence: the FSD1 binary container and CSV ingestion.
//!
//! FSD1 layout, all integers little-endian u32:
//!
//! ```text
//! "FSD1" | version=1 | item_count | feature_dim | height | width | channels
//!        | class_count | precision (4=f32, 8=f64)
//!        | item_count class ids
//!        | row-major payload, item_count * (feature_dim or H*W*C) scalars
//! ```
//!
//! Exactly one of `feature_dim` or the three image extents is non-zero.
//! Save followed by load reproduces every payload bit for either precision.

use std::path::Path;

use crate::episodes::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{Precision, Scalar, Tensor};

const MAGIC: [u8; 4] = *b"FSD1";
const VERSION: u32 = 1;

/// Parsed FSD1 header, available without reading the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fsd1Header {
    pub item_count: u32,
    pub feature_dim: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub class_count: u32,
    pub precision: Precision,
}

impl Fsd1Header {
    pub fn item_shape(&self) -> Vec<usize> {
        if self.feature_dim > 0 {
            vec![self.feature_dim as usize]
        } else {
            vec![
                self.height as usize,
                self.width as usize,
                self.channels as usize,
            ]
        }
    }
}

struct Cursor<'a> {
    path: &'a str,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_string(),
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_header<'a>(path: &'a str, bytes: &'a [u8]) -> Result<(Fsd1Header, Cursor<'a>)> {
    let mut cur = Cursor {
        path,
        bytes,
        offset: 0,
    };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_string(),
            found: [magic[0], magic[1], magic[2], magic[3]],
            expected: MAGIC,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.to_string(),
            version,
        });
    }
    let item_count = cur.u32()?;
    let feature_dim = cur.u32()?;
    let height = cur.u32()?;
    let width = cur.u32()?;
    let channels = cur.u32()?;
    let class_count = cur.u32()?;
    let precision_code = cur.u32()?;

    let precision = Precision::from_code(precision_code).ok_or_else(|| Error::BadHeader {
        path: path.to_string(),
        field: "precision",
        reason: format!("code {precision_code} is neither 4 (f32) nor 8 (f64)"),
    })?;
    let image_extents = [height, width, channels];
    let is_image = image_extents.iter().any(|&v| v > 0);
    if feature_dim == 0 && !is_image {
        return Err(Error::BadHeader {
            path: path.to_string(),
            field: "feature_dim",
            reason: "feature_dim and image extents are all zero".into(),
        });
    }
    if feature_dim > 0 && is_image {
        return Err(Error::BadHeader {
            path: path.to_string(),
            field: "feature_dim",
            reason: "both feature_dim and image extents are set".into(),
        });
    }
    if is_image && image_extents.iter().any(|&v| v == 0) {
        return Err(Error::BadHeader {
            path: path.to_string(),
            field: "image extents",
            reason: format!("incomplete image shape {height}x{width}x{channels}"),
        });
    }
    if item_count == 0 {
        return Err(Error::BadHeader {
            path: path.to_string(),
            field: "item_count",
            reason: "file holds no items".into(),
        });
    }
    Ok((
        Fsd1Header {
            item_count,
            feature_dim,
            height,
            width,
            channels,
            class_count,
            precision,
        },
        cur,
    ))
}

/// Reads just the header; used to pick the element type before a full load.
pub fn peek_header(path: impl AsRef<Path>) -> Result<Fsd1Header> {
    let path_str = path.as_ref().display().to_string();
    let bytes = std::fs::read(path.as_ref())?;
    let (header, _) = parse_header(&path_str, &bytes)?;
    Ok(header)
}

/// Writes `ds` as an FSD1 file. The split tag is contextual and not stored.
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let item_shape = ds.item_shape();
    let (feature_dim, height, width, channels) = match item_shape {
        [d] => (*d as u32, 0u32, 0u32, 0u32),
        [h, w, c] => (0u32, *h as u32, *w as u32, *c as u32),
        other => {
            return Err(Error::ShapeExpectation {
                op: "save_dataset",
                expected: "[D] or [H, W, C] items".into(),
                got: other.to_vec(),
            })
        }
    };
    let item_len: usize = item_shape.iter().product();
    let mut buf =
        Vec::with_capacity(36 + ds.len() * 4 + ds.len() * item_len * T::PRECISION.byte_width());
    buf.extend_from_slice(&MAGIC);
    for field in [
        VERSION,
        ds.len() as u32,
        feature_dim,
        height,
        width,
        channels,
        ds.class_count() as u32,
        T::PRECISION.code(),
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for i in 0..ds.len() {
        buf.extend_from_slice(&ds.item(i).1.to_le_bytes());
    }
    for i in 0..ds.len() {
        for &v in ds.item(i).0.data() {
            v.write_le(&mut buf);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads an FSD1 file whose stored precision matches `T`. The result is
/// tagged [`Split::Train`]; retag by role with
/// [`Dataset::with_split`].
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path_str = path.as_ref().display().to_string();
    let bytes = std::fs::read(path.as_ref())?;
    let (header, mut cur) = parse_header(&path_str, &bytes)?;
    if header.precision != T::PRECISION {
        return Err(Error::PrecisionMismatch {
            path: path_str,
            stored: header.precision.name(),
            requested: T::PRECISION.name(),
        });
    }

    let n = header.item_count as usize;
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        classes.push(cur.u32()?);
    }

    let item_shape = header.item_shape();
    let item_len: usize = item_shape.iter().product();
    let width = T::PRECISION.byte_width();
    let mut items = Vec::with_capacity(n);
    for &class in &classes {
        let raw = cur.take(item_len * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        items.push((Tensor::from_vec(item_shape.clone(), data)?, class));
    }
    if cur.offset != bytes.len() {
        let trailing = bytes.len() - cur.offset;
        return Err(Error::BadHeader {
            path: path_str,
            field: "payload",
            reason: format!("{trailing} trailing bytes after payload"),
        });
    }

    let distinct: std::collections::BTreeSet<u32> = classes.iter().copied().collect();
    if distinct.len() != header.class_count as usize {
        return Err(Error::BadHeader {
            path: path_str,
            field: "class_count",
            reason: format!(
                "header says {} classes, ids list {}",
                header.class_count,
                distinct.len()
            ),
        });
    }
    Dataset::new(items, Split::Train)
}

/// Ingests `label,f1,...,fD` rows. Blank lines are skipped; every data row
/// must have the same number of feature columns.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path_str = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut items: Vec<(Tensor<T>, u32)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{path_str} line {line_no}: need a label and at least one feature"
            )));
        }
        let label: u32 = cells[0].parse().map_err(|_| Error::BadCsvCell {
            path: path_str.clone(),
            line: line_no,
            column: 1,
            cell: cells[0].to_string(),
        })?;
        match dim {
            None => dim = Some(cells.len() - 1),
            Some(d) if d != cells.len() - 1 => {
                return Err(Error::InvalidArgument(format!(
                    "{path_str} line {line_no}: {} features, previous rows had {d}",
                    cells.len() - 1
                )));
            }
            _ => {}
        }
        let mut data = Vec::with_capacity(cells.len() - 1);
        for (col, cell) in cells.iter().enumerate().skip(1) {
            let value: f64 = cell.parse().map_err(|_| Error::BadCsvCell {
                path: path_str.clone(),
                line: line_no,
                column: col + 1,
                cell: cell.to_string(),
            })?;
            data.push(T::from_f64(value));
        }
        let d = data.len();
        items.push((Tensor::from_vec(vec![d], data)?, label));
    }
    Dataset::new(items, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::synth::generate_blobs;

    fn tmp() -> tempfile::TempDir {
        tempfile::TempDir::new().unwrap()
    }

    fn datasets_bit_equal<T: Scalar>(a: &Dataset<T>, b: &Dataset<T>) -> bool {
        a.len() == b.len()
            && (0..a.len()).all(|i| {
                let (ta, ca) = a.item(i);
                let (tb, cb) = b.item(i);
                ca == cb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tmp();
        let path = dir.path().join("blobs.fsd1");
        let ds = generate_blobs::<f64>(5, 7, 20, 0.25, 42).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset::<f64>(&path).unwrap();
        assert!(datasets_bit_equal(&ds, &back));
        assert_eq!(back.split(), Split::Train);
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tmp();
        let path = dir.path().join("blobs32.fsd1");
        let ds = generate_blobs::<f32>(5, 3, 20, 0.5, 7).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset::<f32>(&path).unwrap();
        assert!(datasets_bit_equal(&ds, &back));
    }

    #[test]
    fn image_round_trip() {
        let dir = tmp();
        let path = dir.path().join("img.fsd1");
        let items: Vec<(Tensor<f64>, u32)> = (0..6)
            .map(|i| {
                let data: Vec<f64> = (0..2 * 2 * 3).map(|j| (i * 100 + j) as f64 * 0.125).collect();
                (Tensor::from_vec(vec![2, 2, 3], data).unwrap(), i as u32 % 3)
            })
            .collect();
        let ds = Dataset::new(items, Split::Train).unwrap();
        save_dataset(&ds, &path).unwrap();
        let header = peek_header(&path).unwrap();
        assert_eq!(header.feature_dim, 0);
        assert_eq!((header.height, header.width, header.channels), (2, 2, 3));
        let back = load_dataset::<f64>(&path).unwrap();
        assert!(datasets_bit_equal(&ds, &back));
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let dir = tmp();
        let path = dir.path().join("p.fsd1");
        save_dataset(&generate_blobs::<f64>(5, 2, 20, 0.1, 0).unwrap(), &path).unwrap();
        assert_eq!(peek_header(&path).unwrap().precision, Precision::F64);
        match load_dataset::<f32>(&path) {
            Err(Error::PrecisionMismatch { stored, requested, .. }) => {
                assert_eq!(stored, "f64");
                assert_eq!(requested, "f32");
            }
            other => panic!("expected PrecisionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_truncation_and_garbage_are_distinct_errors() {
        let dir = tmp();
        let path = dir.path().join("x.fsd1");
        save_dataset(&generate_blobs::<f64>(5, 2, 20, 0.1, 0).unwrap(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"NOPE");
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset::<f64>(&path),
            Err(Error::BadMagic { .. })
        ));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        match load_dataset::<f64>(&path) {
            Err(Error::Truncated { needed: 5, .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0xAB; 3]);
        std::fs::write(&path, &trailing).unwrap();
        assert!(matches!(
            load_dataset::<f64>(&path),
            Err(Error::BadHeader { field: "payload", .. })
        ));

        let mut lying = good;
        // class_count lives at byte offset 28.
        lying[28..32].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &lying).unwrap();
        assert!(matches!(
            load_dataset::<f64>(&path),
            Err(Error::BadHeader { field: "class_count", .. })
        ));
    }

    #[test]
    fn csv_ingestion_happy_path() {
        let dir = tmp();
        let path = dir.path().join("feats.csv");
        std::fs::write(&path, "0, 1.5, -2.0\n1, 0.25, 8\n\n0, 3, 4\n").unwrap();
        let ds = load_csv::<f64>(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.item_shape(), &[2]);
        assert_eq!(ds.classes(), vec![0, 1]);
        assert_eq!(ds.item(0).0.data(), &[1.5, -2.0]);
    }

    #[test]
    fn csv_non_numeric_cell_names_line_and_column() {
        let dir = tmp();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0, 1.0, 2.0\n1, 3.0, oops\n").unwrap();
        match load_csv::<f64>(&path) {
            Err(Error::BadCsvCell { line: 2, column: 3, cell, .. }) => assert_eq!(cell, "oops"),
            other => panic!("expected BadCsvCell, got {other:?}"),
        }

        std::fs::write(&path, "cat, 1.0\n").unwrap();
        assert!(matches!(
            load_csv::<f64>(&path),
            Err(Error::BadCsvCell { line: 1, column: 1, .. })
        ));
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tmp();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "0, 1.0, 2.0\n1, 3.0\n").unwrap();
        let msg = load_csv::<f64>(&path).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }
}
