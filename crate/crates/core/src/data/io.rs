//! Binary dataset files.
//!
//! Layout (little-endian): magic `FLTD` | version u32 = 1 | kind u8
//! (0 labeled, 1 unlabeled) | N u64 | feature_dim u64 | class_count u32
//! (0 when unlabeled) | N×dim f32 row-major | N×u32 labels (labeled only).

use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, write_atomic, Reader};
use crate::data::dataset::{LabeledDataset, UnlabeledDataset};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FLTD";
pub const DATASET_VERSION: u32 = 1;
/// Bytes before the feature block.
pub const DATASET_HEADER_LEN: usize = 29;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledDataset),
}

impl From<LabeledDataset> for Dataset {
    fn from(d: LabeledDataset) -> Self {
        Dataset::Labeled(d)
    }
}

impl From<UnlabeledDataset> for Dataset {
    fn from(d: UnlabeledDataset) -> Self {
        Dataset::Unlabeled(d)
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let (kind, features, class_count, labels) = match ds {
        Dataset::Labeled(d) => (0u8, d.features(), d.class_count() as u32, Some(d.labels())),
        Dataset::Unlabeled(d) => (1u8, d.features(), 0u32, None),
    };
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + features.len() * 4 + labels.map_or(0, |l| l.len() * 4));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    out.extend_from_slice(&class_count.to_le_bytes());
    put_f32s(&mut out, features.data());
    if let Some(labels) = labels {
        for &y in labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
    }
    out
}

fn header_usize(v: u64, field: &'static str) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::InvalidHeader {
        field,
        reason: format!("{v} does not fit in memory"),
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let kind = r.u8()?;
    let n = header_usize(r.u64()?, "N")?;
    let dim = header_usize(r.u64()?, "feature_dim")?;
    let class_count = r.u32()?;
    let elems = n.checked_mul(dim).ok_or_else(|| FormatError::InvalidHeader {
        field: "N × feature_dim",
        reason: "overflow".into(),
    })?;
    match kind {
        0 => {
            if class_count == 0 {
                return Err(FormatError::InvalidHeader {
                    field: "class_count",
                    reason: "labeled dataset needs at least one class".into(),
                }
                .into());
            }
            let features = r.f32s(elems)?;
            let mut labels = Vec::with_capacity(n.min(bytes.len() / 4));
            for _ in 0..n {
                let offset = r.offset();
                let y = r.u32()?;
                if y >= class_count {
                    return Err(FormatError::InvalidLabel {
                        offset,
                        label: y,
                        class_count,
                    }
                    .into());
                }
                labels.push(y as usize);
            }
            r.finish()?;
            let x = Tensor::new(vec![n, dim], features)?;
            Ok(Dataset::Labeled(LabeledDataset::new(x, labels, class_count as usize)?))
        }
        1 => {
            if class_count != 0 {
                return Err(FormatError::InvalidHeader {
                    field: "class_count",
                    reason: format!("unlabeled dataset must store 0, found {class_count}"),
                }
                .into());
            }
            let features = r.f32s(elems)?;
            r.finish()?;
            Ok(Dataset::Unlabeled(UnlabeledDataset::new(Tensor::new(vec![n, dim], features)?)?))
        }
        other => Err(FormatError::UnknownKind(other).into()),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::make_unlabeled;
    use crate::error::Error;

    fn fixture() -> LabeledDataset {
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -3.5, 1e-7]).unwrap();
        LabeledDataset::new(x, vec![2, 0, 1], 3).unwrap()
    }

    #[test]
    fn labeled_round_trip() {
        let d: Dataset = fixture().into();
        assert_eq!(decode_dataset(&encode_dataset(&d)).unwrap(), d);
    }

    #[test]
    fn unlabeled_round_trip_preserves_feature_bytes() {
        let labeled = encode_dataset(&fixture().into());
        let u: Dataset = make_unlabeled(&fixture()).into();
        let bytes = encode_dataset(&u);
        assert_eq!(bytes.len(), DATASET_HEADER_LEN + 24);
        assert_eq!(&bytes[DATASET_HEADER_LEN..], &labeled[DATASET_HEADER_LEN..DATASET_HEADER_LEN + 24]);
        assert_eq!(decode_dataset(&bytes).unwrap(), u);
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut b = encode_dataset(&fixture().into());
        b[0] = b'X';
        assert!(matches!(decode_dataset(&b), Err(Error::Format(FormatError::BadMagic { .. }))));
    }

    #[test]
    fn truncation_rejected() {
        let b = encode_dataset(&fixture().into());
        for cut in [0, 3, 20, b.len() - 1] {
            assert!(matches!(
                decode_dataset(&b[..cut]),
                Err(Error::Format(FormatError::Truncated { .. }))
            ));
        }
    }

    #[test]
    fn label_out_of_range_names_offset() {
        let mut b = encode_dataset(&fixture().into());
        let offset = DATASET_HEADER_LEN + 24 + 4; // second label
        b[offset..offset + 4].copy_from_slice(&7u32.to_le_bytes());
        match decode_dataset(&b) {
            Err(Error::Format(FormatError::InvalidLabel { offset: o, label: 7, class_count: 3 })) => {
                assert_eq!(o, offset)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_and_bad_kind_rejected() {
        let mut b = encode_dataset(&fixture().into());
        b.push(0);
        assert!(matches!(decode_dataset(&b), Err(Error::Format(FormatError::TrailingBytes(1)))));
        let mut b = encode_dataset(&fixture().into());
        b[8] = 9;
        assert!(matches!(decode_dataset(&b), Err(Error::Format(FormatError::UnknownKind(9)))));
    }
}
