use std::path::Path;

use super::{LabeledDataset, TrainingError};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    name: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32, TrainingError> {
        let bytes = self.take(4)?;
        Ok(u32::from_be_bytes(bytes.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainingError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                TrainingError::TruncatedFile(format!(
                    "{}: wanted {} bytes at offset {}, file has {}",
                    self.name,
                    n,
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Parses in-memory IDX image (`0x00000803`) and label (`0x00000801`) files.
/// Pixels are scaled from `0..=255` to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset, TrainingError> {
    let mut img = Reader {
        buf: images,
        pos: 0,
        name: "images",
    };
    let magic = img.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(TrainingError::BadMagic {
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;

    let mut lab = Reader {
        buf: labels,
        pos: 0,
        name: "labels",
    };
    let magic = lab.u32()?;
    if magic != LABELS_MAGIC {
        return Err(TrainingError::BadMagic {
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(TrainingError::DimensionMismatch(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let dims = rows * cols;
    let pixels = img.take(count * dims)?;
    let raw_labels = lab.take(count)?;
    let features = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    LabeledDataset::new(features, dims, labels, class_count)
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset, TrainingError> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn labels(ls: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        v.extend_from_slice(ls);
        v
    }

    #[test]
    fn four_image_fixture() {
        let px: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
        let d = parse_idx(&images(4, 2, 2, &px), &labels(&[3, 1, 4, 1])).unwrap();
        assert_eq!(d.rows(), 4);
        assert_eq!(d.dims, 4);
        assert_eq!(d.labels, vec![3, 1, 4, 1]);
        assert_eq!(d.class_count, 5);
        assert_eq!(d.row(0), &[0.0, 17.0 / 255.0, 34.0 / 255.0, 51.0 / 255.0]);
        assert_eq!(d.row(3)[3], 1.0);
    }

    #[test]
    fn bad_magic() {
        let mut img = images(1, 1, 1, &[0]);
        img[3] = 0x02;
        assert!(matches!(
            parse_idx(&img, &labels(&[0])),
            Err(TrainingError::BadMagic { found: 0x802, .. })
        ));
        let mut lab = labels(&[0]);
        lab[3] = 0x03;
        assert!(matches!(
            parse_idx(&images(1, 1, 1, &[0]), &lab),
            Err(TrainingError::BadMagic { .. })
        ));
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(
            parse_idx(&images(2, 1, 1, &[0, 1]), &labels(&[0])),
            Err(TrainingError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn truncated() {
        assert!(matches!(
            parse_idx(&images(2, 2, 2, &[0; 5]), &labels(&[0, 1])),
            Err(TrainingError::TruncatedFile(_))
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 8], &labels(&[0])),
            Err(TrainingError::TruncatedFile(_))
        ));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, images(2, 1, 2, &[0, 255, 255, 0])).unwrap();
        std::fs::write(&lp, labels(&[0, 1])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.features, vec![0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            load_idx(dir.path().join("missing"), &lp),
            Err(TrainingError::Io(_))
        ));
    }
}
