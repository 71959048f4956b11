//! Labeled image datasets and the IDX file format (big-endian dims, unsigned
//! byte payload) used by the MNIST family.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `count` examples as a new dataset.
    pub fn take(&self, count: usize) -> Result<LabeledDataset> {
        if count > self.len() {
            return Err(Error::invalid(format!(
                "requested {count} examples from a dataset of {}",
                self.len()
            )));
        }
        let items: Vec<Tensor> = (0..count).map(|i| self.images.item(i)).collect();
        LabeledDataset::new(
            Tensor::stack(&items)?,
            self.labels[..count].to_vec(),
            self.num_classes,
        )
    }
}

struct IdxReader<'p> {
    path: &'p Path,
    reader: BufReader<File>,
    offset: u64,
}

impl<'p> IdxReader<'p> {
    fn open(path: &'p Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(IdxReader {
            path,
            reader: BufReader::new(file),
            offset: 0,
        })
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message: message.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.reader
            .read_exact(&mut buf)
            .map_err(|_| self.err("truncated file while reading a big-endian u32"))?;
        self.offset += 4;
        Ok(u32::from_be_bytes(buf))
    }

    fn read_bytes(&mut self, count: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; count];
        self.reader
            .read_exact(&mut buf)
            .map_err(|_| self.err(format!("truncated file while reading {count} payload bytes")))?;
        self.offset += count as u64;
        Ok(buf)
    }
}

/// Parse a pair of IDX files into a dataset. Pixels are scaled to `[0, 1]`
/// by dividing by 255; images come out as `(n, 1, rows, cols)`.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut img = IdxReader::open(images_path)?;
    let magic = img.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = img.read_u32()? as usize;
    let rows = img.read_u32()? as usize;
    let cols = img.read_u32()? as usize;
    let raw = img.read_bytes(n * rows * cols)?;
    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(n, 1, rows, cols, data)?;

    let mut lab = IdxReader::open(labels_path)?;
    let magic = lab.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = lab.read_u32()? as usize;
    if label_count != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("label count {label_count} does not match image count {n}"),
        });
    }
    let labels: Vec<usize> = lab.read_bytes(n)?.iter().map(|&b| b as usize).collect();

    LabeledDataset::new(images, labels, 10)
}

#[cfg(test)]
pub(crate) fn write_idx_pair(
    dir: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> (std::path::PathBuf, std::path::PathBuf) {
    use std::io::Write;
    let img_path = dir.join("images-idx3-ubyte");
    let lab_path = dir.join("labels-idx1-ubyte");
    let mut f = File::create(&img_path).unwrap();
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
    f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
    f.write_all(&(rows as u32).to_be_bytes()).unwrap();
    f.write_all(&(cols as u32).to_be_bytes()).unwrap();
    for img in images {
        f.write_all(img).unwrap();
    }
    let mut f = File::create(&lab_path).unwrap();
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
    f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
    f.write_all(labels).unwrap();
    (img_path, lab_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, labs) = write_idx_pair(dir.path(), &[vec![0u8; 4]], 2, 2, &[7]);
        let ds = load_idx_dataset(&imgs, &labs).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.images().shape(), (1, 1, 2, 2));
        assert!(ds.images().data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels(), &[7]);
    }

    #[test]
    fn scales_255_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, labs) = write_idx_pair(dir.path(), &[vec![255, 0, 51, 255]], 2, 2, &[3]);
        let ds = load_idx_dataset(&imgs, &labs).unwrap();
        assert_eq!(ds.images().at(0, 0, 0, 0), 1.0);
        assert_eq!(ds.images().at(0, 0, 0, 1), 0.0);
        assert!((ds.images().at(0, 0, 1, 0) - 51.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, labs) = write_idx_pair(dir.path(), &[vec![0u8; 4]], 2, 2, &[0]);
        // corrupt the image magic
        let mut bytes = std::fs::read(&imgs).unwrap();
        bytes[3] = 0x42;
        std::fs::write(&imgs, &bytes).unwrap();
        match load_idx_dataset(&imgs, &labs) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, labs) = write_idx_pair(dir.path(), &[vec![0u8; 4]], 2, 2, &[0]);
        let bytes = std::fs::read(&imgs).unwrap();
        std::fs::write(&imgs, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_idx_dataset(&imgs, &labs),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, labs) = write_idx_pair(dir.path(), &[vec![0u8; 4]], 2, 2, &[0, 1]);
        match load_idx_dataset(&imgs, &labs) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 4);
                assert!(message.contains("does not match"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_validates_label_range() {
        let images = Tensor::zeros(2, 1, 2, 2);
        assert!(LabeledDataset::new(images.clone(), vec![0, 10], 10).is_err());
        assert!(LabeledDataset::new(images, vec![0, 9], 10).is_ok());
    }

    #[test]
    fn dataset_validates_pixel_range() {
        let images = Tensor::full(1, 1, 2, 2, 1.5);
        assert!(LabeledDataset::new(images, vec![0], 10).is_err());
    }
}
