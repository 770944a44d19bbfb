use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images rescaled to `[0, 1]` with one class id per image.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    /// `[N, H, W]`
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 3 || images.shape()[0] != labels.len() {
            return Err(Error::Format(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], 1]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.images.shape()[1] * self.images.shape()[2];
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// A single image as a `[H, W, 1]` tensor.
    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.image_shape().to_vec(), self.image(i).to_vec()).expect("image shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let s = self.images.shape();
        let per = s[1] * s[2];
        let images = Tensor::new(vec![n, s[1], s[2]], self.images.data()[..n * per].to_vec())
            .expect("prefix shape");
        Self {
            images,
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Loads an image/label file pair.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxDataset> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    IdxDataset::new(images, labels)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

fn header(cur: &mut Cursor<&[u8]>, expected_magic: u32, what: &str) -> Result<u32> {
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format(format!("{what} file too short for an IDX header")))?;
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "bad {what} magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    cur.read_u32::<BigEndian>()
        .map_err(|_| Error::Format(format!("{what} file too short for an IDX header")))
}

/// Parses an unsigned-byte image file; pixels are divided by 255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes);
    let n = header(&mut cur, IMAGES_MAGIC, "image")? as usize;
    let rows = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("image header truncated".into()))? as usize;
    let cols = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("image header truncated".into()))? as usize;
    let expected = n * rows * cols;
    let mut payload = Vec::with_capacity(expected);
    cur.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "image payload truncated: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let n = header(&mut cur, LABELS_MAGIC, "label")? as usize;
    let mut payload = Vec::with_capacity(n);
    cur.read_to_end(&mut payload)?;
    if payload.len() != n {
        return Err(Error::Format(format!(
            "label payload truncated: expected {n} bytes, found {}",
            payload.len()
        )));
    }
    Ok(payload)
}

/// Serializes raw pixel bytes as an IDX image file.
pub fn write_idx_images(mut w: impl Write, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Input(format!(
            "{} pixels for {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(mut w: impl Write, labels: &[u8]) -> Result<()> {
    w.write_u32::<BigEndian>(LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}
