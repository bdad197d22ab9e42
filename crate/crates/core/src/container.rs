//! On-disk tensor container: a JSON header next to a raw little-endian payload.
//!
//! `stem.json` holds
//! `{"dtype":"f32"|"c64"|"u8","shape":[..],"layout":"row-major","endianness":"little"}`
//! (plus an optional `meta` object) and `stem.bin` holds the row-major values.
//! Complex values are interleaved `(re, im)` f32 pairs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{ComplexSequence, ImageSequence, KSpace, LineMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    C64,
    U8,
}

impl DType {
    pub fn element_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::C64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub layout: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Header {
    pub fn new(dtype: DType, shape: Vec<usize>) -> Self {
        Header {
            dtype,
            shape,
            layout: "row-major".into(),
            endianness: "little".into(),
            meta: None,
        }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.layout == "row-major", "unsupported layout {:?}", self.layout);
        ensure!(
            self.endianness == "little",
            "unsupported endianness {:?}",
            self.endianness
        );
        Ok(())
    }
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    C64(ArrayD<num_complex::Complex32>),
    U8(ArrayD<u8>),
}

pub fn header_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Writes a header and payload pair. The payload length must match the header.
pub fn write_raw(stem: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    header.validate()?;
    ensure!(
        payload.len() == header.element_count() * header.dtype.element_size(),
        "payload of {} bytes does not match header {:?}",
        payload.len(),
        header.shape
    );
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut json = serde_json::to_vec(header)?;
    json.push(b'\n');
    fs::write(header_path(stem), json)?;
    fs::write(payload_path(stem), payload)?;
    Ok(())
}

pub fn read_raw(stem: &Path) -> Result<(Header, Vec<u8>)> {
    let header: Header = serde_json::from_slice(&fs::read(header_path(stem))?)?;
    header.validate()?;
    let payload = fs::read(payload_path(stem))?;
    ensure!(
        payload.len() == header.element_count() * header.dtype.element_size(),
        "{}: payload has {} bytes, header {:?} of {:?} needs {}",
        payload_path(stem).display(),
        payload.len(),
        header.shape,
        header.dtype,
        header.element_count() * header.dtype.element_size()
    );
    Ok((header, payload))
}

pub fn encode(tensor: &Tensor) -> (Header, Vec<u8>) {
    match tensor {
        Tensor::F32(a) => (
            Header::new(DType::F32, a.shape().to_vec()),
            a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        Tensor::C64(a) => (
            Header::new(DType::C64, a.shape().to_vec()),
            a.iter()
                .flat_map(|v| v.re.to_le_bytes().into_iter().chain(v.im.to_le_bytes()))
                .collect(),
        ),
        Tensor::U8(a) => (Header::new(DType::U8, a.shape().to_vec()), a.iter().copied().collect()),
    }
}

pub fn decode(header: &Header, payload: &[u8]) -> Result<Tensor> {
    let shape = IxDyn(&header.shape);
    let f32_at = |chunk: &[u8]| f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    let tensor = match header.dtype {
        DType::F32 => Tensor::F32(
            ArrayD::from_shape_vec(shape, payload.chunks_exact(4).map(f32_at).collect())
                .map_err(|e| Error::validation(e.to_string()))?,
        ),
        DType::C64 => Tensor::C64(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(8)
                    .map(|c| num_complex::Complex32::new(f32_at(&c[..4]), f32_at(&c[4..])))
                    .collect(),
            )
            .map_err(|e| Error::validation(e.to_string()))?,
        ),
        DType::U8 => {
            Tensor::U8(ArrayD::from_shape_vec(shape, payload.to_vec()).map_err(|e| Error::validation(e.to_string()))?)
        }
    };
    Ok(tensor)
}

pub fn write_tensor(stem: &Path, tensor: &Tensor, meta: Option<serde_json::Value>) -> Result<()> {
    let (mut header, payload) = encode(tensor);
    header.meta = meta;
    write_raw(stem, &header, &payload)
}

pub fn read_tensor(stem: &Path) -> Result<(Header, Tensor)> {
    let (header, payload) = read_raw(stem)?;
    let tensor = decode(&header, &payload)?;
    Ok((header, tensor))
}

fn into_3d<T>(a: ArrayD<T>, what: &str) -> Result<Array3<T>> {
    a.into_dimensionality()
        .map_err(|_| Error::validation(format!("{what}: expected a rank-3 [T,H,W] tensor")))
}

pub fn save_image(stem: &Path, img: &ImageSequence) -> Result<()> {
    let a = img.data().mapv(|v| v as f32).into_dyn();
    write_tensor(stem, &Tensor::F32(a), None)
}

pub fn load_image(stem: &Path) -> Result<ImageSequence> {
    match read_tensor(stem)?.1 {
        Tensor::F32(a) => ImageSequence::new(into_3d(a.mapv(f64::from), "image")?),
        other => Err(Error::validation(format!(
            "expected f32 image, found {:?}",
            dtype_of(&other)
        ))),
    }
}

fn complex_to_tensor(a: &Array3<Complex64>) -> Tensor {
    Tensor::C64(
        a.mapv(|v| num_complex::Complex32::new(v.re as f32, v.im as f32))
            .into_dyn(),
    )
}

fn tensor_to_complex(t: Tensor, what: &str) -> Result<Array3<Complex64>> {
    match t {
        Tensor::C64(a) => into_3d(a.mapv(|v| Complex64::new(f64::from(v.re), f64::from(v.im))), what),
        other => Err(Error::validation(format!(
            "{what}: expected c64, found {:?}",
            dtype_of(&other)
        ))),
    }
}

pub fn save_complex(stem: &Path, seq: &ComplexSequence) -> Result<()> {
    write_tensor(stem, &complex_to_tensor(seq.data()), None)
}

pub fn load_complex(stem: &Path) -> Result<ComplexSequence> {
    ComplexSequence::new(tensor_to_complex(read_tensor(stem)?.1, "complex image")?)
}

pub fn save_kspace(stem: &Path, ks: &KSpace) -> Result<()> {
    write_tensor(
        stem,
        &complex_to_tensor(ks.data()),
        Some(serde_json::json!({"domain": "kspace"})),
    )
}

pub fn load_kspace(stem: &Path) -> Result<KSpace> {
    KSpace::new(tensor_to_complex(read_tensor(stem)?.1, "k-space")?)
}

pub fn save_mask(stem: &Path, mask: &LineMask) -> Result<()> {
    write_tensor(stem, &Tensor::U8(mask.data().clone().into_dyn()), None)
}

pub fn load_mask(stem: &Path) -> Result<LineMask> {
    match read_tensor(stem)?.1 {
        Tensor::U8(a) => {
            let a: Array2<u8> = a
                .into_dimensionality()
                .map_err(|_| Error::validation("line mask must be rank 2 [T,H]"))?;
            LineMask::new(a)
        }
        other => Err(Error::validation(format!(
            "line mask: expected u8, found {:?}",
            dtype_of(&other)
        ))),
    }
}

/// Writes `u8` label volumes such as segmentation maps.
pub fn save_u8_volume(stem: &Path, data: &Array3<u8>) -> Result<()> {
    write_tensor(stem, &Tensor::U8(data.clone().into_dyn()), None)
}

pub fn load_u8_volume(stem: &Path) -> Result<Array3<u8>> {
    match read_tensor(stem)?.1 {
        Tensor::U8(a) => into_3d(a, "label volume"),
        other => Err(Error::validation(format!(
            "label volume: expected u8, found {:?}",
            dtype_of(&other)
        ))),
    }
}

fn dtype_of(t: &Tensor) -> DType {
    match t {
        Tensor::F32(_) => DType::F32,
        Tensor::C64(_) => DType::C64,
        Tensor::U8(_) => DType::U8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_json_is_exact() {
        let h = Header::new(DType::C64, vec![25, 176, 132]);
        assert_eq!(
            serde_json::to_string(&h).unwrap(),
            r#"{"dtype":"c64","shape":[25,176,132],"layout":"row-major","endianness":"little"}"#
        );
    }

    #[test]
    fn complex_payload_is_interleaved_little_endian() {
        let a = ArrayD::from_shape_vec(IxDyn(&[1]), vec![num_complex::Complex32::new(1.0, -2.0)]).unwrap();
        let (_, bytes) = encode(&Tensor::C64(a));
        let mut want = 1.0f32.to_le_bytes().to_vec();
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        let h = Header::new(DType::F32, vec![2, 2]);
        assert!(write_raw(&stem, &h, &[0u8; 12]).is_err());
        write_raw(&stem, &h, &[0u8; 16]).unwrap();
        std::fs::write(payload_path(&stem), [0u8; 15]).unwrap();
        assert!(read_raw(&stem).is_err());
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_mask(&stem, &LineMask::zeros(2, 4)).unwrap();
        assert!(load_image(&stem).is_err());
        assert_eq!(load_mask(&stem).unwrap(), LineMask::zeros(2, 4));
    }
}
