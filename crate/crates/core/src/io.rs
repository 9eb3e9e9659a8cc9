//! IDX datasets and the `DOCV` model format.
//!
//! `DOCV` files are little-endian:
//!
//! ```text
//! "DOCV"  u32 version  u8 dtype  u8 folded  u32 H  u32 W  u32 C  u32 classes  u32 layers
//! per layer: u8 tag, then
//!   conv / depthwise: 8×u32 geometry, u8 origin, u8 kind, u8 has_bias, W, [bias]
//!   doconv:           8×u32 geometry, u8 kind, u8 has_residual, u8 has_bias, [D′], W, [bias]
//!   dense:            u8 has_bias, W, [bias]
//! tensor: u32 rank, rank×u32 dims, values
//! ```
//!
//! The geometry is `kernel_h, kernel_w, in_channels, out_channels, stride,
//! pad, groups, depth_multiplier`. A JSON summary is written next to the
//! binary file; it is informational and never read back.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde_json::json;

use crate::conv::ConvGeometry;
use crate::doconv::{DoConvParams, DoKind};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{AnyNetwork, ConvLayer, ConvOrigin, DenseLayer, DepthwiseLayer, Layer, Network};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MODEL_MAGIC: &[u8; 4] = b"DOCV";
pub const MODEL_VERSION: u32 = 1;

/// `fs::read` with the path in the error message.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = read_file(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Truncated {
                path: path.to_path_buf(),
                context: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            context: format!("missing {what}"),
        })
}

/// Loads an IDX image file: returns `(count, rows, cols)` and the pixels.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<([usize; 3], Vec<u8>)> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, path, "image count")? as usize;
    let rows = be_u32(&bytes, 8, path, "row count")? as usize;
    let cols = be_u32(&bytes, 12, path, "column count")? as usize;
    let need = n.checked_mul(rows).and_then(|v| v.checked_mul(cols));
    let body = &bytes[16..];
    match need {
        Some(need) if body.len() >= need => Ok(([n, rows, cols], body[..need].to_vec())),
        _ => Err(Error::Truncated {
            path: path.to_path_buf(),
            context: format!("{n} images of {rows}×{cols} need more than {} bytes", body.len()),
        }),
    }
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, path, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            context: format!("{n} labels but only {} bytes", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Writes uncompressed IDX files; mostly useful for fixtures.
pub fn write_idx_images(path: impl AsRef<Path>, dims: [usize; 3], pixels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Grayscale images with integer labels, kept as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    /// `dims` is `[H, W, C]` of one sample.
    pub fn new(dims: [usize; 3], pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(Error::Shape(format!(
                "{} pixel bytes do not split into samples of {dims:?}",
                pixels.len()
            )));
        }
        if pixels.len() / per != labels.len() {
            return Err(Error::CountMismatch {
                images: pixels.len() / per,
                labels: labels.len(),
            });
        }
        Ok(Dataset { dims, pixels, labels })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let ([n, h, w], pixels) = load_idx_images(images)?;
        let labels = load_idx_labels(labels)?;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        Dataset::new([h, w, 1], pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.dims.iter().product::<usize>();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.dims.iter().product::<usize>();
        Dataset {
            dims: self.dims,
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Samples `indices` as a `[B, H, W, C]` tensor scaled to `[0, 1]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let scale = T::of(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.dims.iter().product::<usize>());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("sample {i} out of range ({} samples)", self.len())));
            }
            data.extend(self.image(i).iter().map(|&p| T::of(p as f64) * scale));
            labels.push(self.labels[i] as usize);
        }
        let [h, w, c] = self.dims;
        Ok((Tensor::from_vec([indices.len(), h, w, c], data)?, labels))
    }
}

/// Paths to a train/test pair of IDX datasets.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DatasetPaths {
    /// The conventional MNIST file names inside `dir`, gzipped or not.
    pub fn in_dir(dir: impl AsRef<Path>, prefix: &str) -> Self {
        let dir = dir.as_ref();
        let pick = |stem: &str| {
            let plain = dir.join(format!("{prefix}-{stem}"));
            let gz = dir.join(format!("{prefix}-{stem}.gz"));
            if !plain.exists() && gz.exists() {
                gz
            } else {
                plain
            }
        };
        DatasetPaths {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("test-images-idx3-ubyte"),
            test_labels: pick("test-labels-idx1-ubyte"),
        }
    }

    pub fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            Dataset::load(&self.train_images, &self.train_labels)?,
            Dataset::load(&self.test_images, &self.test_labels)?,
        ))
    }
}

// ---- model format -------------------------------------------------------

const TAG_CONV: u8 = 0;
const TAG_DEPTHWISE: u8 = 1;
const TAG_DOCONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_DENSE: u8 = 6;

fn kind_tag(kind: DoKind) -> u8 {
    match kind {
        DoKind::Conv => 0,
        DoKind::DepthwiseConv => 1,
        DoKind::GroupConv => 2,
    }
}

fn kind_from_tag(tag: u8) -> Result<DoKind> {
    match tag {
        0 => Ok(DoKind::Conv),
        1 => Ok(DoKind::DepthwiseConv),
        2 => Ok(DoKind::GroupConv),
        t => Err(Error::Corrupt(format!("unknown layer kind {t}"))),
    }
}

fn origin_tags(origin: ConvOrigin) -> [u8; 2] {
    match origin {
        ConvOrigin::Plain => [0, 0],
        ConvOrigin::PointwiseSkipped(k) => [1, kind_tag(k)],
        ConvOrigin::Folded(k) => [2, kind_tag(k)],
    }
}

fn origin_from_tags(origin: u8, kind: u8) -> Result<ConvOrigin> {
    match origin {
        0 => Ok(ConvOrigin::Plain),
        1 => Ok(ConvOrigin::PointwiseSkipped(kind_from_tag(kind)?)),
        2 => Ok(ConvOrigin::Folded(kind_from_tag(kind)?)),
        t => Err(Error::Corrupt(format!("unknown layer origin {t}"))),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn geometry(&mut self, g: &ConvGeometry) {
        for v in [
            g.kernel_h,
            g.kernel_w,
            g.in_channels,
            g.out_channels,
            g.stride,
            g.pad,
            g.groups,
            g.depth_multiplier,
        ] {
            self.u32(v);
        }
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u32(t.dims().len());
        for &d in t.dims() {
            self.u32(d);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.0.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    w.u8(T::DTYPE.tag());
    w.u8(net.is_folded() as u8);
    for d in net.input_dims() {
        w.u32(d);
    }
    w.u32(net.classes());
    w.u32(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv(l) => {
                w.u8(TAG_CONV);
                w.geometry(&l.geom);
                let [o, k] = origin_tags(l.origin);
                w.u8(o);
                w.u8(k);
                w.u8(l.bias.is_some() as u8);
                w.tensor(&l.weight);
                if let Some(b) = &l.bias {
                    w.tensor(b);
                }
            }
            Layer::Depthwise(l) => {
                w.u8(TAG_DEPTHWISE);
                w.geometry(&l.geom);
                let [o, k] = origin_tags(l.origin);
                w.u8(o);
                w.u8(k);
                w.u8(l.bias.is_some() as u8);
                w.tensor(&l.weight);
                if let Some(b) = &l.bias {
                    w.tensor(b);
                }
            }
            Layer::DoConv(p) => {
                w.u8(TAG_DOCONV);
                w.geometry(&p.geom);
                w.u8(kind_tag(p.kind));
                w.u8(p.residual.is_some() as u8);
                w.u8(p.bias.is_some() as u8);
                if let Some(r) = &p.residual {
                    w.tensor(r);
                }
                w.tensor(&p.weight);
                if let Some(b) = &p.bias {
                    w.tensor(b);
                }
            }
            Layer::Relu => w.u8(TAG_RELU),
            Layer::MaxPool => w.u8(TAG_MAXPOOL),
            Layer::Flatten => w.u8(TAG_FLATTEN),
            Layer::Dense(l) => {
                w.u8(TAG_DENSE);
                w.u8(l.bias.is_some() as u8);
                w.tensor(&l.weight);
                if let Some(b) = &l.bias {
                    w.tensor(b);
                }
            }
        }
    }
    w.0
}

/// Serializes a network to `DOCV` bytes.
pub fn encode_model(net: &AnyNetwork) -> Vec<u8> {
    match net {
        AnyNetwork::F32(n) => encode(n),
        AnyNetwork::F64(n) => encode(n),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!("unexpected end of data reading {what} at byte {}", self.at)));
        };
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Corrupt(format!("{what} flag must be 0 or 1, got {v}"))),
        }
    }

    fn geometry(&mut self) -> Result<ConvGeometry> {
        let mut v = [0usize; 8];
        for x in &mut v {
            *x = self.u32("geometry")?;
        }
        let g = ConvGeometry {
            kernel_h: v[0],
            kernel_w: v[1],
            in_channels: v[2],
            out_channels: v[3],
            stride: v[4],
            pad: v[5],
            groups: v[6],
            depth_multiplier: v[7],
        };
        g.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(g)
    }

    fn tensor<T: Scalar>(&mut self, what: &str) -> Result<Tensor<T>> {
        let rank = self.u32(what)?;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("{what}: implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = self.u32(what)?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Corrupt(format!("{what}: dimensions overflow")))?;
            dims.push(d);
        }
        let size = T::DTYPE.size();
        let raw = self.take(numel.saturating_mul(size), what)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(dims, data).map_err(|e| Error::Corrupt(format!("{what}: {e}")))
    }
}

fn decode_layers<T: Scalar>(r: &mut Reader<'_>, count: usize) -> Result<Vec<Layer<T>>> {
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = r.u8("layer tag")?;
        let layer = match tag {
            TAG_CONV | TAG_DEPTHWISE => {
                let geom = r.geometry()?;
                let (o, k) = (r.u8("origin")?, r.u8("kind")?);
                let origin = origin_from_tags(o, k)?;
                let has_bias = r.flag("bias")?;
                let weight = r.tensor("weight")?;
                let bias = if has_bias { Some(r.tensor("bias")?) } else { None };
                let expect: Vec<usize> = if tag == TAG_CONV {
                    geom.conv_kernel_dims().to_vec()
                } else {
                    vec![geom.spatial(), geom.out_channels / geom.in_channels, geom.in_channels]
                };
                if weight.dims() != expect.as_slice() {
                    return Err(Error::Corrupt(format!(
                        "layer {i}: kernel {} does not match its geometry",
                        weight.shape()
                    )));
                }
                if tag == TAG_CONV {
                    Layer::Conv(ConvLayer { geom, weight, bias, origin })
                } else {
                    Layer::Depthwise(DepthwiseLayer { geom, weight, bias, origin })
                }
            }
            TAG_DOCONV => {
                let geom = r.geometry()?;
                let kind = kind_from_tag(r.u8("kind")?)?;
                let has_residual = r.flag("residual")?;
                let has_bias = r.flag("bias")?;
                let residual = if has_residual { Some(r.tensor("residual")?) } else { None };
                let weight = r.tensor("weight")?;
                let bias = if has_bias { Some(r.tensor("bias")?) } else { None };
                let p = if geom.depth_multiplier < geom.spatial() {
                    DoConvParams::separable(kind, geom, residual, weight, bias)
                } else {
                    DoConvParams::new(kind, geom, residual, weight, bias)
                };
                Layer::DoConv(p.map_err(|e| Error::Corrupt(format!("layer {i}: {e}")))?)
            }
            TAG_RELU => Layer::Relu,
            TAG_MAXPOOL => Layer::MaxPool,
            TAG_FLATTEN => Layer::Flatten,
            TAG_DENSE => {
                let has_bias = r.flag("bias")?;
                let weight: Tensor<T> = r.tensor("weight")?;
                let bias = if has_bias { Some(r.tensor("bias")?) } else { None };
                if weight.dims().len() != 2 || bias.as_ref().is_some_and(|b| b.dims() != [weight.dims()[0]]) {
                    return Err(Error::Corrupt(format!("layer {i}: malformed dense layer")));
                }
                Layer::Dense(DenseLayer { weight, bias })
            }
            t => return Err(Error::Corrupt(format!("layer {i}: unknown tag {t}"))),
        };
        layers.push(layer);
    }
    Ok(layers)
}

/// Parses `DOCV` bytes.
pub fn decode_model(bytes: &[u8]) -> Result<AnyNetwork> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Corrupt(format!("not a DOCV model (magic {magic:?})")));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let dtype_tag = r.u8("dtype")?;
    let dtype = DType::from_tag(dtype_tag).ok_or_else(|| Error::Corrupt(format!("unknown dtype tag {dtype_tag}")))?;
    let folded = r.flag("folded")?;
    let input = [r.u32("input")?, r.u32("input")?, r.u32("input")?];
    let classes = r.u32("classes")?;
    let count = r.u32("layer count")?;
    let net = match dtype {
        DType::F32 => AnyNetwork::F32(build(input, decode_layers(&mut r, count)?)?),
        DType::F64 => AnyNetwork::F64(build(input, decode_layers(&mut r, count)?)?),
    };
    if r.at != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let (actual_folded, actual_classes) = match &net {
        AnyNetwork::F32(n) => (n.is_folded(), n.classes()),
        AnyNetwork::F64(n) => (n.is_folded(), n.classes()),
    };
    if actual_folded != folded || actual_classes != classes {
        return Err(Error::Corrupt("header disagrees with the layer list".into()));
    }
    Ok(net)
}

fn build<T: Scalar>(input: [usize; 3], layers: Vec<Layer<T>>) -> Result<Network<T>> {
    Network::new(input, layers).map_err(|e| Error::Corrupt(e.to_string()))
}

fn summary<T: Scalar>(net: &Network<T>) -> serde_json::Value {
    let layers: Vec<_> = net
        .layers()
        .iter()
        .map(|l| {
            let mut v = json!({ "type": l.name() });
            match l {
                Layer::Conv(c) => {
                    v["geometry"] = json!(c.geom);
                    v["origin"] = json!(c.origin);
                }
                Layer::Depthwise(c) => {
                    v["geometry"] = json!(c.geom);
                    v["origin"] = json!(c.origin);
                }
                Layer::DoConv(p) => {
                    v["geometry"] = json!(p.geom);
                    v["kind"] = json!(p.kind);
                }
                Layer::Dense(d) => v["units"] = json!(d.weight.dims()[0]),
                _ => {}
            }
            v
        })
        .collect();
    let params: usize = net.params().iter().map(|(_, t)| t.len()).sum();
    json!({
        "format": "DOCV",
        "version": MODEL_VERSION,
        "dtype": T::DTYPE,
        "folded": net.is_folded(),
        "input": net.input_dims(),
        "classes": net.classes(),
        "parameters": params,
        "layers": layers,
    })
}

/// Path of the JSON summary written next to `model`.
pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut name = model.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    model.with_file_name(name)
}

/// Writes the model and its JSON summary.
pub fn save_model(net: &AnyNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(net))?;
    let meta = match net {
        AnyNetwork::F32(n) => summary(n),
        AnyNetwork::F64(n) => summary(n),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyNetwork> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}
