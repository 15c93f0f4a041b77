//! Model manifests with little-endian f32 weight blobs, IDX images and CSV
//! feature vectors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::backend::Evaluator;
use crate::network::{
    build_plan, collapse, quantize, quantize_input, run, Execution, Layer, LayerSpec, Network, PlanConfig,
    QuantizationPolicy, Shape, Strategy,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    /// Number of f32 values in the blob.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(flatten)]
    pub spec: LayerSpec,
    /// Power-of-two weight scale used when quantizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub input: Shape,
    #[serde(default = "one")]
    pub input_scale: f64,
    /// Largest `|x|` of a quantized input coordinate.
    pub input_bound: u64,
    pub layers: Vec<LayerEntry>,
}

fn one() -> f64 {
    1.0
}

/// A network plus the quantization settings stored next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: Option<String>,
    pub network: Network,
    /// Weight scale per layer; `1` for layers without one.
    pub scales: Vec<f64>,
    pub input_scale: f64,
    pub input_bound: u64,
}

impl Model {
    pub fn new(network: Network, input_bound: u64) -> Self {
        let scales = vec![1.0; network.layers.len()];
        Self {
            name: None,
            network,
            scales,
            input_scale: 1.0,
            input_bound,
        }
    }

    /// Reads a manifest and the blobs it names (paths relative to the manifest).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {}", path.display(), e.message())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, dir)
    }

    pub fn from_manifest(m: Manifest, dir: &Path) -> Result<Self> {
        let mut shape = m.input;
        let mut layers = Vec::with_capacity(m.layers.len());
        let mut scales = Vec::with_capacity(m.layers.len());
        for (i, e) in m.layers.iter().enumerate() {
            let (w_len, b_len) = e.spec.param_lens(shape);
            let blob = |b: &Option<BlobRef>, expected: usize, what: &str| -> Result<Vec<f64>> {
                match b {
                    None => Ok(Vec::new()),
                    Some(b) if b.len != expected => Err(Error::Shape(format!(
                        "layer {i}: manifest declares {} {what} values, the layer needs {expected}",
                        b.len
                    ))),
                    Some(b) => read_f32_blob(dir.join(&b.file), b.len),
                }
            };
            let weights = blob(&e.weights, w_len, "weight")?;
            let bias = blob(&e.bias, b_len, "bias")?;
            if weights.is_empty() != bias.is_empty() && e.spec.has_params() {
                return Err(Error::Shape(format!("layer {i}: weights and bias must both be given")));
            }
            layers.push(Layer::new(e.spec, weights, bias));
            scales.push(e.scale.unwrap_or(1.0));
            shape = e.spec.output_shape(shape).map_err(|err| Error::Shape(format!("layer {i}: {err}")))?;
        }
        Ok(Self {
            name: m.name,
            network: Network::new(m.input, layers)?,
            scales,
            input_scale: m.input_scale,
            input_bound: m.input_bound,
        })
    }

    /// Writes `<dir>/<stem>.toml` and one blob per parameter array.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.network.layers.len());
        for (i, (layer, &scale)) in self.network.layers.iter().zip(&self.scales).enumerate() {
            let blob = |values: &[f64], tag: &str| -> Result<Option<BlobRef>> {
                if values.is_empty() {
                    return Ok(None);
                }
                let file = format!("{stem}.{i}.{tag}.bin");
                write_f32_blob(dir.join(&file), values)?;
                Ok(Some(BlobRef {
                    file,
                    len: values.len(),
                }))
            };
            entries.push(LayerEntry {
                spec: layer.spec,
                scale: (scale != 1.0).then_some(scale),
                weights: blob(&layer.weights, "w")?,
                bias: blob(&layer.bias, "b")?,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            name: self.name.clone(),
            input: self.network.input,
            input_scale: self.input_scale,
            input_bound: self.input_bound,
            layers: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let path = dir.join(format!("{stem}.toml"));
        fs::write(&path, text)?;
        Ok(path)
    }

    /// One weight scale per collapsed linear stage: the product of the
    /// scales of the layers in each linear run.
    pub fn policy(&self) -> QuantizationPolicy {
        let mut weight_scales = Vec::new();
        let mut run: Option<f64> = None;
        for (layer, &s) in self.network.layers.iter().zip(&self.scales) {
            if layer.spec.is_linear() {
                run = Some(run.unwrap_or(1.0) * s);
            } else if let Some(r) = run.take() {
                weight_scales.push(r);
            }
        }
        weight_scales.extend(run);
        QuantizationPolicy {
            input_scale: self.input_scale,
            weight_scales,
            input_bound: self.input_bound as u128,
        }
    }

    /// Quantizes the model and `x`, then runs `strategy` with the
    /// evaluator's ring parameters.
    pub fn execute(&self, x: &[f64], strategy: &Strategy, ev: &Evaluator) -> Result<Execution> {
        if !self.network.has_weights() {
            return Err(Error::Parse("model has no weights".into()));
        }
        let q = quantize(&collapse(&self.network)?, &self.policy(), ev.modulus())?;
        if x.len() != self.network.input.len() {
            return Err(Error::Shape(format!(
                "input has {} values, the model expects {}",
                x.len(),
                self.network.input.len()
            )));
        }
        let xq = quantize_input(x, self.input_scale);
        if let Some(v) = xq.iter().find(|v| v.unsigned_abs() > self.input_bound as u128) {
            return Err(Error::MagnitudeOverflow {
                bound: v.unsigned_abs(),
                capacity: self.input_bound as u128,
            });
        }
        let cfg = PlanConfig::new(ev.n(), ev.modulus().prime_values().to_vec());
        let plan = build_plan(&q.net, strategy, &cfg)?;
        run(&plan, &q.net, &xq, ev)
    }
}

pub fn read_f32_blob(path: impl AsRef<Path>, len: usize) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() != 4 * len {
        return Err(Error::Shape(format!(
            "{}: {} bytes, expected {} f32 values",
            path.display(),
            bytes.len(),
            len
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect())
}

pub fn write_f32_blob(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// An IDX array: `dims[0]` items of `dims[1..]` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl IdxArray {
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn items(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn item(&self, i: usize) -> Result<&[f64]> {
        if self.dims.len() < 2 {
            return Ok(&self.data);
        }
        let len = self.item_len();
        self.data
            .get(i * len..(i + 1) * len)
            .ok_or_else(|| Error::Shape(format!("item {i} out of range ({} items)", self.items())))
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_idx(&bytes)
}

/// Parses big-endian IDX data of any element type.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse("bad IDX magic".into()));
    }
    let (kind, ndim) = (bytes[2], bytes[3] as usize);
    let width = match kind {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        k => return Err(Error::Parse(format!("bad IDX element type 0x{k:02x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Parse("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < count * width {
        return Err(Error::Parse(format!(
            "truncated IDX data: {} bytes, expected {}",
            body.len(),
            count * width
        )));
    }
    let data = body[..count * width]
        .chunks_exact(width)
        .map(|c| match kind {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes(c.try_into().expect("4 bytes")) as f64,
            0x0D => f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64,
            _ => f64::from_be_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray { dims, data })
}

/// Encodes unsigned bytes as IDX with the given dimensions.
pub fn write_idx_u8(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    fs::write(path, out)?;
    Ok(())
}

/// All numeric fields of a CSV file, row by row. Blank lines are skipped.
pub fn load_csv_features(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        for field in record.iter().filter(|f| !f.is_empty()) {
            out.push(field.parse::<f64>().map_err(|_| {
                Error::Parse(format!("line {}: '{field}' is not a number", line + 1))
            })?);
        }
    }
    Ok(out)
}
