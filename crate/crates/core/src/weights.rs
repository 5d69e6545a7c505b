//! Network weight files: a flat little-endian f32 blob plus a JSON sidecar
//! describing the layer structure and where each tensor starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ConvLayer, SparseConvNet, TimeEmbedding, UNetLevel, TAPS};
use crate::nn::{Dense, TinyNet};

pub const WEIGHTS_FORMAT: &str = "unisplat-weights";
pub const WEIGHTS_VERSION: u32 = 1;

/// Every learned component of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spatial: SparseConvNet,
    pub temporal: SparseConvNet,
    pub time_embedding: TimeEmbedding,
    pub point_head: TinyNet,
    pub voxel_head: TinyNet,
    pub scale_head: Option<TinyNet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvDesc {
    c_in: usize,
    c_out: usize,
    activation: bool,
    residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDesc {
    layers: Vec<ConvDesc>,
    inner: Option<Box<LevelDesc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelDesc {
    coarse: NetDesc,
    merge: ConvDesc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    spatial: NetDesc,
    temporal: NetDesc,
    time_embedding_channels: usize,
    point_head: Vec<usize>,
    voxel_head: Vec<usize>,
    scale_head: Option<Vec<usize>>,
    tensors: Vec<TensorDesc>,
}

#[derive(Default)]
struct Writer {
    blob: Vec<f32>,
    tensors: Vec<TensorDesc>,
}

impl Writer {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        self.tensors.push(TensorDesc {
            name,
            shape,
            offset: self.blob.len(),
        });
        self.blob.extend(data.iter().map(|&v| v as f32));
    }

    fn conv(&mut self, prefix: &str, l: &ConvLayer) -> ConvDesc {
        self.push(format!("{prefix}.weight"), vec![l.c_out, l.c_in, TAPS], &l.weight);
        self.push(format!("{prefix}.bias"), vec![l.c_out], &l.bias);
        ConvDesc {
            c_in: l.c_in,
            c_out: l.c_out,
            activation: l.activation,
            residual: l.residual,
        }
    }

    fn net(&mut self, prefix: &str, n: &SparseConvNet) -> NetDesc {
        let layers = n
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| self.conv(&format!("{prefix}.layer{i}"), l))
            .collect();
        let inner = n.inner.as_ref().map(|lv| {
            Box::new(LevelDesc {
                coarse: self.net(&format!("{prefix}.coarse"), &lv.coarse),
                merge: self.conv(&format!("{prefix}.merge"), &lv.merge),
            })
        });
        NetDesc { layers, inner }
    }

    fn mlp(&mut self, prefix: &str, n: &TinyNet) -> Vec<usize> {
        let mut widths = vec![n.input_width()];
        for (i, l) in n.layers().iter().enumerate() {
            self.push(format!("{prefix}.layer{i}.weight"), vec![l.outputs, l.inputs], &l.weight);
            self.push(format!("{prefix}.layer{i}.bias"), vec![l.outputs], &l.bias);
            widths.push(l.outputs);
        }
        widths
    }
}

struct Reader<'a> {
    blob: &'a [f32],
    tensors: std::slice::Iter<'a, TensorDesc>,
}

impl Reader<'_> {
    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .next()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.name != name || t.shape.iter().product::<usize>() != len {
            return Err(Error::Format(format!("tensor {} does not match {name}", t.name)));
        }
        let end = t.offset + len;
        let slice = self
            .blob
            .get(t.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {name} runs past the blob")))?;
        Ok(slice.iter().map(|&v| v as f64).collect())
    }

    fn conv(&mut self, prefix: &str, d: &ConvDesc) -> Result<ConvLayer> {
        Ok(ConvLayer {
            c_in: d.c_in,
            c_out: d.c_out,
            weight: self.take(&format!("{prefix}.weight"), d.c_out * d.c_in * TAPS)?,
            bias: self.take(&format!("{prefix}.bias"), d.c_out)?,
            activation: d.activation,
            residual: d.residual,
        })
    }

    fn net(&mut self, prefix: &str, d: &NetDesc) -> Result<SparseConvNet> {
        let layers = d
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| self.conv(&format!("{prefix}.layer{i}"), l))
            .collect::<Result<_>>()?;
        let inner = match &d.inner {
            Some(lv) => Some(UNetLevel {
                coarse: self.net(&format!("{prefix}.coarse"), &lv.coarse)?,
                merge: self.conv(&format!("{prefix}.merge"), &lv.merge)?,
            }),
            None => None,
        };
        SparseConvNet::new(layers, inner)
    }

    fn mlp(&mut self, prefix: &str, widths: &[usize]) -> Result<TinyNet> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weight: self.take(&format!("{prefix}.layer{i}.weight"), w[0] * w[1])?,
                    bias: self.take(&format!("{prefix}.layer{i}.bias"), w[1])?,
                })
            })
            .collect::<Result<_>>()?;
        TinyNet::new(layers)
    }
}

impl ModelWeights {
    /// Writes `path` (blob) and `path.json` (sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        let spatial = w.net("spatial", &self.spatial);
        let temporal = w.net("temporal", &self.temporal);
        let table: Vec<f64> = self.time_embedding.table.concat();
        w.push("time_embedding".into(), vec![2, self.time_embedding.channels()], &table);
        let point_head = w.mlp("point_head", &self.point_head);
        let voxel_head = w.mlp("voxel_head", &self.voxel_head);
        let scale_head = self.scale_head.as_ref().map(|n| w.mlp("scale_head", n));
        let side = Sidecar {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            spatial,
            temporal,
            time_embedding_channels: self.time_embedding.channels(),
            point_head,
            voxel_head,
            scale_head,
            tensors: w.tensors,
        };
        let bytes: Vec<u8> = w.blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if side.format != WEIGHTS_FORMAT || side.version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights {} v{}", side.format, side.version)));
        }
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("weight blob length is not a multiple of 4".into()));
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut r = Reader {
            blob: &blob,
            tensors: side.tensors.iter(),
        };
        let spatial = r.net("spatial", &side.spatial)?;
        let temporal = r.net("temporal", &side.temporal)?;
        let c = side.time_embedding_channels;
        let table = r.take("time_embedding", 2 * c)?;
        let time_embedding = TimeEmbedding {
            table: [table[..c].to_vec(), table[c..].to_vec()],
        };
        let point_head = r.mlp("point_head", &side.point_head)?;
        let voxel_head = r.mlp("voxel_head", &side.voxel_head)?;
        let scale_head = match &side.scale_head {
            Some(w) => Some(r.mlp("scale_head", w)?),
            None => None,
        };
        if r.tensors.next().is_some() {
            return Err(Error::Format("unused tensors in sidecar".into()));
        }
        Ok(Self {
            spatial,
            temporal,
            time_embedding,
            point_head,
            voxel_head,
            scale_head,
        })
    }

    /// The same weights after a round trip through f32 storage.
    pub fn quantized(&self) -> Self {
        let q = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        let mut m = self.clone();
        fn conv_net(n: &mut SparseConvNet, q: &dyn Fn(&mut Vec<f64>)) {
            for l in &mut n.layers {
                q(&mut l.weight);
                q(&mut l.bias);
            }
            if let Some(lv) = &mut n.inner {
                conv_net(&mut lv.coarse, q);
                q(&mut lv.merge.weight);
                q(&mut lv.merge.bias);
            }
        }
        conv_net(&mut m.spatial, &q);
        conv_net(&mut m.temporal, &q);
        m.time_embedding.table.iter_mut().for_each(q);
        for n in [Some(&mut m.point_head), Some(&mut m.voxel_head), m.scale_head.as_mut()].into_iter().flatten() {
            for l in n.layers_mut() {
                q(&mut l.weight);
                q(&mut l.bias);
            }
        }
        m
    }
}

pub fn sidecar_path(blob: &Path) -> std::path::PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
