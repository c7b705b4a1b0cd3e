//! Binary model container: magic, version, input shape, then per layer a
//! tag, its dimensions and its parameters. All integers are little-endian
//! `u32`, all parameters little-endian `f64`.

use std::path::Path;

use super::{Conv, Dense, Layer, Network, NnError};

pub const FORMAT_MAGIC: &[u8; 4] = b"MFNN";
pub const FORMAT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_DENSE: u8 = 5;
const TAG_SOFTMAX: u8 = 6;
const TAG_SIGMOID: u8 = 7;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.param_count());
        out.extend_from_slice(FORMAT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize);
        put_u32(&mut out, self.input_shape.len());
        for &d in &self.input_shape {
            put_u32(&mut out, d);
        }
        put_u32(&mut out, self.layers.len());
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(TAG_CONV);
                    for d in [c.kernel, c.stride, c.cin, c.cout] {
                        put_u32(&mut out, d);
                    }
                    put_f64s(&mut out, &c.weights);
                    put_f64s(&mut out, &c.bias);
                }
                Layer::Dense(d) => {
                    out.push(TAG_DENSE);
                    put_u32(&mut out, d.nin);
                    put_u32(&mut out, d.nout);
                    put_f64s(&mut out, &d.weights);
                    put_f64s(&mut out, &d.bias);
                }
                Layer::Relu => out.push(TAG_RELU),
                Layer::MaxPool => out.push(TAG_POOL),
                Layer::Flatten => out.push(TAG_FLATTEN),
                Layer::Softmax => out.push(TAG_SOFTMAX),
                Layer::Sigmoid => out.push(TAG_SIGMOID),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FORMAT_MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let rank = r.u32()?;
        let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = r.u32()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let layer = match r.take(1)?[0] {
                TAG_CONV => {
                    let (kernel, stride, cin, cout) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                    let weights = r.f64s(cout * cin * kernel * kernel)?;
                    let bias = r.f64s(cout)?;
                    Layer::Conv(Conv {
                        kernel,
                        stride,
                        cin,
                        cout,
                        weights,
                        bias,
                    })
                }
                TAG_DENSE => {
                    let (nin, nout) = (r.u32()?, r.u32()?);
                    let weights = r.f64s(nin * nout)?;
                    let bias = r.f64s(nout)?;
                    Layer::Dense(Dense { nin, nout, weights, bias })
                }
                TAG_RELU => Layer::Relu,
                TAG_POOL => Layer::MaxPool,
                TAG_FLATTEN => Layer::Flatten,
                TAG_SOFTMAX => Layer::Softmax,
                TAG_SIGMOID => Layer::Sigmoid,
                t => return Err(NnError::Format(format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(NnError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Network::new(input_shape, layers).map_err(|e| NnError::Format(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NnError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<(), NnError> {
    let path = path.as_ref();
    std::fs::write(path, net.to_bytes()).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network, NnError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Network::from_bytes(&bytes)
}
