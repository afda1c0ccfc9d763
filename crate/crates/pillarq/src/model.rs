//! PTQF v1 model files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "PTQF" | version u16 | layer count u16
//! per layer:
//!   name: u16 length + UTF-8
//!   role u8 (0 backbone, 1 heatmap head, 2 regression head)
//!   flags u8 (bit 0 fp-exempt, 1 quantized, 2 relu, 3 weight params, 4 activation params, 5 theta)
//!   out, in, kh, kw: u32; stride, padding: u16
//!   weight f32 * (out*in*kh*kw), bias f32 * out
//!   [weight params] [activation params]   each: scale f64, zero point i32, bits u8
//!   [theta f32 * (out*in*kh*kw)]
//! ```

use std::path::Path;

use pillarq_core::nn::{Activation, LayerRole, LayerSpec, Network, Precision};
use pillarq_core::quant::{QuantParams, RoundingOffsets};
use pillarq_core::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTQF";
pub const VERSION: u16 = 1;

const FLAG_EXEMPT: u8 = 1;
const FLAG_QUANTIZED: u8 = 1 << 1;
const FLAG_RELU: u8 = 1 << 2;
const FLAG_WQ: u8 = 1 << 3;
const FLAG_AQ: u8 = 1 << 4;
const FLAG_THETA: u8 = 1 << 5;

fn role_tag(r: LayerRole) -> u8 {
    match r {
        LayerRole::Backbone => 0,
        LayerRole::HeatmapHead => 1,
        LayerRole::RegressionHead => 2,
    }
}

fn put_params(out: &mut Vec<u8>, p: &QuantParams) {
    out.extend_from_slice(&p.scale.to_le_bytes());
    out.extend_from_slice(&p.zero_point.to_le_bytes());
    out.push(p.bits);
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(net: &Network<f32>) -> Result<Vec<u8>> {
    let fail = |m: String| Error::Config(format!("cannot encode model: {m}"));
    let count = u16::try_from(net.layers.len()).map_err(|_| fail("too many layers".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for l in &net.layers {
        let name = l.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| fail("layer name too long".into()))?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(role_tag(l.role));
        let mut flags = 0;
        if l.fp_exempt {
            flags |= FLAG_EXEMPT;
        }
        if l.precision == Precision::Quantized {
            flags |= FLAG_QUANTIZED;
        }
        if l.activation == Activation::Relu {
            flags |= FLAG_RELU;
        }
        if l.w_quant.is_some() {
            flags |= FLAG_WQ;
        }
        if l.a_quant.is_some() {
            flags |= FLAG_AQ;
        }
        if l.theta.is_some() {
            flags |= FLAG_THETA;
        }
        out.push(flags);
        let (o, i, kh, kw) = l.weight.dims4()?;
        for d in [o, i, kh, kw] {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| fail("dimension overflow".into()))?.to_le_bytes());
        }
        for d in [l.stride, l.padding] {
            out.extend_from_slice(&u16::try_from(d).map_err(|_| fail("stride/padding overflow".into()))?.to_le_bytes());
        }
        put_f32s(&mut out, l.weight.data());
        put_f32s(&mut out, l.bias.data());
        if let Some(p) = &l.w_quant {
            put_params(&mut out, p);
        }
        if let Some(p) = &l.a_quant {
            put_params(&mut out, p);
        }
        if let Some(t) = &l.theta {
            put_f32s(&mut out, t.theta().data());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "blob size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn params(&mut self) -> Result<QuantParams> {
        let scale = f64::from_le_bytes(self.array()?);
        let zero_point = i32::from_le_bytes(self.array()?);
        let bits = self.u8()?;
        if zero_point != 0 {
            return Err(Error::format(self.path, format!("zero point {zero_point}; only the symmetric scheme is supported")));
        }
        Ok(QuantParams::symmetric(scale, bits as u32)?)
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Network<f32>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a PTQF file"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported PTQF version {version}")));
    }
    let count = r.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "layer name is not UTF-8"))?.to_string();
        let role = match r.u8()? {
            0 => LayerRole::Backbone,
            1 => LayerRole::HeatmapHead,
            2 => LayerRole::RegressionHead,
            t => return Err(Error::format(path, format!("unknown role tag {t}"))),
        };
        let flags = r.u8()?;
        if flags & !0x3f != 0 {
            return Err(Error::format(path, format!("unknown flag bits {flags:#04x}")));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let (stride, padding) = (r.u16()? as usize, r.u16()? as usize);
        let n: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format(path, "weight size overflow"))?;
        let weight = Tensor::from_vec(&dims, r.f32s(n)?)?;
        let bias = Tensor::from_vec(&[dims[0]], r.f32s(dims[0])?)?;
        let act = if flags & FLAG_RELU != 0 { Activation::Relu } else { Activation::None };
        let mut l = LayerSpec::new(&name, role, weight, bias, stride, padding, act)?;
        l.fp_exempt = flags & FLAG_EXEMPT != 0;
        l.precision = if flags & FLAG_QUANTIZED != 0 { Precision::Quantized } else { Precision::Full };
        if flags & FLAG_WQ != 0 {
            l.w_quant = Some(r.params()?);
        }
        if flags & FLAG_AQ != 0 {
            l.a_quant = Some(r.params()?);
        }
        if flags & FLAG_THETA != 0 {
            l.theta = Some(RoundingOffsets::new(Tensor::from_vec(&dims, r.f32s(n)?)?)?);
        }
        l.validate()?;
        layers.push(l);
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let input_channels = layers.first().map_or(0, |l| l.weight.shape()[1]);
    Ok(Network::new(layers, input_channels)?)
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}
