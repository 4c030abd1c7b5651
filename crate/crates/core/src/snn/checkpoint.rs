//! Weight files: magic `MTPW`, u16 version, architecture tag, u32 tensor
//! count, then per tensor a u16 name length, the name, u32 rank, u32 dims
//! and f32 data, all little-endian, closed by a CRC32 of everything before it.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Conv2d, CsnnParams, LifParams, ReadoutKind, RsnnParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTPW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Rsnn,
    Csnn,
}

impl Architecture {
    fn tag(self) -> u16 {
        match self {
            Architecture::Rsnn => 1,
            Architecture::Csnn => 2,
        }
    }

    fn from_tag(tag: u16) -> Result<Self> {
        match tag {
            1 => Ok(Architecture::Rsnn),
            2 => Ok(Architecture::Csnn),
            t => Err(Error::Format(format!("unknown architecture tag {t}"))),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsnn" => Ok(Architecture::Rsnn),
            "csnn" => Ok(Architecture::Csnn),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Rsnn => "rsnn",
            Architecture::Csnn => "csnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    fn values(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.data.len() != len {
            return Err(Error::Format(format!(
                "tensor {name:?} has {} values, expected {len}",
                t.data.len()
            )));
        }
        Ok(t.data.iter().map(|&x| x as f64).collect())
    }

    fn dims(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.dims.iter().map(|&d| d as usize).collect())
    }
}

pub fn write_checkpoint<W: Write>(w: W, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    buf.write_u16::<LittleEndian>(ck.architecture.tag())?;
    buf.write_u32::<LittleEndian>(ck.tensors.len() as u32)?;
    for t in &ck.tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let expect: u64 = t.dims.iter().map(|&d| d as u64).product();
        if expect != t.data.len() as u64 {
            return Err(Error::Format(format!(
                "tensor {} has {} values for dims {:?}",
                t.name,
                t.data.len(),
                t.dims
            )));
        }
        buf.write_u16::<LittleEndian>(len)?;
        buf.extend_from_slice(name);
        buf.write_u32::<LittleEndian>(t.dims.len() as u32)?;
        for &d in &t.dims {
            buf.write_u32::<LittleEndian>(d)?;
        }
        for &x in &t.data {
            buf.write_f32::<LittleEndian>(x)?;
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc)?;
    let mut w = w;
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 16 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = (&tail[..]).read_u32::<LittleEndian>()?;
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }
    let mut c = &body[4..];
    let version = c.read_u16::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let architecture = Architecture::from_tag(c.read_u16::<LittleEndian>()?)?;
    let n = c.read_u32::<LittleEndian>()?;
    let mut tensors = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = c.read_u16::<LittleEndian>()? as usize;
        if c.len() < len {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let name = String::from_utf8(c[..len].to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        c = &c[len..];
        let rank = c.read_u32::<LittleEndian>()?;
        let dims = (0..rank)
            .map(|_| c.read_u32::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()?;
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        if count * 4 > c.len() as u64 {
            return Err(Error::Format(format!("tensor {name} runs past the end")));
        }
        let data = (0..count)
            .map(|_| c.read_f32::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()?;
        tensors.push(NamedTensor { name, dims, data });
    }
    if !c.is_empty() {
        return Err(Error::Format("trailing bytes before CRC".into()));
    }
    Ok(Checkpoint { architecture, tensors })
}

fn lif_tensor(name: &str, p: &LifParams) -> NamedTensor {
    NamedTensor::new(name, &[4], &[p.tau_m, p.threshold, p.dt, p.refractory_steps as f64])
}

fn lif_from(ck: &Checkpoint, name: &str) -> Result<LifParams> {
    let v = ck.values(name, 4)?;
    LifParams::new(v[0], v[1], v[2], v[3] as u32)
}

fn readout_code(k: ReadoutKind) -> f64 {
    match k {
        ReadoutKind::Spiking => 0.0,
        ReadoutKind::Leaky => 1.0,
    }
}

fn readout_from(code: f64) -> Result<ReadoutKind> {
    match code as i64 {
        0 => Ok(ReadoutKind::Spiking),
        1 => Ok(ReadoutKind::Leaky),
        c => Err(Error::Format(format!("unknown readout code {c}"))),
    }
}

pub(crate) fn rsnn_to_checkpoint(p: &RsnnParams) -> Checkpoint {
    let (ni, nh, no) = (p.n_in, p.n_hidden, p.n_out);
    Checkpoint {
        architecture: Architecture::Rsnn,
        tensors: vec![
            NamedTensor::new("w_in", &[ni, nh], &p.w_in),
            NamedTensor::new("w_rec", &[nh, nh], &p.w_rec),
            NamedTensor::new("b_hidden", &[nh], &p.b_hidden),
            NamedTensor::new("w_out", &[nh, no], &p.w_out),
            NamedTensor::new("b_out", &[no], &p.b_out),
            lif_tensor("hidden_lif", &p.hidden),
            lif_tensor("readout_lif", &p.readout),
            NamedTensor::new("meta", &[2], &[p.input_scale, readout_code(p.readout_kind)]),
        ],
    }
}

pub(crate) fn rsnn_from_checkpoint(ck: &Checkpoint) -> Result<RsnnParams> {
    let d = ck.dims("w_out")?;
    let di = ck.dims("w_in")?;
    if d.len() != 2 || di.len() != 2 || di[1] != d[0] {
        return Err(Error::Format("inconsistent RSNN tensor shapes".into()));
    }
    let (ni, nh, no) = (di[0], d[0], d[1]);
    let meta = ck.values("meta", 2)?;
    Ok(RsnnParams {
        n_in: ni,
        n_hidden: nh,
        n_out: no,
        w_in: ck.values("w_in", ni * nh)?,
        w_rec: ck.values("w_rec", nh * nh)?,
        b_hidden: ck.values("b_hidden", nh)?,
        w_out: ck.values("w_out", nh * no)?,
        b_out: ck.values("b_out", no)?,
        hidden: lif_from(ck, "hidden_lif")?,
        readout: lif_from(ck, "readout_lif")?,
        readout_kind: readout_from(meta[1])?,
        input_scale: meta[0],
    })
}

pub(crate) fn csnn_to_checkpoint(p: &CsnnParams) -> Checkpoint {
    let mut tensors = Vec::new();
    let first = &p.convs[0];
    tensors.push(NamedTensor::new(
        "input_shape",
        &[3],
        &[first.in_c as f64, first.in_h as f64, first.in_w as f64],
    ));
    for (i, c) in p.convs.iter().enumerate() {
        tensors.push(NamedTensor::new(format!("conv{i}.weight"), &[c.out_c, c.in_c, 3, 3], &c.weight));
        tensors.push(NamedTensor::new(format!("conv{i}.bias"), &[c.out_c], &c.bias));
    }
    tensors.push(NamedTensor::new("w_fc", &[p.fc_in, p.fc], &p.w_fc));
    tensors.push(NamedTensor::new("b_fc", &[p.fc], &p.b_fc));
    tensors.push(NamedTensor::new("w_out", &[p.fc, p.n_out], &p.w_out));
    tensors.push(NamedTensor::new("b_out", &[p.n_out], &p.b_out));
    tensors.push(lif_tensor("lif", &p.lif));
    tensors.push(lif_tensor("readout_lif", &p.readout));
    tensors.push(NamedTensor::new(
        "meta",
        &[3],
        &[p.input_norm, readout_code(p.readout_kind), p.steps as f64],
    ));
    Checkpoint {
        architecture: Architecture::Csnn,
        tensors,
    }
}

pub(crate) fn csnn_from_checkpoint(ck: &Checkpoint) -> Result<CsnnParams> {
    let shape = ck.values("input_shape", 3)?;
    let (mut c, mut h, mut w) = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
    let mut convs = Vec::new();
    for i in 0..super::CONV_CHANNELS.len() {
        let dims = ck.dims(&format!("conv{i}.weight"))?;
        if dims.len() != 4 || dims[1] != c {
            return Err(Error::Format(format!("conv{i} shape {dims:?} does not chain")));
        }
        let oc = dims[0];
        let conv = Conv2d {
            in_c: c,
            out_c: oc,
            in_h: h,
            in_w: w,
            weight: ck.values(&format!("conv{i}.weight"), oc * c * 9)?,
            bias: ck.values(&format!("conv{i}.bias"), oc)?,
        };
        (c, h, w) = (oc, conv.out_h(), conv.out_w());
        convs.push(conv);
    }
    let fc_in = c * h * w;
    let d = ck.dims("w_out")?;
    if d.len() != 2 {
        return Err(Error::Format("w_out must be rank 2".into()));
    }
    let (fc, no) = (d[0], d[1]);
    let meta = ck.values("meta", 3)?;
    Ok(CsnnParams {
        convs,
        fc_in,
        fc,
        n_out: no,
        w_fc: ck.values("w_fc", fc_in * fc)?,
        b_fc: ck.values("b_fc", fc)?,
        w_out: ck.values("w_out", fc * no)?,
        b_out: ck.values("b_out", no)?,
        steps: meta[2] as usize,
        lif: lif_from(ck, "lif")?,
        readout: lif_from(ck, "readout_lif")?,
        readout_kind: readout_from(meta[1])?,
        input_norm: meta[0],
    })
}
