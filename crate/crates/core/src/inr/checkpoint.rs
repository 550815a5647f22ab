//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MSCN"            magic
//! u16               version (1)
//! u8                dtype: 4 = f32 values, 8 = f64 values
//! u8                flags: bit 0 modulations present, bit 1 meta-state sections follow
//! u32 ×4            in_dim, out_dim, depth, width
//! f64               omega0
//! per layer l:      W(l) as fan_in·fan_out values (row-major), then b(l)
//! if bit 0:         depth-1 modulation vectors of `width` values
//! ```

use super::{InrError, Layer, ParameterSet, Result, SirenConfig};
use crate::tensor::{Real, Tensor};
use crate::wire::{put_reals, Reader};

pub const MAGIC: &[u8; 4] = b"MSCN";
pub const VERSION: u16 = 1;

const FLAG_MODULATIONS: u8 = 1;
const FLAG_META: u8 = 2;

/// Storage precision of checkpoint values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_width(w: u8) -> Result<Self> {
        match w {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            other => Err(InrError::Checkpoint(format!("unknown dtype width {other}"))),
        }
    }

    /// The dtype matching the engine precision `T`.
    pub fn native<T: Real>() -> Self {
        if T::BYTES == 8 {
            Dtype::F64
        } else {
            Dtype::F32
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u16,
    pub dtype: Dtype,
    pub has_modulations: bool,
    pub has_meta: bool,
    pub config: SirenConfig,
}

/// Serialises `params`. `has_meta` only sets the header flag; the caller
/// appends the meta-state sections.
pub fn write_params<T: Real>(params: &ParameterSet<T>, dtype: Dtype, has_meta: bool) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(32 + params.param_count() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.width() as u8);
    let mut flags = 0;
    if params.modulations.is_some() {
        flags |= FLAG_MODULATIONS;
    }
    if has_meta {
        flags |= FLAG_META;
    }
    out.push(flags);
    for d in [c.in_dim, c.out_dim, c.depth, c.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.omega0.to_le_bytes());
    for layer in &params.layers {
        put_reals(&mut out, layer.weight.data(), dtype.width());
        put_reals(&mut out, layer.bias.data(), dtype.width());
    }
    if let Some(mods) = &params.modulations {
        for m in mods {
            put_reals(&mut out, m.data(), dtype.width());
        }
    }
    out
}

fn truncated<E>(_: E) -> InrError {
    InrError::Checkpoint("truncated".into())
}

/// Parses a parameter section, returning the parameters, the header and the
/// number of bytes consumed.
pub fn read_params<T: Real>(bytes: &[u8]) -> Result<(ParameterSet<T>, CheckpointHeader, usize)> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(truncated)? != MAGIC {
        return Err(InrError::Checkpoint("bad magic".into()));
    }
    let version = r.u16().map_err(truncated)?;
    if version != VERSION {
        return Err(InrError::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_width(r.u8().map_err(truncated)?)?;
    let flags = r.u8().map_err(truncated)?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32().map_err(truncated)? as usize;
    }
    let omega0 = r.f64().map_err(truncated)?;
    let config = SirenConfig {
        in_dim: dims[0],
        out_dim: dims[1],
        depth: dims[2],
        width: dims[3],
        omega0,
    };
    config.validate()?;
    let w = dtype.width();
    let mut layers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let (fi, fo) = config.layer_dims(l);
        let weight = Tensor::new(vec![fi, fo], r.reals(fi * fo, w).map_err(truncated)?)?;
        let bias = Tensor::new(vec![fo], r.reals(fo, w).map_err(truncated)?)?;
        layers.push(Layer { weight, bias });
    }
    let has_modulations = flags & FLAG_MODULATIONS != 0;
    let modulations = if has_modulations {
        let mut mods = Vec::with_capacity(config.modulated_layers());
        for _ in 0..config.modulated_layers() {
            mods.push(Tensor::vector(r.reals(config.width, w).map_err(truncated)?));
        }
        Some(mods)
    } else {
        None
    };
    let header = CheckpointHeader {
        version,
        dtype,
        has_modulations,
        has_meta: flags & FLAG_META != 0,
        config,
    };
    Ok((
        ParameterSet {
            config,
            layers,
            modulations,
        },
        header,
        r.position(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::init_siren;

    #[test]
    fn header_layout_is_fixed() {
        let p = init_siren::<f32>(SirenConfig::new(2, 3, 2, 4), 0).unwrap();
        let bytes = write_params(&p, Dtype::F32, false);
        assert_eq!(&bytes[..4], b"MSCN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 4);
        assert_eq!(bytes[7], 0);
        assert_eq!(bytes.len(), 8 + 16 + 8 + p.param_count() * 4);
    }

    #[test]
    fn round_trip_with_modulations() {
        let mut p = init_siren::<f64>(SirenConfig::new(3, 1, 3, 5), 9).unwrap().with_zero_modulations();
        p.modulations.as_mut().unwrap()[1].data_mut()[2] = 0.25;
        let bytes = write_params(&p, Dtype::F64, false);
        let (q, h, used) = read_params::<f64>(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert!(h.has_modulations && !h.has_meta);
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let p = init_siren::<f32>(SirenConfig::new(2, 3, 2, 4), 0).unwrap();
        let mut bytes = write_params(&p, Dtype::F32, false);
        assert!(read_params::<f32>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(read_params::<f32>(&bytes).is_err());
    }
}
