//! Bitstream for sparse deltas, reconstruction, and rate–distortion metrics.
//!
//! Blob layout (little-endian):
//!
//! | field        | bytes | notes |
//! |--------------|-------|-------|
//! | magic        | 4     | `MSCD` |
//! | version      | 2     | 1 |
//! | mode         | 1     | delta mode tag |
//! | bits         | 1     | 16 or 32 |
//! | index width  | 1     | bits per index gap |
//! | count        | 4     | number of entries |
//! | vmin, vmax   | 8 + 8 | quantisation range (f64) |
//! | fingerprint  | 8     | FNV-1a of the originating checkpoint |
//! | index payload| ⌈count·width/8⌉ | first index, then gaps, packed LSB-first |
//! | value payload| count·bits/8 | 16-bit codes or raw f32 |

use crate::meta::{MetaError, MetaState, Mode, SparseDelta};
use crate::signals::{Modality, Signal};
use crate::inr::mean_squared_error;
use crate::tensor::{Real, Tensor};
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"MSCD";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 37;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("corrupt blob: {0}")]
    Corrupt(String),
    #[error("unsupported bit depth {0}")]
    Bits(u8),
    #[error("non-finite value")]
    NonFinite,
    #[error("empty quantisation range [{0}, {1}]")]
    Range(f64, f64),
    #[error("negative mean squared error {0}")]
    NegativeMse(f64),
    #[error("blob was produced by a different checkpoint")]
    Fingerprint,
    #[error("grid does not match the network: {0}")]
    Grid(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        16 | 32 => Ok(()),
        b => Err(CodecError::Bits(b)),
    }
}

/// Uniform codes `round((v−vmin)/(vmax−vmin)·(2^b−1))`, clamped; at 32 bits
/// the codes are the raw `f32` bit patterns.
pub fn quantize(values: &[f64], bits: u8, vmin: f64, vmax: f64) -> Result<Vec<u32>> {
    check_bits(bits)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite);
    }
    if bits == 32 {
        return Ok(values.iter().map(|&v| (v as f32).to_bits()).collect());
    }
    if !(vmin < vmax) {
        return Err(CodecError::Range(vmin, vmax));
    }
    let levels = ((1u64 << bits) - 1) as f64;
    Ok(values
        .iter()
        .map(|&v| ((v - vmin) / (vmax - vmin) * levels).round().clamp(0.0, levels) as u32)
        .collect())
}

/// Inverse of [`quantize`]: each code maps to the centre of its cell.
pub fn dequantize(codes: &[u32], bits: u8, vmin: f64, vmax: f64) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if bits == 32 {
        return Ok(codes.iter().map(|&c| f32::from_bits(c) as f64).collect());
    }
    let levels = ((1u64 << bits) - 1) as f64;
    Ok(codes.iter().map(|&c| vmin + c as f64 * (vmax - vmin) / levels).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobHeader {
    pub version: u16,
    pub mode: Mode,
    pub bits: u8,
    pub index_width: u8,
    pub count: u32,
    pub vmin: f64,
    pub vmax: f64,
    pub fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBlob {
    pub header: BlobHeader,
    pub index_payload: Vec<u8>,
    pub value_payload: Vec<u8>,
}

impl CompressedBlob {
    /// Index bits plus value bits, without header or byte padding.
    pub fn payload_bits(&self) -> u64 {
        let n = self.header.count as u64;
        n * (self.header.index_width as u64 + self.header.bits as u64)
    }

    pub fn value_bits(&self) -> u64 {
        self.header.count as u64 * self.header.bits as u64
    }

    /// Size of the serialised blob in bits.
    pub fn total_bits(&self) -> u64 {
        8 * (HEADER_BYTES + self.index_payload.len() + self.value_payload.len()) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.index_payload.len() + self.value_payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.push(h.mode.tag());
        out.push(h.bits);
        out.push(h.index_width);
        out.extend_from_slice(&h.count.to_le_bytes());
        out.extend_from_slice(&h.vmin.to_le_bytes());
        out.extend_from_slice(&h.vmax.to_le_bytes());
        out.extend_from_slice(&h.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.index_payload);
        out.extend_from_slice(&self.value_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| CodecError::Corrupt(m.to_string());
        let trunc = |_| corrupt("truncated");
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(trunc)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u16().map_err(trunc)?;
        if version != VERSION {
            return Err(CodecError::Corrupt(format!("unsupported version {version}")));
        }
        let mode = Mode::from_tag(r.u8().map_err(trunc)?).ok_or_else(|| corrupt("unknown mode"))?;
        let bits = r.u8().map_err(trunc)?;
        check_bits(bits).map_err(|_| CodecError::Corrupt(format!("bit depth {bits}")))?;
        let index_width = r.u8().map_err(trunc)?;
        if index_width > 32 {
            return Err(corrupt("index width above 32"));
        }
        let count = r.u32().map_err(trunc)?;
        let vmin = r.f64().map_err(trunc)?;
        let vmax = r.f64().map_err(trunc)?;
        if !vmin.is_finite() || !vmax.is_finite() || vmin > vmax {
            return Err(corrupt("bad value range"));
        }
        let fingerprint = r.u64().map_err(trunc)?;
        let n = count as usize;
        let index_len = (n * index_width as usize).div_ceil(8);
        let value_len = n * bits as usize / 8;
        if r.remaining() != index_len + value_len {
            return Err(CodecError::Corrupt(format!(
                "payload is {} bytes, header declares {}",
                r.remaining(),
                index_len + value_len
            )));
        }
        let index_payload = r.take(index_len).map_err(trunc)?.to_vec();
        let value_payload = r.take(value_len).map_err(trunc)?.to_vec();
        Ok(CompressedBlob {
            header: BlobHeader {
                version,
                mode,
                bits,
                index_width,
                count,
                vmin,
                vmax,
                fingerprint,
            },
            index_payload,
            value_payload,
        })
    }
}

fn pack(values: &[u32], width: u8) -> Vec<u8> {
    let width = width as usize;
    let mut out = vec![0u8; (values.len() * width).div_ceil(8)];
    let mut bit = 0usize;
    for &v in values {
        for b in 0..width {
            if (v >> b) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

fn unpack(bytes: &[u8], width: u8, n: usize) -> Vec<u32> {
    let width = width as usize;
    let mut bit = 0usize;
    (0..n)
        .map(|_| {
            let mut v = 0u32;
            for b in 0..width {
                if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                    v |= 1 << b;
                }
                bit += 1;
            }
            v
        })
        .collect()
}

/// Bits needed for `v`: `⌈log2(v + 1)⌉`.
fn width_for(v: u32) -> u8 {
    (32 - v.leading_zeros()) as u8
}

/// Serialises `delta` with `bits`-bit values. The quantisation range is the
/// delta's own extrema.
pub fn encode(delta: &SparseDelta, bits: u8) -> Result<CompressedBlob> {
    check_bits(bits)?;
    delta.validate()?;
    let gaps: Vec<u32> = delta
        .indices
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == 0 { x } else { x - delta.indices[i - 1] })
        .collect();
    let index_width = gaps.iter().copied().max().map_or(0, width_for);
    let (vmin, vmax) = delta
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (vmin, vmax) = if delta.is_empty() { (0.0, 0.0) } else { (vmin, vmax) };
    let value_payload: Vec<u8> = if bits == 32 {
        quantize(&delta.values, 32, vmin, vmax)?
            .iter()
            .flat_map(|c| c.to_le_bytes())
            .collect()
    } else {
        let codes = if vmin < vmax {
            quantize(&delta.values, bits, vmin, vmax)?
        } else {
            vec![0; delta.len()]
        };
        codes.iter().flat_map(|&c| (c as u16).to_le_bytes()).collect()
    };
    Ok(CompressedBlob {
        header: BlobHeader {
            version: VERSION,
            mode: delta.mode,
            bits,
            index_width,
            count: delta.len() as u32,
            vmin,
            vmax,
            fingerprint: delta.fingerprint,
        },
        index_payload: pack(&gaps, index_width),
        value_payload,
    })
}

/// Rebuilds the (quantised) delta.
pub fn decode(blob: &CompressedBlob) -> Result<SparseDelta> {
    let h = &blob.header;
    let n = h.count as usize;
    let mut indices = Vec::with_capacity(n);
    let mut acc = 0u64;
    for (i, gap) in unpack(&blob.index_payload, h.index_width, n).into_iter().enumerate() {
        if i > 0 && gap == 0 {
            return Err(CodecError::Corrupt("repeated index".into()));
        }
        acc += gap as u64;
        indices.push(u32::try_from(acc).map_err(|_| CodecError::Corrupt("index overflow".into()))?);
    }
    let values = if h.bits == 32 {
        let codes: Vec<u32> = blob
            .value_payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        dequantize(&codes, 32, h.vmin, h.vmax)?
    } else {
        let codes: Vec<u32> = blob
            .value_payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as u32)
            .collect();
        dequantize(&codes, h.bits, h.vmin, h.vmax)?
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Corrupt("non-finite value".into()));
    }
    Ok(SparseDelta {
        mode: h.mode,
        indices,
        values,
        fingerprint: h.fingerprint,
    })
}

/// `10·log10(1/mse)` for signals in `[0, 1]`; `+∞` at zero error.
pub fn psnr(mse: f64) -> Result<f64> {
    if mse < 0.0 || mse.is_nan() {
        return Err(CodecError::NegativeMse(mse));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Payload bits (indices and values) per pixel.
pub fn bits_per_pixel(blob: &CompressedBlob, width: usize, height: usize) -> f64 {
    blob.payload_bits() as f64 / (width * height) as f64
}

/// Value bits only, per pixel: bits per parameter × parameters / pixels.
pub fn bits_per_pixel_values(blob: &CompressedBlob, width: usize, height: usize) -> f64 {
    blob.value_bits() as f64 / (width * height) as f64
}

#[derive(Clone, Debug)]
pub struct Decompressed<T> {
    pub reconstruction: Tensor<T>,
    pub psnr: Option<f64>,
    /// Occupancy accuracy at threshold 0.5, for voxel references.
    pub voxel_accuracy: Option<f64>,
}

/// Fraction of entries on the same side of 0.5.
pub fn voxel_accuracy<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let agree = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(p, t)| (p.as_f64() >= 0.5) == (t.as_f64() >= 0.5))
        .count();
    agree as f64 / pred.len().max(1) as f64
}

/// Applies the decoded delta to `state` and evaluates it on `coords`;
/// scores against `reference` when given.
pub fn decompress_to_signal<T: Real>(
    state: &MetaState<T>,
    blob: &CompressedBlob,
    coords: &Tensor<T>,
    reference: Option<&Signal<T>>,
) -> Result<Decompressed<T>> {
    if blob.header.fingerprint != state.fingerprint() {
        return Err(CodecError::Fingerprint);
    }
    let c = state.config();
    if coords.shape().len() != 2 || coords.shape()[1] != c.in_dim {
        return Err(CodecError::Grid(format!("coordinates {:?} for input dim {}", coords.shape(), c.in_dim)));
    }
    if let Some(r) = reference {
        if r.coords.shape() != coords.shape() || r.out_dim() != c.out_dim {
            return Err(CodecError::Grid(format!("reference {} does not match the grid", r.id)));
        }
    }
    let delta = decode(blob)?;
    let params = state.apply_delta(&delta)?;
    let reconstruction = state.evaluate(&params, coords)?;
    let (psnr_db, acc) = match reference {
        Some(r) => {
            let mse = mean_squared_error(&reconstruction, &r.targets).map_err(MetaError::from)?;
            let acc = (r.modality == Modality::Voxel).then(|| voxel_accuracy(&reconstruction, &r.targets));
            (Some(psnr(mse)?), acc)
        }
        None => (None, None),
    };
    Ok(Decompressed {
        reconstruction,
        psnr: psnr_db,
        voxel_accuracy: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn delta(indices: Vec<u32>, values: Vec<f64>) -> SparseDelta {
        SparseDelta {
            mode: Mode::UnstructuredGradients,
            indices,
            values,
            fingerprint: 0xDEAD_BEEF,
        }
    }

    #[test]
    fn quantisation_endpoints() {
        let c = quantize(&[-1.0, 3.0, 1.0], 16, -1.0, 3.0).unwrap();
        assert_eq!(c[0], 0);
        assert_eq!(c[1], 65535);
        assert!(quantize(&[0.0], 16, 1.0, 1.0).is_err());
        assert!(quantize(&[f64::NAN], 16, 0.0, 1.0).is_err());
        assert!(quantize(&[0.0], 8, 0.0, 1.0).is_err());
    }

    #[test]
    fn psnr_anchors() {
        assert_eq!(psnr(0.01).unwrap(), 20.0);
        assert_eq!(psnr(1.0).unwrap(), 0.0);
        assert_eq!(psnr(1e-4).unwrap(), 40.0);
        assert_eq!(psnr(0.0).unwrap(), f64::INFINITY);
        assert!(psnr(-1e-3).is_err());
    }

    #[test]
    fn empty_delta_is_header_only() {
        let d = delta(vec![], vec![]);
        let blob = encode(&d, 16).unwrap();
        assert_eq!(blob.to_bytes().len(), HEADER_BYTES);
        assert_eq!(decode(&blob).unwrap(), d);
        assert_eq!(bits_per_pixel_values(&blob, 64, 64), 0.0);
    }

    #[test]
    fn payload_sizes() {
        let d = delta((0..128).map(|i| i * 3).collect(), (0..128).map(|i| i as f64 / 7.0).collect());
        let blob = encode(&d, 16).unwrap();
        assert_eq!(blob.value_bits(), 2048);
        assert_eq!(blob.header.index_width, 2);
        assert_eq!(bits_per_pixel_values(&blob, 64, 64), 0.5);
        assert_eq!(bits_per_pixel(&blob, 64, 64), (2048.0 + 256.0) / 4096.0);
        let d = delta((0..1024).collect(), vec![0.5; 1024]);
        assert_eq!(bits_per_pixel_values(&encode(&d, 16).unwrap(), 64, 64), 4.0);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let d = delta(vec![2, 9], vec![0.25, -1.0]);
        let bytes = encode(&d, 16).unwrap().to_bytes();
        assert!(CompressedBlob::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CompressedBlob::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[7] = 8;
        assert!(CompressedBlob::from_bytes(&bad).is_err());
        assert_eq!(CompressedBlob::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn constant_values_survive() {
        let d = delta(vec![0, 5], vec![0.3, 0.3]);
        assert_eq!(decode(&encode(&d, 16).unwrap()).unwrap(), d);
    }

    #[test]
    fn voxel_threshold() {
        let p = Tensor::vector(vec![0.49, 0.5, 0.9, 0.1]);
        let t = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(voxel_accuracy(&p, &t), 0.75);
    }

    prop_compose! {
        fn arb_delta()(entries in prop::collection::btree_map(0u32..200_000, -10.0f64..10.0, 0..300)) -> SparseDelta {
            let (indices, values) = entries.into_iter().unzip();
            delta(indices, values)
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_on_quantised_values(d in arb_delta(), wide in any::<bool>()) {
            let bits = if wide { 32 } else { 16 };
            let blob = encode(&d, bits).unwrap();
            let back = decode(&CompressedBlob::from_bytes(&blob.to_bytes()).unwrap()).unwrap();
            prop_assert_eq!(&back.indices, &d.indices);
            let h = &blob.header;
            let expected = if bits == 32 || h.vmin < h.vmax {
                dequantize(&quantize(&d.values, bits, h.vmin, h.vmax).unwrap(), bits, h.vmin, h.vmax).unwrap()
            } else {
                d.values.clone()
            };
            prop_assert_eq!(&back.values, &expected);
            if bits == 32 {
                for (a, b) in back.values.iter().zip(&d.values) {
                    prop_assert_eq!(*a, *b as f32 as f64);
                }
            } else {
                for (a, b) in back.values.iter().zip(&d.values) {
                    prop_assert!((a - b).abs() <= (h.vmax - h.vmin) / 65536.0);
                }
            }
        }

        #[test]
        fn bpp_is_linear_in_payload(n in 1usize..500, w in 1usize..64, h in 1usize..64) {
            let d = delta((0..n as u32).collect(), vec![0.1; n]);
            let blob = encode(&d, 16).unwrap();
            prop_assert!((bits_per_pixel_values(&blob, w, h) - (16 * n) as f64 / (w * h) as f64).abs() < 1e-12);
        }
    }
}
