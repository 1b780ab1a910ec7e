// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE checkpoint container.
//!
//! ```text
//! magic "SAECKPT1" | d_model u32 | d_sae u32 | variant u8 (0 vanilla, 1 topk)
//! | k u32 | l1_coeff f32 | W_enc | b_enc | W_dec | b_dec      (all LE, f32)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{SaeModel, SaeParams, Variant};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAECKPT1";
const HEADER_LEN: usize = 8 + 4 + 4 + 1 + 4 + 4;

pub fn encode_checkpoint(sae: &SaeModel) -> Vec<u8> {
    let (d_model, d_sae) = (sae.d_model(), sae.d_sae());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * sae.params.n_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(d_model as u32).to_le_bytes());
    buf.extend_from_slice(&(d_sae as u32).to_le_bytes());
    let (tag, k, l1) = match sae.variant {
        Variant::Vanilla { l1_coeff } => (0u8, 0u32, l1_coeff),
        Variant::TopK { k } => (1u8, k as u32, 0.0),
    };
    buf.push(tag);
    buf.extend_from_slice(&k.to_le_bytes());
    buf.extend_from_slice(&l1.to_le_bytes());
    let p = &sae.params;
    for v in p
        .w_enc
        .iter()
        .chain(p.b_enc.iter())
        .chain(p.w_dec.iter())
        .chain(p.b_dec.iter())
    {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SaeModel> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let d_model = u32_at(8);
    let d_sae = u32_at(12);
    let variant = match bytes[16] {
        0 => Variant::Vanilla {
            l1_coeff: f32::from_le_bytes(bytes[21..25].try_into().unwrap()),
        },
        1 => Variant::TopK { k: u32_at(17) },
        t => return Err(Error::MetaInconsistent(format!("unknown variant tag {t}"))),
    };
    let n = 2 * d_model * d_sae + d_sae + d_model;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 4 * n {
        return Err(Error::TruncatedPayload {
            expected: 4 * n,
            found: payload.len(),
        });
    }
    if payload.len() > 4 * n {
        return Err(Error::TrailingBytes {
            extra: payload.len() - 4 * n,
        });
    }
    let mut vals = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = |len: usize| -> Vec<f32> { vals.by_ref().take(len).collect() };
    let w_enc = Array2::from_shape_vec((d_model, d_sae), take(d_model * d_sae))
        .map_err(|e| Error::shape(e.to_string()))?;
    let b_enc = Array1::from(take(d_sae));
    let w_dec = Array2::from_shape_vec((d_sae, d_model), take(d_sae * d_model))
        .map_err(|e| Error::shape(e.to_string()))?;
    let b_dec = Array1::from(take(d_model));
    let sae = SaeModel::from_params(
        SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        },
        variant,
    )?;
    crate::activation_store::check_finite(
        sae.params
            .w_enc
            .iter()
            .chain(sae.params.w_dec.iter())
            .chain(sae.params.b_enc.iter())
            .chain(sae.params.b_dec.iter())
            .copied(),
    )?;
    Ok(sae)
}

pub fn save_checkpoint(sae: &SaeModel, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(sae);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SaeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::init_sae;

    #[test]
    fn roundtrip_both_variants() {
        for variant in [Variant::TopK { k: 7 }, Variant::Vanilla { l1_coeff: 3e-4 }] {
            let mut sae = init_sae(6, 3, variant, 1).unwrap();
            sae.params.b_enc[2] = -0.25;
            sae.params.b_dec[1] = 0.5;
            let back = decode_checkpoint(&encode_checkpoint(&sae)).unwrap();
            assert_eq!(back, sae);
        }
    }

    #[test]
    fn corrupt_checkpoints() {
        let sae = init_sae(4, 2, Variant::TopK { k: 2 }, 1).unwrap();
        let mut bytes = encode_checkpoint(&sae);
        bytes.pop();
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::TruncatedPayload { .. })
        ));
        bytes[0] = b'Z';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
    }
}
