//! Codebook file: `SPCB`, version, K, D, window_len, hop, log flag, feature
//! kind, patch length, fit seed (u64), inertia (f64), then `K×D` f32.

use std::path::Path;

use super::{FeatureKind, SpectralCodebook, StftConfig};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: [u8; 4] = *b"SPCB";
pub const CODEBOOK_VERSION: u32 = 1;

pub fn encode_codebook(cb: &SpectralCodebook) -> Result<Vec<u8>> {
    cb.validate()?;
    let mut w = Writer::new();
    w.bytes(&CODEBOOK_MAGIC);
    w.u32(CODEBOOK_VERSION);
    w.u32(cb.k as u32);
    w.u32(cb.dim as u32);
    w.u32(cb.stft.window_len as u32);
    w.u32(cb.stft.hop as u32);
    w.u32(cb.stft.log_magnitude as u32);
    w.u32(match cb.feature {
        FeatureKind::Stft => 0,
        FeatureKind::Raw => 1,
    });
    w.u32(cb.patch_len as u32);
    w.u64(cb.fit_seed);
    w.f64(cb.inertia);
    for &v in &cb.centroids {
        w.f32(v as f32);
    }
    Ok(w.buf)
}

pub fn decode_codebook(bytes: &[u8]) -> Result<SpectralCodebook> {
    let mut r = Reader::new(bytes, "codebook");
    r.magic(&CODEBOOK_MAGIC)?;
    r.version(CODEBOOK_VERSION)?;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let stft = StftConfig {
        window_len: r.u32()? as usize,
        hop: r.u32()? as usize,
        log_magnitude: r.u32()? != 0,
    };
    let feature = match r.u32()? {
        0 => FeatureKind::Stft,
        1 => FeatureKind::Raw,
        other => return Err(Error::Shape(format!("unknown codebook feature kind {other}"))),
    };
    let patch_len = r.u32()? as usize;
    let fit_seed = r.u64()?;
    let inertia = r.f64()?;
    let centroids = r.f32_vec(k * dim)?.into_iter().map(f64::from).collect();
    if r.remaining() != 0 {
        return Err(Error::Shape(format!("codebook has {} trailing bytes", r.remaining())));
    }
    let cb = SpectralCodebook { k, dim, centroids, stft, feature, patch_len, fit_seed, inertia };
    cb.validate().map_err(|e| match e {
        Error::Config(m) => Error::Shape(m),
        other => other,
    })?;
    Ok(cb)
}

pub fn write_codebook(path: &Path, cb: &SpectralCodebook) -> Result<()> {
    write_file(path, &encode_codebook(cb)?)
}

pub fn read_codebook(path: &Path) -> Result<SpectralCodebook> {
    decode_codebook(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let pts: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 0.5).collect();
        let cb = SpectralCodebook::fit(&pts, 3, 2, &StftConfig::default(), FeatureKind::Raw, 4).unwrap();
        let bytes = encode_codebook(&cb).unwrap();
        assert_eq!(decode_codebook(&bytes).unwrap(), cb);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"SPTR");
        assert!(matches!(decode_codebook(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_codebook(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }
}
