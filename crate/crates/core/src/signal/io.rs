//! Dataset file: little-endian header `SPTR`, version, C, L, DoF, sample rate,
//! segment count, then per segment `C×L` f32 samples (channel-major) followed
//! by `DoF` f32 window-level targets.

use std::path::Path;

use super::SignalSegment;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"SPTR";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(segments: &[SignalSegment]) -> Result<Vec<u8>> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Shape("cannot write an empty dataset".into()))?;
    let (c, l, dof, fs) = (first.channels, first.len, first.dof(), first.sample_rate);
    let mut w = Writer::new();
    w.bytes(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(c as u32);
    w.u32(l as u32);
    w.u32(dof as u32);
    w.f32(fs);
    w.u32(segments.len() as u32);
    for (i, s) in segments.iter().enumerate() {
        if s.channels != c || s.len != l || s.dof() != dof || s.sample_rate.to_bits() != fs.to_bits() {
            return Err(Error::Shape(format!("segment {i} does not match the dataset header")));
        }
        for &v in &s.data {
            w.f32(v);
        }
        for &v in s.targets.iter().flatten() {
            w.f32(v);
        }
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8], patch_len: Option<usize>) -> Result<Vec<SignalSegment>> {
    let mut r = Reader::new(bytes, "dataset");
    r.magic(&DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let c = r.u32()? as usize;
    let l = r.u32()? as usize;
    let dof = r.u32()? as usize;
    let fs = r.f32()?;
    let count = r.u32()? as usize;
    if c == 0 || l == 0 || !(fs.is_finite() && fs > 0.0) {
        return Err(Error::Shape(format!("invalid header: C={c} L={l} sample_rate={fs}")));
    }
    if let Some(p) = patch_len {
        if p == 0 || l % p != 0 {
            return Err(Error::PatchMisalignment { len: l, patch: p });
        }
    }
    let per = (c * l + dof) * 4;
    let want = per * count;
    if r.remaining() < want {
        return Err(Error::Truncated(format!(
            "dataset declares {count} segments ({want} bytes) but {} bytes remain",
            r.remaining()
        )));
    }
    if r.remaining() > want {
        return Err(Error::Shape(format!(
            "dataset has {} trailing bytes beyond {count} segments",
            r.remaining() - want
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let data = r.f32_vec(c * l)?;
        let targets = if dof > 0 { Some(r.f32_vec(dof)?) } else { None };
        out.push(SignalSegment { channels: c, len: l, sample_rate: fs, data, targets });
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, segments: &[SignalSegment]) -> Result<()> {
    write_file(path, &encode_dataset(segments)?)
}

/// Reads a dataset; with `patch_len` set, rejects lengths that do not split
/// into whole patches.
pub fn read_dataset(path: &Path, patch_len: Option<usize>) -> Result<Vec<SignalSegment>> {
    decode_dataset(&read_file(path)?, patch_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize_dataset, SynthConfig};
    use proptest::prelude::*;

    fn small() -> Vec<SignalSegment> {
        synthesize_dataset(&SynthConfig { channels: 3, len: 200, segments: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/d.sptr");
        let segs = small();
        write_dataset(&path, &segs).unwrap();
        assert_eq!(read_dataset(&path, Some(100)).unwrap(), segs);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_dataset(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad, None), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad, None), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 3], None), Err(Error::Truncated(_))));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_dataset(&long, None), Err(Error::Shape(_))));
        assert!(matches!(
            decode_dataset(&bytes, Some(150)),
            Err(Error::PatchMisalignment { len: 200, patch: 150 })
        ));
        assert!(matches!(decode_dataset(&bytes[..2], None), Err(Error::Truncated(_))));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = read_dataset(Path::new("/nonexistent/x.sptr"), None).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert_eq!(err.exit_code(), 3);
    }

    proptest! {
        #[test]
        fn arbitrary_segments_round_trip(
            c in 1usize..4, l in 1usize..20, dof in 0usize..3, n in 1usize..4,
            seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let segs: Vec<SignalSegment> = (0..n).map(|_| SignalSegment {
                channels: c, len: l, sample_rate: 1000.0,
                data: (0..c * l).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect(),
                targets: (dof > 0).then(|| (0..dof).map(|_| rng.gen()).collect()),
            }).collect();
            let back = decode_dataset(&encode_dataset(&segs).unwrap(), None).unwrap();
            prop_assert_eq!(back, segs);
        }
    }
}
