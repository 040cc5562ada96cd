//! Binary video-feature files: little-endian f32, header `{K, d_v, modalities=2}`,
//! image block then motion block, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::encoder::VideoFeatures;
use crate::error::{Result, RsfdError};

const MODALITIES: u32 = 2;

pub fn write_features(path: &Path, features: &VideoFeatures) -> Result<()> {
    features.validate()?;
    let (k, d_v) = features.image.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(d_v as u32).to_le_bytes())?;
    w.write_all(&MODALITIES.to_le_bytes())?;
    for block in [&features.image, &features.motion] {
        for &x in block.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<VideoFeatures> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf4 = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut buf4)?;
        Ok(u32::from_le_bytes(buf4))
    };
    let k = read_u32(&mut r)? as usize;
    let d_v = read_u32(&mut r)? as usize;
    let modalities = read_u32(&mut r)?;
    if modalities != MODALITIES {
        return Err(RsfdError::ShapeMismatch(format!(
            "feature file declares {modalities} modalities, expected {MODALITIES}"
        )));
    }
    let read_block = |r: &mut BufReader<File>| -> Result<Array2<f64>> {
        let mut data = vec![0.0f64; k * d_v];
        let mut b = [0u8; 4];
        for x in &mut data {
            r.read_exact(&mut b)?;
            *x = f32::from_le_bytes(b) as f64;
        }
        Ok(Array2::from_shape_vec((k, d_v), data).expect("shape checked"))
    };
    let image = read_block(&mut r)?;
    let motion = read_block(&mut r)?;
    Ok(VideoFeatures { image, motion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = VideoFeatures {
            image: Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0f32..1.0) as f64),
            motion: Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0f32..1.0) as f64),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v1.feat");
        write_features(&path, &f).unwrap();
        let g = read_features(&path).unwrap();
        assert_eq!(f.image, g.image);
        assert_eq!(f.motion, g.motion);
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, [1u8, 0, 0, 0, 2, 0]).unwrap();
        assert!(read_features(&path).is_err());
    }
}
