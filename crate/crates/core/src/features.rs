//! Binary image-feature files: magic `NYCF`, u32 version, u32 dimension,
//! then dimension little-endian f32 values.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NYCF";
const VERSION: u32 = 1;

pub fn write_feature(path: &Path, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + values.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    let name = path.display();
    if bytes.len() < 12 {
        return Err(Error::Data(format!("feature file {name}: truncated header")));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Data(format!("feature file {name}: bad magic")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!(
            "feature file {name}: version {version}, expected {VERSION}"
        )));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + dim * 4 {
        return Err(Error::Data(format!(
            "feature file {name}: {} payload bytes, expected {}",
            bytes.len() - 12,
            dim * 4
        )));
    }
    Ok(bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Read a feature and enforce the model's expected dimension.
pub fn read_feature_checked(path: &Path, expect_dim: usize) -> Result<Vec<f32>> {
    let v = read_feature(path)?;
    if v.len() != expect_dim {
        return Err(Error::Dimension(format!(
            "feature file {}: {} dims, model expects {expect_dim}",
            path.display(),
            v.len()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let values: Vec<f32> = (0..7).map(|i| i as f32 * 0.5 - 1.0).collect();
        write_feature(&path, &values).unwrap();
        assert_eq!(read_feature(&path).unwrap(), values);
        assert_eq!(read_feature_checked(&path, 7).unwrap(), values);
        assert!(read_feature_checked(&path, 8).is_err());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, b"NYCF").unwrap();
        assert!(read_feature(&path).is_err());
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(read_feature(&path).is_err());
        // dimension claims more floats than present
        std::fs::write(&path, b"NYCF\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_feature(&path).is_err());
    }
}
