//! Binary model snapshot.
//!
//! ```text
//! magic      8 bytes  "PSRELNET"
//! version    u32 LE
//! extractor  u32 LE length + UTF-8 id ("none" for external features)
//! seed       u64 LE
//! layers     u32 LE count, then u32 LE sizes ([2D, H, 1])
//! params     u64 LE count, then f64 LE values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::model::RelationModel;
use crate::error::{Error, Result};
use crate::features::ExtractorSpec;

const MAGIC: &[u8; 8] = b"PSRELNET";
pub const SNAPSHOT_VERSION: u32 = 1;
const NO_EXTRACTOR: &str = "none";

pub fn write_model<W: Write>(model: &RelationModel, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    let ext = model.extractor.map_or(NO_EXTRACTOR, ExtractorSpec::id);
    w.write_all(&(ext.len() as u32).to_le_bytes())?;
    w.write_all(ext.as_bytes())?;
    w.write_all(&model.seed.to_le_bytes())?;
    let layers = model.layer_sizes();
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Snapshot(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_model<R: Read>(mut r: R) -> Result<RelationModel> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let ext_len = read_u32(&mut r)? as usize;
    if ext_len > 256 {
        return Err(Error::Snapshot("extractor id too long".into()));
    }
    let mut ext = vec![0u8; ext_len];
    r.read_exact(&mut ext)
        .map_err(|e| Error::Snapshot(format!("truncated: {e}")))?;
    let ext = String::from_utf8(ext).map_err(|_| Error::Snapshot("extractor id is not UTF-8".into()))?;
    let extractor = match ext.as_str() {
        NO_EXTRACTOR => None,
        id => Some(id.parse::<ExtractorSpec>().map_err(|e| Error::Snapshot(e.to_string()))?),
    };
    let seed = read_u64(&mut r)?;
    let n_layers = read_u32(&mut r)?;
    if n_layers != 3 {
        return Err(Error::Snapshot(format!("expected 3 layers, found {n_layers}")));
    }
    let layers = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
    if layers[0] % 2 != 0 || layers[2] != 1 {
        return Err(Error::Snapshot(format!("unsupported layer sizes {layers:?}")));
    }
    let (d, h) = (layers[0] as usize / 2, layers[1] as usize);
    let n = read_u64(&mut r)? as usize;
    if n != RelationModel::param_count(d, h) {
        return Err(Error::Snapshot(format!("parameter count {n} does not match layers {layers:?}")));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let mut model = RelationModel::from_params(d, h, params).map_err(|e| Error::Snapshot(e.to_string()))?;
    model.seed = seed;
    model.extractor = extractor;
    Ok(model)
}

/// Writes via a temporary sibling and renames, so readers never see a partial file.
pub fn write_model_file(model: &RelationModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_model(model, &mut w).map_err(|e| Error::io(&tmp, e))?;
    let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<RelationModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = RelationModel::init(5, 7, 42).with_extractor(ExtractorSpec::RgbHistGray);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(back.params().iter().zip(m.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn external_features_model_round_trips() {
        let m = RelationModel::init(2, 3, 1);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(&buf[..]).unwrap().extractor, None);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(read_model(&b"NOTAMODEL"[..]).is_err());
        let m = RelationModel::init(2, 3, 1);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_model(&buf[..]), Err(Error::Snapshot(_))));
    }
}
