use std::path::Path;

use crate::binio::{format_err, put_f32s, write_atomic, ByteReader};
use crate::error::{Result, SemiseError};
use crate::ndcore::DenseArray;
use crate::synthdata::{Dataset, SampleRecord};

pub const DATASET_MAGIC: &[u8; 4] = b"SEVD";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 4 + 5 * 4;

/// Bytes per record: id, severity, mask bytes, `f32` pixels.
pub fn record_bytes(height: usize, width: usize) -> usize {
    8 + 1 + 5 * height * width
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| SemiseError::Data(format!("{what} {v} does not fit in u32")))
}

/// Serialize to the SEVD layout. Pixel values are stored as `f32`.
pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let hw = data.height * data.width;
    let mut out = Vec::with_capacity(DATASET_HEADER_BYTES + data.records.len() * record_bytes(data.height, data.width));
    out.extend_from_slice(DATASET_MAGIC);
    for (v, what) in [
        (DATASET_VERSION as usize, "version"),
        (data.records.len(), "count"),
        (data.classes, "classes"),
        (data.height, "height"),
        (data.width, "width"),
    ] {
        out.extend_from_slice(&u32_field(v, what)?.to_le_bytes());
    }
    for r in &data.records {
        if r.image.len() != hw || r.mask.len() != hw {
            return Err(SemiseError::dimension("encode_dataset", r.image.shape(), &[1, data.height, data.width]));
        }
        out.extend_from_slice(&r.id.to_le_bytes());
        out.push(r.severity);
        out.extend(r.mask.data().iter().map(|&m| u8::from(m != 0.0)));
        put_f32s(&mut out, r.image.data());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = ByteReader::new(bytes);
    if rd.take(4, "magic")? != DATASET_MAGIC {
        return Err(format_err(0, "bad magic, expected SEVD"));
    }
    let version = rd.u32("version")?;
    if version != DATASET_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count = rd.u32("count")? as usize;
    let classes = rd.u32("classes")? as usize;
    let height = rd.u32("height")? as usize;
    let width = rd.u32("width")? as usize;
    if classes < 2 || classes > 256 || height == 0 || width == 0 {
        return Err(format_err(12, format!("invalid geometry K={classes} H={height} W={width}")));
    }
    let hw = height * width;
    let mut records = Vec::with_capacity(count.min(rd.remaining() / record_bytes(height, width) + 1));
    for k in 0..count {
        let start = rd.offset();
        let id = rd.u64("record id")?;
        let sev_at = rd.offset();
        let severity = rd.u8("severity")?;
        if severity as usize >= classes {
            return Err(format_err(sev_at, format!("record {k}: severity {severity} >= {classes}")));
        }
        let mask_at = rd.offset();
        let mask_bytes = rd.take(hw, "mask")?;
        if let Some(p) = mask_bytes.iter().position(|&b| b > 1) {
            return Err(format_err(mask_at + p, format!("record {k}: mask byte {} not 0/1", mask_bytes[p])));
        }
        let mask: Vec<f64> = mask_bytes.iter().map(|&b| b as f64).collect();
        let image_at = rd.offset();
        let image = rd.f32s(hw, "image")?;
        if let Some(p) = image.iter().position(|v| !v.is_finite()) {
            return Err(format_err(image_at + 4 * p, format!("record {k}: non-finite pixel")));
        }
        if (severity == 0) != mask.iter().all(|&m| m == 0.0) {
            return Err(format_err(start, format!("record {k}: mask inconsistent with severity {severity}")));
        }
        records.push(SampleRecord {
            id,
            severity,
            image: DenseArray::new(vec![1, height, width], image)?,
            mask: DenseArray::new(vec![height, width], mask)?,
        });
    }
    rd.expect_end()?;
    Ok(Dataset {
        classes,
        height,
        width,
        records,
    })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(data)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn offset_of(e: SemiseError) -> u64 {
        match e {
            SemiseError::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn round_trip_and_exact_size() {
        let d = generate_dataset(3, 4, 16, 8, 5).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(bytes.len(), 24 + 12 * (8 + 1 + 128 + 512));
        assert_eq!(decode_dataset(&bytes).unwrap(), d);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.sevd");
        write_dataset(&p, &d).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, bytes.len());
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn corruptions_report_offsets() {
        let d = generate_dataset(1, 2, 8, 8, 1).unwrap();
        let good = encode_dataset(&d).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(decode_dataset(&bad).unwrap_err()), 0);

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(decode_dataset(&bad).unwrap_err()), 4);

        let cut = good.len() - 3;
        let e = decode_dataset(&good[..cut]).unwrap_err();
        assert!(offset_of(e) < cut as u64);

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(offset_of(decode_dataset(&bad).unwrap_err()), good.len() as u64);

        let mut bad = good.clone();
        bad[24 + 8] = 9;
        assert_eq!(offset_of(decode_dataset(&bad).unwrap_err()), 32);
    }
}
