//! Disk container: raw little-endian payload plus a plain-text sidecar
//! header (`<name>.vol` / `<name>.vol.hdr`).
//!
//! The header carries shape, axis order, dtype and voxel size and is
//! trivially parseable from any language. Round trips are bit-exact.

use super::{Dims, LabelVolume, Volume, VolumeError};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

fn header_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".hdr");
    path.with_file_name(name)
}

struct Header {
    dims: Dims,
    voxel_size: [f64; 3],
    dtype: String,
}

fn write_header(path: &Path, dims: Dims, voxel_size: [f64; 3], dtype: &str) -> std::io::Result<()> {
    let mut f = fs::File::create(header_path(path))?;
    write!(
        f,
        "shape_z={}\nshape_y={}\nshape_x={}\nvoxel_um_z={}\nvoxel_um_y={}\nvoxel_um_x={}\ndtype={}\norder=ZYX\n",
        dims.z, dims.y, dims.x, voxel_size[0], voxel_size[1], voxel_size[2], dtype
    )
}

fn parse_header(path: &Path) -> Result<Header, VolumeError> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| {
        VolumeError::CorruptFile(format!("missing header {}: {e}", hdr_path.display()))
    })?;
    let mut shape = [None::<usize>; 3];
    let mut voxel = [None::<f64>; 3];
    let mut dtype = None;
    let mut order = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            VolumeError::CorruptFile(format!("header line {} is not key=value", lineno + 1))
        })?;
        let bad = |what: &str| VolumeError::CorruptFile(format!("bad {what}: {value:?}"));
        match key {
            "shape_z" => shape[0] = Some(value.parse().map_err(|_| bad("shape_z"))?),
            "shape_y" => shape[1] = Some(value.parse().map_err(|_| bad("shape_y"))?),
            "shape_x" => shape[2] = Some(value.parse().map_err(|_| bad("shape_x"))?),
            "voxel_um_z" => voxel[0] = Some(value.parse().map_err(|_| bad("voxel_um_z"))?),
            "voxel_um_y" => voxel[1] = Some(value.parse().map_err(|_| bad("voxel_um_y"))?),
            "voxel_um_x" => voxel[2] = Some(value.parse().map_err(|_| bad("voxel_um_x"))?),
            "dtype" => dtype = Some(value.to_string()),
            "order" => order = Some(value.to_string()),
            other => {
                return Err(VolumeError::CorruptFile(format!(
                    "unknown header field {other:?}"
                )))
            }
        }
    }
    let dims = match shape {
        [Some(z), Some(y), Some(x)] => Dims::new(z, y, x),
        _ => return Err(VolumeError::CorruptFile("incomplete shape".into())),
    };
    let voxel_size = match voxel {
        [Some(z), Some(y), Some(x)] => [z, y, x],
        _ => return Err(VolumeError::CorruptFile("incomplete voxel size".into())),
    };
    match order.as_deref() {
        Some("ZYX") => {}
        other => {
            return Err(VolumeError::UnsupportedFormat(format!(
                "axis order {other:?}, expected ZYX"
            )))
        }
    }
    Ok(Header {
        dims,
        voxel_size,
        dtype: dtype.ok_or_else(|| VolumeError::CorruptFile("missing dtype".into()))?,
    })
}

/// Saves a volume as raw f32 LE payload plus sidecar header.
pub fn save_volume(v: &Volume<f32>, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    write_header(path, v.dims(), v.voxel_size(), "f32")?;
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for &val in v.data() {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a volume saved by [`save_volume`]. Round trips are bit-identical.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume<f32>, VolumeError> {
    let path = path.as_ref();
    let hdr = parse_header(path)?;
    if hdr.dtype != "f32" {
        return Err(VolumeError::UnsupportedFormat(format!(
            "dtype {:?}, expected f32",
            hdr.dtype
        )));
    }
    let bytes = fs::read(path)?;
    let expected = hdr.dims.len() * 4;
    if bytes.len() != expected {
        return Err(VolumeError::CorruptFile(format!(
            "payload is {} bytes, header implies {}",
            bytes.len(),
            expected
        )));
    }
    let mut data = Vec::with_capacity(hdr.dims.len());
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(VolumeError::CorruptFile(
                "payload contains a non-finite value".into(),
            ));
        }
        data.push(v);
    }
    Volume::new(hdr.dims, hdr.voxel_size, data)
}

/// Saves instance labels as raw u32 LE payload plus sidecar header.
pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    write_header(path, l.dims(), l.voxel_size(), "u32")?;
    let mut bytes = Vec::with_capacity(l.labels().len() * 4);
    for &val in l.labels() {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads labels saved by [`save_labels`].
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let path = path.as_ref();
    let hdr = parse_header(path)?;
    if hdr.dtype != "u32" {
        return Err(VolumeError::UnsupportedFormat(format!(
            "dtype {:?}, expected u32",
            hdr.dtype
        )));
    }
    let bytes = fs::read(path)?;
    let expected = hdr.dims.len() * 4;
    if bytes.len() != expected {
        return Err(VolumeError::CorruptFile(format!(
            "payload is {} bytes, header implies {}",
            bytes.len(),
            expected
        )));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelVolume::new(hdr.dims, hdr.voxel_size, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.vol");
        let v = Volume::<f32>::from_fn(Dims::new(2, 3, 4), [0.29, 0.29, 0.29], |z, y, x| {
            (z * 12 + y * 4 + x) as f32 * 0.125 - 1.0
        });
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn short_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.vol");
        let v = Volume::<f32>::zeros(Dims::new(2, 3, 4), [1.0; 3]);
        save_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(VolumeError::CorruptFile(_))
        ));
    }

    #[test]
    fn exact_payload_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.vol");
        let v = Volume::<f32>::zeros(Dims::new(4, 4, 4), [1.0; 3]);
        save_volume(&v, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 256);
        assert!(load_volume(&path).is_ok());
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odd.vol");
        let v = Volume::<f32>::zeros(Dims::new(1, 1, 1), [1.0; 3]);
        save_volume(&v, &path).unwrap();
        let hdr = header_path(&path);
        let text = fs::read_to_string(&hdr).unwrap().replace("f32", "f16");
        fs::write(&hdr, text).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(VolumeError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.vol");
        let l = LabelVolume::new(Dims::new(1, 2, 3), [2.0; 3], vec![0, 1, 2, 0, 1, 7]).unwrap();
        save_labels(&l, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), l);
    }
}
