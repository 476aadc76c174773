//! Checkpoint container: text header followed by raw little-endian f32
//! parameter payloads in declaration order. Batch-norm running statistics
//! ride along after the parameters; training-set intensity ranges (for
//! rescaling predictions) are optional header fields.

use super::net::MiniUnet;
use super::{NetConfig, NetError};
use crate::metrics::RescaleParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: MiniUnet<f32>,
    pub rescale: Option<RescaleParams>,
}

pub fn save_checkpoint(
    net: &MiniUnet<f32>,
    rescale: Option<&RescaleParams>,
    path: impl AsRef<Path>,
) -> Result<(), NetError> {
    let mut tensors: Vec<(String, Vec<f32>)> = net.param_tensors();
    let mut net_mut = net.clone();
    net_mut.visit_state_mut(|name, t| tensors.push((name, t.clone())));

    let mut header = String::new();
    header.push_str(&format!(
        "base_channels={}\ndepth={}\ndtype=f32\n",
        net.cfg.base_channels, net.cfg.depth
    ));
    if let Some(r) = rescale {
        header.push_str(&format!(
            "rescale_std_min={}\nrescale_std_max={}\nrescale_raw_min={}\nrescale_raw_max={}\n",
            r.std_min, r.std_max, r.raw_min, r.raw_max
        ));
    }
    for (name, t) in &tensors {
        header.push_str(&format!("tensor={}:{}\n", name, t.len()));
    }
    header.push_str("end_header\n");

    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for (_, t) in &tensors {
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for &v in t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let marker = b"end_header\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| NetError::Incompatible("missing end_header marker".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| NetError::Incompatible("header is not UTF-8".into()))?;
    let payload = &bytes[header_end + marker.len()..];

    let mut base_channels = None;
    let mut depth = None;
    let mut dtype = None;
    let mut rescale = [None::<f64>; 4];
    let mut tensor_specs: Vec<(String, usize)> = Vec::new();
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| NetError::Incompatible(format!("bad header line {line:?}")))?;
        let bad = |what: &str| NetError::Incompatible(format!("bad {what}: {value:?}"));
        match key {
            "base_channels" => base_channels = Some(value.parse().map_err(|_| bad(key))?),
            "depth" => depth = Some(value.parse().map_err(|_| bad(key))?),
            "dtype" => dtype = Some(value.to_string()),
            "rescale_std_min" => rescale[0] = Some(value.parse().map_err(|_| bad(key))?),
            "rescale_std_max" => rescale[1] = Some(value.parse().map_err(|_| bad(key))?),
            "rescale_raw_min" => rescale[2] = Some(value.parse().map_err(|_| bad(key))?),
            "rescale_raw_max" => rescale[3] = Some(value.parse().map_err(|_| bad(key))?),
            "tensor" => {
                let (name, len) = value
                    .rsplit_once(':')
                    .ok_or_else(|| bad("tensor spec"))?;
                tensor_specs.push((
                    name.to_string(),
                    len.parse().map_err(|_| bad("tensor length"))?,
                ));
            }
            other => {
                return Err(NetError::Incompatible(format!(
                    "unknown header field {other:?}"
                )))
            }
        }
    }
    if dtype.as_deref() != Some("f32") {
        return Err(NetError::Incompatible(format!(
            "dtype {dtype:?}, expected f32"
        )));
    }
    let cfg = NetConfig {
        base_channels: base_channels
            .ok_or_else(|| NetError::Incompatible("missing base_channels".into()))?,
        depth: depth.ok_or_else(|| NetError::Incompatible("missing depth".into()))?,
    };

    let total: usize = tensor_specs.iter().map(|(_, l)| l).sum();
    if payload.len() != total * 4 {
        return Err(NetError::Incompatible(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            total * 4
        )));
    }

    // shape the net, then overwrite every tensor from the payload
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = MiniUnet::<f32>::init(cfg, &mut rng);
    let mut expected: Vec<(String, usize)> = Vec::new();
    net.visit_params(|name, t| expected.push((name, t.len())));
    {
        let mut net_probe = net.clone();
        net_probe.visit_state_mut(|name, t| expected.push((name, t.len())));
    }
    if expected != tensor_specs {
        return Err(NetError::Incompatible(
            "tensor list does not match the network layout".into(),
        ));
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut fill = |t: &mut Vec<f32>| {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    };
    net.visit_params_mut(|_, t| fill(t));
    net.visit_state_mut(|_, t| fill(t));

    let rescale = match rescale {
        [Some(std_min), Some(std_max), Some(raw_min), Some(raw_max)] => Some(RescaleParams {
            std_min,
            std_max,
            raw_min,
            raw_max,
        }),
        [None, None, None, None] => None,
        _ => {
            return Err(NetError::Incompatible(
                "incomplete rescale parameters".into(),
            ))
        }
    };
    Ok(Checkpoint { net, rescale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Batch;
    use crate::volume::Dims;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let net = MiniUnet::<f32>::init(
            NetConfig {
                base_channels: 3,
                depth: 2,
            },
            &mut rng,
        );
        let rescale = RescaleParams {
            std_min: -1.5,
            std_max: 4.25,
            raw_min: 0.0,
            raw_max: 2.0,
        };
        save_checkpoint(&net, Some(&rescale), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.rescale, Some(rescale));
        assert_eq!(loaded.net.cfg, net.cfg);
        for ((_, a), (_, b)) in net.param_tensors().iter().zip(loaded.net.param_tensors()) {
            assert_eq!(a, &b);
        }
        // identical inference outputs
        let mut x = Batch::<f32>::zeros(1, 1, Dims::new(4, 8, 8));
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (i % 17) as f32 * 0.1 - 0.5;
        }
        let a = net.forward_eval(&x).unwrap();
        let b = loaded.net.forward_eval(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MiniUnet::<f32>::init(NetConfig::default(), &mut rng);
        save_checkpoint(&net, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NetError::Incompatible(_))
        ));
    }
}
