//! Versioned binary checkpoints with coordinate-wise averaging.
//!
//! Format: the ASCII header line `MUSECKPT v1\n`, then little-endian binary:
//! step (u64), fingerprint length (u32) + bytes, parameter count (u32), and
//! per parameter: name length (u32) + bytes, rank (u32), each dimension
//! (u32), then the values as 32-bit floats. Parameters are ordered by name,
//! so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{MuseError, Result};
use crate::params::ParamStore;
use crate::tensor::Elem;

const HEADER: &[u8] = b"MUSECKPT v1\n";

/// Named-parameter snapshot with metadata. Values are stored at 32-bit
/// precision regardless of the build's element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub step: u64,
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, step: u64, fingerprint: impl Into<String>) -> Self {
        let mut params = BTreeMap::new();
        for (name, t) in store.iter() {
            let values: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
            params.insert(name.to_string(), (t.shape.clone(), values));
        }
        Checkpoint { params, step, fingerprint: fingerprint.into() }
    }

    /// Copy values back into a store built from the same configuration.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(MuseError::Integrity(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let (shape, values) = self.params.get(&name).ok_or_else(|| {
                MuseError::Integrity(format!("checkpoint is missing parameter {name}"))
            })?;
            let tensor = store.tensor_mut(id);
            if tensor.shape != *shape {
                return Err(MuseError::Integrity(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    shape, tensor.shape
                )));
            }
            for (d, &v) in tensor.data.iter_mut().zip(values) {
                *d = v as Elem;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(HEADER);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.fingerprint.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, (shape, values)) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &dim in shape {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };

        let header = cur.take(HEADER.len())?;
        if header != HEADER {
            return Err(MuseError::Integrity(format!(
                "{}: not a checkpoint file (bad header)",
                path.display()
            )));
        }
        let step = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let fp_len = cur.take_u32()? as usize;
        let fingerprint = String::from_utf8(cur.take(fp_len)?.to_vec())
            .map_err(|_| MuseError::Integrity("fingerprint is not UTF-8".into()))?;
        let count = cur.take_u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.take_u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| MuseError::Integrity("parameter name is not UTF-8".into()))?;
            let rank = cur.take_u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.take_u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
            }
            params.insert(name, (shape, values));
        }
        if cur.pos != buf.len() {
            return Err(MuseError::Integrity(format!(
                "{}: {} trailing bytes",
                path.display(),
                buf.len() - cur.pos
            )));
        }
        Ok(Checkpoint { params, step, fingerprint })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MuseError::Integrity("checkpoint file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Coordinate-wise arithmetic mean of the given checkpoints. Per coordinate,
/// contributions are summed in value order so the result does not depend on
/// the order of the list.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| MuseError::Usage("cannot average zero checkpoints".into()))?;
    for c in checkpoints {
        if c.params.len() != first.params.len() {
            return Err(MuseError::Integrity("checkpoints hold different parameter sets".into()));
        }
        for (name, (shape, _)) in &c.params {
            let (want_shape, _) = first.params.get(name).ok_or_else(|| {
                MuseError::Integrity(format!("parameter {name} missing from another checkpoint"))
            })?;
            if shape != want_shape {
                return Err(MuseError::Integrity(format!(
                    "parameter {name}: shapes {:?} vs {:?}",
                    shape, want_shape
                )));
            }
        }
    }

    let k = checkpoints.len();
    let mut params = BTreeMap::new();
    let mut column = vec![0.0f64; k];
    for (name, (shape, first_vals)) in &first.params {
        let mut mean = vec![0.0f32; first_vals.len()];
        for (i, m) in mean.iter_mut().enumerate() {
            for (slot, c) in column.iter_mut().zip(checkpoints) {
                *slot = c.params[name].1[i] as f64;
            }
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            *m = (column.iter().sum::<f64>() / k as f64) as f32;
        }
        params.insert(name.clone(), (shape.clone(), mean));
    }
    Ok(Checkpoint {
        params,
        step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
        fingerprint: first.fingerprint.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[(&str, Vec<Elem>)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, vals) in values {
            let n = vals.len();
            store.insert(*name, Tensor::new(vec![n], vals.clone()).unwrap());
        }
        store
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_with(&[("b.w", vec![0.25, -1.5]), ("a.w", vec![3.0])]);
        let ckpt = Checkpoint::from_store(&store, 42, "fp123");
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn header_line_is_literal() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_with(&[("w", vec![1.0])]);
        let path = dir.path().join("c.ckpt");
        Checkpoint::from_store(&store, 1, "fp").save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"MUSECKPT v1\n"));
    }

    #[test]
    fn apply_rejects_shape_and_name_mismatches() {
        let store = store_with(&[("w", vec![1.0, 2.0])]);
        let ckpt = Checkpoint::from_store(&store, 0, "fp");

        let mut renamed = store_with(&[("v", vec![1.0, 2.0])]);
        assert!(matches!(ckpt.apply_to(&mut renamed), Err(MuseError::Integrity(_))));

        let mut reshaped = store_with(&[("w", vec![1.0, 2.0, 3.0])]);
        assert!(matches!(ckpt.apply_to(&mut reshaped), Err(MuseError::Integrity(_))));
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let store = store_with(&[("w", vec![0.5, -2.25, 7.0])]);
        let c = Checkpoint::from_store(&store, 3, "fp");
        let avg = average_checkpoints(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert_eq!(avg.params, c.params);
    }

    #[test]
    fn two_point_average() {
        let a = Checkpoint::from_store(&store_with(&[("w", vec![0.0])]), 1, "fp");
        let b = Checkpoint::from_store(&store_with(&[("w", vec![2.0])]), 2, "fp");
        let avg = average_checkpoints(&[a, b]).unwrap();
        assert_eq!(avg.params["w"].1, vec![1.0f32]);
        assert_eq!(avg.step, 2);
    }

    #[test]
    fn averaging_is_order_invariant() {
        let cs: Vec<Checkpoint> = [0.37, -1.91, 2.53, 0.004]
            .iter()
            .map(|&v| Checkpoint::from_store(&store_with(&[("w", vec![v, v * 3.3])]), 0, "fp"))
            .collect();
        let a = average_checkpoints(&cs).unwrap();
        let mut rev = cs.clone();
        rev.reverse();
        let b = average_checkpoints(&rev).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let a = Checkpoint::from_store(&store_with(&[("w", vec![0.0])]), 0, "fp");
        let b = Checkpoint::from_store(&store_with(&[("x", vec![0.0])]), 0, "fp");
        assert!(matches!(average_checkpoints(&[a, b]), Err(MuseError::Integrity(_))));
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_with(&[("w", vec![1.0, 2.0, 3.0])]);
        let path = dir.path().join("c.ckpt");
        Checkpoint::from_store(&store, 1, "fp").save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(MuseError::Integrity(_))));
    }
}
