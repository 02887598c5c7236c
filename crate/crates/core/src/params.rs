//! Named parameter tensors, their binary checkpoint format, and Adam.
//!
//! `params.bin` is a sequence of little-endian records: name as `u32`
//! length + UTF-8, rank `u32`, dims `u32 × rank`, then `f32` values in
//! row-major order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    /// Logical shape; `value` holds it as `dims[0] × rest`.
    pub dims: Vec<usize>,
    pub value: Array2<f64>,
    /// Running statistics and other buffers are stored but not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// Shape of the matrix backing a tensor with logical shape `dims`. Vectors
/// are stored as a single row.
pub fn matrix_shape(dims: &[usize]) -> (usize, usize) {
    match dims {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, dims: &[usize], value: Array2<f64>, trainable: bool) -> ParamId {
        assert_eq!(value.dim(), matrix_shape(dims), "shape of `{name}`");
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            dims: dims.to_vec(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            w.write_u32::<LittleEndian>(p.dims.len() as u32)?;
            for &d in &p.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in p.value.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads every record of a `params.bin` stream.
    pub fn read_records(r: &mut impl Read) -> std::io::Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::new();
        loop {
            let len = match r.read_u32::<LittleEndian>() {
                Ok(n) => n as usize,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e),
            };
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let dims = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let mut values = vec![0f32; dims.iter().product()];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            let name = String::from_utf8(name)
                .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "parameter name is not UTF-8"))?;
            out.push((name, dims, values));
        }
        Ok(out)
    }

    /// Overwrites every parameter of this store with the values in `path`.
    /// Names and shapes must match exactly.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let records = Self::read_records(&mut bytes.as_slice()).map_err(|e| Error::io(path, e))?;
        if records.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{}: {} parameter records, model expects {}",
                path.display(),
                records.len(),
                self.params.len()
            )));
        }
        for (name, dims, values) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Invalid(format!("{}: unexpected parameter `{name}`", path.display())))?;
            let p = &mut self.params[id.0];
            if p.dims != dims {
                return Err(Error::Invalid(format!(
                    "{}: `{name}` has shape {dims:?}, model expects {:?}",
                    path.display(),
                    p.dims
                )));
            }
            p.value = Array2::from_shape_vec(p.value.raw_dim(), values.into_iter().map(f64::from).collect())
                .expect("shape checked");
        }
        Ok(())
    }

    /// Rounds every value to `f32`, matching what a save/load cycle yields.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<ParamId, Array2<f64>>,
    v: HashMap<ParamId, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are treated as
    /// having zero gradient, which leaves them unchanged on the first step
    /// and moves them only by their accumulated moments afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(&id) else {
                if !self.m.contains_key(&id) {
                    continue;
                }
                let zero = Array2::zeros(store.get(id).raw_dim());
                self.apply(store, id, &zero, c1, c2);
                continue;
            };
            self.apply(store, id, g, c1, c2);
        }
    }

    fn apply(&mut self, store: &mut ParamStore, id: ParamId, g: &Array2<f64>, c1: f64, c2: f64) {
        let shape = store.get(id).raw_dim();
        let m = self.m.entry(id).or_insert_with(|| Array2::zeros(shape));
        let v = self.v.entry(id).or_insert_with(|| Array2::zeros(shape));
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        ndarray::Zip::from(store.get_mut(id))
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_through_f32() {
        let mut s = ParamStore::new();
        s.add("conv.weight", &[2, 1, 2, 2], Array2::from_elem((2, 4), 0.1), true);
        s.add("bn.running_var", &[3], Array2::from_elem((1, 3), 1.5), false);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.bin");
        s.save(&p).unwrap();
        let mut t = s.clone();
        t.get_mut(ParamId(0)).fill(0.0);
        t.load_values(&p).unwrap();
        assert_eq!(t.get(ParamId(0))[[1, 3]], 0.1f32 as f64);
        let recs = ParamStore::read_records(&mut std::fs::read(&p).unwrap().as_slice()).unwrap();
        assert_eq!(recs[0].1, vec![2, 1, 2, 2]);
        assert_eq!(recs[1].0, "bn.running_var");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = ParamStore::new();
        let a = s.add("a", &[2], Array2::zeros((1, 2)), true);
        let b = s.add("b", &[1], Array2::ones((1, 1)), true);
        let mut opt = Adam::new(0.01);
        let mut g = HashMap::new();
        g.insert(a, Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap());
        opt.step(&mut s, &g);
        assert!((s.get(a)[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((s.get(a)[[0, 1]] - 0.01).abs() < 1e-9);
        assert_eq!(s.get(b)[[0, 0]], 1.0);
    }
}
