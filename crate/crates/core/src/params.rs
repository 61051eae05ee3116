//! Named parameter tensors, their on-disk form, and the AdamW optimiser.

use std::fs;
use std::io;
use std::path::Path;

use crate::tensor::Matrix;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Writes each tensor as raw little-endian `f32` to `<dir>/<name>.f32`.
    pub fn write_tensors(&self, dir: &Path) -> io::Result<()> {
        for (name, m) in self.iter() {
            let bytes: Vec<u8> = m.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fs::write(dir.join(format!("{name}.f32")), bytes)?;
        }
        Ok(())
    }

    /// Reads tensors written by [`write_tensors`](Self::write_tensors) into
    /// the existing shapes of this store.
    pub fn read_tensors(&mut self, dir: &Path) -> io::Result<()> {
        for (name, m) in self.names.iter().zip(self.values.iter_mut()) {
            let bytes = fs::read(dir.join(format!("{name}.f32")))?;
            if bytes.len() != m.len() * 4 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{name}: expected {} floats, found {} bytes", m.len(), bytes.len()),
                ));
            }
            for (dst, chunk) in m.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
            }
        }
        Ok(())
    }

    /// Rounds every value through `f32`, matching what a save/load cycle
    /// produces.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.values {
            m.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only (not to biases or
    /// normalisation gains, i.e. not to `1 x n` tensors).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates for one store.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. `grads[i]` of `None` means the parameter was not
    /// touched; its moments still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.values.iter_mut().enumerate() {
            let decay = if p.rows() > 1 { c.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads.get(i).and_then(Option::as_ref);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                *w -= c.learning_rate * (update + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip_through_f32_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.push("w", Matrix::from_vec(2, 2, vec![0.1, -2.5, 3.0, 1e-3]));
        store.push("b", Matrix::row_vector(vec![7.0, 8.0]));
        store.write_tensors(dir.path()).unwrap();

        let mut loaded = store.clone();
        loaded.get_mut(0).data_mut().fill(0.0);
        loaded.get_mut(1).data_mut().fill(0.0);
        loaded.read_tensors(dir.path()).unwrap();
        let mut expected = store.clone();
        expected.round_to_f32();
        assert_eq!(loaded, expected);
        assert_eq!(std::fs::read(dir.path().join("w.f32")).unwrap().len(), 16);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.push("w", Matrix::from_vec(2, 1, vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &[Some(Matrix::from_vec(2, 1, vec![0.5, -0.5]))]);
        // First Adam step has magnitude ~lr regardless of gradient scale.
        assert!((store.get(0).get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((store.get(0).get(1, 0) - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
