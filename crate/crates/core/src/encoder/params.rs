use super::tensor::{Mat, Real};

/// Named trainable tensors. The version counter changes on every mutable
/// access so forward caches can detect that they no longer match.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    tensors: Vec<Mat<F>>,
    version: u64,
}

impl<F: Real> ParamStore<F> {
    pub fn push(&mut self, name: impl Into<String>, m: Mat<F>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Mat<F> {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Mat<F>] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Mat<F> {
        self.version += 1;
        &mut self.tensors[i]
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat<F>] {
        self.version += 1;
        &mut self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
            version: 0,
        }
    }
}
