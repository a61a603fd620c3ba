use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Every trainable tensor of a network, stored back to back in one vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add_with(name, shape, || 0.0)
    }

    /// Uniform in `+-1/sqrt(fan_in)`, where `fan_in` is the leading dimension.
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        let bound = 1.0 / (shape[0] as f64).sqrt();
        self.add_with(name, shape, || rng.gen_range(-bound..bound))
    }

    fn add_with(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> f64) -> ParamId {
        let len = shape.iter().product();
        let offset = self.values.len();
        self.values.extend((0..len).map(|_| init()));
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), offset, len });
        ParamId(self.specs.len() - 1)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        &mut self.values[s.offset..s.offset + s.len]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let s = &self.specs[id.0];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), self.slice(id)).expect("2-d parameter")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { values: vec![0.0; self.values.len()], specs: self.specs.clone() }
    }

    /// Hex SHA-256 over the little-endian bytes of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Gradient accumulator laid out exactly like its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<f64>,
    specs: Vec<ParamSpec>,
}

impl Grads {
    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let s = &self.specs[id.0];
        ArrayViewMut1::from(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let s = &self.specs[id.0];
        let shape = (s.shape[0], s.shape[1]);
        ArrayViewMut2::from_shape(shape, &mut self.values[s.offset..s.offset + s.len]).expect("2-d parameter")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
