use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named, shape-tagged parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "{name}: shape/data mismatch"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.tensors.push(ParamTensor {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamTensor)> {
        self.tensors.iter_mut().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    /// Maps a flat scalar index (in registration order) to `(tensor, offset)`.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.data.len() {
                return Some((ParamId(i), flat));
            }
            flat -= t.data.len();
        }
        None
    }
}

/// Gradient buffers laid out like the [`ParamStore`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) bufs: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.bufs
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.bufs.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn fill_zero(&mut self) {
        self.bufs.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|g| g.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        crate::math::sqrt(self.bufs.iter().flatten().map(|g| g * g).sum())
    }
}
