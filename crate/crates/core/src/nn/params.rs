use indexmap::IndexMap;
use rand::Rng;

use super::matrix::Matrix;
use super::NnError;

/// Shaped block of f64 values. One-dimensional tensors act as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || expected != data.len() {
            return Err(NnError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Matrix {
        let (rows, cols) = match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => unreachable!("tensors are 1-D or 2-D"),
        };
        Matrix { rows, cols, data: self.data.clone() }
    }
}

/// A tensor together with its optimizer accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub accum: Vec<f64>,
}

/// Ordered, uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize, NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        let accum = vec![0.0; value.len()];
        let (index, _) = self.entries.insert_full(name.to_string(), Param { value, accum });
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, NnError> {
        self.entries.get_index_of(name).ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries.get(name).map(|p| &p.value).ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.entries.get_mut(name).map(|p| &mut p.value).ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.entries[index]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.entries[index]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values().map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar weights.
    pub fn size(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

/// Gradients aligned index-by-index with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradients { tensors: params.tensors().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = ParameterSet::new();
        assert_eq!(p.insert("b", Tensor::zeros(vec![2])).unwrap(), 0);
        assert_eq!(p.insert("a", Tensor::zeros(vec![2, 2])).unwrap(), 1);
        assert!(matches!(p.insert("b", Tensor::zeros(vec![1])), Err(NnError::DuplicateName(_))));
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(p.size(), 6);
    }

    #[test]
    fn glorot_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::glorot(10, 14, &mut rng);
        let bound = 0.5;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = Gradients { tensors: vec![vec![3.0], vec![4.0]] };
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
