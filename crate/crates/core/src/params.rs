//! Named parameter tensors.
//!
//! Every stored value is representable as an `f32`: initialization and
//! optimizer updates round through `f32`, so a checkpoint of little-endian
//! 32-bit floats reproduces the in-memory parameters exactly while all
//! arithmetic stays in `f64`.

use rand::Rng;

use crate::tape::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rounds every entry to the nearest `f32`.
pub fn round_to_f32(m: &mut Mat) {
    m.mapv_inplace(|x| x as f32 as f64);
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        round_to_f32(&mut value);
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), v))
    }

    /// Places every tensor in `g`, as differentiable leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|m| {
                if trainable {
                    g.param(m.clone())
                } else {
                    g.input(m.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Little-endian `f32` bytes of every tensor, in id order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * 4);
        for m in &self.values {
            for &x in m.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, m)| (n.clone(), m.nrows(), m.ncols()))
            .collect()
    }
}

/// Graph handles for one bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls this set's gradients out of a backward pass, aligned by id.
    pub fn gradients(&self, grads: &mut crate::tape::Gradients) -> Vec<Option<Mat>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit_and_f32_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let id = ps.glorot("w", 10, 14, &mut rng);
        let limit = (6.0f64 / 24.0).sqrt();
        for &x in ps.get(id).iter() {
            assert!(x.abs() <= limit);
            assert_eq!(x, x as f32 as f64);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ps = ParamSet::new();
            ps.glorot("a", 3, 4, &mut rng);
            ps.zeros("b", 1, 4);
            ps
        };
        assert_eq!(build().to_le_bytes(), build().to_le_bytes());
        assert_eq!(build().to_le_bytes().len(), 16 * 4);
    }
}
