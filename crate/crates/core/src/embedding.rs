//! Shared per-field embedding tables and the sinusoidal position encoding.
//!
//! The selector and the evaluator both read the same [`EmbeddingTable`]; the
//! table's matrices live in the model's [`ParamStore`] so gradient updates
//! made while training the evaluator are visible to the selector on its next
//! call.

use rand::Rng;
use crate::error::{PierError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub fields: Vec<ParamId>,
    pub vocab_sizes: Vec<usize>,
    pub dim: usize,
}

impl EmbeddingTable {
    /// One `vocab × dim` matrix per field, uniform in `[-1/√dim, 1/√dim]`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, vocab_sizes: &[usize], dim: usize, rng: &mut R) -> Result<Self> {
        check_dim(dim)?;
        if vocab_sizes.is_empty() || vocab_sizes.contains(&0) {
            return Err(PierError::Config(format!("invalid vocab sizes {vocab_sizes:?}")));
        }
        let limit = 1.0 / (dim as f64).sqrt();
        let fields = vocab_sizes
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let data = (0..v * dim).map(|_| rng.random_range(-limit..limit)).collect();
                store.add(format!("{prefix}.field{j}"), Tensor::new(vec![v, dim], data).expect("table shape"))
            })
            .collect();
        Ok(Self {
            fields,
            vocab_sizes: vocab_sizes.to_vec(),
            dim,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn lookup<'s>(&self, store: &'s ParamStore, field: usize, id: u32) -> Result<&'s [f64]> {
        self.check_id(field, id)?;
        Ok(store.get(self.fields[field]).row(id as usize))
    }

    pub fn check_id(&self, field: usize, id: u32) -> Result<()> {
        let vocab = *self.vocab_sizes.get(field).ok_or_else(|| {
            PierError::Contract(format!("field {field} beyond {} fields", self.vocab_sizes.len()))
        })?;
        if id as usize >= vocab {
            return Err(PierError::Lookup { field, id, vocab });
        }
        Ok(())
    }

    /// Validates a list of per-item feature rows.
    pub fn check_items(&self, items: &[Vec<u32>]) -> Result<()> {
        for features in items {
            if features.len() != self.num_fields() {
                return Err(PierError::dim("item features", &[features.len()], &[self.num_fields()]));
            }
            for (j, &id) in features.iter().enumerate() {
                self.check_id(j, id)?;
            }
        }
        Ok(())
    }

    /// Recorded lookup of `field` for every item row, giving `items × dim`.
    pub fn gather_field(&self, g: &mut Graph<'_>, field: usize, items: &[&[u32]]) -> Result<Var> {
        let mut idx = Vec::with_capacity(items.len());
        for features in items {
            let id = *features
                .get(field)
                .ok_or_else(|| PierError::dim("item features", &[features.len()], &[self.num_fields()]))?;
            self.check_id(field, id)?;
            idx.push(id as usize);
        }
        let table = g.param(self.fields[field]);
        g.gather_rows(table, idx)
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(PierError::Config(format!(
            "embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    Ok(())
}

/// `N_d × N_f × D` lookup result for one permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct PermEmbedding {
    tensor: Tensor,
}

impl PermEmbedding {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(PierError::dim("perm embedding", tensor.shape(), &[0, 0, 0]));
        }
        Ok(Self { tensor })
    }

    pub fn n_items(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn n_fields(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Embedding of item `i`, field `j`.
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let start = (i * self.n_fields() + j) * d;
        &self.tensor.data()[start..start + d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// `M[i][j] = table_j[features[i][j]]`.
pub fn embed_permutation(items: &[Vec<u32>], table: &EmbeddingTable, store: &ParamStore) -> Result<PermEmbedding> {
    table.check_items(items)?;
    let (n_f, d) = (table.num_fields(), table.dim);
    let mut data = Vec::with_capacity(items.len() * n_f * d);
    for features in items {
        for (j, &id) in features.iter().enumerate() {
            data.extend_from_slice(table.lookup(store, j, id)?);
        }
    }
    PermEmbedding::from_tensor(Tensor::new(vec![items.len(), n_f, d], data)?)
}

/// Sinusoidal encoding: even column `2c` holds `sin(i / 10000^(2c/D))`, the
/// following odd column the matching cosine.
pub fn position_encoding(n_d: usize, dim: usize) -> Result<Tensor> {
    check_dim(dim)?;
    let mut data = vec![0.0; n_d * dim];
    for i in 0..n_d {
        for c in (0..dim).step_by(2) {
            let angle = i as f64 / 10000f64.powf(c as f64 / dim as f64);
            data[i * dim + c] = angle.sin();
            data[i * dim + c + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n_d, dim], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn table(store: &mut ParamStore) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        EmbeddingTable::new(store, "emb", &[5, 3], 4, &mut rng).unwrap()
    }

    #[test]
    fn init_is_bounded() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        for &f in &t.fields {
            assert!(store.get(f).data().iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            EmbeddingTable::new(&mut store, "e", &[3], 7, &mut rng),
            Err(PierError::Config(_))
        ));
        assert!(position_encoding(3, 5).is_err());
    }

    #[test]
    fn repeated_item_rows_are_equal() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        let m = embed_permutation(&vec![vec![2, 1]; 3], &t, &store).unwrap();
        for i in 1..3 {
            for j in 0..2 {
                assert_eq!(m.get(i, j), m.get(0, j));
            }
        }
    }

    #[test]
    fn zero_table_gives_zero_matrix() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        for &f in &t.fields {
            store.get_mut(f).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let m = embed_permutation(&[vec![0, 0], vec![4, 2]], &t, &store).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reordering_permutes_rows() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        let a = embed_permutation(&[vec![0, 1], vec![3, 2]], &t, &store).unwrap();
        let b = embed_permutation(&[vec![3, 2], vec![0, 1]], &t, &store).unwrap();
        for j in 0..2 {
            assert_eq!(a.get(0, j), b.get(1, j));
            assert_eq!(a.get(1, j), b.get(0, j));
        }
    }

    #[test]
    fn out_of_vocab_names_field_and_id() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        match embed_permutation(&[vec![0, 3]], &t, &store) {
            Err(PierError::Lookup { field, id, vocab }) => assert_eq!((field, id, vocab), (1, 3, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn position_encoding_values() {
        let pe = position_encoding(4, 8).unwrap();
        for c in 0..8 {
            let want = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.get2(0, c), want);
        }
        assert!((pe.get2(1, 0) - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, position_encoding(4, 8).unwrap());
    }
}
