use crate::error::{shape, Result};

/// Boolean visibility matrix: `allows(i, j)` is true when query `i` may
/// attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(queries * keys);
        for i in 0..queries {
            for j in 0..keys {
                allow.push(f(i, j));
            }
        }
        Self {
            queries,
            keys,
            allow,
        }
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self::from_fn(queries, keys, |_, _| true)
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let keys = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != keys) {
            return Err(shape("ragged mask rows"));
        }
        Ok(Self {
            queries: rows.len(),
            keys,
            allow: rows.concat(),
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.keys + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.keys..(i + 1) * self.keys]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.keys, self.queries, |i, j| self.allows(j, i))
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.queries).map(|i| self.row(i).to_vec()).collect()
    }
}
