use crate::error::Result;
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Table bin of a per-axis voxel offset: `clamp(rel + w_max, 0, 2·w_max)`.
#[inline]
pub fn rpe_bin(rel: i32, w_max: i32) -> usize {
    debug_assert!(w_max >= 1);
    (rel + w_max).clamp(0, 2 * w_max) as usize
}

/// One set of learnable position tables: for each of query, key and value,
/// one `(2·w_max+1) × width` table per axis x, y, z.
#[derive(Clone, Copy, Debug)]
pub struct RpeTables {
    pub q: [ParamId; 3],
    pub k: [ParamId; 3],
    pub v: [ParamId; 3],
    pub w_max: i32,
    pub width: usize,
}

impl RpeTables {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, w_max: u32, width: usize) -> Result<Self> {
        let len = 2 * w_max as usize + 1;
        let mut reg = |role: &str| -> Result<[ParamId; 3]> {
            let mut ids = Vec::with_capacity(3);
            for axis in ["x", "y", "z"] {
                ids.push(store.register(format!("{name}.{role}_{axis}"), &[len, width], ParamKind::RpeTable)?);
            }
            Ok([ids[0], ids[1], ids[2]])
        };
        Ok(Self { q: reg("q")?, k: reg("k")?, v: reg("v")?, w_max: w_max as i32, width })
    }

    /// Bins per table, `2·w_max + 1`.
    pub fn bins(&self) -> usize {
        2 * self.w_max as usize + 1
    }

    pub fn param_count(&self) -> usize {
        9 * self.bins() * self.width
    }

    pub fn view<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> RpeView<'a, T> {
        let get = |ids: &[ParamId; 3]| [store.value(ids[0]), store.value(ids[1]), store.value(ids[2])];
        RpeView { q: get(&self.q), k: get(&self.k), v: get(&self.v), w_max: self.w_max }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.q.iter().chain(&self.k).chain(&self.v).copied()
    }
}

/// Borrowed table values for one attention call.
#[derive(Clone, Copy, Debug)]
pub struct RpeView<'a, T> {
    pub q: [&'a Matrix<T>; 3],
    pub k: [&'a Matrix<T>; 3],
    pub v: [&'a Matrix<T>; 3],
    pub w_max: i32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins() {
        assert_eq!(rpe_bin(0, 4), 4);
        assert_eq!(rpe_bin(4, 4), 8);
        assert_eq!(rpe_bin(-3, 4), 1);
        assert_eq!(rpe_bin(-9, 4), 0);
        assert_eq!(rpe_bin(100, 4), 8);
        assert_eq!(rpe_bin(1, 1), 2);
    }

    #[test]
    fn registers_nine_tables() {
        let mut s = ParamStore::<f64>::new(0);
        let t = RpeTables::new(&mut s, "rpe", 4, 6).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(t.param_count(), 9 * 9 * 6);
        assert_eq!(s.trainable_count(), t.param_count());
        assert_eq!(s.block(t.v[2]).name, "rpe.v_z");
    }
}
