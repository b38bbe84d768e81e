/// Dense scalar field over a `nx × ny × nz` lattice, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Field3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Returns `None` when `data.len()` does not match the dims.
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Option<Self> {
        (data.len() == dims[0] * dims[1] * dims[2]).then_some(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Inverse of [`Field3::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        coords_of(self.dims, i)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Field3<U> {
        Field3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[inline]
pub(crate) fn coords_of(dims: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let r = i / dims[0];
    [x, r % dims[1], r / dims[1]]
}

/// Calls `f(neighbor_index)` for each of the up-to-six face neighbours.
#[inline]
pub(crate) fn for_each_face_neighbor(dims: [usize; 3], i: usize, mut f: impl FnMut(usize)) {
    let [x, y, z] = coords_of(dims, i);
    let sx = 1;
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    if x > 0 {
        f(i - sx);
    }
    if x + 1 < dims[0] {
        f(i + sx);
    }
    if y > 0 {
        f(i - sy);
    }
    if y + 1 < dims[1] {
        f(i + sy);
    }
    if z > 0 {
        f(i - sz);
    }
    if z + 1 < dims[2] {
        f(i + sz);
    }
}

/// Calls `f(neighbor_index)` for each of the up-to-26 neighbours.
#[inline]
pub(crate) fn for_each_neighbor26(dims: [usize; 3], i: usize, mut f: impl FnMut(usize)) {
    let [x, y, z] = coords_of(dims, i);
    for dz in -1i64..=1 {
        let zz = z as i64 + dz;
        if zz < 0 || zz >= dims[2] as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= dims[1] as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let xx = x as i64 + dx;
                if xx < 0 || xx >= dims[0] as i64 {
                    continue;
                }
                f(xx as usize + dims[0] * (yy as usize + dims[1] * zz as usize));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_coords_inverse() {
        let f = Field3::filled([3, 4, 5], 0u8);
        for i in 0..f.len() {
            let [x, y, z] = f.coords(i);
            assert_eq!(f.index(x, y, z), i);
        }
    }

    #[test]
    fn neighbor_counts() {
        let dims = [3, 3, 3];
        let mut n = 0;
        for_each_face_neighbor(dims, 13, |_| n += 1);
        assert_eq!(n, 6);
        n = 0;
        for_each_neighbor26(dims, 13, |_| n += 1);
        assert_eq!(n, 26);
        n = 0;
        for_each_neighbor26(dims, 0, |_| n += 1);
        assert_eq!(n, 7);
    }
}
