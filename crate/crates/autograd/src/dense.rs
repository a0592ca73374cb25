use crate::tensor::Element;

/// Typed row-major array. Used for tape values, gradients, masks and images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Clone> Dense<T> {
    /// Panics if `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match {} values", data.len());
        Dense { shape, data }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Dense {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Self {
        Dense::from_vec(shape, self.data)
    }

    /// Slice along the leading axis, e.g. one channel of a `C×X×Y×Z` array.
    pub fn index_axis0(&self, i: usize) -> Dense<T> {
        let inner: usize = self.shape[1..].iter().product();
        Dense::from_vec(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Dense<U> {
        Dense {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Element> Dense<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Dense::filled(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Dense {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Dense<U> {
        self.map(|&x| U::from_f64(x.to_f64()))
    }
}

/// Extents of a `C×X×Y×Z` array as `(C, [X, Y, Z])`.
pub(crate) fn split_volume(shape: &[usize]) -> Option<(usize, [usize; 3])> {
    match shape {
        [c, x, y, z] => Some((*c, [*x, *y, *z])),
        _ => None,
    }
}
