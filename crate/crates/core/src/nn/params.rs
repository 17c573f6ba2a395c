use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Rows that the optimizer never touches (the PAD embedding row).
    pub frozen_rows: Vec<usize>,
    /// Gradients are accumulated per touched row instead of densely.
    pub row_sparse: bool,
}

/// The named trainable tensors of a model, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(Param {
            name: name.into(),
            value,
            frozen_rows: Vec::new(),
            row_sparse: false,
        })
    }

    /// Registers an embedding matrix: row-sparse gradients, PAD row frozen.
    pub fn add_embedding(&mut self, name: impl Into<String>, value: Tensor<T>, frozen_rows: Vec<usize>) -> ParamId {
        self.push(Param {
            name: name.into(),
            value,
            frozen_rows,
            row_sparse: true,
        })
    }

    fn push(&mut self, param: Param<T>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen_rows: p.frozen_rows.clone(),
                    row_sparse: p.row_sparse,
                })
                .collect(),
        }
    }

    /// Replaces values from another set with identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Gradient storage for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuf<T> {
    Dense(Vec<T>),
    Rows {
        width: usize,
        rows: BTreeMap<u32, Vec<T>>,
    },
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    bufs: Vec<GradBuf<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Gradients {
            bufs: params
                .iter()
                .map(|p| {
                    if p.row_sparse {
                        GradBuf::Rows {
                            width: p.value.len() / p.value.shape()[0],
                            rows: BTreeMap::new(),
                        }
                    } else {
                        GradBuf::Dense(vec![T::zero(); p.value.len()])
                    }
                })
                .collect(),
        }
    }

    pub fn buf(&self, id: ParamId) -> &GradBuf<T> {
        &self.bufs[id.0]
    }

    pub fn dense_mut(&mut self, id: ParamId) -> &mut [T] {
        match &mut self.bufs[id.0] {
            GradBuf::Dense(v) => v,
            GradBuf::Rows { .. } => panic!("parameter {} has row-sparse gradients", id.0),
        }
    }

    /// Two distinct dense buffers at once, e.g. a layer's weight and bias.
    pub fn dense_pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b, "dense_pair_mut needs two different parameters");
        fn dense<T>(buf: &mut GradBuf<T>) -> &mut [T] {
            match buf {
                GradBuf::Dense(v) => v,
                GradBuf::Rows { .. } => panic!("parameter has row-sparse gradients"),
            }
        }
        if a.0 < b.0 {
            let (left, right) = self.bufs.split_at_mut(b.0);
            (dense(&mut left[a.0]), dense(&mut right[0]))
        } else {
            let (left, right) = self.bufs.split_at_mut(a.0);
            (dense(&mut right[0]), dense(&mut left[b.0]))
        }
    }

    pub fn row_mut(&mut self, id: ParamId, row: u32) -> &mut [T] {
        match &mut self.bufs[id.0] {
            GradBuf::Rows { width, rows } => {
                let width = *width;
                rows.entry(row).or_insert_with(|| vec![T::zero(); width])
            }
            GradBuf::Dense(_) => panic!("parameter {} has dense gradients", id.0),
        }
    }

    /// Gradient of a single flattened entry.
    pub fn entry(&self, id: ParamId, flat: usize) -> T {
        match &self.bufs[id.0] {
            GradBuf::Dense(v) => v[flat],
            GradBuf::Rows { width, rows } => rows
                .get(&((flat / width) as u32))
                .map_or(T::zero(), |r| r[flat % width]),
        }
    }

    /// Dense copy of one parameter's gradient.
    pub fn to_dense(&self, id: ParamId, len: usize) -> Vec<T> {
        (0..len).map(|i| self.entry(id, i)).collect()
    }

    /// Adds `other` into `self`. Callers reduce in a fixed order so that
    /// batch gradients are reproducible.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.bufs.iter_mut().zip(&other.bufs) {
            match (mine, theirs) {
                (GradBuf::Dense(a), GradBuf::Dense(b)) => {
                    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
                }
                (GradBuf::Rows { rows: a, width }, GradBuf::Rows { rows: b, .. }) => {
                    for (&r, vals) in b {
                        let slot = a.entry(r).or_insert_with(|| vec![T::zero(); *width]);
                        slot.iter_mut().zip(vals).for_each(|(x, &y)| *x += y);
                    }
                }
                _ => panic!("gradient layouts differ"),
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for buf in &mut self.bufs {
            match buf {
                GradBuf::Dense(v) => v.iter_mut().for_each(|x| *x = *x * factor),
                GradBuf::Rows { rows, .. } => rows
                    .values_mut()
                    .flat_map(|r| r.iter_mut())
                    .for_each(|x| *x = *x * factor),
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(|b| match b {
            GradBuf::Dense(v) => v.iter().all(|x| x.is_finite()),
            GradBuf::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        })
    }
}
