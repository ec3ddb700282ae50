use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps named matrices onto slices of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        let entry = LayoutEntry {
            name: name.into(),
            rows,
            cols,
            offset: self.len,
        };
        self.len += entry.len();
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat vector over the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Size(format!(
                "layout holds {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        ParamVector { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|x| a * x).collect(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
