use crate::tensor::Tensor;

/// A trainable tensor. `mask`, when present, marks the entries that may be
/// nonzero; the rest are pinned at zero by pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub mask: Option<Vec<bool>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        Param {
            name: name.into(),
            value,
            mask: None,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Entries not removed by pruning.
    pub fn kept_len(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&k| k).count(),
            None => self.value.len(),
        }
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }
}
