//! Class logits from shadow tokens: temperature-scaled cosine similarity
//! against a bank of class embeddings, plus a learnable no-object row.

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::tensor::{Float, Parameters, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-8;
pub const LOGIT_SCALE_INIT: f64 = 1.0 / 0.07;
pub const LOGIT_SCALE_RANGE: (f64, f64) = (1.0, 100.0);

/// Unit-norm class embeddings `[C, embed_dim]` with their names.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings<T: Float> {
    pub e: Tensor<T>,
    pub names: Vec<String>,
}

impl<T: Float> ClassEmbeddings<T> {
    /// Normalizes the rows of `e`.
    pub fn new(e: Tensor<T>, names: Vec<String>) -> Result<Self> {
        let s = e.shape().to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::usage(format!(
                "class bank must be a non-empty [C, D] matrix, got {s:?}"
            )));
        }
        if names.len() != s[0] {
            return Err(Error::usage(format!(
                "{} class names for {} embeddings",
                names.len(),
                s[0]
            )));
        }
        let d = s[1];
        let mut data = e.into_data();
        for row in data.chunks_mut(d.max(1)) {
            normalize(row);
        }
        Ok(ClassEmbeddings {
            e: Tensor::new(s, data)?,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.e.shape()[1]
    }

    /// Same bank with rows reordered so that new row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.e.numel());
        for &i in order {
            data.extend_from_slice(&self.e.data()[i * d..(i + 1) * d]);
        }
        Ok(ClassEmbeddings {
            e: Tensor::new([order.len(), d], data)?,
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
        })
    }
}

fn normalize<T: Float>(row: &mut [T]) {
    let norm = row
        .iter()
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
        .max(NORM_EPS);
    row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() / norm));
}

/// Normalize each template embedding, average, normalize again.
pub fn prompt_ensemble<T: Float>(per_template: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = per_template
        .first()
        .ok_or_else(|| Error::usage("prompt ensemble needs at least one template"))?;
    let d = first.numel();
    let mut acc = vec![0.0f64; d];
    for t in per_template {
        if t.numel() != d {
            return Err(Error::dim(format!(
                "template embeddings differ in size: {} vs {d}",
                t.numel()
            )));
        }
        let mut row = t.to_f64_vec();
        normalize(&mut row);
        acc.iter_mut().zip(&row).for_each(|(a, v)| *a += v);
    }
    let k = per_template.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    normalize(&mut acc);
    Tensor::from_f64(first.shape().to_vec(), &acc)
}

/// Learnable recognition state: temperature and no-object embedding.
#[derive(Clone, Debug)]
pub struct Recognizer<T: Float> {
    /// Scalar, clamped to [`LOGIT_SCALE_RANGE`] when used.
    pub logit_scale: Tensor<T>,
    /// `[embed_dim]`.
    pub no_object: Tensor<T>,
}

impl<T: Float> Recognizer<T> {
    pub fn new(embed_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Recognizer {
            logit_scale: Tensor::scalar(T::from_f64(LOGIT_SCALE_INIT)).with_requires_grad(true),
            no_object: Tensor::randn([embed_dim], crate::nn::INIT_STD, rng).with_requires_grad(true),
        }
    }

    pub fn scale_value(&self) -> f64 {
        let (lo, hi) = LOGIT_SCALE_RANGE;
        self.logit_scale.item().as_f64().clamp(lo, hi)
    }

    /// Class logits `[C(+1), N]` for final shadow tokens `[N, width]`. In
    /// training mode the normalized no-object embedding forms the last row.
    pub fn recognize<'t>(
        &self,
        tape: &'t Tape<T>,
        backbone: &Backbone<T>,
        final_sls: Var<'t, T>,
        bank: &ClassEmbeddings<T>,
        train_mode: bool,
    ) -> Result<Var<'t, T>> {
        if bank.is_empty() {
            return Err(Error::usage("class bank is empty"));
        }
        let s = backbone.project_embed(tape, final_sls)?.l2_normalize(NORM_EPS);
        let mut e = tape.constant(bank.e.clone());
        if train_mode {
            let d = bank.dim();
            let no_obj = tape.leaf(&self.no_object).reshape([1, d])?.l2_normalize(NORM_EPS);
            e = Var::concat(&[e, no_obj], 0)?;
        }
        let (lo, hi) = LOGIT_SCALE_RANGE;
        let scale = tape.leaf(&self.logit_scale).clamp(lo, hi);
        e.matmul_t(s)?.scale_by(scale)
    }
}

impl<T: Float> Module<T> for Recognizer<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "logit_scale"), &self.logit_scale);
        f(&join(prefix, "no_object"), &self.no_object);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "logit_scale"), &mut self.logit_scale);
        f(&join(prefix, "no_object"), &mut self.no_object);
    }
}

impl<T: Float> Parameters<T> for Recognizer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_named("recognizer", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_named_mut("recognizer", f);
    }
}
