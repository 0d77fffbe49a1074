//! Architecture sizes and the named parameter tensors of the full network.
//!
//! [`Tensors`] is generic over the slot type so the same layout holds
//! parameter values (`Tensors<Matrix>`), tape variables (`Tensors<Var>`),
//! gradients, and optimizer moments.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{seeded_init, InitScheme, Matrix};

/// Multiplier on the uniform-scaled weight draws in [`Params::init`].
pub const INIT_GAIN: f64 = 1.7;

/// Layer widths. `d_in` is fixed by the data; the rest are free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: usize,
    pub embed: usize,
    pub shared_hidden: usize,
    pub aligned: usize,
    pub latent: usize,
    pub classifier_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 64,
            embed: 64,
            shared_hidden: 64,
            aligned: 64,
            latent: 16,
            classifier_hidden: 64,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("shared_hidden", self.shared_hidden),
            ("aligned", self.aligned),
            ("latent", self.latent),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

/// `Dense -> max(0, .) -> Dense`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perceptron<T> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower<T> {
    /// `d_in -> hidden -> embed`
    pub encoder: Perceptron<T>,
    /// `embed -> shared_hidden -> aligned`
    pub shared: Perceptron<T>,
    /// `aligned -> latent`
    pub mean: Dense<T>,
    /// `aligned -> latent`
    pub logvar: Dense<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensors<T> {
    pub image: Tower<T>,
    pub text: Tower<T>,
    /// `aligned^2 -> aligned`, applied to the flattened interaction matrix.
    pub fusion: Dense<T>,
    /// `2 * aligned -> aligned`, replaces fusion when it is ablated.
    pub concat: Dense<T>,
    /// `3 -> 3 -> 3` excitation for the modality gates.
    pub gate: Perceptron<T>,
    /// `3 * aligned -> classifier_hidden -> 2`
    pub classifier: Perceptron<T>,
    /// `1 x 1` log temperature.
    pub log_tau: T,
}

pub type Params = Tensors<Matrix>;
pub type ParamVars = Tensors<Var>;

impl<T> Dense<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Dense<U> {
        Dense {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Perceptron<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Perceptron<U> {
        Perceptron {
            hidden: self.hidden.map(&format!("{prefix}.hidden"), f),
            output: self.output.map(&format!("{prefix}.output"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.output.visit_mut(&format!("{prefix}.output"), f);
    }

    fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.hidden.slots_mut(out);
        self.output.slots_mut(out);
    }
}

impl<T> Tower<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Tower<U> {
        Tower {
            encoder: self.encoder.map(&format!("{prefix}.encoder"), f),
            shared: self.shared.map(&format!("{prefix}.shared"), f),
            mean: self.mean.map(&format!("{prefix}.posterior.mean"), f),
            logvar: self.logvar.map(&format!("{prefix}.posterior.logvar"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        self.shared.visit_mut(&format!("{prefix}.shared"), f);
        self.mean.visit_mut(&format!("{prefix}.posterior.mean"), f);
        self.logvar.visit_mut(&format!("{prefix}.posterior.logvar"), f);
    }

    fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.encoder.slots_mut(out);
        self.shared.slots_mut(out);
        self.mean.slots_mut(out);
        self.logvar.slots_mut(out);
    }
}

impl<T> Tensors<T> {
    /// Maps every slot in a fixed order, passing its dotted name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Tensors<U> {
        let f = &mut f;
        Tensors {
            image: self.image.map("image", f),
            text: self.text.map("text", f),
            fusion: self.fusion.map("fusion.interaction", f),
            concat: self.concat.map("fusion.concat", f),
            gate: self.gate.map("gate", f),
            classifier: self.classifier.map("classifier", f),
            log_tau: f("log_tau", &self.log_tau),
        }
    }

    /// Visits every slot mutably in the same order as [`Tensors::map`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let f = &mut f;
        self.image.visit_mut("image", f);
        self.text.visit_mut("text", f);
        self.fusion.visit_mut("fusion.interaction", f);
        self.concat.visit_mut("fusion.concat", f);
        self.gate.visit_mut("gate", f);
        self.classifier.visit_mut("classifier", f);
        f("log_tau", &mut self.log_tau);
    }

    /// Mutable references to every slot, in canonical order.
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.image.slots_mut(&mut out);
        self.text.slots_mut(&mut out);
        self.fusion.slots_mut(&mut out);
        self.concat.slots_mut(&mut out);
        self.gate.slots_mut(&mut out);
        self.classifier.slots_mut(&mut out);
        out.push(&mut self.log_tau);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }

    pub fn tower(&self, modality: Modality) -> &Tower<T> {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }
}

impl<T: Clone> Tensors<T> {
    /// Slots flattened in canonical order.
    pub fn to_vec(&self) -> Vec<(String, T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

impl Params {
    /// Expected shapes for `arch`, as a `Tensors<(rows, cols)>`.
    pub fn shapes(arch: &Architecture) -> Tensors<(usize, usize)> {
        let dense = |i: usize, o: usize| Dense {
            weight: (i, o),
            bias: (1, o),
        };
        let mlp = |i: usize, h: usize, o: usize| Perceptron {
            hidden: dense(i, h),
            output: dense(h, o),
        };
        let tower = || Tower {
            encoder: mlp(arch.d_in, arch.hidden, arch.embed),
            shared: mlp(arch.embed, arch.shared_hidden, arch.aligned),
            mean: dense(arch.aligned, arch.latent),
            logvar: dense(arch.aligned, arch.latent),
        };
        Tensors {
            image: tower(),
            text: tower(),
            fusion: dense(arch.aligned * arch.aligned, arch.aligned),
            concat: dense(2 * arch.aligned, arch.aligned),
            gate: mlp(3, 3, 3),
            classifier: mlp(3 * arch.aligned, arch.classifier_hidden, 2),
            log_tau: (1, 1),
        }
    }

    /// Seeded initialization: weights `INIT_GAIN * U(+-1/sqrt(fan_in))`, biases zero,
    /// temperature `tau_init`. Both modalities' posterior heads draw from
    /// the same stream, so their latent spaces coincide.
    pub fn init(arch: &Architecture, seed: u64, tau_init: f64) -> Self {
        let shapes = Self::shapes(arch);
        let names = shapes.names();
        shapes.map(|name, &(rows, cols)| {
            let tied = name.replacen("text.posterior.", "image.posterior.", 1);
            let index = names.iter().position(|n| *n == tied).expect("canonical name") as u64 + 1;
            if name == "log_tau" {
                Matrix::filled(1, 1, tau_init.ln())
            } else if name.ends_with(".bias") {
                Matrix::zeros(rows, cols)
            } else {
                let stream = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
                seeded_init(rows, cols, InitScheme::UniformScaled, stream).scale(INIT_GAIN)
            }
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    /// Checks every tensor against the shapes implied by `arch`.
    pub fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        let expected = Self::shapes(arch).to_vec();
        for ((name, m), (_, shape)) in self.to_vec().iter().zip(expected) {
            if m.shape() != shape {
                return Err(Error::Compatibility(format!(
                    "tensor {name} has shape {:?}, architecture expects {shape:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.map(|_, m| ok &= m.is_finite());
        ok
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.map(|_, m| n += m.len());
        n
    }

    /// Registers every tensor as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        self.map(|_, m| tape.leaf(m.clone()))
    }

    /// Rebuilds a parameter set from `(name, tensor)` pairs in any order.
    pub fn from_named(arch: &Architecture, mut named: Vec<(String, Matrix)>) -> Result<Self> {
        let shapes = Self::shapes(arch);
        let expected = shapes.names();
        if named.len() != expected.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut missing = None;
        let params = shapes.map(|name, &(rows, cols)| {
            match named.iter().position(|(n, _)| n == name) {
                Some(i) => named.swap_remove(i).1,
                None => {
                    missing.get_or_insert_with(|| name.to_string());
                    Matrix::zeros(rows, cols)
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::Compatibility(format!("missing parameter tensor {name}")));
        }
        params.check_shapes(arch)?;
        Ok(params)
    }
}

impl ParamVars {
    /// Collects the gradient of every parameter from a finished backward pass.
    pub fn gradients(&self, grads: &crate::autodiff::Gradients) -> Params {
        self.map(|_, &v| grads.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let arch = Architecture::default();
        let names = Params::shapes(&arch).names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "image.encoder.hidden.weight");
        assert_eq!(names.last().unwrap(), "log_tau");
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let arch = Architecture::default();
        let a = Params::init(&arch, 7, 0.07);
        let b = Params::init(&arch, 7, 0.07);
        assert_eq!(a, b);
        assert_ne!(a, Params::init(&arch, 8, 0.07));
        a.check_shapes(&arch).unwrap();
        assert!((a.log_tau.as_slice()[0].exp() - 0.07).abs() < 1e-15);
        assert_ne!(a.image.encoder.hidden.weight, a.text.encoder.hidden.weight);
        assert_eq!(a.image.mean, a.text.mean);
        assert_eq!(a.image.logvar, a.text.logvar);
        let bound = INIT_GAIN / (arch.d_in as f64).sqrt();
        assert!(a.image.encoder.hidden.weight.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn from_named_round_trips_and_rejects_mismatch() {
        let arch = Architecture {
            d_in: 4,
            hidden: 5,
            embed: 6,
            shared_hidden: 3,
            aligned: 2,
            latent: 2,
            classifier_hidden: 3,
        };
        let p = Params::init(&arch, 1, 0.07);
        let mut named = p.to_vec();
        named.reverse();
        assert_eq!(Params::from_named(&arch, named.clone()).unwrap(), p);
        let other = Architecture { aligned: 3, ..arch };
        assert!(matches!(
            Params::from_named(&other, named.clone()),
            Err(Error::Compatibility(_))
        ));
        named.pop();
        assert!(Params::from_named(&arch, named).is_err());
    }
}
