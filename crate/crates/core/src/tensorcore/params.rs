use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::LayerKind;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
        }
    }
}

/// Names one parameter tensor of a realized network. Orders by
/// `(layer_name, role)`, which is also the pruning tie-break order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub layer_name: String,
    pub role: ParamRole,
}

impl ParamRef {
    pub fn weight(layer: impl Into<String>) -> Self {
        Self {
            layer_name: layer.into(),
            role: ParamRole::Weight,
        }
    }

    pub fn bias(layer: impl Into<String>) -> Self {
        Self {
            layer_name: layer.into(),
            role: ParamRole::Bias,
        }
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer_name, self.role.as_str())
    }
}

impl FromStr for ParamRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, role) = s
            .rsplit_once('.')
            .ok_or_else(|| Error::config(format!("'{s}' is not a <layer>.<role> name")))?;
        let role = match role {
            "weight" => ParamRole::Weight,
            "bias" => ParamRole::Bias,
            other => return Err(Error::config(format!("unknown parameter role '{other}'"))),
        };
        Ok(Self {
            layer_name: layer.to_string(),
            role,
        })
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<ParamRef, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, r: ParamRef, t: Tensor) -> Result<()> {
        if self.entries.contains_key(&r) {
            return Err(Error::config(format!("duplicate parameter {r}")));
        }
        self.entries.insert(r, t);
        Ok(())
    }

    pub fn get(&self, r: &ParamRef) -> Result<&Tensor> {
        self.entries
            .get(r)
            .ok_or_else(|| Error::config(format!("no parameter named {r}")))
    }

    pub fn get_mut(&mut self, r: &ParamRef) -> Result<&mut Tensor> {
        self.entries
            .get_mut(r)
            .ok_or_else(|| Error::config(format!("no parameter named {r}")))
    }

    pub fn contains(&self, r: &ParamRef) -> bool {
        self.entries.contains_key(r)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamRef, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamRef, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn refs(&self) -> impl Iterator<Item = &ParamRef> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)) and zero biases.
/// The stream is derived from `(seed, layer_name)`, so a layer's initial
/// values do not depend on which other layers exist.
pub fn init_layer_params(kind: &LayerKind, layer_name: &str, seed: u64) -> Option<(Tensor, Tensor)> {
    let (wshape, bshape) = kind.param_shapes()?;
    let (fan_in, fan_out) = kind.fans()?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(layer_name));
    let weight = Tensor::from_fn(&wshape, |_| rng.gen_range(-bound..bound));
    Some((weight, Tensor::zeros(&bshape)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_ref_round_trips_through_display() {
        let r = ParamRef::weight("conv1");
        assert_eq!(r.to_string(), "conv1.weight");
        assert_eq!("conv1.weight".parse::<ParamRef>().unwrap(), r);
        assert!("conv1.gamma".parse::<ParamRef>().is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let kind = LayerKind::conv3x3(4, 8);
        let (w, b) = init_layer_params(&kind, "conv2", 7).unwrap();
        let bound = (6.0f64 / (36.0 + 72.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(b.data().iter().all(|&v| v == 0.0));
        let (w2, _) = init_layer_params(&kind, "conv2", 7).unwrap();
        assert_eq!(w, w2);
        let (w3, _) = init_layer_params(&kind, "conv3", 7).unwrap();
        assert_ne!(w, w3);
        assert!(init_layer_params(&LayerKind::Relu, "r", 7).is_none());
    }
}
