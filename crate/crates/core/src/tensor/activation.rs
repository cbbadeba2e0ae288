use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;
use crate::scalar::Scalar;

/// Elementwise nonlinearities.
///
/// Text form (configs, checkpoints): `identity`, `relu`, `elu`, `tanh`,
/// `sigmoid`, `leaky_relu` (slope 0.01) or `leaky_relu:<slope>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE)
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<T: Scalar>(&self, x: T) -> T {
        match *self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(slope)
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// dy/dx given input `x` and output `y`.
    pub fn derivative<T: Scalar>(&self, x: T, y: T) -> T {
        match *self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(slope)
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let act = match (kind, arg) {
            ("identity", None) => Activation::Identity,
            ("relu", None) => Activation::Relu,
            ("elu", None) => Activation::Elu,
            ("tanh", None) => Activation::Tanh,
            ("sigmoid", None) => Activation::Sigmoid,
            ("leaky_relu", None) => Activation::leaky_relu(),
            ("leaky_relu", Some(a)) => {
                let slope: f64 = a
                    .parse()
                    .map_err(|_| Error::Config(format!("bad leaky_relu slope `{a}`")))?;
                Activation::LeakyRelu(slope)
            }
            _ => return Err(Error::Config(format!("unknown activation `{s}`"))),
        };
        Ok(act)
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points_and_reference_values() {
        assert_eq!(Activation::Elu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::LeakyRelu(0.2).apply(-1.0f64), -0.2);
        let elu_neg1 = (-1.0f64).exp() - 1.0;
        assert!((Activation::Elu.apply(-1.0f64) - elu_neg1).abs() < 1e-15);
        assert!((elu_neg1 - (-0.6321)).abs() < 1e-4);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0f64), 0.0);
    }

    #[test]
    fn parses_text_forms() {
        assert_eq!("elu".parse::<Activation>().unwrap(), Activation::Elu);
        assert_eq!("leaky_relu".parse::<Activation>().unwrap(), Activation::LeakyRelu(0.01));
        assert_eq!(
            "leaky_relu:0.2".parse::<Activation>().unwrap(),
            Activation::LeakyRelu(0.2)
        );
        assert!(matches!("swish".parse::<Activation>(), Err(Error::Config(_))));
        let round: Activation =
            serde_json::from_str(&serde_json::to_string(&Activation::LeakyRelu(0.2)).unwrap()).unwrap();
        assert_eq!(round, Activation::LeakyRelu(0.2));
    }
}
