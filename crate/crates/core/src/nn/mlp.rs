use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{affine_forward, relu, Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Checkpoint header line.
pub const CHECKPOINT_HEADER: &str = "MLPCKPT v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => relu(x),
        }
    }

    fn record(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// A fully connected network. Weights are stored `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Graph handles for an [`Mlp`]'s parameters, in `[w0, b0, w1, b1, ...]` order.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Mlp {
    /// Fan-in scaled uniform init (`Var[w] = 1 / fan_in`), zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Contract(format!(
                "an MLP needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (3.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            weights,
            biases,
        })
    }

    /// Assembles a network from explicit parameters.
    pub fn from_parts(
        hidden: Activation,
        output: Activation,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Contract("need one bias per weight matrix".into()));
        }
        let mut sizes = Vec::with_capacity(weights.len() + 1);
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let [fan_in, fan_out] = w.shape() else {
                return Err(Error::Contract(format!("layer {i} weight is not a matrix")));
            };
            if b.len() != *fan_out {
                return Err(Error::Contract(format!(
                    "layer {i} bias does not match weight"
                )));
            }
            if let Some(&prev) = sizes.last() {
                if prev != *fan_in {
                    return Err(Error::Contract(format!(
                        "layer {i} expects {fan_in} inputs, previous layer gives {prev}"
                    )));
                }
            } else {
                sizes.push(*fan_in);
            }
            sizes.push(*fan_out);
        }
        Ok(Self {
            sizes,
            hidden,
            output,
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Human-readable name of parameter `index` in [`Mlp::params`] order.
    pub fn param_name(index: usize) -> String {
        let kind = if index.is_multiple_of(2) {
            "weight"
        } else {
            "bias"
        };
        format!("layer {} {kind}", index / 2)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Graph-free forward pass over a batch (`[B, in]` or `[in]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in 0..self.weights.len() {
            let act = self.activation(layer);
            h = affine_forward(&h, &self.weights[layer], &self.biases[layer])?;
            if act != Activation::Identity {
                h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(h)
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundMlp { vars }
    }

    /// Records a forward pass on `g` using previously bound parameters.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..self.weights.len() {
            let (w, b) = (bound.vars[2 * layer], bound.vars[2 * layer + 1]);
            h = g.affine(h, w, b)?;
            h = self.activation(layer).record(g, h);
        }
        Ok(h)
    }

    /// Gradients for every parameter, zeros where nothing flowed.
    pub fn collect_grads(&self, grads: &Gradients, bound: &BoundMlp) -> Vec<Tensor> {
        self.params()
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    /// `self ← (1 − tau)·self + tau·source`, parameter by parameter.
    pub fn blend_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if self.sizes != source.sizes {
            return Err(Error::Contract(
                "blend between differently shaped networks".into(),
            ));
        }
        for (dst, src) in self.params_mut().into_iter().zip(source.params()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - tau) * *d + tau * s;
            }
        }
        Ok(())
    }

    /// Largest absolute parameter difference to a same-shaped network.
    pub fn max_param_diff(&self, other: &Mlp) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Writes the `MLPCKPT v1` text format.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        self.write_body(out)
    }

    /// Everything after the header line.
    pub(crate) fn write_body<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        writeln!(out, "{}", sizes.join(" "))?;
        writeln!(out, "{} {}", self.hidden.tag(), self.output.tag())?;
        let mut line = String::new();
        for p in self.params() {
            line.clear();
            for (i, v) in p.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:e}").expect("writing to a String");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut lines = input.lines();
        let header = next_line(&mut lines)?;
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!("bad header `{header}`")));
        }
        Self::read_body(&mut lines)
    }

    pub(crate) fn read_body<I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = std::io::Result<String>>,
    {
        let sizes: Vec<usize> = next_line(lines)?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad layer size `{t}`")))
            })
            .collect::<Result<_>>()?;
        if sizes.len() < 2 {
            return Err(Error::Checkpoint("need at least two layer sizes".into()));
        }
        let tags = next_line(lines)?;
        let tags: Vec<&str> = tags.split_whitespace().collect();
        let [hidden, output] = tags.as_slice() else {
            return Err(Error::Checkpoint(
                "expected `<hidden> <output>` activation tags".into(),
            ));
        };
        let (hidden, output) = (Activation::from_tag(hidden)?, Activation::from_tag(output)?);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            weights.push(Tensor::matrix(
                fan_in,
                fan_out,
                parse_floats(&next_line(lines)?, fan_in * fan_out)?,
            )?);
            biases.push(Tensor::new(
                vec![fan_out],
                parse_floats(&next_line(lines)?, fan_out)?,
            )?);
        }
        Self::from_parts(hidden, output, weights, biases)
    }
}

pub(crate) fn next_line<I>(lines: &mut I) -> Result<String>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    match lines.next() {
        Some(Ok(l)) => Ok(l),
        Some(Err(e)) => Err(Error::Checkpoint(e.to_string())),
        None => Err(Error::Checkpoint("unexpected end of file".into())),
    }
}

pub(crate) fn parse_floats(line: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Checkpoint(format!("bad float `{t}`")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}
