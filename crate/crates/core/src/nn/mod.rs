//! Dense tensors, a reverse-mode tape, fully connected networks and Adam.
//!
//! Everything runs in `f64`. Networks are small; reproducibility and
//! gradient-check fidelity matter more than throughput here.

mod adam;
mod graph;
mod mlp;
mod tensor;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, BoundMlp, Mlp, CHECKPOINT_HEADER};
pub use tensor::Tensor;

pub(crate) use mlp::{next_line, parse_floats};

impl Mlp {
    /// One Adam update of every parameter.
    pub fn apply_adam(&mut self, opt: &mut Adam, grads: &[Tensor]) -> crate::Result<()> {
        opt.step(&mut self.params_mut(), grads)
    }

    pub fn adam(&self, learning_rate: f64) -> Adam {
        Adam::new(&self.params(), learning_rate)
    }
}
