use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};

/// `x @ w (+ b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.linear_weight(format!("{name}.w"), group, fan_in, fan_out, rng);
        let b = bias.then(|| store.bias(format!("{name}.b"), group, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), group, input, hidden, true, rng),
            second: Linear::new(store, &format!("{name}.1"), group, hidden, output, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }
}
