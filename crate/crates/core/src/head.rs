//! Fusion head: global-average-pool each branch, map each through its own
//! two-layer FC head to a scalar logit, and sum the logits into the score.

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::{Graph, Init, ParamStore, Var};
use crate::tensor::Scalar;

pub const HEAD_HIDDEN: usize = 64;

#[derive(Clone, Debug)]
struct BranchHead {
    fc1: Linear,
    fc2: Linear,
}

impl BranchHead {
    /// The output layer starts at zero so both branches begin as constants.
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, width: usize) -> Self {
        let fc1 = Linear::new(store, init, &format!("{name}.fc1"), width, HEAD_HIDDEN);
        let fc2 = Linear::new(store, init, &format!("{name}.fc2"), HEAD_HIDDEN, 1);
        store.get_mut(fc2.weight).value.data_mut().fill(T::zero());
        Self { fc1, fc2 }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var> {
        let b = g.shape(pooled)[0];
        let h = self.fc1.forward(g, store, pooled)?;
        let h = g.relu(h);
        let out = self.fc2.forward(g, store, h)?;
        g.reshape(out, &[b])
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    conv: BranchHead,
    atten: Option<BranchHead>,
}

/// Graph handles of one head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub q: Var,
    pub conv_logit: Var,
    /// `None` when the model runs without the attention branch.
    pub atten_logit: Option<Var>,
    pub conv_pooled: Var,
    pub atten_pooled: Option<Var>,
    /// Pooled conv features concatenated with pooled attention features.
    pub latent: Var,
}

impl Head {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        conv_width: usize,
        atten_width: Option<usize>,
    ) -> Self {
        Self {
            conv: BranchHead::new(store, init, "head.conv", conv_width),
            atten: atten_width.map(|w| BranchHead::new(store, init, "head.atten", w)),
        }
    }

    /// `f4` is `(b, c4, m, n)`; `fhat` is `(b, d, m, n)` when the attention branch exists.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f4: Var,
        fhat: Option<Var>,
    ) -> Result<HeadVars> {
        let (b, _, m, n) = g.value(f4).dims4("head_forward")?;
        let conv_pooled = g.global_avg_pool(f4)?;
        let conv_logit = self.conv.forward(g, store, conv_pooled)?;
        match (fhat, &self.atten) {
            (Some(fhat), Some(atten)) => {
                let (bb, _, mm, nn) = g.value(fhat).dims4("head_forward")?;
                if (bb, mm, nn) != (b, m, n) {
                    return Err(Error::shape(
                        "head_forward",
                        format!(
                            "conv branch batch {b} grid {m}x{n} vs attention branch batch {bb} grid {mm}x{nn} (axes 0, 2, 3)"
                        ),
                    ));
                }
                let atten_pooled = g.global_avg_pool(fhat)?;
                let atten_logit = atten.forward(g, store, atten_pooled)?;
                let q = g.add(conv_logit, atten_logit)?;
                let latent = g.concat(&[conv_pooled, atten_pooled], 1)?;
                Ok(HeadVars {
                    q,
                    conv_logit,
                    atten_logit: Some(atten_logit),
                    conv_pooled,
                    atten_pooled: Some(atten_pooled),
                    latent,
                })
            }
            (None, None) => Ok(HeadVars {
                q: conv_logit,
                conv_logit,
                atten_logit: None,
                conv_pooled,
                atten_pooled: None,
                latent: conv_pooled,
            }),
            _ => Err(Error::Invalid(
                "attention features supplied to a head without an attention branch (or missing)".into(),
            )),
        }
    }
}
