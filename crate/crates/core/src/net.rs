//! Small layer helpers shared by the prior codecs and the segmenter.

use jmpe_nn::{ConvGeom, Graph, ParamId, ParamSet, Real, Var};
use rand::Rng;

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Act {
    Linear,
    Leaky,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    /// Registers a same-padded (or strided) convolution in `params`.
    pub fn new<S: Real, R: Rng>(
        params: &mut ParamSet<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let pad = if stride == 1 { kernel / 2 } else { 0 };
        let geom = ConvGeom::new(in_ch, out_ch, kernel, stride, pad);
        let (w, b) = params.add_conv(name, &geom, rng);
        Self { w, b, geom }
    }

    pub fn apply<S: Real>(&self, g: &mut Graph<'_, S>, x: Var) -> Var {
        g.conv(x, self.w, Some(self.b), self.geom)
    }
}

pub(crate) fn activate<S: Real>(g: &mut Graph<'_, S>, x: Var, act: Act) -> Var {
    match act {
        Act::Linear => x,
        Act::Leaky => g.leaky_relu(x, LEAKY_SLOPE),
        Act::Relu => g.relu(x),
        Act::Sigmoid => g.sigmoid(x),
    }
}

/// A plain feed-forward stack: convolutions with activations, and nearest
/// ×2 upsampling.
#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv(Conv, Act),
    Up,
}

pub(crate) fn run_stack<S: Real>(g: &mut Graph<'_, S>, mut x: Var, layers: &[Layer]) -> Var {
    for l in layers {
        x = match l {
            Layer::Conv(c, act) => {
                let y = c.apply(g, x);
                activate(g, y, *act)
            }
            Layer::Up => g.upsample2(x),
        };
    }
    x
}
