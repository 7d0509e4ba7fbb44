use super::{Mat, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation z.
    #[inline]
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine + activation layer. `w` is out x in.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Build an MLP with dims [in, h1, ..., out]. Weights ~ N(0, 1/fan_in),
    /// biases zero.
    pub fn init(dims: &[usize], acts: &[Activation], rng: &mut Rng) -> Self {
        assert_eq!(dims.len(), acts.len() + 1);
        let mut layers = Vec::with_capacity(acts.len());
        for (i, &act) in acts.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut w = Mat::zeros(fan_out, fan_in);
            for v in w.data.iter_mut() {
                *v = rng.normal() * scale;
            }
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                act,
            });
        }
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.rows * l.w.cols + l.b.len())
            .sum()
    }

    /// Flat view of all parameters in a fixed order (layer weights row-major,
    /// then biases). Used by Adam and the finite-difference checker.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut i = 0;
        for l in self.layers.iter_mut() {
            let nw = l.w.data.len();
            l.w.data.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        assert_eq!(i, flat.len());
    }
}

/// Gradients with the exact shape of an MlpParams.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub layers: Vec<(Mat, Vec<f64>)>,
}

impl GradBundle {
    pub fn zeros_like(p: &MlpParams) -> Self {
        GradBundle {
            layers: p
                .layers
                .iter()
                .map(|l| (Mat::zeros(l.w.rows, l.w.cols), vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for ((dw, db), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in dw.data.iter_mut().zip(&ow.data) {
                *a += b;
            }
            for (a, b) in db.iter_mut().zip(ob) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (dw, db) in self.layers.iter_mut() {
            for v in dw.data.iter_mut() {
                *v *= c;
            }
            for v in db.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (dw, db) in &self.layers {
            out.extend_from_slice(&dw.data);
            out.extend_from_slice(db);
        }
        out
    }
}

/// Per-layer inputs and pre-activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<Vec<f64>>,
    pub preacts: Vec<Vec<f64>>,
}

pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != p.input_dim() {
        return Err(Error::Shape(format!(
            "mlp_forward: input dim {} != expected {}",
            x.len(),
            p.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(p.layers.len());
    let mut preacts = Vec::with_capacity(p.layers.len());
    let mut cur = x.to_vec();
    for l in &p.layers {
        let mut z = l.w.matvec(&cur);
        for (zi, bi) in z.iter_mut().zip(&l.b) {
            *zi += bi;
        }
        inputs.push(cur);
        let y: Vec<f64> = z.iter().map(|&v| l.act.apply(v)).collect();
        preacts.push(z);
        cur = y;
    }
    Ok((
        cur,
        ForwardCache { inputs, preacts },
    ))
}

/// Exact reverse-mode gradients of the scalar whose upstream derivative at the
/// output is `dy`. Returns (parameter gradients, gradient w.r.t. the input).
pub fn mlp_backward(p: &MlpParams, cache: &ForwardCache, dy: &[f64]) -> Result<(GradBundle, Vec<f64>)> {
    if cache.inputs.len() != p.layers.len() || dy.len() != p.output_dim() {
        return Err(Error::Shape("mlp_backward: cache/upstream shape mismatch".into()));
    }
    let mut grads = GradBundle::zeros_like(p);
    let mut delta = dy.to_vec();
    for (li, l) in p.layers.iter().enumerate().rev() {
        let z = &cache.preacts[li];
        let x = &cache.inputs[li];
        if z.len() != delta.len() || x.len() != l.w.cols {
            return Err(Error::Shape("mlp_backward: stale cache".into()));
        }
        // dL/dz = dL/dy * act'(z)
        let dz: Vec<f64> = delta
            .iter()
            .zip(z)
            .map(|(&d, &zv)| d * l.act.deriv(zv))
            .collect();
        let (dw, db) = &mut grads.layers[li];
        for (r, &dzr) in dz.iter().enumerate() {
            db[r] += dzr;
            let row = dw.row_mut(r);
            for (c, &xc) in x.iter().enumerate() {
                row[c] += dzr * xc;
            }
        }
        // dL/dx = W^T dz
        let mut dx = vec![0.0; l.w.cols];
        for (r, &dzr) in dz.iter().enumerate() {
            let row = l.w.row(r);
            for (c, &wrc) in row.iter().enumerate() {
                dx[c] += wrc * dzr;
            }
        }
        delta = dx;
    }
    Ok((grads, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(w: Vec<Vec<f64>>, b: Vec<f64>) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                w: Mat::from_rows(w),
                b,
                act: Activation::Identity,
            }],
        }
    }

    #[test]
    fn identity_passthrough() {
        let p = identity_layer(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let (y, _) = mlp_forward(&p, &[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        let p = identity_layer(vec![vec![2.0, 0.0], vec![0.0, 3.0]], vec![1.0, 1.0]);
        let (y, _) = mlp_forward(&p, &[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
    }

    #[test]
    fn tanh_of_zero_net() {
        let p = MlpParams {
            layers: vec![Layer {
                w: Mat::zeros(3, 4),
                b: vec![0.0; 3],
                act: Activation::Tanh,
            }],
        };
        let (y, _) = mlp_forward(&p, &[5.0, -2.0, 1.0, 0.3]).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_layer_backward() {
        let p = identity_layer(vec![vec![2.0, 1.0], vec![0.5, -1.0]], vec![0.0, 0.0]);
        let x = [3.0, 4.0];
        let (_, cache) = mlp_forward(&p, &x).unwrap();
        let (g, dx) = mlp_backward(&p, &cache, &[1.0, 0.0]).unwrap();
        let (dw, db) = &g.layers[0];
        assert_eq!(dw.row(0), &[3.0, 4.0]);
        assert_eq!(dw.row(1), &[0.0, 0.0]);
        assert_eq!(db, &vec![1.0, 0.0]);
        assert_eq!(dx, vec![2.0, 1.0]); // W row 0
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(1);
        let p = MlpParams::init(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &mut rng);
        let (_, cache) = mlp_forward(&p, &[0.1, -0.2, 0.3]).unwrap();
        let (g, dx) = mlp_backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_mismatch_is_error() {
        let p = identity_layer(vec![vec![1.0, 0.0]], vec![0.0]);
        assert!(mlp_forward(&p, &[1.0]).is_err());
    }
}
