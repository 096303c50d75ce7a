use rand::Rng;

use crate::{Error, Graph, NodeId, ParamSet, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Widths and nonlinearities of a fully connected stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl LayerSpec {
    pub fn new(input: usize, layers: Vec<(usize, Activation)>) -> Self {
        Self { input, layers }
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.0).unwrap_or(self.input)
    }

    /// Text form used in checkpoint architecture descriptors, e.g.
    /// `1863>64:tanh>64:tanh>1:identity`.
    pub fn descriptor(&self) -> String {
        let mut s = self.input.to_string();
        for (w, a) in &self.layers {
            s.push_str(&format!(">{w}:{}", a.as_str()));
        }
        s
    }

    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed layer descriptor {s:?}"));
        let mut parts = s.split('>');
        let input = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let mut layers = Vec::new();
        for part in parts {
            let (w, a) = part.split_once(':').ok_or_else(bad)?;
            let w = w.parse().map_err(|_| bad())?;
            let a = Activation::parse(a).ok_or_else(bad)?;
            layers.push((w, a));
        }
        Ok(Self { input, layers })
    }

    /// Registers `{prefix}.w{i}` / `{prefix}.b{i}` with Glorot-uniform
    /// weights and zero biases.
    pub fn init_params<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, prefix: &str, rng: &mut R) {
        let mut fan_in = self.input;
        for (i, (w, _)) in self.layers.iter().enumerate() {
            let bound = (6.0 / (fan_in + w) as f64).sqrt();
            params.insert_uniform(format!("{prefix}.w{i}"), &[fan_in, *w], bound, rng);
            params.insert(format!("{prefix}.b{i}"), Tensor::zeros(&[*w]));
            fan_in = *w;
        }
    }
}

/// Records `act(x·W + b)` for every layer of `spec` and returns the output node.
pub fn mlp_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    input: NodeId,
    spec: &LayerSpec,
) -> Result<NodeId> {
    let in_dim = g.value(input).cols();
    if in_dim != spec.input {
        return Err(Error::Config(format!(
            "input width {in_dim} does not match first layer width {}",
            spec.input
        )));
    }
    let mut x = input;
    let mut fan_in = spec.input;
    for (i, (width, act)) in spec.layers.iter().enumerate() {
        let w = g.param(params, &format!("{prefix}.w{i}"))?;
        let b = g.param(params, &format!("{prefix}.b{i}"))?;
        if g.value(w).shape() != [fan_in, *width] || g.value(b).len() != *width {
            return Err(Error::Config(format!(
                "layer {i} of {prefix} has shape {:?}, expected [{fan_in}, {width}]",
                g.value(w).shape()
            )));
        }
        let xw = g.matmul(x, w);
        let z = g.add_row(xw, b);
        x = match act {
            Activation::Identity => z,
            Activation::Tanh => g.tanh(z),
            Activation::Sigmoid => g.sigmoid(z),
        };
        fan_in = *width;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward(params: &ParamSet<f64>, spec: &LayerSpec, x: Vec<f64>) -> Vec<f64> {
        let mut g = Graph::for_params(params);
        let n = x.len();
        let input = g.constant(Tensor::matrix(1, n, x));
        let out = mlp_forward(&mut g, params, "m", input, spec).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = LayerSpec::new(3, vec![(2, Activation::Identity)]);
        let mut p = ParamSet::new();
        p.insert("m.w0", Tensor::zeros(&[3, 2]));
        p.insert("m.b0", Tensor::zeros(&[2]));
        assert_eq!(forward(&p, &spec, vec![1.0, -4.0, 9.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = LayerSpec::new(3, vec![(3, Activation::Identity)]);
        let mut p = ParamSet::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        p.insert("m.w0", Tensor::matrix(3, 3, eye));
        p.insert("m.b0", Tensor::zeros(&[3]));
        assert_eq!(forward(&p, &spec, vec![0.5, -1.25, 7.0]), vec![0.5, -1.25, 7.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_rolled_loops() {
        let spec = LayerSpec::new(4, vec![(5, Activation::Tanh), (2, Activation::Identity)]);
        let mut p = ParamSet::<f64>::new();
        spec.init_params(&mut p, "m", &mut ChaCha8Rng::seed_from_u64(42));
        let x = vec![0.3, -0.7, 1.1, 0.05];
        let got = forward(&p, &spec, x.clone());

        let (w0, b0) = (p.get("m.w0").unwrap().data(), p.get("m.b0").unwrap().data());
        let (w1, b1) = (p.get("m.w1").unwrap().data(), p.get("m.b1").unwrap().data());
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut s = b0[j];
            for i in 0..4 {
                s += x[i] * w0[i * 5 + j];
            }
            h[j] = f64::tanh(s);
        }
        for k in 0..2 {
            let mut s = b1[k];
            for j in 0..5 {
                s += h[j] * w1[j * 2 + k];
            }
            assert!((got[k] - s).abs() < 1e-12, "{} vs {}", got[k], s);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let spec = LayerSpec::new(4, vec![(2, Activation::Tanh)]);
        let mut p = ParamSet::<f64>::new();
        spec.init_params(&mut p, "m", &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::for_params(&p);
        let input = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
        assert!(matches!(mlp_forward(&mut g, &p, "m", input, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn descriptor_round_trips() {
        let spec = LayerSpec::new(10, vec![(64, Activation::Tanh), (1, Activation::Identity)]);
        assert_eq!(LayerSpec::parse_descriptor(&spec.descriptor()).unwrap(), spec);
    }
}
