use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::network::{LayerSpec, Network, Shape};
use super::policy::PolicyKind;
use super::DynfitError;
use crate::kernels::BitWidth;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained network plus what inference needs from training: per-group
/// bit widths and per-site drop probabilities. Parameters are stored as
/// little-endian f32, so a round trip is exact only to f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Network,
    pub quant: Option<Vec<BitWidth>>,
    pub site_probs: Option<Vec<Vec<f64>>>,
    pub policy: Option<PolicyKind>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    input: Shape,
    layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<BitWidth>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    site_probs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    policy: Option<PolicyKind>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    weights: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    depthwise: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    bias: String,
}

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str, expected: usize, what: &str) -> Result<Vec<f64>, DynfitError> {
    let bytes = STANDARD.decode(s).map_err(|e| DynfitError::Config(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(DynfitError::ShapeMismatch(format!("{what}: expected {expected} values, found {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

impl Model {
    pub fn new(net: Network) -> Self {
        Self { net, quant: None, site_probs: None, policy: None }
    }

    pub fn to_json_string(&self) -> String {
        let f = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            input: self.net.input,
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerRecord { spec: l.spec, weights: encode(&l.weights), depthwise: encode(&l.depthwise), bias: encode(&l.bias) })
                .collect(),
            q: self.quant.clone(),
            site_probs: self.site_probs.clone(),
            policy: self.policy,
        };
        serde_json::to_string_pretty(&f).expect("model serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, DynfitError> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(DynfitError::Config(format!("unsupported model format_version {}", f.format_version)));
        }
        let specs: Vec<LayerSpec> = f.layers.iter().map(|l| l.spec).collect();
        let mut net = Network::new(f.input, &specs)?;
        for (i, (layer, rec)) in net.layers.iter_mut().zip(&f.layers).enumerate() {
            layer.weights = decode(&rec.weights, layer.weights.len(), &format!("layer {i} weights"))?;
            layer.depthwise = decode(&rec.depthwise, layer.depthwise.len(), &format!("layer {i} depthwise"))?;
            layer.bias = decode(&rec.bias, layer.bias.len(), &format!("layer {i} bias"))?;
        }
        if let Some(q) = &f.q {
            let groups = net.neuron_groups().len();
            if q.len() != groups {
                return Err(DynfitError::ShapeMismatch(format!("{} bit widths for {groups} neuron groups", q.len())));
            }
        }
        if let Some(p) = &f.site_probs {
            let sizes = net.site_sizes();
            if p.len() != sizes.len() || p.iter().zip(&sizes).any(|(s, &n)| s.len() != n) {
                return Err(DynfitError::ShapeMismatch("site_probs do not match the network's mask sites".into()));
            }
            if p.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DynfitError::Config("site_probs must lie in [0, 1]".into()));
            }
        }
        Ok(Self { net, quant: f.q, site_probs: f.site_probs, policy: f.policy })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DynfitError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|source| DynfitError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DynfitError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DynfitError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// The network with its stored bit widths applied, if any.
    pub fn effective_network(&self) -> Result<Network, DynfitError> {
        match &self.quant {
            Some(q) => self.net.fake_quantized(q),
            None => Ok(self.net.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynfit::network::Activation;

    fn cnn() -> Network {
        Network::initialized(
            Shape::image(1, 6, 6),
            &[
                LayerSpec::Conv2d { filters: 2, kh: 3, kw: 3, activation: Activation::Relu },
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::DwsConv2d { filters: 3, kh: 2, kw: 2, activation: Activation::Relu },
                LayerSpec::Dense { outputs: 2, activation: Activation::Identity },
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let net = cnn();
        let groups = net.neuron_groups().len();
        let m = Model {
            quant: Some(vec![BitWidth::B8; groups]),
            site_probs: Some(net.site_sizes().iter().map(|&n| vec![0.25; n]).collect()),
            policy: Some(PolicyKind::Taylor),
            net,
        };
        let back = Model::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(back.quant, m.quant);
        assert_eq!(back.site_probs, m.site_probs);
        assert_eq!(back.policy, m.policy);
        for (a, b) in m.net.params().iter().zip(back.net.params()) {
            assert_eq!((*a as f32).to_bits(), (b as f32).to_bits());
        }
        let again = Model::from_json_str(&back.to_json_string()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn rejects_bad_files() {
        let text = Model::new(cnn()).to_json_string();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut wrong = v.clone();
        wrong["format_version"] = 2.into();
        assert!(matches!(Model::from_json_str(&wrong.to_string()), Err(DynfitError::Config(_))));
        let mut short = v.clone();
        short["layers"][0]["bias"] = "AAAAAA==".into();
        assert!(matches!(Model::from_json_str(&short.to_string()), Err(DynfitError::ShapeMismatch(_))));
        let mut probs = v;
        probs["site_probs"] = serde_json::json!([[0.0]]);
        assert!(Model::from_json_str(&probs.to_string()).is_err());
        assert!(matches!(Model::from_json_str("{"), Err(DynfitError::Json(_))));
    }
}
