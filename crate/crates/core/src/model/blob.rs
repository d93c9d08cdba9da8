//! Raw weight blob: little-endian f32 values in layer order, each layer
//! contributing weights (OIHW) followed by γ, β, μ, σ when it has batch norm.

use super::{BnParams, LayerParams, ModelError, ModelParams, NetworkSpec, RealTensor};

pub fn read_weight_blob(net: &NetworkSpec, bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let expected = net.param_count() * 4;
    if bytes.len() != expected {
        return Err(ModelError::BlobSizeMismatch { expected, actual: bytes.len() });
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, spec) in net.layers.iter().enumerate() {
        let weights = match spec.weight_shape() {
            Some(shape) => {
                let data = take(shape.iter().product());
                Some(RealTensor::new(shape.to_vec(), data)?)
            }
            None => None,
        };
        let bn = spec.has_bn.then(|| {
            let c = spec.out_channels;
            BnParams { gamma: take(c), beta: take(c), mean: take(c), sigma: take(c) }
        });
        let p = LayerParams { weights, bn };
        if p.weights.as_ref().is_some_and(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        layers.push(p);
    }
    Ok(ModelParams { layers })
}

pub fn write_weight_blob(net: &NetworkSpec, params: &ModelParams) -> Result<Vec<u8>, ModelError> {
    params.check(net)?;
    let mut out = Vec::with_capacity(net.param_count() * 4);
    let mut put = |vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    for p in &params.layers {
        if let Some(w) = &p.weights {
            put(&w.data);
        }
        if let Some(bn) = &p.bn {
            put(&bn.gamma);
            put(&bn.beta);
            put(&bn.mean);
            put(&bn.sigma);
        }
    }
    Ok(out)
}
