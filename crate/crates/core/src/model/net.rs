//! Network forward passes: birdview encoder, posterior, action decoder, and
//! the two-layer gated recurrent core.

use super::{AgentModelConfig, GaussianParams, ModelError, TapedParams};
use crate::autodiff::{Result as AdResult, Scalar, Tape, Tensor};

/// Per-agent recurrent memory: one `[1, hidden]` tensor per layer.
#[derive(Debug, Clone)]
pub struct HiddenState<T: Scalar> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> HiddenState<T> {
    /// The top layer's hidden vector, the conditioning input for the
    /// posterior and decoder heads.
    pub fn top(&self) -> &Tensor<T> {
        self.layers.last().expect("hidden state has layers")
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|t| t.all_finite())
    }
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> AdResult<Tensor<T>> {
    let xw = tape.matmul(x, w)?;
    tape.add(&xw, b)
}

/// Encodes a `[3, H, W]` birdview into a `[1, feature_dim]` vector.
pub fn encode_birdview<T: Scalar>(
    tape: &mut Tape<T>,
    config: &AgentModelConfig,
    params: &TapedParams<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let want = config.birdview_resolution;
    if image.shape() != [3, want, want] {
        let got = image.shape().get(1).copied().unwrap_or(0);
        return Err(ModelError::ResolutionMismatch { got, want });
    }
    let mut x = image.clone();
    for i in 0..config.encoder_channels.len() {
        let w = params.get(&format!("enc.conv{i}.w"));
        let b = params.get(&format!("enc.conv{i}.b"));
        let (stride, padding) = if i == 0 { (4, 0) } else { (2, 1) };
        let conv = tape.conv2d(&x, w, Some(b), stride, padding)?;
        x = tape.relu(&conv)?;
    }
    let flat = tape.reshape(&x, vec![1, x.len()])?;
    Ok(linear(
        tape,
        &flat,
        params.get("enc.fc.w"),
        params.get("enc.fc.b"),
    )?)
}

/// Variational posterior over z given the ground-truth action, the birdview
/// feature, and the recurrent state.
pub fn posterior<T: Scalar>(
    tape: &mut Tape<T>,
    config: &AgentModelConfig,
    params: &TapedParams<T>,
    action_gt: &Tensor<T>,
    b_feat: &Tensor<T>,
    h: &HiddenState<T>,
) -> AdResult<GaussianParams<T>> {
    let joined = tape.concat(&[action_gt, b_feat, h.top()])?;
    let x = tape.reshape(&joined, vec![1, joined.len()])?;
    let hid = linear(tape, &x, params.get("post.fc.w"), params.get("post.fc.b"))?;
    let hid = tape.relu(&hid)?;
    let out = linear(
        tape,
        &hid,
        params.get("post.out.w"),
        params.get("post.out.b"),
    )?;
    let l = config.latent_dim;
    let mean = tape.slice(&out, 0, l)?;
    let raw_std = tape.slice(&out, l, 2 * l)?;
    // softplus keeps std positive; the floor keeps the KL finite
    let sp = tape.softplus(&raw_std)?;
    let std = tape.add(&sp, &Tensor::scalar_f64(1e-6))?;
    Ok(GaussianParams { mean, std })
}

/// Deterministic action head: feature ++ z ++ hidden -> raw action vector
/// `[1, action_dim]`.
pub fn decode_action<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TapedParams<T>,
    b_feat: &Tensor<T>,
    z: &Tensor<T>,
    h: &HiddenState<T>,
) -> AdResult<Tensor<T>> {
    let joined = tape.concat(&[b_feat, z, h.top()])?;
    let x = tape.reshape(&joined, vec![1, joined.len()])?;
    let hid = linear(tape, &x, params.get("dec.fc.w"), params.get("dec.fc.b"))?;
    let hid = tape.relu(&hid)?;
    linear(tape, &hid, params.get("dec.out.w"), params.get("dec.out.b"))
}

/// One gated-recurrent-unit cell:
///
/// ```text
/// r  = sigmoid(x W_r + h U_r + b_r)
/// u  = sigmoid(x W_u + h U_u + b_u)
/// c  = tanh(x W_c + (r * h) U_c + b_c)
/// h' = (1 - u) * h + u * c
/// ```
fn gru_cell<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TapedParams<T>,
    layer: usize,
    x: &Tensor<T>,
    h: &Tensor<T>,
) -> AdResult<Tensor<T>> {
    let gate = |tape: &mut Tape<T>, name: &str, masked_h: &Tensor<T>| -> AdResult<Tensor<T>> {
        let xw = tape.matmul(x, &params.get(&format!("gru{layer}.w_{name}")).clone())?;
        let hu = tape.matmul(
            masked_h,
            &params.get(&format!("gru{layer}.u_{name}")).clone(),
        )?;
        let s = tape.add(&xw, &hu)?;
        tape.add(&s, &params.get(&format!("gru{layer}.b_{name}")).clone())
    };
    let r_pre = gate(tape, "r", h)?;
    let r = tape.sigmoid(&r_pre)?;
    let u_pre = gate(tape, "u", h)?;
    let u = tape.sigmoid(&u_pre)?;
    let rh = tape.mul(&r, h)?;
    let c_pre = gate(tape, "c", &rh)?;
    let c = tape.tanh(&c_pre)?;
    let one_minus_u = tape.sub(&Tensor::scalar(T::ONE), &u)?;
    let keep = tape.mul(&one_minus_u, h)?;
    let write = tape.mul(&u, &c)?;
    tape.add(&keep, &write)
}

/// Two stacked GRU layers; the input is the concatenation of the birdview
/// feature, the sampled z, and the executed action.
pub fn recurrent_update<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TapedParams<T>,
    h: &HiddenState<T>,
    b_feat: &Tensor<T>,
    z: &Tensor<T>,
    action: &Tensor<T>,
) -> AdResult<HiddenState<T>> {
    let joined = tape.concat(&[b_feat, z, action])?;
    let x = tape.reshape(&joined, vec![1, joined.len()])?;
    let h1 = gru_cell(tape, params, 0, &x, &h.layers[0])?;
    let h2 = gru_cell(tape, params, 1, &h1, &h.layers[1])?;
    Ok(HiddenState {
        layers: vec![h1, h2],
    })
}
