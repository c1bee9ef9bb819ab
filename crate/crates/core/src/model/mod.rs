//! The variational recurrent driver model: a convolutional birdview encoder,
//! a two-layer gated recurrent core, a Gaussian posterior over the latent
//! `z`, and a deterministic action decoder, with the evidence-lower-bound
//! objective used for training.

mod checkpoint;
mod elbo;
mod net;

pub use checkpoint::{checkpoint_bytes, fnv1a, load_checkpoint, save_checkpoint, CheckpointError};
pub use elbo::{elbo_step, gaussian_log_density, kl_gaussian, prior_sample, ElboStep};
pub use net::{decode_action, encode_birdview, posterior, recurrent_update, HiddenState};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::kinematics::KinematicMode;
use crate::rng::stream_rng;
use rand::RngExt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("birdview resolution {got} does not match configured {want}")]
    ResolutionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Architecture and likelihood hyperparameters.
///
/// The encoder is a fixed family: one stride-4 4x4 conv, then stride-2 3x3
/// convs until the spatial size reaches 4, then a linear head to
/// `feature_dim`. `encoder_channels` gives the per-conv output channels, so
/// the birdview resolution must equal `16 * 2^(len-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModelConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub birdview_resolution: usize,
    pub encoder_channels: Vec<usize>,
    pub feature_dim: usize,
    /// Fixed diagonal std of the state likelihood, shared by all four state
    /// dimensions.
    pub obs_sigma: f64,
    pub kinematic_mode: KinematicMode,
}

impl AgentModelConfig {
    /// Full-scale configuration: 256 px birdviews, 64-dim hidden state,
    /// 2-dim latent.
    pub fn full() -> Self {
        AgentModelConfig {
            hidden_dim: 64,
            latent_dim: 2,
            birdview_resolution: 256,
            encoder_channels: vec![16, 32, 64, 64, 64],
            feature_dim: 64,
            obs_sigma: 0.05,
            kinematic_mode: KinematicMode::Bicycle,
        }
    }

    /// Desk-scale configuration: 64 px birdviews, smaller encoder.
    pub fn toy() -> Self {
        AgentModelConfig {
            hidden_dim: 64,
            latent_dim: 2,
            birdview_resolution: 64,
            encoder_channels: vec![8, 16, 32],
            feature_dim: 64,
            obs_sigma: 0.05,
            kinematic_mode: KinematicMode::Bicycle,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.kinematic_mode.action_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.feature_dim == 0 {
            return Err(ModelError::BadConfig("dimensions must be positive".into()));
        }
        if !(self.obs_sigma > 0.0) {
            return Err(ModelError::BadConfig(format!(
                "obs_sigma must be positive, got {}",
                self.obs_sigma
            )));
        }
        if self.encoder_channels.is_empty() {
            return Err(ModelError::BadConfig("encoder_channels is empty".into()));
        }
        let want = 16usize << (self.encoder_channels.len() - 1);
        if self.birdview_resolution != want {
            return Err(ModelError::BadConfig(format!(
                "{} encoder stages require a {want} px birdview, got {} px",
                self.encoder_channels.len(),
                self.birdview_resolution
            )));
        }
        Ok(())
    }

    /// Flattened size of the final conv activation (always 4x4 spatial).
    fn encoder_flat_dim(&self) -> usize {
        self.encoder_channels.last().unwrap() * 16
    }

    /// GRU input size: birdview feature ++ latent ++ executed action.
    fn gru_input_dim(&self) -> usize {
        self.feature_dim + self.latent_dim + self.action_dim()
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.1.shape(), tensor.shape(), "shape change for {name}");
        slot.1 = tensor;
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        ParamSet { entries }
    }
}

/// Model = config + parameters.
#[derive(Debug, Clone)]
pub struct AgentModel<T: Scalar> {
    pub config: AgentModelConfig,
    pub params: ParamSet<T>,
}

/// Parameters registered on a tape (as leaves when recording), in the same
/// order as the owning [`ParamSet`].
pub struct TapedParams<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> TapedParams<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Swaps one parameter tensor, used by gradient-verification harnesses to
    /// splice tape-sliced parameters into a forward pass.
    pub fn replace_for_check(&mut self, index: usize, tensor: Tensor<T>) {
        assert_eq!(self.tensors[index].shape(), tensor.shape());
        self.tensors[index] = tensor;
    }
}

impl<T: Scalar> AgentModel<T> {
    /// Fresh model with seeded uniform initialization, scaled by fan-in. The
    /// decoder output layer starts at zero so an untrained model coasts.
    pub fn init(config: AgentModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream_rng(seed, &[0x6d6f64656c]);
        let mut entries: Vec<(String, Tensor<T>)> = Vec::new();

        let weight =
            |name: String, shape: Vec<usize>, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                (name, Tensor::<T>::from_f64_slice(shape, &data))
            };
        let zero = |name: String, shape: Vec<usize>| (name, Tensor::<T>::zeros(shape));

        // encoder convs
        let mut c_in = 3usize;
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            let k = if i == 0 { 4 } else { 3 };
            entries.push(weight(
                format!("enc.conv{i}.w"),
                vec![c_out, c_in, k, k],
                c_in * k * k,
                &mut rng,
            ));
            entries.push(zero(format!("enc.conv{i}.b"), vec![c_out]));
            c_in = c_out;
        }
        let flat = config.encoder_flat_dim();
        entries.push(weight(
            "enc.fc.w".into(),
            vec![flat, config.feature_dim],
            flat,
            &mut rng,
        ));
        entries.push(zero("enc.fc.b".into(), vec![1, config.feature_dim]));

        // two GRU layers
        let h = config.hidden_dim;
        for layer in 0..2 {
            let in_dim = if layer == 0 {
                config.gru_input_dim()
            } else {
                h
            };
            for gate in ["r", "u", "c"] {
                entries.push(weight(
                    format!("gru{layer}.w_{gate}"),
                    vec![in_dim, h],
                    in_dim,
                    &mut rng,
                ));
                entries.push(weight(
                    format!("gru{layer}.u_{gate}"),
                    vec![h, h],
                    h,
                    &mut rng,
                ));
                entries.push(zero(format!("gru{layer}.b_{gate}"), vec![1, h]));
            }
        }

        // posterior: action ++ feature ++ hidden -> 2 * latent
        let post_in = config.action_dim() + config.feature_dim + h;
        entries.push(weight(
            "post.fc.w".into(),
            vec![post_in, h],
            post_in,
            &mut rng,
        ));
        entries.push(zero("post.fc.b".into(), vec![1, h]));
        entries.push(weight(
            "post.out.w".into(),
            vec![h, 2 * config.latent_dim],
            h,
            &mut rng,
        ));
        entries.push(zero("post.out.b".into(), vec![1, 2 * config.latent_dim]));

        // decoder: feature ++ latent ++ hidden -> action
        let dec_in = config.feature_dim + config.latent_dim + h;
        entries.push(weight("dec.fc.w".into(), vec![dec_in, h], dec_in, &mut rng));
        entries.push(zero("dec.fc.b".into(), vec![1, h]));
        entries.push(zero("dec.out.w".into(), vec![h, config.action_dim()]));
        entries.push(zero("dec.out.b".into(), vec![1, config.action_dim()]));

        Ok(AgentModel {
            config,
            params: ParamSet { entries },
        })
    }

    /// Registers every parameter on the tape; leaves when recording, plain
    /// constants on an inference tape.
    pub fn taped_params(&self, tape: &mut Tape<T>) -> TapedParams<T> {
        TapedParams {
            names: self.params.entries.iter().map(|(n, _)| n.clone()).collect(),
            tensors: self
                .params
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t))
                .collect(),
        }
    }

    /// Fresh hidden state (zeros) for one agent.
    pub fn initial_hidden(&self) -> HiddenState<T> {
        HiddenState {
            layers: vec![
                Tensor::zeros(vec![1, self.config.hidden_dim]),
                Tensor::zeros(vec![1, self.config.hidden_dim]),
            ],
        }
    }

    /// Applies a parameter update produced by an optimizer, in entry order.
    pub fn apply_updates(&mut self, updated: Vec<Tensor<T>>) {
        assert_eq!(updated.len(), self.params.entries.len());
        for ((_, slot), new) in self.params.entries.iter_mut().zip(updated) {
            assert_eq!(slot.shape(), new.shape());
            *slot = new;
        }
    }

    pub fn cast<U: Scalar>(&self) -> AgentModel<U> {
        AgentModel {
            config: self.config.clone(),
            params: ParamSet {
                entries: self
                    .params
                    .entries
                    .iter()
                    .map(|(n, t)| (n.clone(), t.cast::<U>()))
                    .collect(),
            },
        }
    }
}

/// Diagonal Gaussian parameters (std strictly positive by parameterization).
#[derive(Debug, Clone)]
pub struct GaussianParams<T: Scalar> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}
