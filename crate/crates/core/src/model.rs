//! The full network: transforms, hyper path, context model and filter,
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::{ContextModel, FactorizedPrior};
use crate::error::{ClicError, Result};
use crate::pqf::PqfNet;
use crate::tensor::{ParamStore, Real};
use crate::transform::{Analysis, ArchConfig, HyperDecoder, HyperEncoder, HyperOutput, Synthesis};

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ArchConfig,
    pub store: ParamStore<T>,
    pub analysis: Analysis,
    pub synthesis: Synthesis,
    pub hyper_encoder: HyperEncoder,
    pub mean_decoder: HyperDecoder,
    pub scale_decoder: HyperDecoder,
    pub latent_decoder: HyperDecoder,
    pub context: ContextModel,
    pub hyper_prior: FactorizedPrior,
    pub pqf: PqfNet,
}

impl<T: Real> Model<T> {
    /// Freshly initialized weights drawn from a seeded generator.
    pub fn new_random(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let analysis = Analysis::new(s, &config, &mut rng)?;
        let synthesis = Synthesis::new(s, &config, &mut rng)?;
        let hyper_encoder = HyperEncoder::new(s, &config, &mut rng);
        let mean_decoder =
            HyperDecoder::new(s, "hyper_dec_mean", HyperOutput::Mean, &config, &mut rng);
        let scale_decoder =
            HyperDecoder::new(s, "hyper_dec_scale", HyperOutput::Scale, &config, &mut rng);
        let latent_decoder = HyperDecoder::new(
            s,
            "hyper_dec_latent",
            HyperOutput::Latent,
            &config,
            &mut rng,
        );
        let context = ContextModel::new(s, &config, &mut rng);
        let hyper_prior = FactorizedPrior::new(s, config.hyper_channels);
        let pqf = PqfNet::new(
            s,
            config.latent_channels,
            config.pqf_hidden,
            config.pqf_candidates,
            &mut rng,
        );
        Ok(Model {
            config,
            store,
            analysis,
            synthesis,
            hyper_encoder,
            mean_decoder,
            scale_decoder,
            latent_decoder,
            context,
            hyper_prior,
            pqf,
        })
    }

    /// Builds the layout for `config` and fills it from `store`, which must
    /// hold exactly the same names and shapes.
    pub fn from_store(config: ArchConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new_random(config, 0)?;
        if store.len() != model.store.len() {
            return Err(ClicError::Weights(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| ClicError::Weights(format!("missing tensor `{name}`")))?;
            let want = model.store.get(id).shape().to_vec();
            let got = store.get(src).shape();
            if want != got {
                return Err(ClicError::Weights(format!(
                    "tensor `{name}` has shape {got:?}, expected {want:?}"
                )));
            }
            model
                .store
                .get_mut(id)
                .values_mut()
                .copy_from_slice(store.get(src).values());
        }
        Ok(model)
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            analysis: self.analysis.clone(),
            synthesis: self.synthesis.clone(),
            hyper_encoder: self.hyper_encoder.clone(),
            mean_decoder: self.mean_decoder.clone(),
            scale_decoder: self.scale_decoder.clone(),
            latent_decoder: self.latent_decoder.clone(),
            context: self.context.clone(),
            hyper_prior: self.hyper_prior.clone(),
            pqf: self.pqf.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }
}
