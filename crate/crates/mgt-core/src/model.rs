//! The full pre-trainable model: input projection, transformer encoder, a
//! shallow transformer decoder for feature reconstruction, an MLP decoder
//! for structure contrast, and the shared learnable mask token.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::INIT_STD;
use crate::nn::{
    default_heads, encoder_forward, read_checkpoint, write_checkpoint, Mode, ParamId, ParamSet,
    Scalar, Tape, TransformerLayerParams, Var,
};
use crate::pretrain::PretrainConfig;
use crate::rng::stream;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &PretrainConfig, feat_dim: usize) -> Result<Self> {
        let heads = cfg.num_heads.unwrap_or_else(|| default_heads(cfg.hidden_size));
        if cfg.hidden_size == 0 || !cfg.hidden_size.is_multiple_of(heads) {
            return Err(Error::InvalidParameter(format!(
                "hidden size {} not divisible by {heads} heads",
                cfg.hidden_size
            )));
        }
        Ok(ModelDims {
            feat_dim,
            hidden: cfg.hidden_size,
            encoder_layers: cfg.num_layers,
            decoder_layers: cfg.decoder_layers,
            heads,
        })
    }
}

/// Task head attached by fine-tuning; recorded in the checkpoint meta.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct HeadMeta {
    pub kind: String,
    pub num_classes: usize,
}

/// JSON blob embedded in every checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config: PretrainConfig,
    pub feat_dim: usize,
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadMeta>,
}

pub struct FeatDecoder {
    pub layers: Vec<TransformerLayerParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub struct StructDecoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub struct Model<F: Scalar> {
    pub dims: ModelDims,
    pub params: ParamSet<F>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub encoder: Vec<TransformerLayerParams>,
    pub mask_token: ParamId,
    pub feat_decoder: Option<FeatDecoder>,
    pub struct_decoder: Option<StructDecoder>,
}

impl<F: Scalar> Model<F> {
    /// Fresh model with both decoders; initialization draws come from the
    /// "init" stream of `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = stream(seed, "init");
        Self::build(dims, true, true, &mut rng)
    }

    fn build(
        dims: ModelDims,
        with_feat_decoder: bool,
        with_struct_decoder: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut ps = ParamSet::new();
        let proj_w = ps.add_normal("proj.weight", dims.feat_dim, dims.hidden, INIT_STD, rng);
        let proj_b = ps.add_zeros("proj.bias", 1, dims.hidden);
        let encoder = TransformerLayerParams::init_stack(
            &mut ps,
            "encoder",
            dims.encoder_layers,
            dims.hidden,
            rng,
        );
        let mask_token = ps.add_normal("mask_token", 1, dims.hidden, INIT_STD, rng);
        let feat_decoder = with_feat_decoder.then(|| FeatDecoder {
            layers: TransformerLayerParams::init_stack(
                &mut ps,
                "decoder_feat",
                dims.decoder_layers,
                dims.hidden,
                rng,
            ),
            out_w: ps.add_normal("decoder_feat.out.weight", dims.hidden, dims.feat_dim, INIT_STD, rng),
            out_b: ps.add_zeros("decoder_feat.out.bias", 1, dims.feat_dim),
        });
        let struct_decoder = with_struct_decoder.then(|| StructDecoder {
            w1: ps.add_normal("decoder_struct.w1", dims.hidden, dims.hidden, INIT_STD, rng),
            b1: ps.add_zeros("decoder_struct.b1", 1, dims.hidden),
            w2: ps.add_normal("decoder_struct.w2", dims.hidden, dims.hidden, INIT_STD, rng),
            b2: ps.add_zeros("decoder_struct.b2", 1, dims.hidden),
        });
        Model {
            dims,
            params: ps,
            proj_w,
            proj_b,
            encoder,
            mask_token,
            feat_decoder,
            struct_decoder,
        }
    }

    /// Input embedding `Linear(x) + p` for pre-gathered feature/PE rows.
    pub fn project_input(&self, tape: &mut Tape<F>, x: Var, pe: Var) -> Var {
        let w = tape.param(&self.params, self.proj_w);
        let b = tape.param(&self.params, self.proj_b);
        let projected = tape.matmul(x, w);
        let projected = tape.add_row(projected, b);
        tape.add(projected, pe)
    }

    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        h: Var,
        key_mask: Option<&[bool]>,
        mode: &mut Mode,
    ) -> Result<Var> {
        encoder_forward(
            tape,
            &self.params,
            &self.encoder,
            h,
            key_mask,
            self.dims.heads,
            mode,
        )
    }

    /// Shallow transformer decoder plus output projection back to feature
    /// space. Input is the assembled decoder sequence (already + PE).
    pub fn decode_features(
        &self,
        tape: &mut Tape<F>,
        h: Var,
        key_mask: Option<&[bool]>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let dec = self
            .feat_decoder
            .as_ref()
            .ok_or_else(|| Error::Invalid("checkpoint has no feature decoder".into()))?;
        let h = encoder_forward(
            tape,
            &self.params,
            &dec.layers,
            h,
            key_mask,
            self.dims.heads,
            mode,
        )?;
        let w = tape.param(&self.params, dec.out_w);
        let b = tape.param(&self.params, dec.out_b);
        let out = tape.matmul(h, w);
        Ok(tape.add_row(out, b))
    }

    /// Two-layer MLP applied to embeddings before structure similarities.
    pub fn structure_transform(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        let dec = self
            .struct_decoder
            .as_ref()
            .ok_or_else(|| Error::Invalid("checkpoint has no structure decoder".into()))?;
        let w1 = tape.param(&self.params, dec.w1);
        let b1 = tape.param(&self.params, dec.b1);
        let w2 = tape.param(&self.params, dec.w2);
        let b2 = tape.param(&self.params, dec.b2);
        let x = tape.matmul(h, w1);
        let x = tape.add_row(x, b1);
        let x = tape.relu(x);
        let x = tape.matmul(x, w2);
        Ok(tape.add_row(x, b2))
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let mut rng = stream(0, "init");
        let mut out = Model::<G>::build(
            self.dims.clone(),
            self.feat_decoder.is_some(),
            self.struct_decoder.is_some(),
            &mut rng,
        );
        out.params = self.params.cast();
        out
    }

    /// Copy with both decoders discarded, as fine-tuning and deployment use
    /// the encoder alone.
    pub fn without_decoders(&self) -> Result<Model<F>> {
        let mut rng = stream(0, "init");
        let mut out = Self::build(self.dims.clone(), false, false, &mut rng);
        out.params.load_values_from(&self.params)?;
        Ok(out)
    }
}

impl Model<f32> {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let json = serde_json::to_string_pretty(meta)
            .map_err(|e| Error::Invalid(format!("meta serialization: {e}")))?;
        write_checkpoint(path, &json, &self.params)
    }

    /// Load a checkpoint. Fine-tuned checkpoints may have dropped their
    /// decoders; the corresponding fields come back `None`.
    pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
        let (json, loaded) = read_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&json).map_err(|e| Error::Corrupt {
            path: path.into(),
            msg: format!("bad checkpoint meta: {e}"),
        })?;
        let mut dims = ModelDims::from_config(&meta.config, meta.feat_dim)?;
        dims.heads = meta.heads;
        let with_feat = loaded.id_by_name("decoder_feat.out.weight").is_some();
        let with_struct = loaded.id_by_name("decoder_struct.w1").is_some();
        let mut rng = stream(0, "init");
        let mut model = Model::build(dims, with_feat, with_struct, &mut rng);
        model.params.load_values_from(&loaded)?;
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn desk_dims() -> ModelDims {
        ModelDims {
            feat_dim: 6,
            hidden: 8,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 2,
        }
    }

    fn desk_meta() -> CheckpointMeta {
        let config = PretrainConfig {
            hidden_size: 8,
            num_layers: 2,
            decoder_layers: 1,
            num_heads: Some(2),
            ..PretrainConfig::default()
        };
        CheckpointMeta {
            config,
            feat_dim: 6,
            heads: 2,
            head: None,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::init(desk_dims(), 42);
        let b = Model::<f32>::init(desk_dims(), 42);
        for (ia, ib) in a.params.ids().into_iter().zip(b.params.ids()) {
            assert_eq!(a.params.get(ia).value.data(), b.params.get(ib).value.data());
        }
        let c = Model::<f32>::init(desk_dims(), 43);
        let id = a.params.id_by_name("proj.weight").unwrap();
        assert_ne!(
            a.params.get(id).value.data(),
            c.params.get(id).value.data()
        );
    }

    #[test]
    fn save_load_round_trip() {
        let model = Model::<f32>::init(desk_dims(), 7);
        let f = tempfile::NamedTempFile::new().unwrap();
        model.save(f.path(), &desk_meta()).unwrap();
        let (back, meta) = Model::load(f.path()).unwrap();
        assert_eq!(meta.feat_dim, 6);
        assert!(back.feat_decoder.is_some());
        assert!(back.struct_decoder.is_some());
        for id in model.params.ids() {
            let name = &model.params.get(id).name;
            let bid = back.params.id_by_name(name).unwrap();
            assert_eq!(
                model.params.get(id).value.data(),
                back.params.get(bid).value.data(),
                "mismatch in {name}"
            );
        }
    }

    #[test]
    fn zero_positional_table_reduces_to_linear() {
        let model = Model::<f64>::init(desk_dims(), 3);
        let x = Tensor::<f64>::new(
            4,
            6,
            (0..24).map(|i| ((i as f64) * 0.31).sin()).collect(),
        );
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let zero_pe = tape.leaf(Tensor::zeros(4, 8));
        let embedded = model.project_input(&mut tape, xv, zero_pe);

        let w = &model.params.get(model.proj_w).value;
        let b = &model.params.get(model.proj_b).value;
        let mut linear = x.matmul(w);
        for r in 0..4 {
            for j in 0..8 {
                linear.set(r, j, linear.get(r, j) + b.get(0, j));
            }
        }
        assert_eq!(tape.value(embedded).data(), linear.data());
    }

    #[test]
    fn forward_shapes() {
        let model = Model::<f64>::init(desk_dims(), 3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(5, 6, 0.1));
        let pe = tape.leaf(Tensor::filled(5, 8, 0.05));
        let h0 = model.project_input(&mut tape, x, pe);
        assert_eq!(tape.value(h0).shape(), (5, 8));
        let h = model.encode(&mut tape, h0, None, &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(h).shape(), (5, 8));
        let dec_in = tape.add(h, pe);
        let z = model
            .decode_features(&mut tape, dec_in, None, &mut Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(z).shape(), (5, 6));
        let s = model.structure_transform(&mut tape, h).unwrap();
        assert_eq!(tape.value(s).shape(), (5, 8));
    }
}
