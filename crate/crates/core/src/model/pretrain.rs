//! Initializing speech translation models from pre-trained ASR and MT
//! checkpoints.

use super::checkpoint::Checkpoint;
use super::models::{E2eModel, SateModel};
use crate::error::{Result, SateError};
use crate::nn::ParamStore;

/// Which pre-trained parts to load. All `true` is the full initialization;
/// clearing one flag leaves that part randomly initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainFlags {
    /// Frontend, acoustic encoder and CTC head from the ASR model.
    pub asr_encoder: bool,
    /// Textual encoder from the MT encoder.
    pub mt_encoder: bool,
    /// Decoder from the MT model.
    pub mt_decoder: bool,
}

impl PretrainFlags {
    pub const ALL: PretrainFlags = PretrainFlags {
        asr_encoder: true,
        mt_encoder: true,
        mt_decoder: true,
    };
    pub const NONE: PretrainFlags = PretrainFlags {
        asr_encoder: false,
        mt_encoder: false,
        mt_decoder: false,
    };

    pub fn with_asr(mut self, on: bool) -> Self {
        self.asr_encoder = on;
        self
    }

    pub fn with_mt_encoder(mut self, on: bool) -> Self {
        self.mt_encoder = on;
        self
    }

    pub fn with_mt_decoder(mut self, on: bool) -> Self {
        self.mt_decoder = on;
        self
    }

    pub fn any(self) -> bool {
        self.asr_encoder || self.mt_encoder || self.mt_decoder
    }
}

/// Copies every `store` parameter under `dst_prefix` from the entry named
/// `src_prefix + suffix` in `ckpt`. Returns how many were copied.
pub fn transplant(store: &mut ParamStore, ckpt: &Checkpoint, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.starts_with(dst_prefix))
        .map(|(n, _)| n.to_string())
        .collect();
    if names.is_empty() {
        return Err(SateError::Checkpoint {
            name: dst_prefix.to_string(),
            detail: "model has no parameters under this prefix".into(),
        });
    }
    for name in &names {
        let src = format!("{src_prefix}{}", &name[dst_prefix.len()..]);
        let t = ckpt.get(&src).ok_or_else(|| SateError::Checkpoint {
            name: src.clone(),
            detail: format!("missing from pre-trained checkpoint (needed for {name})"),
        })?;
        store.assign(name, t)?;
    }
    Ok(names.len())
}

fn need<'a>(ckpt: Option<&'a Checkpoint>, what: &str) -> Result<&'a Checkpoint> {
    ckpt.ok_or_else(|| SateError::config(format!("{what} checkpoint required by the pre-training flags")))
}

impl SateModel {
    /// Acoustic side from `asr`, textual encoder, decoder and embedding from
    /// `mt`; the adaptor stays as initialized. The embedding comes from MT
    /// whenever either MT part is loaded.
    pub fn init_from_pretrained(
        &mut self,
        asr: Option<&Checkpoint>,
        mt: Option<&Checkpoint>,
        flags: PretrainFlags,
    ) -> Result<()> {
        if flags.asr_encoder {
            let asr = need(asr, "ASR")?;
            for p in ["frontend.", "acoustic.", "ctc."] {
                transplant(&mut self.store, asr, p, p)?;
            }
        }
        if flags.mt_encoder || flags.mt_decoder {
            let mt = need(mt, "MT")?;
            transplant(&mut self.store, mt, "embed.", "embed.")?;
            if flags.mt_encoder {
                transplant(&mut self.store, mt, "textual.", "textual.")?;
            }
            if flags.mt_decoder {
                transplant(&mut self.store, mt, "decoder.", "decoder.")?;
            }
        }
        Ok(())
    }
}

impl E2eModel {
    /// ASR encoder into the lowest layers of the deep encoder, MT decoder
    /// and embedding into the decoder. `flags.mt_encoder` is ignored: the
    /// vanilla model has no place for a text encoder.
    pub fn init_from_pretrained(
        &mut self,
        asr: Option<&Checkpoint>,
        mt: Option<&Checkpoint>,
        flags: PretrainFlags,
    ) -> Result<()> {
        if flags.asr_encoder {
            let asr = need(asr, "ASR")?;
            transplant(&mut self.store, asr, "frontend.", "frontend.")?;
            transplant(&mut self.store, asr, "ctc.", "ctc.")?;
            for i in 0..self.cfg.n_layers_acoustic {
                transplant(
                    &mut self.store,
                    asr,
                    &format!("acoustic.layers.{i}."),
                    &format!("encoder.layers.{i}."),
                )?;
            }
        }
        if flags.mt_decoder {
            let mt = need(mt, "MT")?;
            transplant(&mut self.store, mt, "embed.", "embed.")?;
            transplant(&mut self.store, mt, "decoder.", "decoder.")?;
        }
        Ok(())
    }
}
