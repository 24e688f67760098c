use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Every scalar of the training setup in one validated record.
///
/// The first group reproduces the published hyperparameter table. The
/// architecture group covers choices the table leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub fusion_dim: usize,
    pub clip_norm: f64,
    pub lr_text: f64,
    pub lr_audio: f64,
    pub lr_visual: f64,
    pub lr_fusion: f64,
    pub weight_decay: f64,
    pub lambda_dis: f64,
    pub lambda_sync: f64,
    pub margin: f64,
    pub alpha_sync: f64,
    pub alpha_poly: f64,
    pub alpha_cross: f64,
    pub beta_cross: f64,
    pub gamma_poly: f64,
    pub alpha_comp: f64,
    pub lambda_cont: f64,
    pub tau_cont: f64,
    pub eps_stats: f64,
    pub eps_smooth: f64,
    pub tau_dis: f64,
    pub alpha_dis: f64,

    pub lr_sync: f64,
    pub sync_dim: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub graph_window: usize,
    pub gat_heads: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub pool_queries: usize,
    pub experts: usize,
    pub quality_ema: f64,
    /// Optimise students and fusion together under the total objective.
    pub joint: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        let w = LossWeights::default();
        let d = DistillConfig::default();
        Self {
            batch_size: 16,
            epochs: 30,
            dropout: 0.35,
            fusion_dim: 256,
            clip_norm: 1.0,
            lr_text: 8e-5,
            lr_audio: 6e-5,
            lr_visual: 6e-5,
            lr_fusion: 4e-5,
            weight_decay: 1e-3,
            lambda_dis: w.lambda_dis,
            lambda_sync: w.lambda_sync,
            margin: 1.5,
            alpha_sync: 0.7,
            alpha_poly: w.alpha_poly,
            alpha_cross: 0.7,
            beta_cross: 0.3,
            gamma_poly: w.gamma_poly,
            alpha_comp: w.alpha_comp,
            lambda_cont: w.lambda_cont,
            tau_cont: w.tau_cont,
            eps_stats: 1e-6,
            eps_smooth: w.eps_smooth,
            tau_dis: d.tau_dis,
            alpha_dis: d.alpha_dis,
            lr_sync: 1e-3,
            sync_dim: 256,
            hidden_dim: 256,
            proj_dim: 128,
            graph_window: 4,
            gat_heads: 4,
            encoder_layers: 2,
            encoder_heads: 4,
            pool_queries: 4,
            experts: 4,
            quality_ema: 0.99,
            joint: false,
        }
    }
}

/// `(name, default, meaning)` for every field, in declaration order.
pub fn hyperparam_table() -> Vec<(&'static str, String, &'static str)> {
    let h = HyperParams::default();
    vec![
        ("batch_size", h.batch_size.to_string(), "mini-batch size"),
        ("epochs", h.epochs.to_string(), "epochs per stage"),
        ("dropout", h.dropout.to_string(), "dropout rate in graph networks and fusion"),
        ("fusion_dim", h.fusion_dim.to_string(), "fusion width d_f"),
        ("clip_norm", h.clip_norm.to_string(), "global gradient-norm clip"),
        ("lr_text", h.lr_text.to_string(), "text teacher learning rate"),
        ("lr_audio", h.lr_audio.to_string(), "audio student learning rate"),
        ("lr_visual", h.lr_visual.to_string(), "visual student learning rate"),
        ("lr_fusion", h.lr_fusion.to_string(), "fusion learning rate"),
        ("weight_decay", h.weight_decay.to_string(), "decoupled weight decay"),
        ("lambda_dis", h.lambda_dis.to_string(), "distillation weight in the total objective"),
        ("lambda_sync", h.lambda_sync.to_string(), "sync weight in the total objective"),
        ("margin", h.margin.to_string(), "sync ranking margin m"),
        ("alpha_sync", h.alpha_sync.to_string(), "ranking vs alignment balance"),
        ("alpha_poly", h.alpha_poly.to_string(), "poly loss coefficient"),
        ("alpha_cross", h.alpha_cross.to_string(), "cross-modal attention weight"),
        ("beta_cross", h.beta_cross.to_string(), "cross-modal residual weight"),
        ("gamma_poly", h.gamma_poly.to_string(), "poly loss exponent"),
        ("alpha_comp", h.alpha_comp.to_string(), "poly vs smoothing balance"),
        ("lambda_cont", h.lambda_cont.to_string(), "contrastive weight"),
        ("tau_cont", h.tau_cont.to_string(), "contrastive temperature"),
        ("eps_stats", h.eps_stats.to_string(), "variance-ratio stabiliser"),
        ("eps_smooth", h.eps_smooth.to_string(), "label smoothing"),
        ("tau_dis", h.tau_dis.to_string(), "distillation temperature"),
        ("alpha_dis", h.alpha_dis.to_string(), "distillation hard-label weight"),
        ("lr_sync", h.lr_sync.to_string(), "sync encoder learning rate"),
        ("sync_dim", h.sync_dim.to_string(), "sync embedding width"),
        ("hidden_dim", h.hidden_dim.to_string(), "graph network width"),
        ("proj_dim", h.proj_dim.to_string(), "contrastive projection width"),
        ("graph_window", h.graph_window.to_string(), "temporal edge window"),
        ("gat_heads", h.gat_heads.to_string(), "GAT heads"),
        ("encoder_layers", h.encoder_layers.to_string(), "fusion encoder blocks"),
        ("encoder_heads", h.encoder_heads.to_string(), "attention heads in fusion"),
        ("pool_queries", h.pool_queries.to_string(), "learnable pooling queries"),
        ("experts", h.experts.to_string(), "mixture-of-experts size"),
        ("quality_ema", h.quality_ema.to_string(), "decay of the running variance ratio"),
        ("joint", h.joint.to_string(), "joint optimisation of students and fusion"),
    ]
}

impl HyperParams {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_poly: self.alpha_poly,
            gamma_poly: self.gamma_poly,
            alpha_comp: self.alpha_comp,
            lambda_cont: self.lambda_cont,
            tau_cont: self.tau_cont,
            eps_smooth: self.eps_smooth,
            lambda_dis: self.lambda_dis,
            lambda_sync: self.lambda_sync,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            alpha_dis: self.alpha_dis,
            tau_dis: self.tau_dis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dropout", self.dropout >= 0.0),
            ("clip_norm", self.clip_norm > 0.0),
            ("lr_text", self.lr_text > 0.0),
            ("lr_audio", self.lr_audio > 0.0),
            ("lr_visual", self.lr_visual > 0.0),
            ("lr_fusion", self.lr_fusion > 0.0),
            ("lr_sync", self.lr_sync > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("margin", self.margin > 0.0),
            ("eps_stats", self.eps_stats > 0.0),
            ("alpha_cross", self.alpha_cross >= 0.0),
            ("beta_cross", self.beta_cross >= 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("{name} out of range")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size >= 2),
            ("epochs", self.epochs >= 1),
            ("fusion_dim", self.fusion_dim >= 1),
            ("sync_dim", self.sync_dim >= 1),
            ("hidden_dim", self.hidden_dim >= 1),
            ("proj_dim", self.proj_dim >= 1),
            ("gat_heads", self.gat_heads >= 1),
            ("encoder_heads", self.encoder_heads >= 1),
            ("pool_queries", self.pool_queries >= 1),
            ("experts", self.experts >= 1),
        ];
        for (name, ok) in counts {
            if !ok {
                return Err(Error::Config(format!("{name} too small")));
            }
        }
        if self.dropout >= 1.0 {
            return Err(Error::Config("dropout must be < 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_sync) {
            return Err(Error::Config("alpha_sync must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.quality_ema) {
            return Err(Error::Config("quality_ema must lie in [0, 1)".into()));
        }
        if self.fusion_dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "fusion_dim {} not divisible by encoder_heads {}",
                self.fusion_dim, self.encoder_heads
            )));
        }
        if self.hidden_dim % self.gat_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by gat_heads {}",
                self.hidden_dim, self.gat_heads
            )));
        }
        self.loss_weights().validate()?;
        self.distill().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_table() {
        let h = HyperParams::default();
        assert_eq!((h.batch_size, h.epochs, h.fusion_dim), (16, 30, 256));
        assert_eq!((h.dropout, h.clip_norm), (0.35, 1.0));
        assert_eq!((h.lr_text, h.lr_audio, h.lr_visual, h.lr_fusion), (8e-5, 6e-5, 6e-5, 4e-5));
        assert_eq!(h.weight_decay, 1e-3);
        assert_eq!((h.lambda_dis, h.lambda_sync, h.margin, h.alpha_sync), (0.3, 0.15, 1.5, 0.7));
        assert_eq!((h.alpha_poly, h.gamma_poly, h.alpha_cross, h.beta_cross), (1.2, 1.2, 0.7, 0.3));
        assert_eq!((h.alpha_comp, h.lambda_cont, h.tau_cont), (0.8, 0.1, 0.07));
        assert_eq!((h.eps_stats, h.eps_smooth, h.tau_dis, h.alpha_dis), (1e-6, 0.1, 2.0, 0.65));
        h.validate().unwrap();
        assert_eq!(hyperparam_table().len(), 37);
    }

    #[test]
    fn unknown_keys_rejected_and_missing_keys_defaulted() {
        let h: HyperParams = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(h.epochs, 3);
        assert_eq!(h.lr_fusion, 4e-5);
        assert!(serde_json::from_str::<HyperParams>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let h = HyperParams {
            alpha_comp: 1.5,
            ..HyperParams::default()
        };
        assert!(h.validate().is_err());
        let h = HyperParams {
            fusion_dim: 30,
            ..HyperParams::default()
        };
        assert!(h.validate().is_err());
    }
}
