//! Conditional scenario generators mapping `(z, c)` to an `M x T` path.
//!
//! Graph builders work on batches: contexts arrive as a `(B, M*T_c)` node
//! (each row a row-major `M x T_c` window), latents as a `(B*N, d_z)` node
//! whose rows `b*N .. (b+1)*N` belong to context `b`. The output is
//! `(B*N, M*T)`, each row a row-major scenario.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};
use crate::nn;
use crate::params::{ParamNodes, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SimpleLinear,
    EncoderLinear,
    EncoderLstm,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::SimpleLinear, Arch::EncoderLinear, Arch::EncoderLstm];

    pub fn name(self) -> &'static str {
        match self {
            Arch::SimpleLinear => "simple_linear",
            Arch::EncoderLinear => "encoder_linear",
            Arch::EncoderLstm => "encoder_lstm",
        }
    }

    /// Encoder and decoder depths used when none are given.
    pub fn default_layers(self) -> Layers {
        match self {
            Arch::SimpleLinear => Layers { encoder: 0, decoder: 2 },
            Arch::EncoderLinear => Layers { encoder: 2, decoder: 2 },
            Arch::EncoderLstm => Layers { encoder: 1, decoder: 1 },
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "simple_linear" => Ok(Arch::SimpleLinear),
            "encoder_linear" => Ok(Arch::EncoderLinear),
            "encoder_lstm" => Ok(Arch::EncoderLstm),
            _ => Err(invalid(format!("unknown generator architecture `{s}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer counts. `encoder` is the encoder MLP depth (encoder_linear) or the
/// number of LSTM layers (encoder_lstm); `decoder` is the decoder depth, or
/// the depth of the shared per-asset network for simple_linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layers {
    pub encoder: usize,
    pub decoder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: Arch,
    pub n_assets: usize,
    pub cond_len: usize,
    pub horizon: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub layers: Layers,
    pub leaky_slope: f64,
    /// When false the context is replaced by zeros, giving a latent-only model.
    pub conditional: bool,
}

impl GeneratorSpec {
    pub fn new(arch: Arch, n_assets: usize, cond_len: usize, horizon: usize) -> Self {
        Self {
            arch,
            n_assets,
            cond_len,
            horizon,
            latent_dim: 4,
            hidden_dim: 4,
            layers: arch.default_layers(),
            leaky_slope: nn::LEAKY_SLOPE,
            conditional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_assets", self.n_assets),
            ("cond_len", self.cond_len),
            ("horizon", self.horizon),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("decoder layers", self.layers.decoder),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("generator {name} must be at least 1")));
            }
        }
        if self.arch != Arch::SimpleLinear && self.layers.encoder == 0 {
            return Err(invalid("generator encoder layers must be at least 1"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(invalid("leaky slope must be finite"));
        }
        Ok(())
    }

    pub fn scenario_len(&self) -> usize {
        self.n_assets * self.horizon
    }

    pub fn context_len(&self) -> usize {
        self.n_assets * self.cond_len
    }

    fn decoder_widths(&self) -> Vec<usize> {
        nn::mlp_widths(self.hidden_dim + self.latent_dim, self.hidden_dim, self.scenario_len(), self.layers.decoder)
    }

    fn encoder_widths(&self) -> Vec<usize> {
        nn::mlp_widths(self.context_len(), self.hidden_dim, self.hidden_dim, self.layers.encoder)
    }

    fn asset_widths(&self) -> Vec<usize> {
        nn::mlp_widths(self.latent_dim + self.cond_len, self.hidden_dim, self.horizon, self.layers.decoder)
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        match self.arch {
            Arch::SimpleLinear => nn::mlp_param_count(&self.asset_widths()),
            Arch::EncoderLinear => {
                nn::mlp_param_count(&self.encoder_widths()) + nn::mlp_param_count(&self.decoder_widths())
            }
            Arch::EncoderLstm => {
                nn::recurrent_param_count(4, self.n_assets, self.hidden_dim, self.layers.encoder)
                    + nn::mlp_param_count(&self.decoder_widths())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub spec: GeneratorSpec,
    pub params: ParamStore,
}

pub fn init_generator(spec: &GeneratorSpec, seed: u64) -> Result<GeneratorParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    match spec.arch {
        Arch::SimpleLinear => nn::init_mlp(&mut params, &mut rng, "mlp", &spec.asset_widths()),
        Arch::EncoderLinear => {
            nn::init_mlp(&mut params, &mut rng, "enc", &spec.encoder_widths());
            nn::init_mlp(&mut params, &mut rng, "dec", &spec.decoder_widths());
        }
        Arch::EncoderLstm => {
            nn::init_lstm(&mut params, &mut rng, "lstm", spec.n_assets, spec.hidden_dim, spec.layers.encoder);
            nn::init_mlp(&mut params, &mut rng, "dec", &spec.decoder_widths());
        }
    }
    Ok(GeneratorParams {
        spec: spec.clone(),
        params,
    })
}

/// Builds the batched generator. `c` is `(batch, M*T_c)`, `z` is
/// `(batch*per_context, d_z)`; returns `(batch*per_context, M*T)`.
pub fn build(
    g: &mut Graph,
    spec: &GeneratorSpec,
    p: &ParamNodes,
    z: NodeId,
    c: NodeId,
    batch: usize,
    per_context: usize,
) -> NodeId {
    let c = if spec.conditional {
        c
    } else {
        g.constant(Tensor::zeros(&[batch, spec.context_len()]))
    };
    let slope = spec.leaky_slope;
    match spec.arch {
        Arch::SimpleLinear => {
            let m = spec.n_assets;
            // rows ordered (context, sample, asset)
            let zr = g.tile_rows(z, 1, m);
            let rows = g.reshape(c, &[batch * m, spec.cond_len]);
            let cr = g.tile_rows(rows, m, per_context);
            let x = g.concat(&[zr, cr], 1);
            let y = nn::mlp(g, p, "mlp", spec.layers.decoder, slope, x);
            g.reshape(y, &[batch * per_context, spec.scenario_len()])
        }
        Arch::EncoderLinear | Arch::EncoderLstm => {
            let h = if spec.arch == Arch::EncoderLinear {
                nn::mlp(g, p, "enc", spec.layers.encoder, slope, c)
            } else {
                let tc = spec.cond_len;
                let steps: Vec<NodeId> = (0..tc)
                    .map(|t| {
                        let cols: Vec<usize> = (0..spec.n_assets).map(|j| j * tc + t).collect();
                        g.select_cols(c, &cols)
                    })
                    .collect();
                let hs = nn::lstm(g, p, "lstm", spec.layers.encoder, batch, spec.hidden_dim, &steps);
                *hs.last().expect("cond_len >= 1")
            };
            let h = g.tile_rows(h, 1, per_context);
            let x = g.concat(&[h, z], 1);
            nn::mlp(g, p, "dec", spec.layers.decoder, slope, x)
        }
    }
}

/// Latent row `index` of the stream selected by `seed`.
pub fn latent_row(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `rows x dim` i.i.d. standard normals, row `i` drawn from stream `i`.
pub fn latents(seed: u64, rows: usize, dim: usize) -> Tensor {
    #[cfg(feature = "parallel")]
    let data: Vec<f64> = {
        use rayon::prelude::*;
        (0..rows)
            .into_par_iter()
            .flat_map_iter(|i| latent_row(seed, i as u64, dim))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let data: Vec<f64> = (0..rows).flat_map(|i| latent_row(seed, i as u64, dim)).collect();
    Tensor::new(vec![rows, dim], data).expect("rows * dim")
}

fn context_row(spec: &GeneratorSpec, c: &Tensor) -> Result<Tensor> {
    let expect = [spec.n_assets, spec.cond_len];
    let ok = c.shape() == expect || (c.numel() == spec.context_len() && c.rank() <= 1);
    if !ok {
        return Err(invalid(format!(
            "context shape {:?} does not match generator context {:?}",
            c.shape(),
            expect
        )));
    }
    Tensor::new(vec![1, spec.context_len()], c.data().to_vec())
}

impl GeneratorParams {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Batched evaluation: `contexts` rows are flattened windows, `z` holds
    /// `per_context` latent rows per context.
    pub fn forward_batch(&self, contexts: &Tensor, z: &Tensor, per_context: usize) -> Result<Tensor> {
        let batch = contexts.dims2().0;
        let mut g = Graph::new();
        let p = self.params.declare(&mut g, "", false);
        let zn = g.input("z", false);
        let cn = g.input("c", false);
        let out = build(&mut g, &self.spec, &p, zn, cn, batch, per_context);
        g.mark_output("y", out);
        let mut inputs = self.params.to_inputs("");
        inputs.insert("z".into(), z.clone());
        inputs.insert("c".into(), contexts.clone());
        Ok(g.evaluate(&inputs)?.remove("y").expect("marked output"))
    }

    /// One scenario `M x T` from latent `z` and context `c` (`M x T_c`).
    pub fn generate(&self, z: &[f64], c: &Tensor) -> Result<Tensor> {
        if z.len() != self.spec.latent_dim {
            return Err(invalid(format!(
                "latent length {} does not match latent_dim {}",
                z.len(),
                self.spec.latent_dim
            )));
        }
        let c = context_row(&self.spec, c)?;
        let z = Tensor::new(vec![1, z.len()], z.to_vec())?;
        let y = self.forward_batch(&c, &z, 1)?;
        y.reshaped(vec![self.spec.n_assets, self.spec.horizon])
    }

    /// `n` scenarios from latent streams `0..n` of `seed`.
    pub fn sample_scenarios(&self, c: &Tensor, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Err(invalid("need at least one scenario"));
        }
        let c = context_row(&self.spec, c)?;
        let z = latents(seed, n, self.spec.latent_dim);
        let y = self.forward_batch(&c, &z, n)?;
        let len = self.spec.scenario_len();
        y.data()
            .chunks_exact(len)
            .map(|row| Tensor::new(vec![self.spec.n_assets, self.spec.horizon], row.to_vec()))
            .collect()
    }

    /// Every tensor has the shape the spec implies.
    pub fn shape_audit(&self) -> Result<()> {
        let fresh = init_generator(&self.spec, 0)?;
        if !fresh.params.same_layout(&self.params) {
            return Err(invalid("generator parameters do not match their spec"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({"kind": "generator", "spec": self.spec});
        checkpoint::write(path, &meta, &checkpoint::entries("gen.", &self.params))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(path)?;
        Self::from_checkpoint(&meta, &tensors)
    }

    pub fn from_checkpoint(meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_value(
            meta.get("spec").cloned().ok_or_else(|| Error::Format("checkpoint lacks a generator spec".into()))?,
        )?;
        let out = Self {
            spec,
            params: checkpoint::collect("gen.", tensors),
        };
        out.shape_audit()?;
        Ok(out)
    }
}
