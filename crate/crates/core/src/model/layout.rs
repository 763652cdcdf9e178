use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Name, shape and flat offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Range<usize>,
    pub b: Option<Range<usize>>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gain: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln_attn: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Flat parameter layout; a pure function of the model config.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub(crate) tensors: Vec<TensorSpec>,
    pub(crate) embed_hidden: Linear,
    pub(crate) embed_out: Linear,
    pub(crate) embed_skip: Linear,
    pub(crate) pos: Range<usize>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) head_hidden: Linear,
    pub(crate) head_out: Linear,
    pub(crate) head_skip: Linear,
    total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let spec = TensorSpec { name, shape, offset: self.offset };
        let r = spec.range();
        self.offset = r.end;
        self.tensors.push(spec);
        r
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.tensor(format!("{name}.weight"), vec![fan_in, fan_out]);
        let b = bias.then(|| self.tensor(format!("{name}.bias"), vec![fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.tensor(format!("{name}.gain"), vec![dim]),
            bias: self.tensor(format!("{name}.bias"), vec![dim]),
        }
    }
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let ff = config.ffn_dim();
        let feat = 2 * config.input_patch_len;
        let mut b = Builder { tensors: Vec::new(), offset: 0 };

        let embed_hidden = b.linear("embed.hidden", feat, d, true);
        let embed_out = b.linear("embed.out", d, d, true);
        let embed_skip = b.linear("embed.skip", feat, d, false);
        let pos = b.tensor("pos_embedding".into(), vec![config.max_patches(), d]);
        let blocks = (0..config.num_layers)
            .map(|i| Block {
                ln_attn: b.norm(&format!("layers.{i}.attn_norm"), d),
                q: b.linear(&format!("layers.{i}.attn.query"), d, d, true),
                k: b.linear(&format!("layers.{i}.attn.key"), d, d, true),
                v: b.linear(&format!("layers.{i}.attn.value"), d, d, true),
                o: b.linear(&format!("layers.{i}.attn.output"), d, d, true),
                ln_ffn: b.norm(&format!("layers.{i}.ffn_norm"), d),
                ff_in: b.linear(&format!("layers.{i}.ffn.in"), d, ff, true),
                ff_out: b.linear(&format!("layers.{i}.ffn.out"), ff, d, true),
            })
            .collect();
        let head_hidden = b.linear("head.hidden", d, d, true);
        let head_out = b.linear("head.out", d, config.output_patch_len, true);
        let head_skip = b.linear("head.skip", d, config.output_patch_len, false);

        Self {
            total: b.offset,
            tensors: b.tensors,
            embed_hidden,
            embed_out,
            embed_skip,
            pos,
            blocks,
            head_hidden,
            head_out,
            head_skip,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn linears(&self) -> impl Iterator<Item = &Linear> {
        [&self.embed_hidden, &self.embed_out, &self.embed_skip]
            .into_iter()
            .chain(self.blocks.iter().flat_map(|b| [&b.q, &b.k, &b.v, &b.o, &b.ff_in, &b.ff_out]))
            .chain([&self.head_hidden, &self.head_out, &self.head_skip])
    }

    pub(crate) fn norms(&self) -> impl Iterator<Item = &Norm> {
        self.blocks.iter().flat_map(|b| [&b.ln_attn, &b.ln_ffn])
    }
}
