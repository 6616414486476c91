//! Flat parameter storage for the reference transformer.
//!
//! Every tensor lives in one contiguous `Vec<f64>` in a fixed canonical
//! order, which is also the order of [`GradVector`](super::GradVector)
//! entries and of the checkpoint payload.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "NEATLM";

/// Shape of the reference architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 32,
            d_model: 32,
            max_len: 64,
            n_blocks: 2,
            n_heads: 2,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= crate::tokens::NUM_SPECIAL as usize
            || self.d_model == 0
            || self.max_len == 0
            || self.n_heads == 0
            || self.d_model % self.n_heads != 0
        {
            return Err(NeatError::Domain(format!("invalid model shape {self:?}")));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every tensor in the flat parameter vector.
///
/// Matrices are row-major `[in, out]`, applied as `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab, cfg.d_model, cfg.d_ff());
        let mut c = Cursor(0);
        let tok_emb = c.take(v * d);
        let pos_emb = c.take(cfg.max_len * d);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockLayout {
                ln1_g: c.take(d),
                ln1_b: c.take(d),
                wq: c.take(d * d),
                bq: c.take(d),
                wk: c.take(d * d),
                bk: c.take(d),
                wv: c.take(d * d),
                bv: c.take(d),
                wo: c.take(d * d),
                bo: c.take(d),
                ln2_g: c.take(d),
                ln2_b: c.take(d),
                w1: c.take(d * f),
                b1: c.take(f),
                w2: c.take(f * d),
                b2: c.take(d),
            })
            .collect();
        let lnf_g = c.take(d);
        let lnf_b = c.take(d);
        let w_out = c.take(d * v);
        let b_out = c.take(v);
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: c.0,
        }
    }

    /// Named tensor ranges in canonical order; used by gradient checks that
    /// sample coordinates from every tensor.
    pub fn named_tensors(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, r) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{i}.{name}"), r.clone()));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone()));
        out.push(("lnf_b".to_string(), self.lnf_b.clone()));
        out.push(("w_out".to_string(), self.w_out.clone()));
        out.push(("b_out".to_string(), self.b_out.clone()));
        out
    }

    fn gain_ranges(&self) -> Vec<Range<usize>> {
        let mut out: Vec<_> = self
            .blocks
            .iter()
            .flat_map(|b| [b.ln1_g.clone(), b.ln2_g.clone()])
            .collect();
        out.push(self.lnf_g.clone());
        out
    }

    fn weight_ranges(&self) -> Vec<Range<usize>> {
        let mut out = vec![self.tok_emb.clone(), self.pos_emb.clone()];
        for b in &self.blocks {
            out.extend([
                b.wq.clone(),
                b.wk.clone(),
                b.wv.clone(),
                b.wo.clone(),
                b.w1.clone(),
                b.w2.clone(),
            ]);
        }
        out.push(self.w_out.clone());
        out
    }
}

/// The full differentiable parameter set of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    data: Vec<f64>,
}

impl ModelParams {
    /// All parameters zero: the model predicts the uniform distribution
    /// everywhere.
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams {
            config,
            data: vec![0.0; config.param_count()],
        }
    }

    /// Weights and embeddings drawn from N(0, 0.02²); biases zero and
    /// layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Self {
        let layout = config.layout();
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for r in layout.weight_ranges() {
            for x in &mut data[r] {
                *x = normal.sample(&mut rng);
            }
        }
        for r in layout.gain_ranges() {
            data[r].fill(1.0);
        }
        ModelParams { config, data }
    }

    /// Every entry drawn from N(0, std²), gains included; used by gradient
    /// checks so no coordinate sits at a special value.
    pub fn random_dense(config: ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..config.param_count())
            .map(|_| normal.sample(&mut rng))
            .collect();
        ModelParams { config, data }
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        if data.len() != config.param_count() {
            return Err(NeatError::Structure(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                data.len()
            )));
        }
        Ok(ModelParams { config, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(NeatError::Numeric(format!("parameter {i} is not finite"))),
            None => Ok(()),
        }
    }

    pub fn header_line(&self) -> String {
        let c = &self.config;
        format!(
            "{CHECKPOINT_MAGIC} vocab={} d_model={} max_len={} blocks={} heads={} version={CHECKPOINT_VERSION}\n",
            c.vocab, c.d_model, c.max_len, c.n_blocks, c.n_heads
        )
    }

    /// Checkpoint bytes: one header line, then little-endian f64 values in
    /// canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_line();
        let mut out = Vec::with_capacity(header.len() + 8 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| NeatError::Format(format!("unreadable checkpoint header: {e}")))?;
        let config = parse_header(header.trim_end())?;
        let n = config.param_count();
        let mut payload = Vec::with_capacity(8 * n);
        reader
            .read_to_end(&mut payload)
            .map_err(|e| NeatError::Format(format!("unreadable checkpoint payload: {e}")))?;
        if payload.len() != 8 * n {
            return Err(NeatError::Format(format!(
                "checkpoint payload holds {} bytes, expected {}",
                payload.len(),
                8 * n
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let params = ModelParams { config, data };
        params.check_finite()?;
        Ok(params)
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| NeatError::io(path, e))?;
        Self::from_reader(file)
    }
}

fn parse_header(line: &str) -> Result<ModelConfig> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(NeatError::Format("missing checkpoint magic".into()));
    }
    let mut fields = std::collections::HashMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| NeatError::Format(format!("bad header field {p:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| NeatError::Format(format!("bad header value {p:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| NeatError::Format(format!("header lacks {k}")))
    };
    let version = get("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(NeatError::Format(format!(
            "checkpoint version {version} is not supported"
        )));
    }
    let config = ModelConfig {
        vocab: get("vocab")?,
        d_model: get("d_model")?,
        max_len: get("max_len")?,
        n_blocks: get("blocks")?,
        n_heads: get("heads")?,
    };
    config.validate()?;
    Ok(config)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| NeatError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| NeatError::io(&tmp, e))?;
    f.sync_all().map_err(|e| NeatError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| NeatError::io(path, e))
}
