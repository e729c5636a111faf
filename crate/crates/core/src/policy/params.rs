use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Shape of the recurrent policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub projector_hidden: usize,
    pub feature_a_dim: usize,
    pub feature_b_dim: usize,
    /// Low-rank delta on the output projection.
    pub adapter: Option<AdapterConfig>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 16,
            hidden_dim: 32,
            projector_hidden: 32,
            feature_a_dim: 8,
            feature_b_dim: 8,
            adapter: None,
        }
    }
}

impl PolicyConfig {
    pub fn fused_dim(&self) -> usize {
        self.feature_a_dim + self.feature_b_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("projector_hidden", self.projector_hidden),
            ("feature_a_dim", self.feature_a_dim),
            ("feature_b_dim", self.feature_b_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("policy dimension {name} must be positive")));
        }
        if let Some(a) = &self.adapter {
            if a.rank == 0 {
                return Err(Error::Config("adapter rank must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A `rows × cols` row-major block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Segment,
    pub rec_weight: Segment,
    pub rec_bias: Segment,
    pub out_weight: Segment,
    pub out_bias: Segment,
    pub proj_w1: Segment,
    pub proj_b1: Segment,
    pub proj_w2: Segment,
    pub proj_b2: Segment,
    pub adapter_a: Option<Segment>,
    pub adapter_b: Option<Segment>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &PolicyConfig) -> Self {
        let mut offset = 0;
        let mut seg = |rows: usize, cols: usize| {
            let s = Segment { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let (v, e, h, hp) = (c.vocab_size, c.embed_dim, c.hidden_dim, c.projector_hidden);
        let embedding = seg(v, e);
        let rec_weight = seg(h, h + e);
        let rec_bias = seg(h, 1);
        let out_weight = seg(v, h);
        let out_bias = seg(v, 1);
        let proj_w1 = seg(hp, c.fused_dim());
        let proj_b1 = seg(hp, 1);
        let proj_w2 = seg(h, hp);
        let proj_b2 = seg(h, 1);
        let adapter_a = c.adapter.map(|a| seg(a.rank, h));
        let adapter_b = c.adapter.map(|a| seg(v, a.rank));
        Self {
            embedding,
            rec_weight,
            rec_bias,
            out_weight,
            out_bias,
            proj_w1,
            proj_b1,
            proj_w2,
            proj_b2,
            adapter_a,
            adapter_b,
            total: offset,
        }
    }

    pub fn segments(&self) -> Vec<(&'static str, Segment)> {
        let mut out = vec![
            ("embedding", self.embedding),
            ("rec_weight", self.rec_weight),
            ("rec_bias", self.rec_bias),
            ("out_weight", self.out_weight),
            ("out_bias", self.out_bias),
            ("proj_w1", self.proj_w1),
            ("proj_b1", self.proj_b1),
            ("proj_w2", self.proj_w2),
            ("proj_b2", self.proj_b2),
        ];
        if let (Some(a), Some(b)) = (self.adapter_a, self.adapter_b) {
            out.push(("adapter_a", a));
            out.push(("adapter_b", b));
        }
        out
    }

    pub fn projector_segments(&self) -> [Segment; 4] {
        [self.proj_w1, self.proj_b1, self.proj_w2, self.proj_b2]
    }
}

/// Which parameter slots a trainer may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask(Vec<bool>);

impl TrainableMask {
    pub fn all(layout: &Layout) -> Self {
        Self(vec![true; layout.total])
    }

    pub fn projector_only(layout: &Layout) -> Self {
        let mut m = vec![false; layout.total];
        for s in layout.projector_segments() {
            m[s.range()].iter_mut().for_each(|b| *b = true);
        }
        Self(m)
    }

    /// Everything except the base output projection when an adapter carries
    /// the output-layer updates.
    pub fn for_finetune(layout: &Layout) -> Self {
        let mut m = vec![true; layout.total];
        if layout.adapter_a.is_some() {
            m[layout.out_weight.range()].iter_mut().for_each(|b| *b = false);
        }
        Self(m)
    }

    pub fn apply(&self, grad: &mut [f64]) {
        for (g, &keep) in grad.iter_mut().zip(&self.0) {
            if !keep {
                *g = 0.0;
            }
        }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.0[index]
    }
}

/// All trainable parameters as one flat vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let values = vec![0.0; layout.total];
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn from_flat(config: &PolicyConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if values.len() != layout.total {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: layout.total,
                actual: values.len(),
            });
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights (fan-in = number of columns), zero
    /// biases, zero adapter `B` so the adapter delta starts at zero.
    pub fn init(config: &PolicyConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = p.layout.clone();
        let mut weights = vec![l.embedding, l.rec_weight, l.out_weight, l.proj_w1, l.proj_w2];
        weights.extend(l.adapter_a);
        for s in weights {
            let bound = 1.0 / (s.cols as f64).sqrt();
            for w in &mut p.values[s.range()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, s: Segment) -> &[f64] {
        &self.values[s.range()]
    }

    pub fn segment_mut(&mut self, s: Segment) -> &mut [f64] {
        &mut self.values[s.range()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}
