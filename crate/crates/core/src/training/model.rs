use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kernel::ProjectionHead;
use crate::nn::{BoundLinear, Linear};
use crate::rng::{stream, Purpose};
use crate::stats::{BoundHeads, StatsHeads};

/// Layer widths of an [`EncoderModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub stats_dim: usize,
    pub n_classes: usize,
    /// Number of source domains; the projection head reads `n_sources * n_classes` bank slots.
    pub n_sources: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.input_dim, self.hidden_dim, self.latent_dim, self.stats_dim, self.n_classes, self.n_sources];
        if all.contains(&0) {
            return Err(Error::Validation(format!("model dimensions must be positive: {self:?}")));
        }
        if self.n_classes < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Encoder `E`, instance classifier `CLS`, statistics heads and the
/// distribution-level projection head.
///
/// `adapter` maps stats-space pseudo-instances into the classifier's input
/// space and exists only when `latent_dim != stats_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub dims: ModelDims,
    /// `input -> hidden -> hidden -> latent`, ReLU after the two hidden layers.
    pub encoder: Vec<Linear>,
    pub classifier: Linear,
    pub adapter: Option<Linear>,
    pub heads: StatsHeads,
    pub projection: ProjectionHead,
}

/// An [`EncoderModel`] whose parameters are recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Vec<BoundLinear>,
    pub classifier: BoundLinear,
    pub adapter: Option<BoundLinear>,
    pub heads: BoundHeads,
    pub projection: BoundLinear,
}

impl EncoderModel {
    /// Encoder and classifier draw from one stream and every auxiliary part
    /// from another, so that baselines and the full method start from the
    /// same backbone under a shared seed.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut backbone = stream(seed, Purpose::InitBackbone);
        let mut aux = stream(seed, Purpose::InitAux);
        Ok(Self::init_with(dims, &mut backbone, &mut aux))
    }

    fn init_with<R: Rng + ?Sized>(dims: ModelDims, backbone: &mut R, aux: &mut R) -> Self {
        let encoder = vec![
            Linear::init(dims.input_dim, dims.hidden_dim, backbone),
            Linear::init(dims.hidden_dim, dims.hidden_dim, backbone),
            Linear::init(dims.hidden_dim, dims.latent_dim, backbone),
        ];
        let classifier = Linear::init(dims.latent_dim, dims.n_classes, backbone);
        let heads = StatsHeads::init(dims.latent_dim, dims.stats_dim, aux);
        let projection = ProjectionHead::init(dims.n_sources * dims.n_classes, dims.n_classes, aux);
        let adapter = (dims.latent_dim != dims.stats_dim).then(|| Linear::init(dims.stats_dim, dims.latent_dim, aux));
        EncoderModel { dims, encoder, classifier, adapter, heads, projection }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.iter().map(|l| l.bind(tape)).collect(),
            classifier: self.classifier.bind(tape),
            adapter: self.adapter.as_ref().map(|l| l.bind(tape)),
            heads: self.heads.bind(tape),
            projection: self.projection.bind(tape),
        }
    }

    /// Every trainable tensor, in a fixed order shared with the optimizer state.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.params_mut());
        }
        out.extend(self.classifier.params_mut());
        if let Some(a) = &mut self.adapter {
            out.extend(a.params_mut());
        }
        out.extend(self.heads.fc_mu.params_mut());
        out.extend(self.heads.fc_logvar.params_mut());
        out.extend(self.projection.linear.params_mut());
        out
    }

    pub fn n_params(&self) -> usize {
        let mut m = self.clone();
        m.params_mut().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundModel) -> Result<()> {
        for (l, b) in self.encoder.iter_mut().zip(&bound.encoder) {
            l.collect_grads(tape, b)?;
        }
        self.classifier.collect_grads(tape, &bound.classifier)?;
        if let (Some(a), Some(b)) = (&mut self.adapter, &bound.adapter) {
            a.collect_grads(tape, b)?;
        }
        self.heads.collect_grads(tape, &bound.heads)?;
        self.projection.linear.collect_grads(tape, &bound.projection)
    }

    /// Instance logits `CLS(E(x))` for row-major `x`, without gradients.
    pub fn logits(&self, x: &[f64]) -> Result<Tensor> {
        let d = self.dims.input_dim;
        if !x.len().is_multiple_of(d) {
            return Err(Error::dim("logits", format!("{} values for input dim {d}", x.len())));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(x.len() / d, d, x.to_vec())?);
        let z = bound.encode(&mut tape, xv)?;
        let logits = bound.classify(&mut tape, z)?;
        Ok(tape.value(logits).clone())
    }
}

impl BoundModel {
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.encoder.len() - 1;
        let mut h = x;
        for (i, l) in self.encoder.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.classifier.forward(tape, z)
    }

    /// Logits for stats-space pseudo-instances.
    pub fn classify_pseudo(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let z = match &self.adapter {
            Some(a) => a.forward(tape, s)?,
            None => s,
        };
        self.classify(tape, z)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
