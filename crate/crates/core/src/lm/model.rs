//! Decoder-only transformer over the character vocabulary.
//!
//! Layout per block: parameter-free RMSNorm, causal multi-head attention,
//! residual add, RMSNorm, SiLU MLP, residual add. Token plus learned
//! position embeddings feed the first block; an optional final RMSNorm and
//! a tied or separate output head produce logits. SiLU keeps the network
//! smooth everywhere, which is what lets finite-difference checks of the
//! backward pass hold to tight tolerances.
//!
//! The forward pass is written position by position. Sampling, scoring and
//! the training forward all append through the same `advance` path, so a
//! token's activations are bit-identical no matter which caller produced
//! them. Log-probabilities handed to callers are always computed in f64.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

use super::vocab::Vocabulary;

pub const RMS_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture descriptor. `layers == 0` gives the embedding-only model
/// used by exact-value tests; `final_norm` and `tied_head` exist for the
/// same reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub tied_head: bool,
    pub final_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            heads: 2,
            context: 128,
            tied_head: true,
            final_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.context == 0 {
            return Err(Error::Config("model dim and context must be positive".into()));
        }
        if self.layers > 0 {
            if self.heads == 0 {
                return Err(Error::Config("model heads must be positive".into()));
            }
            if self.dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model dim {} not divisible by heads {}",
                    self.dim, self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }

    pub fn head_dim(&self) -> usize {
        if self.heads == 0 {
            0
        } else {
            self.dim / self.heads
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub fc1: Tensor<F>,
    pub fc2: Tensor<F>,
}

/// All model parameters. Tensor names used by checkpoints, the optimizer
/// and the finite-difference tests come from `visit`/`visit_mut` and are
/// stable: wte, wpe, block{i}.{wq,wk,wv,wo,fc1,fc2}, head.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    pub wte: Tensor<F>,
    pub wpe: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub head: Option<Tensor<F>>,
}

impl<F: Elem> Params<F> {
    pub fn zeros(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden();
        Params {
            wte: Tensor::zeros(vocab_size, d),
            wpe: Tensor::zeros(cfg.context, d),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams {
                    wq: Tensor::zeros(d, d),
                    wk: Tensor::zeros(d, d),
                    wv: Tensor::zeros(d, d),
                    wo: Tensor::zeros(d, d),
                    fc1: Tensor::zeros(h, d),
                    fc2: Tensor::zeros(d, h),
                })
                .collect(),
            head: if cfg.tied_head {
                None
            } else {
                Some(Tensor::zeros(vocab_size, d))
            },
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<F>)) {
        f("wte", &self.wte);
        f("wpe", &self.wpe);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.wq"), &b.wq);
            f(&format!("block{i}.wk"), &b.wk);
            f(&format!("block{i}.wv"), &b.wv);
            f(&format!("block{i}.wo"), &b.wo);
            f(&format!("block{i}.fc1"), &b.fc1);
            f(&format!("block{i}.fc2"), &b.fc2);
        }
        if let Some(h) = &self.head {
            f("head", h);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        f("wte", &mut self.wte);
        f("wpe", &mut self.wpe);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.wq"), &mut b.wq);
            f(&format!("block{i}.wk"), &mut b.wk);
            f(&format!("block{i}.wv"), &mut b.wv);
            f(&format!("block{i}.wo"), &mut b.wo);
            f(&format!("block{i}.fc1"), &mut b.fc1);
            f(&format!("block{i}.fc2"), &mut b.fc2);
        }
        if let Some(h) = &mut self.head {
            f("head", h);
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|name, _| names.push(name.to_string()));
        names
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        match name {
            "wte" => Some(&self.wte),
            "wpe" => Some(&self.wpe),
            "head" => self.head.as_ref(),
            _ => {
                let rest = name.strip_prefix("block")?;
                let (idx, field) = rest.split_once('.')?;
                let b = self.blocks.get(idx.parse::<usize>().ok()?)?;
                match field {
                    "wq" => Some(&b.wq),
                    "wk" => Some(&b.wk),
                    "wv" => Some(&b.wv),
                    "wo" => Some(&b.wo),
                    "fc1" => Some(&b.fc1),
                    "fc2" => Some(&b.fc2),
                    _ => None,
                }
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        match name {
            "wte" => Some(&mut self.wte),
            "wpe" => Some(&mut self.wpe),
            "head" => self.head.as_mut(),
            _ => {
                let rest = name.strip_prefix("block")?;
                let (idx, field) = rest.split_once('.')?;
                let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
                match field {
                    "wq" => Some(&mut b.wq),
                    "wk" => Some(&mut b.wk),
                    "wv" => Some(&mut b.wv),
                    "wo" => Some(&mut b.wo),
                    "fc1" => Some(&mut b.fc1),
                    "fc2" => Some(&mut b.fc2),
                    _ => None,
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, t| t.fill(F::zero()));
        out
    }

    pub fn scale(&mut self, c: f64) {
        let c = F::from_f64(c);
        self.visit_mut(|_, t| {
            for v in t.data_mut() {
                *v *= c;
            }
        });
    }

    /// self += other * c, tensor by tensor. Shapes must match.
    pub fn add_scaled(&mut self, other: &Params<F>, c: f64) {
        let c = F::from_f64(c);
        fn axpy<F: Elem>(dst: &mut Tensor<F>, src: &Tensor<F>, c: F) {
            assert_eq!(dst.len(), src.len(), "parameter shape mismatch");
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += *s * c;
            }
        }
        axpy(&mut self.wte, &other.wte, c);
        axpy(&mut self.wpe, &other.wpe, c);
        assert_eq!(self.blocks.len(), other.blocks.len());
        for (db, sb) in self.blocks.iter_mut().zip(&other.blocks) {
            axpy(&mut db.wq, &sb.wq, c);
            axpy(&mut db.wk, &sb.wk, c);
            axpy(&mut db.wv, &sb.wv, c);
            axpy(&mut db.wo, &sb.wo, c);
            axpy(&mut db.fc1, &sb.fc1, c);
            axpy(&mut db.fc2, &sb.fc2, c);
        }
        match (&mut self.head, &other.head) {
            (Some(d), Some(s)) => axpy(d, s, c),
            (None, None) => {}
            _ => panic!("head presence mismatch"),
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        self.visit(|_, t| {
            for v in t.data() {
                let x = v.as_f64();
                acc += x * x;
            }
        });
        acc.sqrt()
    }

    pub fn convert<G: Elem>(&self) -> Params<G> {
        Params {
            wte: self.wte.convert(),
            wpe: self.wpe.convert(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    wq: b.wq.convert(),
                    wk: b.wk.convert(),
                    wv: b.wv.convert(),
                    wo: b.wo.convert(),
                    fc1: b.fc1.convert(),
                    fc2: b.fc2.convert(),
                })
                .collect(),
            head: self.head.as_ref().map(|h| h.convert()),
        }
    }
}

/// Per-block activation cache, one entry per position.
#[derive(Clone, Debug)]
struct BlockTrace<F> {
    a: Vec<Vec<F>>,
    inv1: Vec<F>,
    q: Vec<Vec<F>>,
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    /// Attention weights at position t: heads * (t + 1) values, head-major.
    att: Vec<Vec<F>>,
    u: Vec<Vec<F>>,
    x_mid: Vec<Vec<F>>,
    b: Vec<Vec<F>>,
    inv2: Vec<F>,
    pre: Vec<Vec<F>>,
    act: Vec<Vec<F>>,
    x_out: Vec<Vec<F>>,
}

impl<F> BlockTrace<F> {
    fn new() -> Self {
        BlockTrace {
            a: Vec::new(),
            inv1: Vec::new(),
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            att: Vec::new(),
            u: Vec::new(),
            x_mid: Vec::new(),
            b: Vec::new(),
            inv2: Vec::new(),
            pre: Vec::new(),
            act: Vec::new(),
            x_out: Vec::new(),
        }
    }
}

/// Activation cache for a growing context. Produced by `Model::forward`
/// or built token by token through `Model::advance`.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    tokens: Vec<u32>,
    x0: Vec<Vec<F>>,
    blocks: Vec<BlockTrace<F>>,
    hfin: Vec<Vec<F>>,
    invf: Vec<F>,
    logits: Vec<Vec<F>>,
}

impl<F: Elem> ForwardTrace<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn logits_row(&self, t: usize) -> &[F] {
        &self.logits[t]
    }

    pub fn last_logits(&self) -> Option<&[F]> {
        self.logits.last().map(|r| r.as_slice())
    }

    /// f64 log-softmax of the logits at position t.
    pub fn logprob_row(&self, t: usize) -> Vec<f64> {
        log_softmax_f64(&self.logits[t])
    }
}

fn rmsnorm<F: Elem>(x: &[F]) -> (Vec<F>, F) {
    let n = F::from_f64(x.len() as f64);
    let mut ms = F::zero();
    for &v in x {
        ms += v * v;
    }
    ms = ms / n + F::from_f64(RMS_EPS);
    let inv = F::one() / ms.sqrt();
    (x.iter().map(|&v| v * inv).collect(), inv)
}

/// Gradient of RMSNorm: dx_i = inv*dy_i - inv^3/n * (sum_j dy_j x_j) * x_i.
fn rmsnorm_backward<F: Elem>(dy: &[F], x: &[F], inv: F, dx: &mut [F]) {
    let n = F::from_f64(x.len() as f64);
    let mut s = F::zero();
    for i in 0..x.len() {
        s += dy[i] * x[i];
    }
    let c = inv * inv * inv * s / n;
    for i in 0..x.len() {
        dx[i] += inv * dy[i] - c * x[i];
    }
}

fn sigmoid<F: Elem>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Elem>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Elem>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Stable log-softmax computed in f64 regardless of the model precision.
/// The exponentials of the result sum to 1 up to f64 round-off.
pub fn log_softmax_f64<F: Elem>(logits: &[F]) -> Vec<f64> {
    let row: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Softmax in working precision, used when assembling logit gradients.
fn softmax_in_place<F: Elem>(row: &mut [F]) {
    let mut m = row[0];
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-token log-probabilities of `target` continued from `prefix`, plus
/// the maximum log-probability of each predicting row.
#[derive(Clone, Debug)]
pub struct SequenceScores {
    pub logps: Vec<f64>,
    pub maxes: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    cfg: ModelConfig,
    vocab: Arc<Vocabulary>,
    params: Params<F>,
    step: u64,
}

impl<F: Elem> Model<F> {
    /// Fresh model. Embeddings and input projections draw from a Gaussian
    /// (std 0.02) in a fixed order; wo, fc2 and any separate head start at
    /// zero so every residual branch and the untied head begin inert.
    pub fn new(cfg: ModelConfig, vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let h = cfg.hidden();
        let n = vocab.size();
        let wte = Tensor::randn(n, d, INIT_STD, &mut rng);
        let wpe = Tensor::randn(cfg.context, d, INIT_STD, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                wq: Tensor::randn(d, d, INIT_STD, &mut rng),
                wk: Tensor::randn(d, d, INIT_STD, &mut rng),
                wv: Tensor::randn(d, d, INIT_STD, &mut rng),
                wo: Tensor::zeros(d, d),
                fc1: Tensor::randn(h, d, INIT_STD, &mut rng),
                fc2: Tensor::zeros(d, h),
            })
            .collect();
        let head = if cfg.tied_head {
            None
        } else {
            Some(Tensor::zeros(n, d))
        };
        Ok(Model {
            cfg,
            vocab,
            params: Params {
                wte,
                wpe,
                blocks,
                head,
            },
            step: 0,
        })
    }

    pub fn from_params(
        cfg: ModelConfig,
        vocab: Arc<Vocabulary>,
        params: Params<F>,
        step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if params.wte.rows() != vocab.size() || params.wte.cols() != cfg.dim {
            return Err(Error::Config(format!(
                "wte shape {}x{} does not match vocab {} dim {}",
                params.wte.rows(),
                params.wte.cols(),
                vocab.size(),
                cfg.dim
            )));
        }
        if params.wpe.rows() != cfg.context || params.blocks.len() != cfg.layers {
            return Err(Error::Config("parameter shapes do not match config".into()));
        }
        if params.head.is_some() == cfg.tied_head {
            return Err(Error::Config(
                "head tensor presence does not match tied_head".into(),
            ));
        }
        Ok(Model {
            cfg,
            vocab,
            params,
            step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn begin_trace(&self) -> ForwardTrace<F> {
        ForwardTrace {
            tokens: Vec::new(),
            x0: Vec::new(),
            blocks: (0..self.cfg.layers).map(|_| BlockTrace::new()).collect(),
            hfin: Vec::new(),
            invf: Vec::new(),
            logits: Vec::new(),
        }
    }

    /// Appends one token to the trace and computes its logits row.
    pub fn advance(&self, trace: &mut ForwardTrace<F>, token: u32) -> Result<()> {
        let t = trace.tokens.len();
        if t >= self.cfg.context {
            return Err(Error::InvalidInput(format!(
                "context window {} exceeded",
                self.cfg.context
            )));
        }
        if token as usize >= self.vocab.size() {
            return Err(Error::InvalidInput(format!(
                "token id {token} out of range (vocab size {})",
                self.vocab.size()
            )));
        }
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let scale = if hd > 0 {
            F::from_f64(1.0 / (hd as f64).sqrt())
        } else {
            F::one()
        };

        let te = self.params.wte.row(token as usize);
        let pe = self.params.wpe.row(t);
        let mut x: Vec<F> = (0..d).map(|i| te[i] + pe[i]).collect();
        trace.x0.push(x.clone());

        for (bi, bp) in self.params.blocks.iter().enumerate() {
            let bt = &mut trace.blocks[bi];

            let (a, inv1) = rmsnorm(&x);
            let mut q = vec![F::zero(); d];
            let mut k = vec![F::zero(); d];
            let mut v = vec![F::zero(); d];
            bp.wq.matvec(&a, &mut q);
            bp.wk.matvec(&a, &mut k);
            bp.wv.matvec(&a, &mut v);
            bt.a.push(a);
            bt.inv1.push(inv1);
            bt.k.push(k);
            bt.v.push(v);

            let mut att = Vec::with_capacity(heads * (t + 1));
            let mut u = vec![F::zero(); d];
            for h in 0..heads {
                let lo = h * hd;
                let hi = lo + hd;
                let qh = &q[lo..hi];
                let mut scores: Vec<F> = (0..=t)
                    .map(|s| {
                        let kh = &bt.k[s][lo..hi];
                        let mut acc = F::zero();
                        for i in 0..hd {
                            acc += qh[i] * kh[i];
                        }
                        acc * scale
                    })
                    .collect();
                softmax_in_place(&mut scores);
                for (s, &w) in scores.iter().enumerate() {
                    let vh = &bt.v[s][lo..hi];
                    for i in 0..hd {
                        u[lo + i] += w * vh[i];
                    }
                }
                att.extend_from_slice(&scores);
            }
            bt.q.push(q);
            bt.att.push(att);

            let mut o = vec![F::zero(); d];
            bp.wo.matvec(&u, &mut o);
            bt.u.push(u);
            for i in 0..d {
                x[i] += o[i];
            }
            bt.x_mid.push(x.clone());

            let (b, inv2) = rmsnorm(&x);
            let mut pre = vec![F::zero(); self.cfg.hidden()];
            bp.fc1.matvec(&b, &mut pre);
            let act: Vec<F> = pre.iter().map(|&p| silu(p)).collect();
            let mut m = vec![F::zero(); d];
            bp.fc2.matvec(&act, &mut m);
            bt.b.push(b);
            bt.inv2.push(inv2);
            bt.pre.push(pre);
            bt.act.push(act);
            for i in 0..d {
                x[i] += m[i];
            }
            bt.x_out.push(x.clone());
        }

        let (h, invf) = if self.cfg.final_norm {
            rmsnorm(&x)
        } else {
            (x.clone(), F::one())
        };
        let head = self.params.head.as_ref().unwrap_or(&self.params.wte);
        let mut logits = vec![F::zero(); self.vocab.size()];
        head.matvec(&h, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite logit at position {t} (model step {})",
                self.step
            )));
        }
        trace.hfin.push(h);
        trace.invf.push(invf);
        trace.logits.push(logits);
        trace.tokens.push(token);
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace<F>> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("forward on empty token sequence".into()));
        }
        let mut trace = self.begin_trace();
        for &tok in tokens {
            self.advance(&mut trace, tok)?;
        }
        Ok(trace)
    }

    /// f64 log-probability rows for every position of `tokens`.
    pub fn logprob_rows(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let trace = self.forward(tokens)?;
        Ok((0..trace.len()).map(|t| trace.logprob_row(t)).collect())
    }

    /// Log-probabilities of each target token given the prefix and the
    /// preceding targets, with the row maxima alongside.
    pub fn sequence_scores(&self, prefix: &[u32], target: &[u32]) -> Result<SequenceScores> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput("sequence_scores needs a non-empty prefix".into()));
        }
        if target.is_empty() {
            return Err(Error::InvalidInput("sequence_scores needs a non-empty target".into()));
        }
        let mut tokens = Vec::with_capacity(prefix.len() + target.len());
        tokens.extend_from_slice(prefix);
        tokens.extend_from_slice(target);
        let trace = self.forward(&tokens)?;
        let mut logps = Vec::with_capacity(target.len());
        let mut maxes = Vec::with_capacity(target.len());
        for (j, &tok) in target.iter().enumerate() {
            let row = trace.logprob_row(prefix.len() + j - 1);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logps.push(row[tok as usize]);
            maxes.push(max);
        }
        Ok(SequenceScores { logps, maxes })
    }

    /// Backpropagates `dlogits` (one row per position, working precision)
    /// through the trace. Returns parameter gradients.
    pub fn backward(&self, trace: &ForwardTrace<F>, dlogits: &[Vec<F>]) -> Params<F> {
        let tn = trace.tokens.len();
        assert_eq!(dlogits.len(), tn, "dlogits rows must match trace length");
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let scale = if hd > 0 {
            F::from_f64(1.0 / (hd as f64).sqrt())
        } else {
            F::one()
        };
        let mut grads = self.params.zeros_like();

        // Output head and final norm.
        let mut dx: Vec<Vec<F>> = vec![vec![F::zero(); d]; tn];
        {
            let head = self.params.head.as_ref().unwrap_or(&self.params.wte);
            let ghead_is_wte = self.params.head.is_none();
            let mut dh = vec![F::zero(); d];
            for t in 0..tn {
                let dl = &dlogits[t];
                head.matvec_t(dl, &mut dh);
                let gt = if ghead_is_wte {
                    &mut grads.wte
                } else {
                    grads.head.as_mut().unwrap()
                };
                gt.add_outer(dl, &trace.hfin[t]);
                if self.cfg.final_norm {
                    let x_last = if self.cfg.layers == 0 {
                        &trace.x0[t]
                    } else {
                        &trace.blocks[self.cfg.layers - 1].x_out[t]
                    };
                    rmsnorm_backward(&dh, x_last, trace.invf[t], &mut dx[t]);
                } else {
                    for i in 0..d {
                        dx[t][i] += dh[i];
                    }
                }
            }
        }

        for bi in (0..self.cfg.layers).rev() {
            let bp = &self.params.blocks[bi];
            let bt = &trace.blocks[bi];
            let gb = &mut grads.blocks[bi];

            // MLP sublayer, all positions independent.
            let mut dx_mid: Vec<Vec<F>> = vec![vec![F::zero(); d]; tn];
            {
                let hdim = self.cfg.hidden();
                let mut dact = vec![F::zero(); hdim];
                let mut dpre = vec![F::zero(); hdim];
                let mut db = vec![F::zero(); d];
                for t in 0..tn {
                    let dm = &dx[t];
                    bp.fc2.matvec_t(dm, &mut dact);
                    gb.fc2.add_outer(dm, &bt.act[t]);
                    for i in 0..hdim {
                        dpre[i] = dact[i] * silu_grad(bt.pre[t][i]);
                    }
                    bp.fc1.matvec_t(&dpre, &mut db);
                    gb.fc1.add_outer(&dpre, &bt.b[t]);
                    for i in 0..d {
                        dx_mid[t][i] = dx[t][i];
                    }
                    rmsnorm_backward(&db, &bt.x_mid[t], bt.inv2[t], &mut dx_mid[t]);
                }
            }

            // Attention sublayer.
            let mut dq: Vec<Vec<F>> = vec![vec![F::zero(); d]; tn];
            let mut dk: Vec<Vec<F>> = vec![vec![F::zero(); d]; tn];
            let mut dv: Vec<Vec<F>> = vec![vec![F::zero(); d]; tn];
            {
                let mut du = vec![F::zero(); d];
                for t in 0..tn {
                    let do_ = &dx_mid[t];
                    bp.wo.matvec_t(do_, &mut du);
                    gb.wo.add_outer(do_, &bt.u[t]);
                    for h in 0..heads {
                        let lo = h * hd;
                        let hi = lo + hd;
                        let w = &bt.att[t][h * (t + 1)..(h + 1) * (t + 1)];
                        let duh = &du[lo..hi];
                        let mut datt = vec![F::zero(); t + 1];
                        for s in 0..=t {
                            let vh = &bt.v[s][lo..hi];
                            let mut acc = F::zero();
                            for i in 0..hd {
                                acc += duh[i] * vh[i];
                            }
                            datt[s] = acc;
                            for i in 0..hd {
                                dv[s][lo + i] += w[s] * duh[i];
                            }
                        }
                        let mut dot = F::zero();
                        for s in 0..=t {
                            dot += datt[s] * w[s];
                        }
                        for s in 0..=t {
                            let ds = w[s] * (datt[s] - dot) * scale;
                            let kh = &bt.k[s][lo..hi];
                            let qh = &bt.q[t][lo..hi];
                            for i in 0..hd {
                                dq[t][lo + i] += ds * kh[i];
                                dk[s][lo + i] += ds * qh[i];
                            }
                        }
                    }
                }
            }

            // Project back through wq/wk/wv and both norms to the block input.
            let mut da = vec![F::zero(); d];
            let mut tmp = vec![F::zero(); d];
            for t in 0..tn {
                da.fill(F::zero());
                bp.wq.matvec_t(&dq[t], &mut tmp);
                for i in 0..d {
                    da[i] += tmp[i];
                }
                bp.wk.matvec_t(&dk[t], &mut tmp);
                for i in 0..d {
                    da[i] += tmp[i];
                }
                bp.wv.matvec_t(&dv[t], &mut tmp);
                for i in 0..d {
                    da[i] += tmp[i];
                }
                gb.wq.add_outer(&dq[t], &bt.a[t]);
                gb.wk.add_outer(&dk[t], &bt.a[t]);
                gb.wv.add_outer(&dv[t], &bt.a[t]);

                let x_in = if bi == 0 {
                    &trace.x0[t]
                } else {
                    &trace.blocks[bi - 1].x_out[t]
                };
                // dx_mid already carries the residual path; add the norm path.
                rmsnorm_backward(&da, x_in, bt.inv1[t], &mut dx_mid[t]);
            }
            dx = dx_mid;
        }

        for t in 0..tn {
            let tok = trace.tokens[t] as usize;
            let wte_row = grads.wte.row_mut(tok);
            for i in 0..d {
                wte_row[i] += dx[t][i];
            }
            let wpe_row = grads.wpe.row_mut(t);
            for i in 0..d {
                wpe_row[i] += dx[t][i];
            }
        }
        grads
    }

    pub fn convert<G: Elem>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            vocab: Arc::clone(&self.vocab),
            params: self.params.convert(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_charset("\nab").unwrap())
    }

    fn cfg(layers: usize, tied: bool, final_norm: bool) -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers,
            heads: 2,
            context: 16,
            tied_head: tied,
            final_norm,
        }
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let v = tiny_vocab();
        let m: Model<f64> = Model::new(cfg(2, false, true), v.clone(), 3).unwrap();
        let rows = m.logprob_rows(&[2, 3, 4]).unwrap();
        let expect = -(v.size() as f64).ln();
        for row in rows {
            for lp in row {
                assert!((lp - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logprob_rows_normalize() {
        let v = tiny_vocab();
        let m: Model<f32> = Model::new(cfg(2, true, true), v, 11).unwrap();
        let rows = m.logprob_rows(&[3, 4, 2, 3]).unwrap();
        for row in rows {
            let total: f64 = row.iter().map(|lp| lp.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
            let lse = total.ln();
            assert!(lse.abs() <= 1e-6);
        }
    }

    #[test]
    fn embedding_only_model_matches_hand_rows() {
        // layers=0, no final norm, untied head set to identity-ish rows:
        // logits(t) = head @ (wte[tok] + wpe[t]) can be written out by hand.
        let v = tiny_vocab();
        let c = ModelConfig {
            dim: 5,
            layers: 0,
            heads: 1,
            context: 4,
            tied_head: false,
            final_norm: false,
        };
        let mut params: Params<f64> = Params::zeros(&c, v.size());
        // One-hot embeddings on the first dims, positions on the last.
        for tok in 0..v.size() {
            params.wte.set(tok, tok.min(4), 1.0);
        }
        for p in 0..c.context {
            params.wpe.set(p, 4, p as f64);
        }
        let head = params.head.as_mut().unwrap();
        for tok in 0..v.size() {
            head.set(tok, tok.min(4), 2.0);
        }
        let m = Model::from_params(c, v, params, 0).unwrap();
        let trace = m.forward(&[3, 1]).unwrap();
        // Position 0, token 3: x = e3 + 0*e4, so only the token-3 head row fires.
        let row0 = trace.logits_row(0);
        assert_eq!(row0[3], 2.0);
        assert_eq!(row0[2], 0.0);
        // Position 1, token 1: x = e1 + 1*e4; token row and position row fire.
        let row1 = trace.logits_row(1);
        assert_eq!(row1[1], 2.0);
        assert_eq!(row1[4], 2.0);
        assert_eq!(row1[0], 0.0);
    }

    #[test]
    fn sequence_scores_match_rows() {
        let v = tiny_vocab();
        let m: Model<f64> = Model::new(cfg(1, true, true), v, 5).unwrap();
        let prefix = vec![2u32, 3];
        let target = vec![4u32, 2];
        let ss = m.sequence_scores(&prefix, &target).unwrap();
        let rows = m.logprob_rows(&[2, 3, 4, 2]).unwrap();
        assert_eq!(ss.logps.len(), 2);
        assert!((ss.logps[0] - rows[1][4]).abs() < 1e-15);
        assert!((ss.logps[1] - rows[2][2]).abs() < 1e-15);
        let max1: f64 = rows[1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((ss.maxes[0] - max1).abs() < 1e-15);
        assert!(ss.logps[0] <= ss.maxes[0]);
    }

    #[test]
    fn context_overflow_is_an_error() {
        let v = tiny_vocab();
        let m: Model<f32> = Model::new(cfg(1, true, true), v, 5).unwrap();
        let tokens: Vec<u32> = (0..17).map(|i| 2 + (i % 3) as u32).collect();
        let err = m.forward(&tokens).unwrap_err().to_string();
        assert!(err.contains("context window"), "{err}");
    }

    #[test]
    fn incremental_equals_batch_forward() {
        let v = tiny_vocab();
        let m: Model<f32> = Model::new(cfg(2, true, true), v, 9).unwrap();
        let tokens = [3u32, 4, 4, 2, 3, 4];
        let full = m.forward(&tokens).unwrap();
        let mut inc = m.begin_trace();
        for &t in &tokens {
            m.advance(&mut inc, t).unwrap();
        }
        for t in 0..tokens.len() {
            assert_eq!(full.logits_row(t), inc.logits_row(t));
        }
    }
}
