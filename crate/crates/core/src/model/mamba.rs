use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::store::{ParamStore, Trainable};
use crate::analysis::ArchConfig;
use crate::diffmath::{finite_difference_check, GradCheckReport, Tape, Tensor};
use crate::error::{Error, Result};
use crate::ssm::{dt_bias_init, SsmLayerParams};

pub const NORM_EPS: f64 = 1e-5;

/// One residual block: RMS norm, input projection, causal depthwise conv,
/// selective scan, gating and output projection.
#[derive(Clone, Debug)]
pub struct MambaBlockParams {
    /// `[d_model]`
    pub norm: Tensor,
    /// `[2·D_inner, d_model]`; the first `D_inner` rows feed the SSM branch
    pub w_in: Tensor,
    /// `[D_inner, k]`
    pub conv_weight: Tensor,
    pub conv_bias: Option<Tensor>,
    pub ssm: SsmLayerParams,
    /// `[d_model, D_inner]`
    pub w_out: Tensor,
}

/// Adapter injections into the SSM branch of one block.
#[derive(Clone, Debug, Default)]
pub struct AdapterHooks {
    /// initial state `[D,H]`
    pub h0: Option<Tensor>,
    /// state offset `h'` `[D,H]`
    pub offset_h: Option<Tensor>,
    /// output offset `y'` `[D]`
    pub offset_y: Option<Tensor>,
    /// virtual vectors `[V,D]` prepended to the scan input
    pub prefix: Option<Tensor>,
}

/// Selective scan on the tape for `xs: [T,D]`, returning `[T,D]`.
///
/// Computes `y_t = C_t (h_t + h') + y' + skip ⊙ x_t` with
/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t ⊙ x_t) B_tᵀ`.
pub fn selective_scan(tape: &mut Tape, ssm: &SsmLayerParams, hooks: &AdapterHooks, xs: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (xs.shape()[0], xs.shape()[1]);
    let h = ssm.a_log.shape()[1];
    if ssm.a_log.shape()[0] != d {
        return Err(Error::dim("selective_scan", format!("input {:?} vs A {:?}", xs.shape(), ssm.a_log.shape())));
    }
    let low = tape.matmul_t(xs, &ssm.w_dt_in)?;
    let dt = tape.matmul_t(&low, &ssm.w_dt)?;
    let bias = tape.broadcast(&ssm.b_dt, &[t_len, d])?;
    let dt = tape.add(&dt, &bias)?;
    let delta = tape.softplus(&dt)?;
    let b = tape.matmul_t(xs, &ssm.w_b)?;
    let c = tape.matmul_t(xs, &ssm.w_c)?;

    let a = tape.exp(&ssm.a_log)?;
    let a = tape.scale(&a, -1.0)?;
    let cube = [t_len, d, h];
    let delta3 = tape.reshape(&delta, &[t_len, d, 1])?;
    let delta3 = tape.broadcast(&delta3, &cube)?;
    let a3 = tape.broadcast(&a, &cube)?;
    let da = tape.mul(&delta3, &a3)?;
    let abar = tape.exp(&da)?;
    let dx = tape.mul(&delta, xs)?;
    let dx3 = tape.reshape(&dx, &[t_len, d, 1])?;
    let dx3 = tape.broadcast(&dx3, &cube)?;
    let b3 = tape.reshape(&b, &[t_len, 1, h])?;
    let b3 = tape.broadcast(&b3, &cube)?;
    let bx = tape.mul(&dx3, &b3)?;

    let mut state = match &hooks.h0 {
        Some(h0) => tape.reshape(h0, &[1, d, h])?,
        None => Tensor::zeros(&[1, d, h]),
    };
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ab = tape.slice(&abar, 0, t, 1)?;
        let inp = tape.slice(&bx, 0, t, 1)?;
        let decayed = tape.mul(&ab, &state)?;
        state = tape.add(&decayed, &inp)?;
        states.push(state.clone());
    }
    let refs: Vec<&Tensor> = states.iter().collect();
    let mut hs = tape.concat(&refs, 0)?;
    if let Some(off) = &hooks.offset_h {
        let off3 = tape.broadcast(off, &cube)?;
        hs = tape.add(&hs, &off3)?;
    }
    let c3 = tape.reshape(&c, &[t_len, 1, h])?;
    let c3 = tape.broadcast(&c3, &cube)?;
    let prod = tape.mul(&hs, &c3)?;
    let prod = tape.reshape(&prod, &[t_len * d, h])?;
    let y = tape.matmul(&prod, &Tensor::ones(&[h, 1]))?;
    let mut y = tape.reshape(&y, &[t_len, d])?;
    if let Some(off) = &hooks.offset_y {
        let off2 = tape.broadcast(off, &[t_len, d])?;
        y = tape.add(&y, &off2)?;
    }
    let skip = tape.broadcast(&ssm.skip_d, &[t_len, d])?;
    let skip = tape.mul(&skip, xs)?;
    tape.add(&y, &skip)
}

/// Causal depthwise convolution with left zero padding, `x: [T,D]`, `w: [D,k]`.
fn causal_conv(tape: &mut Tape, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t_len, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    if w.shape()[0] != d {
        return Err(Error::dim("conv", format!("kernel {:?} for {d} channels", w.shape())));
    }
    let padded = tape.concat(&[&Tensor::zeros(&[k - 1, d]), x], 0)?;
    let mut acc: Option<Tensor> = None;
    for j in 0..k {
        let window = tape.slice(&padded, 0, j, t_len)?;
        let col = tape.slice(w, 1, j, 1)?;
        let col = tape.reshape(&col, &[d])?;
        let col = tape.broadcast(&col, &[t_len, d])?;
        let term = tape.mul(&window, &col)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
    }
    let out = acc.expect("kernel width is at least 1");
    match bias {
        Some(b) => {
            let b = tape.broadcast(b, &[t_len, d])?;
            tape.add(&out, &b)
        }
        None => Ok(out),
    }
}

/// Block forward on `tape` for `u: [T,d_model]`; output has the same shape.
pub fn block_forward(tape: &mut Tape, block: &MambaBlockParams, hooks: &AdapterHooks, u: &Tensor) -> Result<Tensor> {
    if u.rank() != 2 || u.shape()[1] != block.norm.len() {
        return Err(Error::dim("mamba_block", format!("input {:?}, d_model {}", u.shape(), block.norm.len())));
    }
    let t_len = u.shape()[0];
    let d = block.ssm.a_log.shape()[0];
    let normed = tape.rms_norm(u, NORM_EPS)?;
    let gain = tape.broadcast(&block.norm, u.shape())?;
    let normed = tape.mul(&normed, &gain)?;
    let xz = tape.matmul_t(&normed, &block.w_in)?;
    let x = tape.slice(&xz, 1, 0, d)?;
    let z = tape.slice(&xz, 1, d, d)?;
    let x = causal_conv(tape, &x, &block.conv_weight, block.conv_bias.as_ref())?;
    let x = tape.silu(&x)?;
    let (xs, v) = match &hooks.prefix {
        Some(p) => (tape.concat(&[p, &x], 0)?, p.shape()[0]),
        None => (x, 0),
    };
    let y = selective_scan(tape, &block.ssm, hooks, &xs)?;
    let y = if v > 0 { tape.slice(&y, 0, v, t_len)? } else { y };
    let gate = tape.silu(&z)?;
    let y = tape.mul(&y, &gate)?;
    let out = tape.matmul_t(&y, &block.w_out)?;
    tape.add(u, &out)
}

/// Tape-free block forward.
pub fn mamba_block_forward(block: &MambaBlockParams, u_seq: &Tensor, hooks: &AdapterHooks) -> Result<Tensor> {
    if !u_seq.is_finite() {
        return Err(Error::Numeric("block input has non-finite entries".into()));
    }
    block_forward(&mut Tape::new(), block, hooks, u_seq)
}

pub fn layer_name(layer: usize, field: &str) -> String {
    format!("layers.{layer}.{field}")
}

/// Backbone plus any adapter parameters, addressed by name.
#[derive(Clone, Debug)]
pub struct MambaModel {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

/// Output of a forward pass on a tape.
pub struct TapeForward {
    /// `[T,vocab]`
    pub logits: Tensor,
    /// tape handles of the trainable parameters, by name
    pub leaves: IndexMap<String, Tensor>,
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

impl MambaModel {
    /// Random backbone. `A` follows the S4D-real pattern `A[d,n] = -(n+1)`
    /// and initial step sizes are log-uniform in `[1e-3, 1e-1]`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dm, di, h, r, k) = (arch.d_model, arch.d_inner(), arch.d_state, arch.dt_rank, arch.conv_width);
        let mut params = ParamStore::new();
        params.insert_backbone("embedding", normal_tensor(&mut rng, &[arch.vocab, dm], 0.02), true);
        for i in 0..arch.n_layer {
            let name = |f: &str| layer_name(i, f);
            params.insert_backbone(name("norm"), Tensor::ones(&[dm]), false);
            params.insert_backbone(name("in_proj"), normal_tensor(&mut rng, &[2 * di, dm], (dm as f64).powf(-0.5)), true);
            params.insert_backbone(name("conv_weight"), normal_tensor(&mut rng, &[di, k], (k as f64).powf(-0.5)), true);
            if arch.conv_bias {
                params.insert_backbone(name("conv_bias"), Tensor::zeros(&[di]), false);
            }
            let a_log = (0..di).flat_map(|_| (0..h).map(|n| ((n + 1) as f64).ln())).collect();
            params.insert_backbone(name("a_log"), Tensor::new(&[di, h], a_log)?, false);
            let std_in = (di as f64).powf(-0.5);
            params.insert_backbone(name("w_b"), normal_tensor(&mut rng, &[h, di], std_in), true);
            params.insert_backbone(name("w_c"), normal_tensor(&mut rng, &[h, di], std_in), true);
            params.insert_backbone(name("w_dt_in"), normal_tensor(&mut rng, &[r, di], std_in), true);
            params.insert_backbone(name("w_dt"), normal_tensor(&mut rng, &[di, r], (r as f64).powf(-0.5)), true);
            params.insert_backbone(name("b_dt"), Tensor::from_vec(dt_bias_init(&mut rng, di)), false);
            params.insert_backbone(name("skip_d"), Tensor::ones(&[di]), false);
            params.insert_backbone(name("out_proj"), normal_tensor(&mut rng, &[dm, di], std_in), true);
        }
        params.insert_backbone("norm_f", Tensor::ones(&[dm]), false);
        if !arch.tie_embeddings {
            params.insert_backbone("head", normal_tensor(&mut rng, &[arch.vocab, dm], 0.02), true);
        }
        Ok(MambaModel {
            arch: arch.clone(),
            params,
        })
    }

    /// Number of backbone entries (adapter parameters excluded).
    pub fn backbone_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| p.backbone).map(|(_, p)| p.tensor.len()).sum()
    }

    /// Links every parameter to `tape`; only trainable ones are recorded,
    /// and none when `track` is false.
    pub fn leaves(&self, tape: &mut Tape, track: bool) -> IndexMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, p)| {
                let t = p.tensor.clone().with_requires_grad(track && p.trainable.is_trainable());
                (name.clone(), tape.leaf(&t))
            })
            .collect()
    }

    /// Effective block weights and hooks for `layer`, with LoRA deltas,
    /// extra scan states and low-rank offsets folded in on the tape.
    pub fn block_view(
        &self,
        tape: &mut Tape,
        leaves: &IndexMap<String, Tensor>,
        layer: usize,
    ) -> Result<(MambaBlockParams, AdapterHooks)> {
        let get = |f: &str| -> Result<Tensor> {
            leaves.get(&layer_name(layer, f)).cloned().ok_or_else(|| Error::Lookup {
                kind: "parameter",
                name: layer_name(layer, f),
            })
        };
        let opt = |f: &str| leaves.get(&layer_name(layer, f)).cloned();

        let weight = |tape: &mut Tape, f: &str| -> Result<Tensor> {
            let w = get(f)?;
            match (opt(&format!("lora.{f}.u")), opt(&format!("lora.{f}.vt"))) {
                (Some(u), Some(vt)) => {
                    // alpha = r, so the update enters unscaled
                    let delta = tape.matmul(&u, &vt)?;
                    tape.add(&w, &delta)
                }
                _ => Ok(w),
            }
        };
        let mut a_log = get("a_log")?;
        let mut w_b = weight(tape, "w_b")?;
        let mut w_c = weight(tape, "w_c")?;
        let w_dt = weight(tape, "w_dt")?;
        let w_dt_in = weight(tape, "w_dt_in")?;
        if let Some(extra) = opt("add_scan.a_log") {
            a_log = tape.concat(&[&a_log, &extra], 1)?;
            w_b = tape.concat(&[&w_b, &get("add_scan.w_b")?], 0)?;
            w_c = tape.concat(&[&w_c, &get("add_scan.w_c")?], 0)?;
        }
        let ssm = SsmLayerParams {
            a_log,
            w_b,
            w_c,
            w_dt,
            w_dt_in,
            b_dt: get("b_dt")?,
            skip_d: get("skip_d")?,
        };
        let block = MambaBlockParams {
            norm: get("norm")?,
            w_in: get("in_proj")?,
            conv_weight: get("conv_weight")?,
            conv_bias: opt("conv_bias"),
            ssm,
            w_out: get("out_proj")?,
        };
        let offset_h = match (opt("state_offset_u"), opt("state_offset_vt")) {
            (Some(u), Some(vt)) => Some(tape.matmul(&u, &vt)?),
            _ => opt("state_offset_h"),
        };
        let hooks = AdapterHooks {
            h0: opt("h0"),
            offset_h,
            offset_y: opt("state_offset_y"),
            prefix: opt("prefix"),
        };
        Ok((block, hooks))
    }

    /// Embedding lookup, optional soft prompt, blocks, final norm and head.
    /// Logits cover only the real token positions.
    pub fn forward_on(&self, tape: &mut Tape, tokens: &[usize]) -> Result<TapeForward> {
        self.run(tape, tokens, true)
    }

    fn run(&self, tape: &mut Tape, tokens: &[usize], track: bool) -> Result<TapeForward> {
        let leaves = self.leaves(tape, track);
        self.run_on(tape, tokens, leaves)
    }

    fn run_on(&self, tape: &mut Tape, tokens: &[usize], leaves: IndexMap<String, Tensor>) -> Result<TapeForward> {
        let vocab = self.arch.vocab;
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        let mut onehot = vec![0.0; tokens.len() * vocab];
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: tok,
                    size: vocab,
                });
            }
            onehot[i * vocab + tok] = 1.0;
        }
        let embedding = &leaves["embedding"];
        let onehot = Tensor::new(&[tokens.len(), vocab], onehot)?;
        let mut u = tape.matmul(&onehot, embedding)?;
        let prompt_len = match leaves.get("prompt") {
            Some(p) => {
                u = tape.concat(&[p, &u], 0)?;
                p.shape()[0]
            }
            None => 0,
        };
        for layer in 0..self.arch.n_layer {
            let (block, hooks) = self.block_view(tape, &leaves, layer)?;
            u = block_forward(tape, &block, &hooks, &u)?;
        }
        if prompt_len > 0 {
            u = tape.slice(&u, 0, prompt_len, tokens.len())?;
        }
        let normed = tape.rms_norm(&u, NORM_EPS)?;
        let gain = tape.broadcast(&leaves["norm_f"], normed.shape())?;
        let normed = tape.mul(&normed, &gain)?;
        let head = leaves.get("head").unwrap_or(embedding);
        let logits = tape.matmul_t(&normed, head)?;
        let leaves = leaves
            .into_iter()
            .filter(|(name, _)| self.params.get(name).is_some_and(|p| p.trainable.is_trainable()))
            .collect();
        Ok(TapeForward { logits, leaves })
    }

    /// Deterministic logits `[T,vocab]` without gradient tracking.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.run(&mut Tape::new(), tokens, false)?.logits)
    }

    /// Mean cross-entropy over `(position, target token)` pairs.
    pub fn loss_on(&self, tape: &mut Tape, tokens: &[usize], targets: &[(usize, usize)]) -> Result<(Tensor, TapeForward)> {
        let leaves = self.leaves(tape, true);
        self.loss_with(tape, tokens, targets, leaves)
    }

    fn loss_with(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        targets: &[(usize, usize)],
        leaves: IndexMap<String, Tensor>,
    ) -> Result<(Tensor, TapeForward)> {
        if targets.is_empty() {
            return Err(Error::contract("loss needs at least one target position"));
        }
        let fwd = self.run_on(tape, tokens, leaves)?;
        let logp = tape.log_softmax(&fwd.logits)?;
        let vocab = self.arch.vocab;
        let mut pick = vec![0.0; tokens.len() * vocab];
        let w = -1.0 / targets.len() as f64;
        for &(pos, tok) in targets {
            if pos >= tokens.len() || tok >= vocab {
                return Err(Error::Index {
                    what: "target",
                    index: pos.max(tok),
                    size: tokens.len().min(vocab),
                });
            }
            pick[pos * vocab + tok] += w;
        }
        let pick = Tensor::new(&[tokens.len(), vocab], pick)?;
        let weighted = tape.mul(&logp, &pick)?;
        Ok((tape.sum(&weighted)?, fwd))
    }

    /// Loss, gradients of the trainable parameters (masked entries zeroed)
    /// and the number of correctly predicted targets.
    pub fn loss_and_grads(&self, tokens: &[usize], targets: &[(usize, usize)]) -> Result<SequenceGrad> {
        let mut tape = Tape::new();
        let (loss, fwd) = self.loss_on(&mut tape, tokens, targets)?;
        let correct = count_correct(&fwd.logits, targets);
        let value = loss.item()?;
        let mut grads = IndexMap::new();
        if loss.node().is_some() {
            let g = tape.backward(&loss)?;
            for (name, leaf) in &fwd.leaves {
                let mut gv = g.of(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.len()]);
                if let Some(Trainable::Masked(mask)) = self.params.get(name).map(|p| &p.trainable) {
                    gv.iter_mut().zip(mask).filter(|(_, &m)| !m).for_each(|(v, _)| *v = 0.0);
                }
                grads.insert(name.clone(), gv);
            }
        }
        Ok(SequenceGrad {
            loss: value,
            correct,
            targets: targets.len(),
            grads,
        })
    }
}

impl MambaModel {
    /// Central-difference check of the loss gradient with respect to every
    /// entry of every trainable parameter (masked entries included).
    pub fn gradient_check(&self, tokens: &[usize], targets: &[(usize, usize)], eps: f64) -> Result<GradCheckReport> {
        let names = self.params.trainable_names();
        let values: Vec<Tensor> = names.iter().map(|n| self.params.tensor(n).cloned()).collect::<Result<_>>()?;
        let loss_fn = |tape: &mut Tape, linked: &[Tensor]| -> Result<Tensor> {
            let mut leaves = IndexMap::new();
            for (name, p) in self.params.iter() {
                let leaf = match names.iter().position(|n| n == name) {
                    Some(i) => linked[i].clone(),
                    None => tape.leaf(&p.tensor.clone().with_requires_grad(false)),
                };
                leaves.insert(name.clone(), leaf);
            }
            Ok(self.loss_with(tape, tokens, targets, leaves)?.0)
        };
        finite_difference_check(loss_fn, &values, eps)
    }
}

/// Per-sequence training signal.
#[derive(Clone, Debug)]
pub struct SequenceGrad {
    pub loss: f64,
    pub correct: usize,
    pub targets: usize,
    /// trainable parameter name → gradient, in store order
    pub grads: IndexMap<String, Vec<f64>>,
}

/// Targets whose logit row has its maximum at the target token (lowest index on ties).
pub fn count_correct(logits: &Tensor, targets: &[(usize, usize)]) -> usize {
    targets
        .iter()
        .filter(|&&(pos, tok)| argmax(logits.row(pos)) == tok)
        .count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
