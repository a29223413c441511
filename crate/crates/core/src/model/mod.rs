//! The bridging network: noisy and enhanced filterbanks in, an OA coefficient
//! and per-coefficient recognition logits out.
//!
//! Layout of one forward pass (activations are channels × frames):
//!
//! 1. the two feature streams are stacked along the channel axis and fed to a
//!    convolutional frame layer (ReLU);
//! 2. `n_blocks` Res2 blocks, each with a squeeze-excitation gate and a
//!    residual connection;
//! 3. channel-time attention: a per-frame bottleneck projection (tanh) scores
//!    every channel at every frame, and a softmax over time turns the scores
//!    into per-channel frame weights;
//! 4. attentive statistics pooling with those weights (weighted mean and
//!    weighted standard deviation per channel);
//! 5. a shared fully connected layer (ReLU);
//! 6. a recognition head emitting logits and a quality head whose scalar
//!    output goes through a sigmoid to give ω̂.

pub mod checkpoint;
pub mod layers;
mod params;

use ndarray::{s, concatenate, Array1, Array2, ArrayView2, Axis};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{sigmoid, Conv1d, Dense};
pub use params::{init_params, ModelConfig, Parameters, Res2Block};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use layers::{relu_backward, relu_inplace};

/// Variance floor inside the pooled standard deviation.
pub const POOL_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Predicted OA coefficient, strictly inside (0, 1).
    pub omega_hat: f64,
    /// Recognition logits in descending-OA order.
    pub logits: Vec<f64>,
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgingNet {
    pub cfg: ModelConfig,
    pub params: Parameters,
}

struct BlockTrace {
    input: Array2<f64>,
    a_pre: Array2<f64>,
    /// Inputs of each branch convolution (groups 1..scale).
    branch_in: Vec<Array2<f64>>,
    branch_pre: Vec<Array2<f64>>,
    ycat: Array2<f64>,
    b_pre: Array2<f64>,
    b: Array2<f64>,
    mean: Array1<f64>,
    z_pre: Array1<f64>,
    z: Array1<f64>,
    gate: Array1<f64>,
}

/// Intermediate values kept for the backward pass.
pub struct Trace {
    input: Array2<f64>,
    frame_pre: Array2<f64>,
    blocks: Vec<BlockTrace>,
    h: Array2<f64>,
    attn_hidden: Array2<f64>,
    alpha: Array2<f64>,
    mu: Array1<f64>,
    sigma: Array1<f64>,
    pooled: Array1<f64>,
    fc_pre: Array1<f64>,
    fc: Array1<f64>,
    omega_hat: f64,
}

impl Trace {
    /// Pooled statistics `[mean; std]` of the last forward pass.
    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }

    /// Attention weights (channels × frames), each row summing to one.
    pub fn attention(&self) -> &Array2<f64> {
        &self.alpha
    }
}

impl BridgingNet {
    pub fn new(cfg: ModelConfig, params: Parameters) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn forward(&self, noisy: &FeatureMatrix, enhanced: &FeatureMatrix) -> Result<ForwardOutput> {
        Ok(self.forward_trace(noisy, enhanced)?.0)
    }

    pub fn forward_trace(
        &self,
        noisy: &FeatureMatrix,
        enhanced: &FeatureMatrix,
    ) -> Result<(ForwardOutput, Trace)> {
        self.check_inputs(noisy, enhanced)?;
        let input = concatenate(Axis(0), &[noisy.values().view(), enhanced.values().view()])
            .expect("row counts checked");
        let out = forward_stacked(&self.params, input);
        if !out.0.omega_hat.is_finite() || out.0.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(out)
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose partial
    /// derivatives with respect to the outputs are `d_omega` and `d_logits`.
    pub fn backward(&self, trace: &Trace, d_omega: f64, d_logits: &[f64], grad: &mut Parameters) {
        backward_stacked(&self.params, trace, d_omega, d_logits, grad);
    }

    fn check_inputs(&self, noisy: &FeatureMatrix, enhanced: &FeatureMatrix) -> Result<()> {
        if noisy.n_mels() != self.cfg.n_mels || enhanced.n_mels() != self.cfg.n_mels {
            return Err(Error::Shape(format!(
                "expected {} mel bins, got {} and {}",
                self.cfg.n_mels,
                noisy.n_mels(),
                enhanced.n_mels()
            )));
        }
        if noisy.n_frames() != enhanced.n_frames() {
            return Err(Error::Shape(format!(
                "stream lengths differ: {} vs {} frames",
                noisy.n_frames(),
                enhanced.n_frames()
            )));
        }
        if noisy.n_frames() < 1 {
            return Err(Error::Shape("need at least one frame".into()));
        }
        Ok(())
    }
}

/// Runs the network on one utterance.
pub fn forward(
    noisy: &FeatureMatrix,
    enhanced: &FeatureMatrix,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    let net = BridgingNet::new(cfg.clone(), params.clone())?;
    net.forward(noisy, enhanced)
}

fn forward_stacked(p: &Parameters, input: Array2<f64>) -> (ForwardOutput, Trace) {
    let frame_pre = p.frame.forward(input.view());
    let mut h = frame_pre.clone();
    relu_inplace(&mut h);

    let mut blocks = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let (next, trace) = res2_forward(block, h);
        blocks.push(trace);
        h = next;
    }

    let (attn_hidden, alpha) = attention_weights(p, h.view());
    let (mu, sigma) = attentive_stats(h.view(), alpha.view());
    let pooled = concatenate(Axis(0), &[mu.view(), sigma.view()]).unwrap();

    let fc_pre = p.fc.forward(pooled.view());
    let mut fc = fc_pre.clone();
    relu_inplace(&mut fc);
    let logits = p.ri_head.forward(fc.view()).to_vec();
    let omega_hat = sigmoid(p.pq_head.forward(fc.view())[0]);

    let trace = Trace {
        input,
        frame_pre,
        blocks,
        h,
        attn_hidden,
        alpha,
        mu,
        sigma,
        pooled,
        fc_pre,
        fc,
        omega_hat,
    };
    (ForwardOutput { omega_hat, logits }, trace)
}

/// The hierarchical split of a Res2 block: group 0 passes through, group 1 is
/// convolved, and group `j >= 2` is convolved after adding group `j - 1`'s output.
///
/// Returns the concatenated group outputs plus the branch inputs and
/// pre-activations.
pub fn res2_groups(
    branches: &[Conv1d],
    a: ArrayView2<f64>,
) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let scale = branches.len() + 1;
    let width = a.nrows() / scale;
    let mut ycat = Array2::zeros(a.raw_dim());
    ycat.slice_mut(s![0..width, ..]).assign(&a.slice(s![0..width, ..]));
    let mut branch_in = Vec::with_capacity(branches.len());
    let mut branch_pre = Vec::with_capacity(branches.len());
    let mut prev: Option<Array2<f64>> = None;
    for (g, conv) in branches.iter().enumerate() {
        let j = g + 1;
        let mut u = a.slice(s![j * width..(j + 1) * width, ..]).to_owned();
        if let Some(p) = &prev {
            u += p;
        }
        let pre = conv.forward(u.view());
        let mut y = pre.clone();
        relu_inplace(&mut y);
        ycat.slice_mut(s![j * width..(j + 1) * width, ..]).assign(&y);
        branch_in.push(u);
        branch_pre.push(pre);
        prev = Some(y);
    }
    (ycat, branch_in, branch_pre)
}

fn res2_forward(block: &Res2Block, input: Array2<f64>) -> (Array2<f64>, BlockTrace) {
    let a_pre = block.conv_in.forward(input.view());
    let mut a = a_pre.clone();
    relu_inplace(&mut a);

    let (ycat, branch_in, branch_pre) = res2_groups(&block.branches, a.view());

    let b_pre = block.conv_out.forward(ycat.view());
    let mut b = b_pre.clone();
    relu_inplace(&mut b);

    let (mean, z_pre, z, gate) = se_gate(block, b.view());
    let out = &b * &gate.view().insert_axis(Axis(1)) + &input;

    let trace = BlockTrace {
        input,
        a_pre,
        branch_in,
        branch_pre,
        ycat,
        b_pre,
        b,
        mean,
        z_pre,
        z,
        gate,
    };
    (out, trace)
}

/// Squeeze-excitation: time-mean, bottleneck (ReLU), expansion (sigmoid).
fn se_gate(block: &Res2Block, b: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
    let mean = b.mean_axis(Axis(1)).expect("at least one frame");
    let z_pre = block.se_squeeze.forward(mean.view());
    let mut z = z_pre.clone();
    relu_inplace(&mut z);
    let gate = block.se_excite.forward(z.view()).mapv(sigmoid);
    (mean, z_pre, z, gate)
}

/// Applies the squeeze-excitation gate of `block` to `x`.
pub fn se_apply(block: &Res2Block, x: ArrayView2<f64>) -> Array2<f64> {
    let (_, _, _, gate) = se_gate(block, x);
    &x * &gate.view().insert_axis(Axis(1))
}

fn attention_weights(p: &Parameters, h: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let hidden = p.attn_hidden.forward(h).mapv(f64::tanh);
    let mut alpha = p.attn_score.forward(hidden.view());
    for mut row in alpha.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    (hidden, alpha)
}

/// Weighted mean and standard deviation of each row of `h` under the weights `alpha`.
pub fn attentive_stats(h: ArrayView2<f64>, alpha: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let weighted = &h * &alpha;
    let mu = weighted.sum_axis(Axis(1));
    let second = (&weighted * &h).sum_axis(Axis(1));
    let sigma = ndarray::Zip::from(&second)
        .and(&mu)
        .map_collect(|&s2, &m| ((s2 - m * m).max(0.0) + POOL_EPS).sqrt());
    (mu, sigma)
}

fn backward_stacked(p: &Parameters, t: &Trace, d_omega: f64, d_logits: &[f64], g: &mut Parameters) {
    // heads
    let d_s = Array1::from_elem(1, d_omega * t.omega_hat * (1.0 - t.omega_hat));
    let d_logits = Array1::from_vec(d_logits.to_vec());
    let mut d_fc = p.pq_head.backward(t.fc.view(), &d_s, &mut g.pq_head);
    d_fc += &p.ri_head.backward(t.fc.view(), &d_logits, &mut g.ri_head);
    relu_backward(&mut d_fc, &t.fc_pre);
    let d_pooled = p.fc.backward(t.pooled.view(), &d_fc, &mut g.fc);

    // attentive statistics
    let c = t.mu.len();
    let d_mu_direct = d_pooled.slice(s![0..c]).to_owned();
    let d_sigma = d_pooled.slice(s![c..]).to_owned();
    let mut d_second = Array1::zeros(c);
    let mut d_mu = d_mu_direct;
    for i in 0..c {
        let var_raw = t.sigma[i] * t.sigma[i] - POOL_EPS;
        // the clamp at zero variance has zero gradient
        let d_var = if var_raw > 0.0 { d_sigma[i] / (2.0 * t.sigma[i]) } else { 0.0 };
        d_second[i] = d_var;
        d_mu[i] -= 2.0 * t.mu[i] * d_var;
    }
    let h = &t.h;
    let d_mu_col = d_mu.view().insert_axis(Axis(1));
    let d_sec_col = d_second.view().insert_axis(Axis(1));
    let d_alpha = h * &d_mu_col + &(h * h * &d_sec_col);
    let mut d_h = &t.alpha * &(&d_mu_col + &(h * &d_sec_col * 2.0));

    // softmax over time
    let dot = (&t.alpha * &d_alpha).sum_axis(Axis(1));
    let d_scores = &t.alpha * &(&d_alpha - &dot.view().insert_axis(Axis(1)));
    let mut d_hidden = p.attn_score.backward(t.attn_hidden.view(), &d_scores, &mut g.attn_score);
    ndarray::Zip::from(&mut d_hidden)
        .and(&t.attn_hidden)
        .for_each(|d, &a| *d *= 1.0 - a * a);
    d_h += &p.attn_hidden.backward(h.view(), &d_hidden, &mut g.attn_hidden);

    for (b, (block, bt)) in p.blocks.iter().zip(&t.blocks).enumerate().rev() {
        d_h = res2_backward(block, bt, d_h, &mut g.blocks[b]);
    }

    relu_backward(&mut d_h, &t.frame_pre);
    p.frame.backward(t.input.view(), &d_h, &mut g.frame);
}

fn res2_backward(block: &Res2Block, t: &BlockTrace, d_out: Array2<f64>, g: &mut Res2Block) -> Array2<f64> {
    let n_frames = t.b.ncols() as f64;
    let gate_col = t.gate.view().insert_axis(Axis(1));

    // squeeze-excitation
    let d_gate = (&d_out * &t.b).sum_axis(Axis(1));
    let mut d_b = &d_out * &gate_col;
    let d_gate_pre = ndarray::Zip::from(&d_gate)
        .and(&t.gate)
        .map_collect(|&d, &s| d * s * (1.0 - s));
    let mut d_z = block.se_excite.backward(t.z.view(), &d_gate_pre, &mut g.se_excite);
    relu_backward(&mut d_z, &t.z_pre);
    let d_mean = block.se_squeeze.backward(t.mean.view(), &d_z, &mut g.se_squeeze);
    d_b += &(d_mean / n_frames).insert_axis(Axis(1));

    relu_backward(&mut d_b, &t.b_pre);
    let d_ycat = block.conv_out.backward(t.ycat.view(), &d_b, &mut g.conv_out);

    // hierarchical groups, last to first
    let scale = block.branches.len() + 1;
    let width = d_ycat.nrows() / scale;
    let mut d_a = Array2::zeros(d_ycat.raw_dim());
    d_a.slice_mut(s![0..width, ..]).assign(&d_ycat.slice(s![0..width, ..]));
    let mut carry: Option<Array2<f64>> = None;
    for gi in (0..block.branches.len()).rev() {
        let j = gi + 1;
        let mut d_y = d_ycat.slice(s![j * width..(j + 1) * width, ..]).to_owned();
        if let Some(c) = carry.take() {
            d_y += &c;
        }
        relu_backward(&mut d_y, &t.branch_pre[gi]);
        let d_u = block.branches[gi].backward(t.branch_in[gi].view(), &d_y, &mut g.branches[gi]);
        d_a.slice_mut(s![j * width..(j + 1) * width, ..]).assign(&d_u);
        if j >= 2 {
            carry = Some(d_u);
        }
    }

    relu_backward(&mut d_a, &t.a_pre);
    let d_in = block.conv_in.backward(t.input.view(), &d_a, &mut g.conv_in);
    d_out + d_in
}
