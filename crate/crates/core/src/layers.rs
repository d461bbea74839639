//! Neural-network layer vocabulary: dense, LSTM, BiLSTM, and single/multi
//! head dot-product self-attention over a short state sequence.
//!
//! All layers are parameter containers plus a forward function expressed
//! through [`crate::autodiff`], so every layer is covered by the same
//! finite-difference gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, Activation, Result, Tensor};

/// Uniform Glorot-style initialization in ±sqrt(6/(fan_in+fan_out)).
pub fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let vals: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::param(&[fan_in, fan_out], vals).expect("weight shape")
}

fn zero_bias(n: usize) -> Tensor {
    Tensor::param(&[n], vec![0.0; n]).expect("bias shape")
}

// ── Dense ──────────────────────────────────────────────────────────────

/// Fully connected layer: `activation(x·W + b)`.
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseParams {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, activation: Activation) -> Self {
        DenseParams {
            weight: init_weight(rng, d_in, d_out),
            bias: zero_bias(d_out),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?
            .add_bias(&self.bias)?
            .activation(self.activation))
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn dense_forward(p: &DenseParams, x: &Tensor) -> Result<Tensor> {
    p.forward(x)
}

// ── LSTM ───────────────────────────────────────────────────────────────

/// Gate order is fixed as (input, forget, candidate, output).
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_CANDIDATE: usize = 2;
pub const GATE_OUTPUT: usize = 3;

/// Parameters for one LSTM direction: per-gate input weights `[d_in×h]`,
/// recurrent weights `[h×h]` and biases `[h]`.
pub struct LstmParams {
    pub wx: [Tensor; 4],
    pub wh: [Tensor; 4],
    pub b: [Tensor; 4],
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize) -> Self {
        let wx = std::array::from_fn(|_| init_weight(rng, d_in, hidden));
        let wh = std::array::from_fn(|_| init_weight(rng, hidden, hidden));
        let b = std::array::from_fn(|gate| {
            // Forget-gate bias starts at 1.0 so early training does not
            // wash out the cell state.
            let fill = if gate == GATE_FORGET { 1.0 } else { 0.0 };
            Tensor::param(&[hidden], vec![fill; hidden]).expect("bias shape")
        });
        LstmParams {
            wx,
            wh,
            b,
            hidden,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(12);
        for g in 0..4 {
            out.push(self.wx[g].clone());
            out.push(self.wh[g].clone());
            out.push(self.b[g].clone());
        }
        out
    }

    pub fn d_in(&self) -> usize {
        self.wx[0].shape()[0]
    }

    fn gate(&self, g: usize, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        x.matmul(&self.wx[g])?
            .add(&h.matmul(&self.wh[g])?)?
            .add_bias(&self.b[g])
    }

    /// One recurrence step. `x` is `[1×d_in]`, `h`/`c` are `[1×h]`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let i = self.gate(GATE_INPUT, x, h)?.activation(Activation::Sigmoid);
        let f = self.gate(GATE_FORGET, x, h)?.activation(Activation::Sigmoid);
        let g = self
            .gate(GATE_CANDIDATE, x, h)?
            .activation(Activation::Tanh);
        let o = self.gate(GATE_OUTPUT, x, h)?.activation(Activation::Sigmoid);
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.activation(Activation::Tanh))?;
        Ok((h_next, c_next))
    }
}

/// All hidden states over the sequence; callers that only need the final
/// state use [`lstm_sequence_forward`].
pub fn lstm_all_hidden(p: &LstmParams, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    if xs.is_empty() {
        return Err(AdError::InvalidShape {
            op: "lstm_sequence_forward",
            detail: "empty input sequence".into(),
        });
    }
    let mut h = Tensor::zeros(&[1, p.hidden]);
    let mut c = Tensor::zeros(&[1, p.hidden]);
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let (h_next, c_next) = p.step(x, &h, &c)?;
        h = h_next;
        c = c_next;
        out.push(h.clone());
    }
    Ok(out)
}

/// Standard LSTM recurrence from zero initial state; returns the final
/// hidden state `[1×h]`.
pub fn lstm_sequence_forward(p: &LstmParams, xs: &[Tensor]) -> Result<Tensor> {
    let hs = lstm_all_hidden(p, xs)?;
    Ok(hs.last().expect("non-empty").clone())
}

/// Forward-direction final hidden over `xs` concatenated with the
/// backward-direction final hidden over reversed `xs`: `[1×2h]`.
pub fn bilstm_sequence_forward(
    pf: &LstmParams,
    pb: &LstmParams,
    xs: &[Tensor],
) -> Result<Tensor> {
    let fwd = lstm_sequence_forward(pf, xs)?;
    let reversed: Vec<Tensor> = xs.iter().rev().cloned().collect();
    let bwd = lstm_sequence_forward(pb, &reversed)?;
    Tensor::concat(&[fwd, bwd])
}

// ── Self-attention ─────────────────────────────────────────────────────

/// Query/key/value projections for one attention head.
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl HeadParams {
    pub fn init(rng: &mut ChaCha8Rng, d_x: usize, d_k: usize) -> Self {
        HeadParams {
            wq: init_weight(rng, d_x, d_k),
            wk: init_weight(rng, d_x, d_k),
            wv: init_weight(rng, d_x, d_k),
        }
    }
}

/// Scaled dot-product self-attention over a sequence of `t` states of
/// width `d_x`. `w_out` is only present for the multi-head form; head
/// outputs are flattened across time before the output projection, so
/// `w_out` is `[(H·d_k·t)×d_out]`.
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_out: Option<Tensor>,
    pub d_x: usize,
    pub d_k: usize,
    pub t: usize,
}

impl AttentionParams {
    pub fn init_single(rng: &mut ChaCha8Rng, d_x: usize, d_k: usize, t: usize) -> Self {
        AttentionParams {
            heads: vec![HeadParams::init(rng, d_x, d_k)],
            w_out: None,
            d_x,
            d_k,
            t,
        }
    }

    pub fn init_multi(
        rng: &mut ChaCha8Rng,
        d_x: usize,
        d_k: usize,
        t: usize,
        n_heads: usize,
        d_out: usize,
    ) -> Self {
        let heads = (0..n_heads).map(|_| HeadParams::init(rng, d_x, d_k)).collect();
        let w_out = init_weight(rng, n_heads * d_k * t, d_out);
        AttentionParams {
            heads,
            w_out: Some(w_out),
            d_x,
            d_k,
            t,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.push(h.wq.clone());
            out.push(h.wk.clone());
            out.push(h.wv.clone());
        }
        if let Some(w) = &self.w_out {
            out.push(w.clone());
        }
        out
    }
}

fn stack_states(xs: &[Tensor], d_x: usize, op: &'static str) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(AdError::InvalidShape {
            op: "attention",
            detail: "empty state sequence".into(),
        });
    }
    for x in xs {
        if x.shape() != [1, d_x] {
            return Err(AdError::InvalidShape {
                op,
                detail: format!("state has shape {:?}, expected [1, {}]", x.shape(), d_x),
            });
        }
    }
    Tensor::concat_rows(xs)
}

/// Attention matrix for one head: rows are the per-position scores A_i.
/// `x` is the stacked state sequence `[t×d_x]`.
pub fn head_attention(head: &HeadParams, x: &Tensor) -> Result<Tensor> {
    let d_k = head.wq.shape()[1];
    let q = x.matmul(&head.wq)?;
    let k = x.matmul(&head.wk)?;
    let v = x.matmul(&head.wv)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d_k as f64).sqrt());
    let weights = scores.softmax_rows()?;
    weights.matmul(&v)
}

/// Single-head attention: returns the sequence `[A_1, …, A_t]`, each a
/// `[1×d_k]` tensor.
pub fn single_head_attention(p: &AttentionParams, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    if p.n_heads() != 1 {
        return Err(AdError::InvalidShape {
            op: "single_head_attention",
            detail: format!("expected 1 head, got {}", p.n_heads()),
        });
    }
    let x = stack_states(xs, p.d_x, "single_head_attention")?;
    let a = head_attention(&p.heads[0], &x)?;
    (0..xs.len()).map(|i| a.row(i)).collect()
}

/// Multi-head attention: per-head attention sequences are flattened
/// across time, concatenated across heads, and projected by `w_out`.
/// Returns a `[1×d_out]` tensor.
pub fn multi_head_attention(p: &AttentionParams, xs: &[Tensor]) -> Result<Tensor> {
    let w_out = p.w_out.as_ref().ok_or_else(|| AdError::InvalidShape {
        op: "multi_head_attention",
        detail: "output projection W_O missing".into(),
    })?;
    let t = xs.len();
    let expected_in = p.n_heads() * p.d_k * t;
    if w_out.shape()[0] != expected_in {
        return Err(AdError::InvalidShape {
            op: "multi_head_attention",
            detail: format!(
                "W_O input width {} does not match H·d_k·t = {}·{}·{} = {}",
                w_out.shape()[0],
                p.n_heads(),
                p.d_k,
                t,
                expected_in
            ),
        });
    }
    let x = stack_states(xs, p.d_x, "multi_head_attention")?;
    let mut flat_heads = Vec::with_capacity(p.n_heads());
    for head in &p.heads {
        let a = head_attention(head, &x)?;
        flat_heads.push(a.reshape(&[1, p.d_k * t])?);
    }
    let joined = Tensor::concat(&flat_heads)?;
    joined.matmul(w_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_difference_check_all};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::leaf(&[1, n], vals).unwrap()
    }

    #[test]
    fn dense_zero_params_give_zero_output() {
        let mut r = rng(0);
        let p = DenseParams::init(&mut r, 3, 2, Activation::Tanh);
        p.weight.set_values(&[0.0; 6]);
        let x = random_row(&mut r, 3);
        let out = p.forward(&x).unwrap();
        assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn dense_identity_relu_passes_non_negative_input() {
        let mut r = rng(1);
        let p = DenseParams::init(&mut r, 2, 2, Activation::Relu);
        p.weight.set_values(&[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::leaf(&[1, 2], vec![0.5, 2.0]).unwrap();
        let out = p.forward(&x).unwrap();
        assert_eq!(out.to_vec(), vec![0.5, 2.0]);
    }

    #[test]
    fn dense_gradient_check() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let p = DenseParams::init(&mut r, 4, 3, Activation::Tanh);
            let x = random_row(&mut r, 4);
            let target = random_row(&mut r, 3);
            let f = || p.forward(&x)?.mse_loss(&target);
            let err = finite_difference_check_all(f, &p.params(), 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn lstm_zero_params_keep_hidden_at_zero() {
        let mut r = rng(2);
        let p = LstmParams::init(&mut r, 3, 4);
        for t in p.wx.iter().chain(p.wh.iter()).chain(p.b.iter()) {
            t.set_values(&vec![0.0; t.numel()]);
        }
        let xs: Vec<Tensor> = (0..3).map(|_| random_row(&mut r, 3)).collect();
        let hs = lstm_all_hidden(&p, &xs).unwrap();
        for h in hs {
            assert!(h.to_vec().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lstm_single_step_equals_cell_recurrence() {
        let mut r = rng(3);
        let p = LstmParams::init(&mut r, 3, 4);
        let x = random_row(&mut r, 3);
        let seq = lstm_sequence_forward(&p, std::slice::from_ref(&x)).unwrap();
        let (h, _) = p
            .step(&x, &Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]))
            .unwrap();
        assert_eq!(seq.to_vec(), h.to_vec());
    }

    #[test]
    fn lstm_matches_loop_oracle() {
        // Independent scalar-loop recurrence, no autodiff involved.
        let mut r = rng(4);
        let d_in = 3;
        let h = 2;
        let p = LstmParams::init(&mut r, d_in, h);
        let xs: Vec<Tensor> = (0..3).map(|_| random_row(&mut r, d_in)).collect();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = |g: usize, x: &[f64], hprev: &[f64]| -> Vec<f64> {
            let wx = p.wx[g].to_vec();
            let wh = p.wh[g].to_vec();
            let b = p.b[g].to_vec();
            (0..h)
                .map(|j| {
                    let mut s = b[j];
                    for (i, xi) in x.iter().enumerate() {
                        s += xi * wx[i * h + j];
                    }
                    for (i, hi) in hprev.iter().enumerate() {
                        s += hi * wh[i * h + j];
                    }
                    s
                })
                .collect()
        };

        let mut hv = vec![0.0; h];
        let mut cv = vec![0.0; h];
        for x in &xs {
            let xv = x.to_vec();
            let ig: Vec<f64> = gate(GATE_INPUT, &xv, &hv).iter().map(|v| sigmoid(*v)).collect();
            let fg: Vec<f64> = gate(GATE_FORGET, &xv, &hv).iter().map(|v| sigmoid(*v)).collect();
            let gg: Vec<f64> = gate(GATE_CANDIDATE, &xv, &hv).iter().map(|v| v.tanh()).collect();
            let og: Vec<f64> = gate(GATE_OUTPUT, &xv, &hv).iter().map(|v| sigmoid(*v)).collect();
            for j in 0..h {
                cv[j] = fg[j] * cv[j] + ig[j] * gg[j];
            }
            for j in 0..h {
                hv[j] = og[j] * cv[j].tanh();
            }
        }

        let got = lstm_sequence_forward(&p, &xs).unwrap().to_vec();
        for (a, b) in got.iter().zip(hv.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lstm_rejects_empty_sequence() {
        let mut r = rng(5);
        let p = LstmParams::init(&mut r, 2, 2);
        assert!(lstm_sequence_forward(&p, &[]).is_err());
    }

    #[test]
    fn lstm_gradient_check() {
        for seed in 0..3 {
            let mut r = rng(100 + seed);
            let p = LstmParams::init(&mut r, 2, 3);
            let xs: Vec<Tensor> = (0..2).map(|_| random_row(&mut r, 2)).collect();
            let target = random_row(&mut r, 3);
            let f = || lstm_sequence_forward(&p, &xs)?.mse_loss(&target);
            let err = finite_difference_check_all(f, &p.params(), 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn bilstm_output_width_is_twice_hidden() {
        let mut r = rng(6);
        let pf = LstmParams::init(&mut r, 3, 4);
        let pb = LstmParams::init(&mut r, 3, 4);
        let xs: Vec<Tensor> = (0..2).map(|_| random_row(&mut r, 3)).collect();
        let out = bilstm_sequence_forward(&pf, &pb, &xs).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
    }

    #[test]
    fn bilstm_palindrome_with_shared_params_is_symmetric() {
        let mut r = rng(7);
        let p = LstmParams::init(&mut r, 2, 3);
        let a = random_row(&mut r, 2);
        let b = random_row(&mut r, 2);
        let xs = vec![a.clone(), b.clone(), a.clone()];
        let out = bilstm_sequence_forward(&p, &p, &xs).unwrap().to_vec();
        for j in 0..3 {
            assert!((out[j] - out[3 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_singleton_sequence_is_value_projection() {
        let mut r = rng(8);
        let p = AttentionParams::init_single(&mut r, 3, 2, 1);
        let x = random_row(&mut r, 3);
        let out = single_head_attention(&p, std::slice::from_ref(&x)).unwrap();
        assert_eq!(out.len(), 1);
        let expect = x.matmul(&p.heads[0].wv).unwrap().to_vec();
        for (a, b) in out[0].to_vec().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_identical_states_average_to_value_projection() {
        let mut r = rng(9);
        let p = AttentionParams::init_single(&mut r, 3, 2, 3);
        let x = random_row(&mut r, 3);
        let xs = vec![x.clone(), x.clone(), x.clone()];
        let out = single_head_attention(&p, &xs).unwrap();
        let expect = x.matmul(&p.heads[0].wv).unwrap().to_vec();
        for a in out {
            for (u, v) in a.to_vec().iter().zip(expect.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_hand_worked_two_state_case() {
        // x = {[1,0],[0,1]}, identity projections, d_k = 2:
        // scores for position 1 are (1/√2, 0) → softmax ≈ (0.6698, 0.3302)
        // so A_1 = 0.6698·[1,0] + 0.3302·[0,1].
        let mut r = rng(10);
        let p = AttentionParams::init_single(&mut r, 2, 2, 2);
        let eye = [1.0, 0.0, 0.0, 1.0];
        p.heads[0].wq.set_values(&eye);
        p.heads[0].wk.set_values(&eye);
        p.heads[0].wv.set_values(&eye);
        let x1 = Tensor::leaf(&[1, 2], vec![1.0, 0.0]).unwrap();
        let x2 = Tensor::leaf(&[1, 2], vec![0.0, 1.0]).unwrap();
        let out = single_head_attention(&p, &[x1, x2]).unwrap();
        let a1 = out[0].to_vec();
        assert!((a1[0] - 0.6698).abs() < 5e-5, "{a1:?}");
        assert!((a1[1] - 0.3302).abs() < 5e-5, "{a1:?}");
    }

    #[test]
    fn multi_head_identity_w_out_reproduces_flat_single_head() {
        let mut r = rng(11);
        let d_x = 3;
        let d_k = 2;
        let t = 2;
        let p = AttentionParams::init_multi(&mut r, d_x, d_k, t, 1, d_k * t);
        let mut eye = vec![0.0; (d_k * t) * (d_k * t)];
        for i in 0..d_k * t {
            eye[i * (d_k * t) + i] = 1.0;
        }
        p.w_out.as_ref().unwrap().set_values(&eye);
        let xs: Vec<Tensor> = (0..t).map(|_| random_row(&mut r, d_x)).collect();
        let multi = multi_head_attention(&p, &xs).unwrap().to_vec();

        let single = AttentionParams {
            heads: vec![HeadParams {
                wq: p.heads[0].wq.clone(),
                wk: p.heads[0].wk.clone(),
                wv: p.heads[0].wv.clone(),
            }],
            w_out: None,
            d_x,
            d_k,
            t,
        };
        let seq = single_head_attention(&single, &xs).unwrap();
        let mut flat = Vec::new();
        for a in seq {
            flat.extend(a.to_vec());
        }
        for (a, b) in multi.iter().zip(flat.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn multi_head_output_width_is_d_out() {
        let mut r = rng(12);
        let p = AttentionParams::init_multi(&mut r, 4, 3, 2, 3, 5);
        let xs: Vec<Tensor> = (0..2).map(|_| random_row(&mut r, 4)).collect();
        let out = multi_head_attention(&p, &xs).unwrap();
        assert_eq!(out.shape(), &[1, 5]);
    }

    #[test]
    fn multi_head_rejects_inconsistent_w_out() {
        let mut r = rng(13);
        let p = AttentionParams::init_multi(&mut r, 4, 3, 2, 2, 5);
        // t=3 sequence against W_O sized for t=2.
        let xs: Vec<Tensor> = (0..3).map(|_| random_row(&mut r, 4)).collect();
        assert!(multi_head_attention(&p, &xs).is_err());
    }

    #[test]
    fn multi_head_zero_values_give_zero_output() {
        let mut r = rng(14);
        let p = AttentionParams::init_multi(&mut r, 3, 2, 2, 2, 4);
        for h in &p.heads {
            h.wv.set_values(&vec![0.0; h.wv.numel()]);
        }
        let xs: Vec<Tensor> = (0..2).map(|_| random_row(&mut r, 3)).collect();
        let out = multi_head_attention(&p, &xs).unwrap();
        assert!(out.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_is_permutation_covariant() {
        let mut r = rng(15);
        let p = AttentionParams::init_single(&mut r, 3, 2, 3);
        let xs: Vec<Tensor> = (0..3).map(|_| random_row(&mut r, 3)).collect();
        let fwd = single_head_attention(&p, &xs).unwrap();
        let perm = vec![xs[2].clone(), xs[0].clone(), xs[1].clone()];
        let out = single_head_attention(&p, &perm).unwrap();
        for (i, j) in [(2usize, 0usize), (0, 1), (1, 2)] {
            let a = fwd[i].to_vec();
            let b = out[j].to_vec();
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradient_check_including_inputs() {
        for seed in 0..5 {
            let mut r = rng(200 + seed);
            let p = AttentionParams::init_multi(&mut r, 3, 2, 2, 2, 3);
            let xs: Vec<Tensor> = (0..2)
                .map(|_| {
                    let vals: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                    Tensor::param(&[1, 3], vals).unwrap()
                })
                .collect();
            let target = random_row(&mut r, 3);
            let f = || multi_head_attention(&p, &xs)?.mse_loss(&target);
            let mut params = p.params();
            params.extend(xs.iter().cloned());
            let err = finite_difference_check_all(f, &params, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn degenerate_attention_with_zero_queries_averages_states() {
        let mut r = rng(16);
        let p = AttentionParams::init_single(&mut r, 2, 2, 2);
        p.heads[0].wq.set_values(&[0.0; 4]);
        p.heads[0].wk.set_values(&[0.0; 4]);
        p.heads[0].wv.set_values(&[1.0, 0.0, 0.0, 1.0]);
        let x1 = Tensor::leaf(&[1, 2], vec![2.0, 0.0]).unwrap();
        let x2 = Tensor::leaf(&[1, 2], vec![0.0, 4.0]).unwrap();
        let out = single_head_attention(&p, &[x1, x2]).unwrap();
        for a in out {
            let v = a.to_vec();
            assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_bilstm_params_accumulate_grads_from_both_directions() {
        let mut r = rng(17);
        let p = LstmParams::init(&mut r, 2, 2);
        let xs: Vec<Tensor> = (0..2).map(|_| random_row(&mut r, 2)).collect();
        let out = bilstm_sequence_forward(&p, &p, &xs).unwrap();
        let loss = out.mul(&out).unwrap().sum();
        for t in p.params() {
            t.zero_grad();
        }
        backward(&loss).unwrap();
        let any_nonzero = p
            .params()
            .iter()
            .any(|t| t.grad_vec().iter().any(|g| *g != 0.0));
        assert!(any_nonzero);
    }
}
