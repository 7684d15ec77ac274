//! Attention-based encoder-decoder.
//!
//! The encoder is a bidirectional GRU whose per-position forward and backward
//! states are concatenated. The decoder is a GRU conditioned on an additive
//! attention context, with input feeding: the previous target word embedding
//! enters both the recurrent input and the output readout. All computations
//! are recorded on an autodiff [`Graph`], so the same builders serve
//! training, scoring, and incremental beam decoding.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParameterSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    EncRec,
    DecRec,
    Both,
}

impl Variant {
    pub fn has_enc_rec(&self) -> bool {
        matches!(self, Variant::EncRec | Variant::Both)
    }

    pub fn has_dec_rec(&self) -> bool {
        matches!(self, Variant::DecRec | Variant::Both)
    }

    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "baseline" => Ok(Variant::Baseline),
            "enc-rec" => Ok(Variant::EncRec),
            "dec-rec" => Ok(Variant::DecRec),
            "both" => Ok(Variant::Both),
            other => Err(Error::data(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Baseline => "baseline",
            Variant::EncRec => "enc-rec",
            Variant::DecRec => "dec-rec",
            Variant::Both => "both",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Hidden size of the reconstructors.
    pub rec_hidden_dim: usize,
    /// Training pairs longer than this (either side) are filtered out.
    pub max_train_length: usize,
    /// Dropout on the output-layer readout, disabled at evaluation time.
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            source_vocab_size: 30_000,
            target_vocab_size: 30_000,
            embedding_dim: 620,
            hidden_dim: 1000,
            rec_hidden_dim: 1000,
            max_train_length: 20,
            dropout_rate: 0.0,
            variant: Variant::Baseline,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_vocab_size == 0
            || self.target_vocab_size == 0
            || self.embedding_dim == 0
            || self.hidden_dim == 0
            || self.rec_hidden_dim == 0
            || self.max_train_length == 0
        {
            return Err(Error::data("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::data("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }

    /// All parameter names and shapes for this configuration and variant.
    /// Initialization draws in sorted name order, so the listing order here
    /// does not matter.
    pub fn parameter_spec(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.embedding_dim;
        let h = self.hidden_dim;
        let vs = self.source_vocab_size;
        let vt = self.target_vocab_size;
        let mut spec: Vec<(String, Vec<usize>)> = vec![
            ("src_emb".into(), vec![vs, e]),
            ("tgt_emb".into(), vec![vt, e]),
        ];
        for dir in ["enc_fwd", "enc_bwd"] {
            for gate in ["z", "r", "h"] {
                spec.push((format!("{dir}.w_{gate}"), vec![h, e]));
                spec.push((format!("{dir}.u_{gate}"), vec![h, h]));
                spec.push((format!("{dir}.b_{gate}"), vec![h]));
            }
        }
        for gate in ["z", "r", "h"] {
            spec.push((format!("dec.w_{gate}"), vec![h, e + 2 * h]));
            spec.push((format!("dec.u_{gate}"), vec![h, h]));
            spec.push((format!("dec.b_{gate}"), vec![h]));
        }
        spec.push(("dec.w_init".into(), vec![h, h]));
        spec.push(("att.w".into(), vec![h, h]));
        spec.push(("att.u".into(), vec![h, 2 * h]));
        spec.push(("att.v".into(), vec![h]));
        spec.push(("out.w_s".into(), vec![h, h]));
        spec.push(("out.w_y".into(), vec![h, e]));
        spec.push(("out.w_c".into(), vec![h, 2 * h]));
        spec.push(("out.b".into(), vec![h]));
        spec.push(("out.w_o".into(), vec![vt, h]));
        spec.push(("out.b_o".into(), vec![vt]));

        if self.variant.has_enc_rec() {
            spec.extend(reconstructor_spec("enc_rec", self, 2 * h));
        }
        if self.variant.has_dec_rec() {
            spec.extend(reconstructor_spec("dec_rec", self, h));
        }
        spec
    }

    /// Names belonging to the encoder-decoder parameter block.
    pub fn theta_names(&self) -> Vec<String> {
        self.parameter_spec()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.starts_with("enc_rec.") && !n.starts_with("dec_rec."))
            .collect()
    }

    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut spec = self.parameter_spec();
        spec.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = Rng::new(seed);
        let mut params = ParameterSet::new();
        for (name, shape) in spec {
            params.init_uniform(&name, shape, 0.08, &mut rng);
        }
        params
    }
}

fn reconstructor_spec(
    prefix: &str,
    config: &ModelConfig,
    input_dim: usize,
) -> Vec<(String, Vec<usize>)> {
    let e = config.embedding_dim;
    let hr = config.rec_hidden_dim;
    let vs = config.source_vocab_size;
    let mut spec = Vec::new();
    for gate in ["z", "r", "h"] {
        spec.push((format!("{prefix}.gru.w_{gate}"), vec![hr, e + input_dim]));
        spec.push((format!("{prefix}.gru.u_{gate}"), vec![hr, hr]));
        spec.push((format!("{prefix}.gru.b_{gate}"), vec![hr]));
    }
    spec.push((format!("{prefix}.w_init"), vec![hr, input_dim]));
    spec.push((format!("{prefix}.att.w"), vec![hr, hr]));
    spec.push((format!("{prefix}.att.u"), vec![hr, input_dim]));
    spec.push((format!("{prefix}.att.v"), vec![hr]));
    spec.push((format!("{prefix}.out.w_s"), vec![hr, hr]));
    spec.push((format!("{prefix}.out.w_y"), vec![hr, e]));
    spec.push((format!("{prefix}.out.w_c"), vec![hr, input_dim]));
    spec.push((format!("{prefix}.out.b"), vec![hr]));
    spec.push((format!("{prefix}.out.w_o"), vec![vs, hr]));
    spec.push((format!("{prefix}.out.b_o"), vec![vs]));
    spec
}

/// Whether to draw dropout masks; evaluation never drops.
pub enum Mode<'r> {
    Train { rng: &'r mut Rng },
    Eval,
}

/// GRU weights as graph nodes.
pub(crate) struct GruNodes {
    w_z: NodeId,
    u_z: NodeId,
    b_z: NodeId,
    w_r: NodeId,
    u_r: NodeId,
    b_r: NodeId,
    w_h: NodeId,
    u_h: NodeId,
    b_h: NodeId,
}

impl GruNodes {
    pub(crate) fn load(g: &mut Graph, params: &ParameterSet, prefix: &str) -> Result<Self> {
        let get = |g: &mut Graph, name: String| -> Result<NodeId> {
            Ok(g.param(&name, params.get(&name)?))
        };
        Ok(GruNodes {
            w_z: get(g, format!("{prefix}.w_z"))?,
            u_z: get(g, format!("{prefix}.u_z"))?,
            b_z: get(g, format!("{prefix}.b_z"))?,
            w_r: get(g, format!("{prefix}.w_r"))?,
            u_r: get(g, format!("{prefix}.u_r"))?,
            b_r: get(g, format!("{prefix}.b_r"))?,
            w_h: get(g, format!("{prefix}.w_h"))?,
            u_h: get(g, format!("{prefix}.u_h"))?,
            b_h: get(g, format!("{prefix}.b_h"))?,
        })
    }

    /// z = sig(Wz x + Uz h + bz); r = sig(Wr x + Ur h + br);
    /// cand = tanh(Wh x + Uh (r*h) + bh); h' = (1-z)*h + z*cand.
    pub(crate) fn step(&self, g: &mut Graph, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let gate = |g: &mut Graph, w, u, b, x, h| -> Result<NodeId> {
            let wx = g.matvec(w, x)?;
            let uh = g.matvec(u, h)?;
            let s = g.add(wx, uh)?;
            g.add(s, b)
        };
        let z_pre = gate(g, self.w_z, self.u_z, self.b_z, x, h_prev)?;
        let z = g.sigmoid(z_pre)?;
        let r_pre = gate(g, self.w_r, self.u_r, self.b_r, x, h_prev)?;
        let r = g.sigmoid(r_pre)?;
        let rh = g.mul(r, h_prev)?;
        let c_pre = gate(g, self.w_h, self.u_h, self.b_h, x, rh)?;
        let cand = g.tanh(c_pre)?;
        // (1-z)*h + z*cand, written as h + z*(cand - h)
        let delta = g.sub(cand, h_prev)?;
        let zd = g.mul(z, delta)?;
        g.add(h_prev, zd)
    }
}

/// Additive attention over a fixed sequence of states, with the
/// state-independent half of each energy precomputed once per sequence.
pub(crate) struct AttentionNodes {
    w: NodeId,
    v: NodeId,
    pub(crate) states: Vec<NodeId>,
    precomputed: Vec<NodeId>,
}

impl AttentionNodes {
    pub(crate) fn prepare(
        g: &mut Graph,
        params: &ParameterSet,
        prefix: &str,
        states: &[NodeId],
    ) -> Result<Self> {
        let w = g.param(&format!("{prefix}.w"), params.get(&format!("{prefix}.w"))?);
        let u = g.param(&format!("{prefix}.u"), params.get(&format!("{prefix}.u"))?);
        let v = g.param(&format!("{prefix}.v"), params.get(&format!("{prefix}.v"))?);
        let precomputed = states
            .iter()
            .map(|&h| g.matvec(u, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionNodes {
            w,
            v,
            states: states.to_vec(),
            precomputed,
        })
    }

    /// alpha = softmax_j(v . tanh(W s + U h_j)); context = sum_j alpha_j h_j.
    pub(crate) fn step(&self, g: &mut Graph, s_prev: NodeId) -> Result<(NodeId, NodeId)> {
        let ws = g.matvec(self.w, s_prev)?;
        let mut energies = Vec::with_capacity(self.precomputed.len());
        for &uh in &self.precomputed {
            let pre = g.add(ws, uh)?;
            let act = g.tanh(pre)?;
            energies.push(g.dot(self.v, act)?);
        }
        let energy_vec = g.concat(&energies)?;
        let alpha = g.softmax(energy_vec)?;
        let context = g.weighted_sum(alpha, &self.states)?;
        Ok((alpha, context))
    }
}

/// Encoder output as graph nodes: one concatenated state per source position
/// plus the backward state at the first position (the decoder init summary).
pub(crate) struct EncoderNodes {
    pub(crate) states: Vec<NodeId>,
    pub(crate) bwd_first: NodeId,
}

fn check_ids(ids: &[usize], vocab_size: usize, side: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::data(format!("empty {side} sentence")));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::data(format!(
            "{side} token id {bad} out of range (vocab size {vocab_size})"
        )));
    }
    Ok(())
}

pub(crate) fn build_encoder(
    g: &mut Graph,
    params: &ParameterSet,
    config: &ModelConfig,
    x: &[usize],
) -> Result<EncoderNodes> {
    check_ids(x, config.source_vocab_size, "source")?;
    let emb = g.param("src_emb", params.get("src_emb")?);
    let embedded: Vec<NodeId> = x
        .iter()
        .map(|&id| g.embed(emb, id))
        .collect::<Result<Vec<_>>>()?;

    let fwd = GruNodes::load(g, params, "enc_fwd")?;
    let bwd = GruNodes::load(g, params, "enc_bwd")?;
    let zero = g.constant(Tensor::zeros(vec![config.hidden_dim]));

    let mut fwd_states = Vec::with_capacity(x.len());
    let mut state = zero;
    for &e in &embedded {
        state = fwd.step(g, e, state)?;
        fwd_states.push(state);
    }
    let mut bwd_states = vec![zero; x.len()];
    state = zero;
    for (j, &e) in embedded.iter().enumerate().rev() {
        state = bwd.step(g, e, state)?;
        bwd_states[j] = state;
    }
    let states = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderNodes {
        states,
        bwd_first: bwd_states[0],
    })
}

/// Decoder parameters plus prepared source attention: everything a decoding
/// step needs besides the running state.
pub(crate) struct DecoderNodes {
    gru: GruNodes,
    attention: AttentionNodes,
    tgt_emb: NodeId,
    w_s: NodeId,
    w_y: NodeId,
    w_c: NodeId,
    b: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    pub(crate) init_state: NodeId,
}

pub(crate) struct StepNodes {
    pub(crate) state: NodeId,
    pub(crate) logits: NodeId,
    pub(crate) alpha: NodeId,
    #[allow(dead_code)]
    pub(crate) context: NodeId,
}

impl DecoderNodes {
    pub(crate) fn prepare(
        g: &mut Graph,
        params: &ParameterSet,
        _config: &ModelConfig,
        enc: &EncoderNodes,
    ) -> Result<Self> {
        let gru = GruNodes::load(g, params, "dec")?;
        let attention = AttentionNodes::prepare(g, params, "att", &enc.states)?;
        let w_init = g.param("dec.w_init", params.get("dec.w_init")?);
        let init_pre = g.matvec(w_init, enc.bwd_first)?;
        let init_state = g.tanh(init_pre)?;
        Ok(DecoderNodes {
            gru,
            attention,
            tgt_emb: g.param("tgt_emb", params.get("tgt_emb")?),
            w_s: g.param("out.w_s", params.get("out.w_s")?),
            w_y: g.param("out.w_y", params.get("out.w_y")?),
            w_c: g.param("out.w_c", params.get("out.w_c")?),
            b: g.param("out.b", params.get("out.b")?),
            w_o: g.param("out.w_o", params.get("out.w_o")?),
            b_o: g.param("out.b_o", params.get("out.b_o")?),
            init_state,
        })
    }

    pub(crate) fn step(
        &self,
        g: &mut Graph,
        config: &ModelConfig,
        y_prev: usize,
        s_prev: NodeId,
        mode: &mut Mode,
    ) -> Result<StepNodes> {
        if y_prev >= config.target_vocab_size {
            return Err(Error::data(format!(
                "target token id {y_prev} out of range (vocab size {})",
                config.target_vocab_size
            )));
        }
        let e_y = g.embed(self.tgt_emb, y_prev)?;
        let (alpha, context) = self.attention.step(g, s_prev)?;
        let gru_in = g.concat(&[e_y, context])?;
        let state = self.gru.step(g, gru_in, s_prev)?;

        let rs = g.matvec(self.w_s, state)?;
        let ry = g.matvec(self.w_y, e_y)?;
        let rc = g.matvec(self.w_c, context)?;
        let pre = g.add_n(&[rs, ry, rc])?;
        let pre_b = g.add(pre, self.b)?;
        let readout = g.tanh(pre_b)?;
        let readout = apply_dropout(g, readout, config, mode)?;
        let logits_pre = g.matvec(self.w_o, readout)?;
        let logits = g.add(logits_pre, self.b_o)?;
        Ok(StepNodes {
            state,
            logits,
            alpha,
            context,
        })
    }
}

pub(crate) fn apply_dropout(
    g: &mut Graph,
    x: NodeId,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<NodeId> {
    match mode {
        Mode::Train { rng } if config.dropout_rate > 0.0 => {
            let keep = 1.0 - config.dropout_rate;
            let mask: Vec<f64> = (0..g.value(x).numel())
                .map(|_| if rng.coin(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            g.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

/// Graph-level teacher-forced decode: per-step states, contexts, attention
/// rows, and log-probabilities of the gold tokens.
pub(crate) struct LikelihoodNodes {
    pub(crate) states: Vec<NodeId>,
    #[allow(dead_code)]
    pub(crate) contexts: Vec<NodeId>,
    pub(crate) alphas: Vec<NodeId>,
    pub(crate) step_log_probs: Vec<NodeId>,
    pub(crate) total: NodeId,
}

pub(crate) fn build_log_likelihood(
    g: &mut Graph,
    params: &ParameterSet,
    config: &ModelConfig,
    enc: &EncoderNodes,
    y: &[usize],
    mode: &mut Mode,
) -> Result<LikelihoodNodes> {
    check_ids(y, config.target_vocab_size, "target")?;
    if *y.last().unwrap() != EOS {
        return Err(Error::data("target sentence must end with <eos>"));
    }
    let decoder = DecoderNodes::prepare(g, params, config, enc)?;
    let mut states = Vec::with_capacity(y.len());
    let mut contexts = Vec::with_capacity(y.len());
    let mut alphas = Vec::with_capacity(y.len());
    let mut lps = Vec::with_capacity(y.len());
    let mut s_prev = decoder.init_state;
    let mut y_prev = BOS;
    for &target in y {
        let step = decoder.step(g, config, y_prev, s_prev, mode)?;
        lps.push(g.pick_log_softmax(step.logits, target)?);
        states.push(step.state);
        contexts.push(step.context);
        alphas.push(step.alpha);
        s_prev = step.state;
        y_prev = target;
    }
    let total = g.add_n(&lps)?;
    Ok(LikelihoodNodes {
        states,
        contexts,
        alphas,
        step_log_probs: lps,
        total,
    })
}

// ---------------------------------------------------------------------------
// Value-level API
// ---------------------------------------------------------------------------

/// Encoder output values: one vector of size 2*hidden per source position.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub states: Vec<Vec<f64>>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Teacher-forced decode record: states, contexts, and the attention matrix.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub states: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub step_log_probs: Vec<f64>,
}

pub fn encode(x: &[usize], params: &ParameterSet, config: &ModelConfig) -> Result<EncoderStates> {
    let mut g = Graph::new();
    let enc = build_encoder(&mut g, params, config, x)?;
    Ok(EncoderStates {
        states: enc
            .states
            .iter()
            .map(|&id| g.value(id).data().to_vec())
            .collect(),
    })
}

/// One attention application against precomputed encoder states.
pub fn attend(
    s_prev: &[f64],
    enc: &EncoderStates,
    params: &ParameterSet,
    _config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if enc.is_empty() {
        return Err(Error::data("attend over empty encoder states"));
    }
    let mut g = Graph::new();
    let state_nodes: Vec<NodeId> = enc
        .states
        .iter()
        .map(|h| g.constant(Tensor::vector(h.clone())))
        .collect();
    let attention = AttentionNodes::prepare(&mut g, params, "att", &state_nodes)?;
    let s = g.constant(Tensor::vector(s_prev.to_vec()));
    let (alpha, context) = attention.step(&mut g, s)?;
    Ok((
        g.value(alpha).data().to_vec(),
        g.value(context).data().to_vec(),
    ))
}

/// One decoder step from explicit values: returns the new state, the full
/// output distribution, and the attention row.
pub fn decode_step(
    y_prev: usize,
    s_prev: &[f64],
    enc: &EncoderStates,
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if enc.is_empty() {
        return Err(Error::data("decode_step over empty encoder states"));
    }
    let mut g = Graph::new();
    let state_nodes: Vec<NodeId> = enc
        .states
        .iter()
        .map(|h| g.constant(Tensor::vector(h.clone())))
        .collect();
    // backward half of the first position, as the decoder init summary
    let h = config.hidden_dim;
    let bwd_first = g.constant(Tensor::vector(enc.states[0][h..2 * h].to_vec()));
    let enc_nodes = EncoderNodes {
        bwd_first,
        states: state_nodes,
    };
    let decoder = DecoderNodes::prepare(&mut g, params, config, &enc_nodes)?;
    let s = g.constant(Tensor::vector(s_prev.to_vec()));
    let step = decoder.step(&mut g, config, y_prev, s, &mut Mode::Eval)?;
    let dist = g.softmax(step.logits)?;
    Ok((
        g.value(step.state).data().to_vec(),
        g.value(dist).data().to_vec(),
        g.value(step.alpha).data().to_vec(),
    ))
}

/// Teacher-forced log-likelihood of `y` given `x`, dropout disabled.
pub fn log_likelihood(
    x: &[usize],
    y: &[usize],
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<f64> {
    Ok(log_likelihood_with_trace(x, y, params, config)?.log_likelihood)
}

pub fn log_likelihood_with_trace(
    x: &[usize],
    y: &[usize],
    params: &ParameterSet,
    config: &ModelConfig,
) -> Result<DecoderTrace> {
    let mut g = Graph::new();
    let enc = build_encoder(&mut g, params, config, x)?;
    let ll = build_log_likelihood(&mut g, params, config, &enc, y, &mut Mode::Eval)?;
    Ok(DecoderTrace {
        states: ll.states.iter().map(|&id| g.value(id).data().to_vec()).collect(),
        contexts: ll
            .contexts
            .iter()
            .map(|&id| g.value(id).data().to_vec())
            .collect(),
        attention: ll
            .alphas
            .iter()
            .map(|&id| g.value(id).data().to_vec())
            .collect(),
        log_likelihood: g.value(ll.total).item(),
        step_log_probs: ll
            .step_log_probs
            .iter()
            .map(|&id| g.value(id).item())
            .collect(),
    })
}

#[cfg(test)]
pub(crate) fn tiny_config(vs: usize, vt: usize, e: usize, h: usize, variant: Variant) -> ModelConfig {
    ModelConfig {
        source_vocab_size: vs,
        target_vocab_size: vt,
        embedding_dim: e,
        hidden_dim: h,
        rec_hidden_dim: h,
        max_train_length: 20,
        dropout_rate: 0.0,
        variant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::EOS;

    fn zero_params(config: &ModelConfig) -> ParameterSet {
        let mut params = ParameterSet::new();
        for (name, shape) in config.parameter_spec() {
            params.insert(name, Tensor::zeros(shape));
        }
        params
    }

    #[test]
    fn encoder_states_have_contract_shape() {
        let config = tiny_config(9, 7, 4, 5, Variant::Baseline);
        let params = config.init_params(11);
        let enc = encode(&[4, 5, 6], &params, &config).unwrap();
        assert_eq!(enc.len(), 3);
        for state in &enc.states {
            assert_eq!(state.len(), 2 * config.hidden_dim);
        }
    }

    #[test]
    fn zero_parameters_give_exactly_zero_states() {
        let config = tiny_config(8, 8, 3, 4, Variant::Baseline);
        let params = zero_params(&config);
        let enc = encode(&[4, 5], &params, &config).unwrap();
        for state in &enc.states {
            assert!(state.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_rejects_empty_and_out_of_range() {
        let config = tiny_config(8, 8, 3, 4, Variant::Baseline);
        let params = config.init_params(1);
        assert!(encode(&[], &params, &config).is_err());
        assert!(encode(&[8], &params, &config).is_err());
    }

    #[test]
    fn two_token_scalar_encoder_matches_hand_computation() {
        // 1-dimensional everything so the GRU recurrence can be followed by hand.
        let config = tiny_config(6, 6, 1, 1, Variant::Baseline);
        let mut params = zero_params(&config);
        let set = |p: &mut ParameterSet, name: &str, v: f64| {
            let t = p.get_mut(name).unwrap();
            t.data_mut()[0] = v;
        };
        // distinct embeddings for tokens 4 and 5
        params.get_mut("src_emb").unwrap().data_mut()[4] = 0.5;
        params.get_mut("src_emb").unwrap().data_mut()[5] = -0.75;
        for (name, v) in [
            ("enc_fwd.w_z", 0.3),
            ("enc_fwd.u_z", -0.2),
            ("enc_fwd.b_z", 0.1),
            ("enc_fwd.w_r", 0.7),
            ("enc_fwd.u_r", 0.4),
            ("enc_fwd.b_r", -0.3),
            ("enc_fwd.w_h", 1.1),
            ("enc_fwd.u_h", -0.6),
            ("enc_fwd.b_h", 0.2),
        ] {
            set(&mut params, name, v);
        }

        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let gru = |x: f64, h: f64| -> f64 {
            let z = sigmoid(0.3 * x + -0.2 * h + 0.1);
            let r = sigmoid(0.7 * x + 0.4 * h + -0.3);
            let cand = (1.1 * x + -0.6 * (r * h) + 0.2).tanh();
            (1.0 - z) * h + z * cand
        };
        let e4 = 0.5;
        let e5 = -0.75;
        let f1 = gru(e4, 0.0);
        let f2 = gru(e5, f1);

        let enc = encode(&[4, 5], &params, &config).unwrap();
        // backward GRU has all-zero weights, so its states are zero
        assert!((enc.states[0][0] - f1).abs() < 1e-12);
        assert!((enc.states[1][0] - f2).abs() < 1e-12);
        assert_eq!(enc.states[0][1], 0.0);
        assert_eq!(enc.states[1][1], 0.0);
    }

    #[test]
    fn attention_on_single_state_is_identity() {
        let config = tiny_config(8, 8, 3, 4, Variant::Baseline);
        let params = config.init_params(3);
        let enc = encode(&[4], &params, &config).unwrap();
        let s_prev = vec![0.25; config.hidden_dim];
        let (alpha, context) = attend(&s_prev, &enc, &params, &config).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(context, enc.states[0]);
    }

    #[test]
    fn zero_attention_weights_give_uniform_alpha() {
        let config = tiny_config(8, 8, 3, 4, Variant::Baseline);
        let mut params = config.init_params(4);
        for name in ["att.w", "att.u", "att.v"] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        let enc = encode(&[4, 5, 6], &params, &config).unwrap();
        let (alpha, _) = attend(&vec![0.1; 4], &enc, &params, &config).unwrap();
        for &a in &alpha {
            assert_eq!(a, 1.0 / 3.0);
        }
    }

    #[test]
    fn two_state_attention_matches_hand_computation() {
        // hidden_dim 1 so energies are scalars
        let config = tiny_config(6, 6, 1, 1, Variant::Baseline);
        let mut params = zero_params(&config);
        for (name, v) in [("att.w", 0.5), ("att.v", 2.0)] {
            params.get_mut(name).unwrap().data_mut()[0] = v;
        }
        params
            .get_mut("att.u")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.8, -0.4]);

        let enc = EncoderStates {
            states: vec![vec![1.0, -1.0], vec![-0.5, 0.25]],
        };
        let s_prev = vec![0.6];
        let e1: f64 = 2.0 * (0.5f64 * 0.6 + 0.8 * 1.0 + -0.4 * -1.0).tanh();
        let e2: f64 = 2.0 * (0.5f64 * 0.6 + 0.8 * -0.5 + -0.4 * 0.25).tanh();
        let m = e1.max(e2);
        let (x1, x2) = ((e1 - m).exp(), (e2 - m).exp());
        let (a1, a2) = (x1 / (x1 + x2), x2 / (x1 + x2));
        let expect_c = [a1 * 1.0 + a2 * -0.5, a1 * -1.0 + a2 * 0.25];

        let (alpha, context) = attend(&s_prev, &enc, &params, &config).unwrap();
        assert!((alpha[0] - a1).abs() < 1e-12);
        assert!((alpha[1] - a2).abs() < 1e-12);
        assert!((context[0] - expect_c[0]).abs() < 1e-12);
        assert!((context[1] - expect_c[1]).abs() < 1e-12);
    }

    #[test]
    fn single_token_vocab_distribution_is_one() {
        // target vocab has only one real outcome class when V=1; the softmax
        // over a single logit is [1.0] regardless of parameters
        let mut config = tiny_config(8, 1, 3, 4, Variant::Baseline);
        config.target_vocab_size = 1;
        let params = config.init_params(5);
        let enc = encode(&[4, 5], &params, &config).unwrap();
        let (_, dist, _) = decode_step(0, &vec![0.0; 4], &enc, &params, &config).unwrap();
        assert_eq!(dist, vec![1.0]);
    }

    #[test]
    fn zero_output_layer_gives_uniform_distribution() {
        let config = tiny_config(8, 7, 3, 4, Variant::Baseline);
        let mut params = config.init_params(6);
        for name in ["out.w_o", "out.b_o"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let enc = encode(&[4, 5], &params, &config).unwrap();
        let (_, dist, _) = decode_step(4, &vec![0.3; 4], &enc, &params, &config).unwrap();
        for &p in &dist {
            assert_eq!(p, 1.0 / 7.0);
        }
    }

    #[test]
    fn decode_step_matches_independent_recomputation() {
        let config = tiny_config(9, 8, 3, 4, Variant::Baseline);
        let params = config.init_params(7);
        let enc = encode(&[4, 6, 8], &params, &config).unwrap();
        let s_prev = vec![0.1, -0.2, 0.05, 0.4];
        let y_prev = 5;
        let (state, dist, alpha) = decode_step(y_prev, &s_prev, &enc, &params, &config).unwrap();

        // independent scalar recomputation
        let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            let (m, n) = (w.shape()[0], w.shape()[1]);
            (0..m)
                .map(|i| (0..n).map(|j| w.data()[i * n + j] * x[j]).sum())
                .collect()
        };
        let vadd = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        let sigmoid_v = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
        };
        let tanh_v = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.tanh()).collect() };

        let e_y: Vec<f64> = params.get("tgt_emb").unwrap().row(y_prev).to_vec();
        // attention
        let att_w = params.get("att.w").unwrap();
        let att_u = params.get("att.u").unwrap();
        let att_v = params.get("att.v").unwrap();
        let ws = matvec(att_w, &s_prev);
        let energies: Vec<f64> = enc
            .states
            .iter()
            .map(|h| {
                let uh = matvec(att_u, h);
                let t = tanh_v(vadd(&ws, &uh));
                att_v.data().iter().zip(&t).map(|(a, b)| a * b).sum()
            })
            .collect();
        let m = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = energies.iter().map(|e| (e - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let a_hand: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut c_hand = vec![0.0; 8];
        for (h, &a) in enc.states.iter().zip(&a_hand) {
            for (cv, &hv) in c_hand.iter_mut().zip(h) {
                *cv += a * hv;
            }
        }
        // GRU
        let gru_in: Vec<f64> = e_y.iter().chain(&c_hand).cloned().collect();
        let gate = |w: &str, u: &str, b: &str, x: &[f64], h: &[f64]| -> Vec<f64> {
            let wx = matvec(params.get(w).unwrap(), x);
            let uh = matvec(params.get(u).unwrap(), h);
            vadd(&vadd(&wx, &uh), params.get(b).unwrap().data())
        };
        let z_g = sigmoid_v(gate("dec.w_z", "dec.u_z", "dec.b_z", &gru_in, &s_prev));
        let r_g = sigmoid_v(gate("dec.w_r", "dec.u_r", "dec.b_r", &gru_in, &s_prev));
        let rh: Vec<f64> = r_g.iter().zip(&s_prev).map(|(r, h)| r * h).collect();
        let cand = tanh_v(gate("dec.w_h", "dec.u_h", "dec.b_h", &gru_in, &rh));
        let s_hand: Vec<f64> = z_g
            .iter()
            .zip(&s_prev)
            .zip(&cand)
            .map(|((z, h), c)| (1.0 - z) * h + z * c)
            .collect();
        // readout
        let mut pre = matvec(params.get("out.w_s").unwrap(), &s_hand);
        pre = vadd(&pre, &matvec(params.get("out.w_y").unwrap(), &e_y));
        pre = vadd(&pre, &matvec(params.get("out.w_c").unwrap(), &c_hand));
        pre = vadd(&pre, params.get("out.b").unwrap().data());
        let readout = tanh_v(pre);
        let logits = vadd(
            &matvec(params.get("out.w_o").unwrap(), &readout),
            params.get("out.b_o").unwrap().data(),
        );
        let lm = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lexp: Vec<f64> = logits.iter().map(|l| (l - lm).exp()).collect();
        let lz: f64 = lexp.iter().sum();

        for (got, want) in alpha.iter().zip(&a_hand) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in state.iter().zip(&s_hand) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in dist.iter().zip(lexp.iter().map(|e| e / lz)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_log_likelihood_is_minus_i_log_v() {
        let config = tiny_config(8, 7, 3, 4, Variant::Baseline);
        let mut params = config.init_params(8);
        for name in ["out.w_o", "out.b_o"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let y = vec![4, 5, EOS];
        let ll = log_likelihood(&[4, 5], &y, &params, &config).unwrap();
        let expect: f64 = (0..y.len()).map(|_| -(7f64).ln()).sum();
        assert_eq!(ll, expect);
    }

    #[test]
    fn deterministic_model_scores_zero() {
        // output bias saturates the softmax into a one-hot on <eos>, making
        // every non-gold probability underflow to exactly zero
        let config = tiny_config(8, 4, 3, 4, Variant::Baseline);
        let mut params = config.init_params(9);
        params.get_mut("out.w_o").unwrap().data_mut().fill(0.0);
        params
            .get_mut("out.b_o")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[-1e9, -1e9, -1e9, 0.0]);
        let ll = log_likelihood(&[4, 5], &[EOS], &params, &config).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn log_likelihood_is_sum_of_step_log_probs() {
        let config = tiny_config(9, 8, 3, 4, Variant::Baseline);
        let params = config.init_params(10);
        let x = vec![4, 6];
        let y = vec![4, 7, EOS];
        let trace = log_likelihood_with_trace(&x, &y, &params, &config).unwrap();

        // recompute each step with decode_step and compare
        let enc = encode(&x, &params, &config).unwrap();
        let w_init = params.get("dec.w_init").unwrap();
        let h = config.hidden_dim;
        let mut s: Vec<f64> = (0..h)
            .map(|i| {
                (0..h)
                    .map(|j| w_init.data()[i * h + j] * enc.states[0][h + j])
                    .sum::<f64>()
                    .tanh()
            })
            .collect();
        let mut y_prev = BOS;
        let mut total = 0.0;
        for &target in &y {
            let (s_new, dist, _) = decode_step(y_prev, &s, &enc, &params, &config).unwrap();
            total += dist[target].ln();
            s = s_new;
            y_prev = target;
        }
        assert!((trace.log_likelihood - total).abs() < 1e-10);
        assert!(trace.log_likelihood <= 0.0);
    }

    #[test]
    fn log_likelihood_requires_eos() {
        let config = tiny_config(8, 8, 3, 4, Variant::Baseline);
        let params = config.init_params(12);
        assert!(log_likelihood(&[4], &[4, 5], &params, &config).is_err());
    }

    #[test]
    fn attention_rows_and_distributions_are_probability_vectors() {
        let config = tiny_config(10, 9, 4, 5, Variant::Baseline);
        let params = config.init_params(13);
        let x = vec![4, 7, 9, 5];
        let y = vec![4, 8, 6, EOS];
        let trace = log_likelihood_with_trace(&x, &y, &params, &config).unwrap();
        for row in &trace.attention {
            assert_eq!(row.len(), x.len());
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let enc = encode(&x, &params, &config).unwrap();
        let (_, dist, _) = decode_step(4, &vec![0.0; 5], &enc, &params, &config).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dist.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let config = tiny_config(10, 9, 4, 5, Variant::Baseline);
        let params = config.init_params(14);
        let a = log_likelihood(&[4, 7], &[5, EOS], &params, &config).unwrap();
        let b = log_likelihood(&[4, 7], &[5, EOS], &params, &config).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        let config = tiny_config(20, 20, 8, 8, Variant::Baseline);
        let params = config.init_params(15);
        let mut g = Graph::new();
        let enc = build_encoder(&mut g, &params, &config, &[4, 9, 17]).unwrap();
        let ll =
            build_log_likelihood(&mut g, &params, &config, &enc, &[6, 12, EOS], &mut Mode::Eval)
                .unwrap();
        let loss = g.scale(ll.total, -1.0).unwrap();
        let err = g.finite_diff_check(loss, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}

#[cfg(test)]
mod debug_probe {
    use super::*;
    use crate::vocab::EOS;

    #[test]
    #[ignore]
    fn per_param_fd_errors() {
        let config = tiny_config(20, 20, 8, 8, Variant::Baseline);
        let params = config.init_params(15);
        let mut g = Graph::new();
        let enc = build_encoder(&mut g, &params, &config, &[4, 9, 17]).unwrap();
        let ll = build_log_likelihood(&mut g, &params, &config, &enc, &[6, 12, EOS], &mut Mode::Eval).unwrap();
        let loss = g.scale(ll.total, -1.0).unwrap();
        let analytic = g.backward(loss).unwrap();
        let eps = 1e-4;
        for (name, grad) in analytic.iter() {
            let mut max_rel = 0.0f64;
            let mut max_k = 0;
            for k in 0..grad.numel() {
                // perturb through set_leaf path
                let cur = {
                    let mut t = g.value(g_param_id(&g, name)).clone();
                    let orig = t.data()[k];
                    t.data_mut()[k] = orig + eps;
                    g.set_leaf(name, t.clone()).unwrap();
                    g.forward().unwrap();
                    let fp = g.value(loss).item();
                    t.data_mut()[k] = orig - eps;
                    g.set_leaf(name, t.clone()).unwrap();
                    g.forward().unwrap();
                    let fm = g.value(loss).item();
                    t.data_mut()[k] = orig;
                    g.set_leaf(name, t).unwrap();
                    (fp - fm) / (2.0 * eps)
                };
                let a = grad.data()[k];
                let rel = (a - cur).abs() / (a.abs() + cur.abs() + 1e-12);
                if rel > max_rel { max_rel = rel; max_k = k; }
            }
            println!("{name}: max_rel={max_rel:.3e} at [{max_k}]");
        }
        g.forward().unwrap();
    }

    fn g_param_id(_g: &Graph, _name: &str) -> NodeId {
        unimplemented!()
    }
}
