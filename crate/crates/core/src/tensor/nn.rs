//! Transformer building blocks recorded on a [`Tape`].
//!
//! Parameters are addressed by dotted names under a caller-chosen prefix;
//! [`Init`] creates them with the matching shapes.

use rand::Rng;

use super::{ParamSet, Result, Tape, Tensor, TensorError, Var};

/// Creates parameters: Xavier-uniform projections, zero biases,
/// unit layer-norm gains, `N(0, 0.02)` embedding tables.
pub struct Init<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(params: &'a mut ParamSet, rng: &'a mut R) -> Self {
        Self { params, rng }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.params
            .insert(format!("{name}.w"), Tensor::xavier(fan_in, fan_out, self.rng));
        self.params
            .insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    pub fn layer_norm(&mut self, name: &str, n: usize) {
        self.params
            .insert(format!("{name}.gain"), Tensor::filled(&[n], 1.0));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[n]));
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) {
        self.params
            .insert(name.to_string(), Tensor::normal(&[rows, dim], 0.02, self.rng));
    }

    pub fn attention(&mut self, name: &str, query_dim: usize, kv_dim: usize, hidden: usize) {
        self.linear(&format!("{name}.q"), query_dim, hidden);
        self.linear(&format!("{name}.k"), kv_dim, hidden);
        self.linear(&format!("{name}.v"), kv_dim, hidden);
        self.linear(&format!("{name}.o"), hidden, hidden);
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, inner: usize) {
        self.linear(&format!("{name}.fc1"), dim, inner);
        self.linear(&format!("{name}.fc2"), inner, dim);
    }

    /// Two-layer scoring head `dim → hidden → out`.
    pub fn head(&mut self, name: &str, dim: usize, hidden: usize, out: usize) {
        self.linear(&format!("{name}.fc1"), dim, hidden);
        self.linear(&format!("{name}.fc2"), hidden, out);
    }

    pub fn encoder_layer(&mut self, name: &str, dim: usize, inner: usize) {
        self.attention(&format!("{name}.attn"), dim, dim, dim);
        self.layer_norm(&format!("{name}.ln1"), dim);
        self.feed_forward(&format!("{name}.ffn"), dim, inner);
        self.layer_norm(&format!("{name}.ln2"), dim);
    }

    pub fn decoder_layer(&mut self, name: &str, dim: usize, ctx_dim: usize, inner: usize) {
        self.attention(&format!("{name}.self"), dim, dim, dim);
        self.layer_norm(&format!("{name}.ln1"), dim);
        self.attention(&format!("{name}.cross"), dim, ctx_dim, dim);
        self.layer_norm(&format!("{name}.ln2"), dim);
        self.feed_forward(&format!("{name}.ffn"), dim, inner);
        self.layer_norm(&format!("{name}.ln3"), dim);
    }
}

pub fn linear(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn layer_norm(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(params, &format!("{name}.gain"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.layer_norm(x, g, b)
}

pub fn feed_forward(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, params, &format!("{name}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, params, &format!("{name}.fc2"), h)
}

/// Output of [`multi_head_attention`]: the projected result plus the
/// per-head attention weights (each `L_q × L_k`).
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` heads.
///
/// `mask` (row-major `L_q × L_k`, `true` = attend) removes keys; `bias`
/// holds one additive `L_q × L_k` logit bias per head.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<&[bool]>,
    bias: Option<&[Var]>,
    heads: usize,
) -> Result<Attention> {
    let q = linear(tape, params, &format!("{name}.q"), query)?;
    let k = linear(tape, params, &format!("{name}.k"), key)?;
    let v = linear(tape, params, &format!("{name}.v"), value)?;
    let hidden = tape.value(q).dims2().1;
    if heads == 0 || hidden % heads != 0 {
        return Err(TensorError::Config(format!(
            "hidden size {hidden} not divisible by {heads} heads"
        )));
    }
    if let Some(b) = bias {
        if b.len() != heads {
            return Err(TensorError::Config(format!(
                "{} bias tables for {heads} heads",
                b.len()
            )));
        }
    }
    let head_dim = hidden / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(b) = bias {
            logits = tape.add(logits, b[h])?;
        }
        let w = tape.softmax(logits, mask)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let output = linear(tape, params, &format!("{name}.o"), joined)?;
    Ok(Attention { output, weights })
}

/// Post-norm transformer encoder layer.
pub fn encoder_layer(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    x: Var,
    bias: Option<&[Var]>,
    heads: usize,
) -> Result<Var> {
    let attn = multi_head_attention(
        tape,
        params,
        &format!("{name}.attn"),
        x,
        x,
        x,
        None,
        bias,
        heads,
    )?;
    let x = tape.add(x, attn.output)?;
    let x = layer_norm(tape, params, &format!("{name}.ln1"), x)?;
    let f = feed_forward(tape, params, &format!("{name}.ffn"), x)?;
    let x = tape.add(x, f)?;
    layer_norm(tape, params, &format!("{name}.ln2"), x)
}

/// Post-norm decoder layer: self-attention, cross-attention onto `ctx`, FFN.
pub fn decoder_layer(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    x: Var,
    ctx: Var,
    heads: usize,
) -> Result<Var> {
    let sa = multi_head_attention(
        tape,
        params,
        &format!("{name}.self"),
        x,
        x,
        x,
        None,
        None,
        heads,
    )?;
    let x = tape.add(x, sa.output)?;
    let x = layer_norm(tape, params, &format!("{name}.ln1"), x)?;
    let ca = multi_head_attention(
        tape,
        params,
        &format!("{name}.cross"),
        x,
        ctx,
        ctx,
        None,
        None,
        heads,
    )?;
    let x = tape.add(x, ca.output)?;
    let x = layer_norm(tape, params, &format!("{name}.ln2"), x)?;
    let f = feed_forward(tape, params, &format!("{name}.ffn"), x)?;
    let x = tape.add(x, f)?;
    layer_norm(tape, params, &format!("{name}.ln3"), x)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity_attention(params: &mut ParamSet, name: &str, dim: usize) {
        for p in ["q", "k", "v", "o"] {
            params.insert(format!("{name}.{p}.w"), Tensor::identity(dim));
            params.insert(format!("{name}.{p}.b"), Tensor::zeros(&[1, dim]));
        }
    }

    #[test]
    fn single_key_forces_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        Init::new(&mut params, &mut rng).attention("att", 4, 4, 4);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::normal(&[3, 4], 1.0, &mut rng));
        let kv = tape.constant(Tensor::normal(&[1, 4], 1.0, &mut rng));
        let att = multi_head_attention(&mut tape, &params, "att", q, kv, kv, None, None, 2).unwrap();
        for w in &att.weights {
            assert!(tape.value(*w).data().iter().all(|&x| x == 1.0));
        }
        let v = linear(&mut tape, &params, "att.v", kv).unwrap();
        let expect = linear(&mut tape, &params, "att.o", v).unwrap();
        let expect = tape.value(expect).data().to_vec();
        for r in 0..3 {
            let row = tape.value(att.output).row(r);
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_query_selects_matching_value() {
        let mut params = ParamSet::new();
        identity_attention(&mut params, "att", 3);
        let mut tape = Tape::new();
        // query aligned with key 1 at large scale, orthogonal to others
        let q = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 40.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::identity(3));
        let v = tape.constant(
            Tensor::new(vec![3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap(),
        );
        let att = multi_head_attention(&mut tape, &params, "att", q, k, v, None, None, 1).unwrap();
        let out = tape.value(att.output).data();
        for (a, b) in out.iter().zip([4.0, 5.0, 6.0]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        Init::new(&mut params, &mut rng).attention("att", 6, 6, 6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        let err = multi_head_attention(&mut tape, &params, "att", x, x, x, None, None, 4);
        assert!(matches!(err, Err(TensorError::Config(_))));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        Init::new(&mut params, &mut rng).attention("att", 8, 8, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal(&[5, 8], 1.0, &mut rng));
        let mask: Vec<bool> = (0..25).map(|i| i % 5 != 3).collect();
        let att =
            multi_head_attention(&mut tape, &params, "att", x, x, x, Some(&mask), None, 4).unwrap();
        for w in att.weights {
            let t = tape.value(w);
            for r in 0..5 {
                let s: f64 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert_eq!(t.get(r, 3), 0.0);
            }
        }
    }
}
