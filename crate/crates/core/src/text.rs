//! Instruction encoder: vocabulary, token + positional embeddings, and the
//! two attention-pooling heads that produce the "where" and "how" features.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform, Bound, ParamStore};
use crate::scenegen::vocabulary_words;
use crate::tensor::{Float, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Special tokens followed by every grammar word in sorted order.
    pub fn from_grammar() -> Self {
        let tokens = [PAD, UNK].into_iter().chain(vocabulary_words()).map(str::to_string);
        let id_to_token: Vec<String> = tokens.collect();
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.token_to_id).expect("string map serializes")
    }

    /// Accepts `{token: id}` where ids are exactly `0..n`, `<pad>` is 0 and
    /// `<unk>` is 1.
    pub fn from_json(text: &str) -> Result<Self> {
        let token_to_id: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| Error::json("vocabulary", e))?;
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (token, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id)
                .ok_or_else(|| Error::Config(format!("vocabulary id {id} for {token:?} is out of range 0..{n}")))?;
            if slot.is_some() {
                return Err(Error::Config(format!("vocabulary id {id} is used twice")));
            }
            *slot = Some(token.clone());
        }
        if token_to_id.get(PAD) != Some(&PAD_ID) || token_to_id.get(UNK) != Some(&UNK_ID) {
            return Err(Error::Config(format!("vocabulary must map {PAD} to 0 and {UNK} to 1")));
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: id_to_token.into_iter().map(|t| t.expect("ids are a permutation")).collect(),
        })
    }
}

/// Token ids padded to a fixed length, plus the count of real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub len: usize,
}

pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Tokens {
    assert!(max_len >= 1, "max_len must be positive");
    let mut ids: Vec<usize> = split_words(text).iter().take(max_len).map(|w| vocab.id(w)).collect();
    let len = ids.len();
    ids.resize(max_len, PAD_ID);
    Tokens { ids, len }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextDims {
    pub vocab: usize,
    pub max_len: usize,
    pub embed: usize,
    pub attend: usize,
}

/// `text.embed [vocab, d0]`, `text.pos [max_len, d0]` and, for each head,
/// `text.{where,how}.{query,key,value} [d0, d]`.
pub fn init_text<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, dims: TextDims) {
    store.insert("text.embed", uniform(&[dims.vocab, dims.embed], 1.0, rng));
    store.insert("text.pos", uniform(&[dims.max_len, dims.embed], 0.1, rng));
    let bound = 1.0 / (dims.embed as f64).sqrt();
    for head in ["where", "how"] {
        for proj in ["query", "key", "value"] {
            store.insert(format!("text.{head}.{proj}"), uniform(&[dims.embed, dims.attend], bound, rng));
        }
    }
}

/// `S[b, i] = E[ids[b][i]] + P[i]`, shape `[batch, max_len, d0]`.
pub fn embed<'t, T: Float>(p: &Bound<'t, T>, batch: &[Tokens], positional: bool) -> Result<Var<'t, T>> {
    let table = p.get("text.embed");
    let rows = table.shape()[0];
    let width = table.shape()[1];
    let max_len = batch.first().map_or(0, |t| t.ids.len());
    let flat: Vec<usize> = batch.iter().flat_map(|t| t.ids.iter().copied()).collect();
    if let Some(&bad) = flat.iter().find(|&&id| id >= rows) {
        return Err(Error::Index { index: bad, size: rows });
    }
    if batch.iter().any(|t| t.ids.len() != max_len) {
        return Err(Error::Shape("token sequences in a batch must share one length".into()));
    }
    let s = table.gather_rows(&flat).reshape(&[batch.len(), max_len, width]);
    if !positional {
        return Ok(s);
    }
    let pos = p.get("text.pos");
    if pos.shape()[0] < max_len {
        return Err(Error::Shape(format!(
            "sequence length {max_len} exceeds the {} positional rows",
            pos.shape()[0]
        )));
    }
    Ok(s.add(pos.slice_axis(0, 0..max_len)))
}

/// Scaled dot-product attention pooling over `s: [batch, l, d0]`. Positions
/// at or beyond `lengths[b]` are padding and receive zero weight.
///
/// Returns `phi: [batch, d]` and `weights: [batch, l]`.
pub fn attention_pool<'t, T: Float>(
    s: Var<'t, T>,
    query: Var<'t, T>,
    key: Var<'t, T>,
    value: Var<'t, T>,
    lengths: &[usize],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = s.shape();
    let [batch, l, d0] = shape[..] else {
        return Err(Error::Shape(format!("attention input must be [batch, l, d0], got {shape:?}")));
    };
    if lengths.len() != batch {
        return Err(Error::Shape(format!("{} lengths for a batch of {batch}", lengths.len())));
    }
    if lengths.iter().any(|&n| n == 0) {
        return Err(Error::AllMasked);
    }
    let d = query.shape()[1];
    let tape = s.tape();
    let flat = s.reshape(&[batch * l, d0]);
    let project = |w: Var<'t, T>| flat.matmul(w).reshape(&[batch, l, d]);
    let (q, k, v) = (project(query), project(key), project(value));

    // Averaging weights 1/len over real tokens, and an additive -inf mask.
    let mut avg = ArrayD::zeros(IxDyn(&[batch, l, 1]));
    let mut bias = ArrayD::zeros(IxDyn(&[batch, l]));
    for (b, &n) in lengths.iter().enumerate() {
        for i in 0..l {
            if i < n {
                avg[[b, i, 0]] = T::of(1.0 / n as f64);
            } else {
                bias[[b, i]] = T::neg_infinity();
            }
        }
    }
    let q_mean = q.mul(tape.constant(avg)).sum_axis(1).reshape(&[batch, 1, d]);
    let logits = k.mul(q_mean).sum_axis(2).scale(1.0 / (d as f64).sqrt());
    let weights = logits.add(tape.constant(bias)).softmax();
    let phi = v.mul(weights.reshape(&[batch, l, 1])).sum_axis(1);
    Ok((phi, weights))
}

/// Graph outputs of the text encoder for a batch.
pub struct TextVars<'t, T: Float> {
    pub phi_where: Var<'t, T>,
    pub phi_how: Var<'t, T>,
    pub attn_where: Var<'t, T>,
    pub attn_how: Var<'t, T>,
}

pub fn encode_tokens<'t, T: Float>(p: &Bound<'t, T>, batch: &[Tokens], positional: bool) -> Result<TextVars<'t, T>> {
    let s = embed(p, batch, positional)?;
    let lengths: Vec<usize> = batch.iter().map(|t| t.len).collect();
    let head = |name: &str| {
        attention_pool(
            s,
            p.get(&format!("text.{name}.query")),
            p.get(&format!("text.{name}.key")),
            p.get(&format!("text.{name}.value")),
            &lengths,
        )
    };
    let (phi_where, attn_where) = head("where")?;
    let (phi_how, attn_how) = head("how")?;
    Ok(TextVars {
        phi_where,
        phi_how,
        attn_where,
        attn_how,
    })
}

/// Pooled text features of one instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub tokens: Vec<String>,
    pub phi_where: Vec<f32>,
    pub phi_how: Vec<f32>,
    /// One weight per position of the padded sequence; zero on padding.
    pub attn_where: Vec<f32>,
    pub attn_how: Vec<f32>,
}

impl TextFeatures {
    pub(crate) fn from_row<T: Float>(tokens: Vec<String>, vars: &TextVars<'_, T>, row: usize) -> Self {
        let pick = |v: Var<'_, T>| -> Vec<f32> {
            let a = v.value();
            let a: Array2<T> = a.view().into_dimensionality().expect("[batch, n]").to_owned();
            a.row(row).iter().map(|x| x.as_f64() as f32).collect()
        };
        TextFeatures {
            tokens,
            phi_where: pick(vars.phi_where),
            phi_how: pick(vars.phi_how),
            attn_where: pick(vars.attn_where),
            attn_how: pick(vars.attn_how),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::{arr2, Array};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn var<'t>(tape: &'t Tape<f64>, a: Array2<f64>) -> Var<'t, f64> {
        tape.constant(a.into_dyn())
    }

    /// Direct translation of the pooling formula for a single sequence.
    fn pool_oracle(s: &Array2<f64>, wq: &Array2<f64>, wk: &Array2<f64>, wv: &Array2<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
        let (q, k, v) = (s.dot(wq), s.dot(wk), s.dot(wv));
        let d = wq.ncols();
        let q_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| q[[i, j]]).sum::<f64>() / n as f64).collect();
        let logits: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|j| k[[i, j]] * q_mean[j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let mut weights: Vec<f64> = exp.iter().map(|e| e / total).collect();
        let phi = (0..d).map(|j| (0..n).map(|i| v[[i, j]] * weights[i]).sum()).collect();
        weights.resize(s.nrows(), 0.0);
        (phi, weights)
    }

    fn pool(s: &Array2<f64>, w: [&Array2<f64>; 3], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let (l, d0) = s.dim();
        let sv = tape.constant(s.clone().into_shape_with_order((1, l, d0)).unwrap().into_dyn());
        let (phi, weights) =
            attention_pool(sv, var(&tape, w[0].clone()), var(&tape, w[1].clone()), var(&tape, w[2].clone()), &[n])?;
        Ok((phi.value().iter().copied().collect(), weights.value().iter().copied().collect()))
    }

    #[test]
    fn tokenize_contract() {
        let vocab = Vocabulary::from_grammar();
        let empty = tokenize("", &vocab, 6);
        assert_eq!(empty, Tokens { ids: vec![PAD_ID; 6], len: 0 });
        let t = tokenize("add a small red circle", &vocab, 8);
        assert_eq!(t.len, 5);
        assert!(t.ids[..5].iter().all(|&id| id > UNK_ID));
        assert!(t.ids[5..].iter().all(|&id| id == PAD_ID));
        assert_eq!(tokenize("zzz", &vocab, 3).ids, vec![UNK_ID, PAD_ID, PAD_ID]);
        assert_eq!(tokenize("a b c d", &vocab, 2).len, 2);
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let vocab = Vocabulary::from_grammar();
        assert_eq!(Vocabulary::from_json(&vocab.to_json()).unwrap(), vocab);
        assert!(Vocabulary::from_json(r#"{"<pad>": 1, "<unk>": 0}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"<pad>": 0, "<unk>": 1, "x": 1}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"<pad>": 0, "<unk>": 1, "x": 7}"#).is_err());
    }

    #[test]
    fn identity_example() {
        let eye = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let (phi, weights) = pool(&eye, [&eye, &eye, &eye], 2).unwrap();
        let (phi_o, weights_o) = pool_oracle(&eye, &eye, &eye, &eye, 2);
        for (a, b) in phi.iter().zip(&phi_o).chain(weights.iter().zip(&weights_o)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((weights[0] - 0.5).abs() < 1e-12 && (weights[1] - 0.5).abs() < 1e-12);
        assert!((phi[0] - 0.5).abs() < 1e-12 && (phi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_token_takes_all_weight() {
        let s = arr2(&[[0.3, -1.0], [9.0, 9.0]]);
        let wv = arr2(&[[2.0, 0.0], [1.0, 1.0]]);
        let eye = Array2::eye(2);
        let (phi, weights) = pool(&s, [&eye, &eye, &wv], 1).unwrap();
        assert_eq!(weights, vec![1.0, 0.0]);
        assert!((phi[0] - (0.6 - 1.0)).abs() < 1e-12 && (phi[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_padding_is_an_error() {
        let eye = Array2::eye(2);
        assert!(matches!(pool(&eye, [&eye, &eye, &eye], 0), Err(Error::AllMasked)));
    }

    #[test]
    fn logits_carry_inverse_sqrt_width() {
        // Zero-padding the projections from d=2 to d=4 leaves q.k unchanged,
        // so the logits shrink by sqrt(2/4).
        let s = arr2(&[[1.0, 0.5], [-0.5, 2.0], [0.2, 0.1]]);
        let w = arr2(&[[0.7, -0.3], [0.4, 0.9]]);
        let mut wide = Array2::zeros((2, 4));
        wide.slice_mut(ndarray::s![.., ..2]).assign(&w);
        let logits = |w: &Array2<f64>| {
            let (q, k) = (s.dot(w), s.dot(w));
            let d = w.ncols();
            let q_mean = q.mean_axis(ndarray::Axis(0)).unwrap();
            k.dot(&q_mean) / (d as f64).sqrt()
        };
        let (narrow_logits, wide_logits) = (logits(&w), logits(&wide));
        for (a, b) in narrow_logits.iter().zip(&wide_logits) {
            assert!((b - a / 2f64.sqrt()).abs() < 1e-12);
        }
        // The implementation agrees with the oracle at both widths.
        for wq in [&w, &wide] {
            let (_, weights) = pool(&s, [wq, wq, wq], 3).unwrap();
            let (_, oracle) = pool_oracle(&s, wq, wq, wq, 3);
            for (a, b) in weights.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_differ_and_encoding_is_deterministic() {
        let vocab = Vocabulary::from_grammar();
        let dims = TextDims {
            vocab: vocab.len(),
            max_len: 12,
            embed: 8,
            attend: 8,
        };
        let mut store = ParamStore::<f64>::new();
        init_text(&mut store, &mut ChaCha8Rng::seed_from_u64(3), dims);
        let tokens = vec![tokenize("remove the object at the top left", &vocab, 12)];
        let run = || {
            let tape = Tape::new();
            let p = store.frozen(&tape);
            let vars = encode_tokens(&p, &tokens, true).unwrap();
            let (w, h) = (vars.phi_where.value(), vars.phi_how.value());
            ((*w).clone(), (*h).clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), &[1, 8]);
        assert_ne!(a.0, a.1);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_over_real_tokens(
            seed in 0u64..1000,
            l in 1usize..7,
            pad in 0usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total = l + pad;
            let s: Array2<f64> = Array::from_shape_fn((total, 3), |_| rng.random_range(-2.0..2.0));
            let w: Vec<Array2<f64>> = (0..3).map(|_| Array::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0))).collect();
            let (_, weights) = pool(&s, [&w[0], &w[1], &w[2]], l).unwrap();
            let sum: f64 = weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(weights.iter().all(|&x| x >= 0.0));
            prop_assert!(weights[l..].iter().all(|&x| x == 0.0));
        }

        #[test]
        fn swapping_identical_rows_keeps_phi(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shared: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let other: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rows = |order: [&Vec<f64>; 3]| Array2::from_shape_fn((3, 3), |(i, j)| order[i][j]);
            let w: Vec<Array2<f64>> = (0..3).map(|_| Array::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0))).collect();
            let (a, _) = pool(&rows([&shared, &other, &shared]), [&w[0], &w[1], &w[2]], 3).unwrap();
            let (b, _) = pool(&rows([&shared, &shared, &other]), [&w[0], &w[1], &w[2]], 3).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
