//! Word embedding plus a bi-directional LSTM shared by captions and phrases.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::chunk::{word_spans, Span};
use crate::text::vocab::PAD;

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCaption {
    pub ids: Vec<usize>,
    pub spans: Vec<Span>,
    pub identity: usize,
}

/// Padded caption batch with per-caption phrase spans.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    ids: Vec<usize>,
    max_len: usize,
    lengths: Vec<usize>,
    spans: Vec<Vec<Span>>,
    identities: Vec<usize>,
}

impl TextBatch {
    pub fn new(captions: &[EncodedCaption]) -> Result<Self> {
        Self::padded(captions, 0)
    }

    /// Pads every caption with `PAD` to at least `pad_to` positions.
    pub fn padded(captions: &[EncodedCaption], pad_to: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Data("empty caption batch".into()));
        }
        let max_len = captions.iter().map(|c| c.ids.len()).max().unwrap_or(0).max(pad_to);
        let mut ids = Vec::with_capacity(captions.len() * max_len);
        let mut spans = Vec::with_capacity(captions.len());
        for (q, c) in captions.iter().enumerate() {
            let r = c.ids.len();
            if r == 0 {
                return Err(Error::Data(format!("caption {q} has zero length")));
            }
            let mut sp = c.spans.clone();
            if sp.is_empty() {
                sp.push((0, r));
            }
            let mut prev_end = 0;
            for &(s, e) in &sp {
                if s >= e {
                    return Err(Error::Data(format!("caption {q} has empty phrase span ({s}, {e})")));
                }
                if e > r || s < prev_end {
                    return Err(Error::Data(format!(
                        "caption {q}: span ({s}, {e}) out of bounds or overlapping (length {r})"
                    )));
                }
                prev_end = e;
            }
            ids.extend_from_slice(&c.ids);
            ids.extend(std::iter::repeat_n(PAD, max_len - r));
            spans.push(sp);
        }
        Ok(Self {
            ids,
            max_len,
            lengths: captions.iter().map(|c| c.ids.len()).collect(),
            spans,
            identities: captions.iter().map(|c| c.identity).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn caption_ids(&self, q: usize) -> &[usize] {
        &self.ids[q * self.max_len..q * self.max_len + self.lengths[q]]
    }

    pub fn spans(&self) -> &[Vec<Span>] {
        &self.spans
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    /// Largest phrase count m in the batch.
    pub fn max_phrases(&self) -> usize {
        self.spans.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Same captions with every word as its own phrase.
    pub fn with_word_spans(&self) -> Self {
        let mut b = self.clone();
        b.spans = self.lengths.iter().map(|&r| word_spans(r)).collect();
        b
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[emb, 4d]`, gate blocks ordered input, forget, output, candidate.
    pub input: ParamId,
    /// `[d, 4d]`
    pub recurrent: ParamId,
    /// `[4d]`
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct TextParams {
    /// `[K, emb]`
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
}

const INIT_RANGE: f64 = 0.1;

impl TextParams {
    /// Uniform(−0.1, 0.1) everywhere except forget-gate biases, which start at 1.
    pub fn init(store: &mut ParamStore, rng: &mut Rng, vocab_size: usize, emb_dim: usize, hidden: usize) -> Self {
        let g = ParamGroup::Alignment;
        let embedding = store.add_uniform("text.embedding", g, &[vocab_size, emb_dim], INIT_RANGE, rng);
        let mut lstm = |dir: &str| {
            let input = store.add_uniform(format!("text.{dir}.input"), g, &[emb_dim, 4 * hidden], INIT_RANGE, rng);
            let recurrent = store.add_uniform(format!("text.{dir}.recurrent"), g, &[hidden, 4 * hidden], INIT_RANGE, rng);
            let mut b = rng.uniform_vec(4 * hidden, -INIT_RANGE, INIT_RANGE);
            b[hidden..2 * hidden].fill(1.0);
            let bias = store.add(format!("text.{dir}.bias"), g, Tensor::from_parts(vec![4 * hidden], b));
            LstmParams { input, recurrent, bias }
        };
        let forward = lstm("fwd");
        let backward = lstm("bwd");
        Self { embedding, forward, backward, vocab_size, emb_dim, hidden }
    }

    /// Width of the concatenated bi-directional state (2d).
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

fn embed_ids(ctx: &Ctx, params: &TextParams, ids: &[usize], rows: usize, len: usize) -> Result<Var> {
    let t = ctx.tape;
    let flat = t.gather(ctx.p(params.embedding), ids)?;
    Ok(t.reshape(flat, &[rows, len, params.emb_dim])?)
}

/// Row gather of the embedding table: `[caption, position, emb]`.
pub fn embed(ctx: &Ctx, params: &TextParams, batch: &TextBatch) -> Result<Var> {
    embed_ids(ctx, params, batch.ids(), batch.len(), batch.max_len())
}

pub struct SequenceEncoding {
    /// `[caption, position, 2d]`
    pub states: Var,
    /// `[caption, 2d]`: forward state at the last real token, backward state at position 0.
    pub global: Var,
}

fn run_direction(
    ctx: &Ctx,
    lstm: &LstmParams,
    emb: Var,
    lengths: &[usize],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let t = ctx.tape;
    let shape = t.shape(emb);
    let (rows, len, e) = (shape[0], shape[1], shape[2]);
    let flat = t.reshape(emb, &[rows * len, e])?;
    let proj = t.matmul(flat, ctx.p(lstm.input))?;
    let proj = t.add_bias(proj, ctx.p(lstm.bias))?;
    let proj = t.reshape(proj, &[rows, len, 4 * hidden])?;
    let wh = ctx.p(lstm.recurrent);
    let zeros = t.constant(Tensor::zeros(&[rows, hidden]));
    let (mut h, mut c) = (zeros, zeros);
    let mut per_pos = vec![zeros; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for pos in order {
        let active: Vec<bool> = lengths.iter().map(|&r| pos < r).collect();
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active > 0 {
            let xt = t.slice(proj, 1, pos, pos + 1)?;
            let xt = t.reshape(xt, &[rows, 4 * hidden])?;
            let gates = t.add(xt, t.matmul(h, wh)?)?;
            let sig = t.sigmoid(t.slice(gates, 1, 0, 3 * hidden)?)?;
            let i = t.slice(sig, 1, 0, hidden)?;
            let f = t.slice(sig, 1, hidden, 2 * hidden)?;
            let o = t.slice(sig, 1, 2 * hidden, 3 * hidden)?;
            let g = t.tanh(t.slice(gates, 1, 3 * hidden, 4 * hidden)?)?;
            let c_new = t.add(t.mul(f, c)?, t.mul(i, g)?)?;
            let h_new = t.mul(o, t.tanh(c_new)?)?;
            if n_active == rows {
                h = h_new;
                c = c_new;
            } else {
                // Inactive rows keep their state: m·new + (1−m)·old with m ∈ {0, 1}.
                let m: Vec<f64> = active
                    .iter()
                    .flat_map(|&a| std::iter::repeat_n(if a { 1.0 } else { 0.0 }, hidden))
                    .collect();
                let keep = t.constant(Tensor::from_parts(vec![rows, hidden], m.iter().map(|v| 1.0 - v).collect()));
                let m = t.constant(Tensor::from_parts(vec![rows, hidden], m));
                h = t.add(t.mul(m, h_new)?, t.mul(keep, h)?)?;
                c = t.add(t.mul(m, c_new)?, t.mul(keep, c)?)?;
            }
        }
        per_pos[pos] = h;
    }
    Ok(per_pos)
}

pub fn encode_sequence(ctx: &Ctx, params: &TextParams, emb: Var, lengths: &[usize]) -> Result<SequenceEncoding> {
    let t = ctx.tape;
    let shape = t.shape(emb);
    if shape.len() != 3 || shape[0] != lengths.len() || shape[2] != params.emb_dim {
        return Err(Error::Data(format!(
            "embeddings of shape {shape:?} do not match {} lengths / emb dim {}",
            lengths.len(),
            params.emb_dim
        )));
    }
    let (rows, len) = (shape[0], shape[1]);
    if let Some(q) = lengths.iter().position(|&r| r == 0) {
        return Err(Error::Data(format!("caption {q} has zero length")));
    }
    if let Some(&r) = lengths.iter().find(|&&r| r > len) {
        return Err(Error::Data(format!("length {r} exceeds padded length {len}")));
    }
    let d = params.hidden;
    let fwd = run_direction(ctx, &params.forward, emb, lengths, d, false)?;
    let bwd = run_direction(ctx, &params.backward, emb, lengths, d, true)?;
    let stack = |hs: &[Var]| -> Result<Var> {
        let cols: Vec<Var> = hs.iter().map(|&h| t.reshape(h, &[rows, 1, d])).collect::<Result<_, _>>()?;
        Ok(t.concat(&cols, 1)?)
    };
    let states = t.concat(&[stack(&fwd)?, stack(&bwd)?], 2)?;
    // With masking, the final forward state already equals the state at r−1.
    let global = t.concat(&[fwd[len - 1], bwd[0]], 1)?;
    Ok(SequenceEncoding { states, global })
}

/// Sentence vectors `e^t`: `[caption, 2d]`.
pub fn encode_captions(ctx: &Ctx, params: &TextParams, batch: &TextBatch) -> Result<Var> {
    let emb = embed(ctx, params, batch)?;
    Ok(encode_sequence(ctx, params, emb, batch.lengths())?.global)
}

pub struct PhraseEncoding {
    /// `[caption, m_max, 2d]`; masked slots hold an arbitrary valid phrase vector.
    pub vectors: Var,
    /// `[caption × m_max]`, true for real phrases.
    pub mask: Vec<bool>,
    pub max_phrases: usize,
}

/// Runs the shared bi-LSTM over each phrase's tokens in isolation.
pub fn encode_phrases(ctx: &Ctx, params: &TextParams, batch: &TextBatch) -> Result<PhraseEncoding> {
    let t = ctx.tape;
    let m_max = batch.max_phrases();
    let mut phrase_tokens: Vec<&[usize]> = Vec::new();
    let mut slot_to_phrase = Vec::with_capacity(batch.len() * m_max);
    let mut mask = Vec::with_capacity(batch.len() * m_max);
    for (q, spans) in batch.spans().iter().enumerate() {
        let ids = batch.caption_ids(q);
        for k in 0..m_max {
            if let Some(&(s, e)) = spans.get(k) {
                if s >= e {
                    return Err(Error::Data(format!("caption {q} has empty phrase span ({s}, {e})")));
                }
                slot_to_phrase.push(phrase_tokens.len());
                phrase_tokens.push(&ids[s..e]);
                mask.push(true);
            } else {
                slot_to_phrase.push(0);
                mask.push(false);
            }
        }
    }
    let lp = phrase_tokens.iter().map(|p| p.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(phrase_tokens.len() * lp);
    for p in &phrase_tokens {
        ids.extend_from_slice(p);
        ids.extend(std::iter::repeat_n(PAD, lp - p.len()));
    }
    let lengths: Vec<usize> = phrase_tokens.iter().map(|p| p.len()).collect();
    let emb = embed_ids(ctx, params, &ids, phrase_tokens.len(), lp)?;
    let enc = encode_sequence(ctx, params, emb, &lengths)?;
    let slots = t.gather(enc.global, &slot_to_phrase)?;
    let vectors = t.reshape(slots, &[batch.len(), m_max, params.output_dim()])?;
    Ok(PhraseEncoding { vectors, mask, max_phrases: m_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn setup(seed: u64) -> (ParamStore, TextParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = TextParams::init(&mut store, &mut rng, 20, 6, 5);
        (store, p)
    }

    fn cap(ids: &[usize], spans: &[Span]) -> EncodedCaption {
        EncodedCaption { ids: ids.to_vec(), spans: spans.to_vec(), identity: 0 }
    }

    fn global_of(store: &ParamStore, p: &TextParams, batch: &TextBatch) -> Tensor {
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let g = encode_captions(&ctx, p, batch).unwrap();
        let v = tape.value(g).clone();
        v
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (store, p) = setup(1);
        let b = store.get(p.forward.bias).data();
        assert!(b[5..10].iter().all(|&v| v == 1.0));
        assert!(b[..5].iter().chain(&b[10..]).all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn repeated_ids_embed_identically() {
        let (store, p) = setup(2);
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let batch = TextBatch::new(&[cap(&[5, 5], &[])]).unwrap();
        let e = tape.value(embed(&ctx, &p, &batch).unwrap()).clone();
        assert_eq!(e.data()[..6], e.data()[6..]);
    }

    #[test]
    fn embedding_gradient_only_on_gathered_rows() {
        let (store, p) = setup(3);
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let batch = TextBatch::new(&[cap(&[4, 7, 4], &[])]).unwrap();
        let g = encode_captions(&ctx, &p, &batch).unwrap();
        let l = tape.sum_all(g).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(bound.var(p.embedding)).unwrap();
        for row in 0..20 {
            let norm: f64 = grad.data()[row * 6..(row + 1) * 6].iter().map(|v| v.abs()).sum();
            assert_eq!(norm > 0.0, row == 4 || row == 7, "row {row}");
        }
    }

    #[test]
    fn gather_matches_one_hot_matmul() {
        let (store, p) = setup(4);
        let mut rng = Rng::new(40);
        for _ in 0..20 {
            let len = 1 + rng.below(6);
            let ids: Vec<usize> = (0..len).map(|_| rng.below(20)).collect();
            let tape = Tape::new();
            let bound = store.bind(&tape, &[]);
            let ctx = Ctx::new(&tape, &bound);
            let batch = TextBatch::new(&[cap(&ids, &[])]).unwrap();
            let gathered = tape.value(embed(&ctx, &p, &batch).unwrap()).clone();
            // Dense oracle: one-hot rows times the table, computed by plain loops.
            let table = store.get(p.embedding);
            for (pos, &id) in ids.iter().enumerate() {
                for col in 0..6 {
                    let want: f64 = (0..20).map(|k| if k == id { table.get(&[k, col]) } else { 0.0 }).sum();
                    assert_eq!(gathered.get(&[0, pos, col]), want);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let (mut store, p) = setup(5);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let batch = TextBatch::new(&[cap(&[3, 4, 5], &[])]).unwrap();
        let emb = embed(&ctx, &p, &batch).unwrap();
        let enc = encode_sequence(&ctx, &p, emb, batch.lengths()).unwrap();
        assert!(tape.value(enc.states).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(enc.global), vec![1, 10]);
    }

    #[test]
    fn single_token_reads_same_token_both_ways() {
        let (store, p) = setup(6);
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let batch = TextBatch::new(&[cap(&[9], &[])]).unwrap();
        let emb = embed(&ctx, &p, &batch).unwrap();
        let enc = encode_sequence(&ctx, &p, emb, batch.lengths()).unwrap();
        let states = tape.value(enc.states).clone();
        let global = tape.value(enc.global).clone();
        assert_eq!(states.data(), global.data());
    }

    #[test]
    fn padding_leaves_sentence_vector_bit_identical() {
        let (store, p) = setup(7);
        let c = cap(&[3, 8, 2, 11], &[]);
        let plain = global_of(&store, &p, &TextBatch::new(std::slice::from_ref(&c)).unwrap());
        let padded = global_of(&store, &p, &TextBatch::padded(&[c], 9).unwrap());
        let same = plain.data().iter().zip(padded.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn zero_length_and_bad_spans_are_rejected() {
        assert!(TextBatch::new(&[cap(&[], &[])]).is_err());
        assert!(TextBatch::new(&[cap(&[1, 2], &[(1, 1)])]).is_err());
        assert!(TextBatch::new(&[cap(&[1, 2], &[(0, 3)])]).is_err());
        assert!(TextBatch::new(&[cap(&[1, 2, 3], &[(0, 2), (1, 3)])]).is_err());
        let (store, p) = setup(8);
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let emb = tape.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(encode_sequence(&ctx, &p, emb, &[0]).is_err());
    }

    #[test]
    fn whole_caption_phrase_equals_sentence_vector() {
        let (store, p) = setup(9);
        let batch = TextBatch::new(&[cap(&[3, 8, 2], &[(0, 3)])]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let sent = tape.value(encode_captions(&ctx, &p, &batch).unwrap()).clone();
        let ph = encode_phrases(&ctx, &p, &batch).unwrap();
        assert_eq!(tape.value(ph.vectors).data(), sent.data());
    }

    #[test]
    fn identical_span_content_gives_identical_phrase_vectors() {
        let (store, p) = setup(10);
        let batch = TextBatch::new(&[cap(&[3, 8, 2, 6], &[(1, 3)]), cap(&[8, 2], &[(0, 2)])]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let ph = encode_phrases(&ctx, &p, &batch).unwrap();
        let v = tape.value(ph.vectors).clone();
        assert_eq!(v.data()[..10], v.data()[10..]);
        assert_eq!(ph.mask, vec![true, true]);
    }

    #[test]
    fn phrase_mask_marks_missing_slots() {
        let (store, p) = setup(11);
        let batch = TextBatch::new(&[cap(&[3, 8, 2, 6], &[(0, 1), (1, 3), (3, 4)]), cap(&[8, 2], &[(0, 2)])]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let ph = encode_phrases(&ctx, &p, &batch).unwrap();
        assert_eq!(tape.shape(ph.vectors), vec![2, 3, 10]);
        assert_eq!(ph.mask, vec![true, true, true, true, false, false]);
    }

    #[test]
    fn both_directions_receive_gradient() {
        let (store, p) = setup(12);
        let batch = TextBatch::new(&[cap(&[3, 8, 2], &[]), cap(&[4, 1], &[])]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let g = encode_captions(&ctx, &p, &batch).unwrap();
        let sq = tape.mul(g, g).unwrap();
        let l = tape.sum_all(sq).unwrap();
        tape.backward(l).unwrap();
        for lstm in [p.forward, p.backward] {
            for id in [lstm.input, lstm.recurrent, lstm.bias] {
                let n: f64 = tape.grad(bound.var(id)).unwrap().data().iter().map(|v| v * v).sum();
                assert!(n > 0.0);
            }
        }
    }
}
