use rand::Rng;
use textmask_tensor::{GruCell, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use super::Caption;
use crate::Error;

/// Word- and sentence-level features of one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures<T> {
    /// `[length, dim]`
    pub word_features: Tensor<T>,
    /// `[dim]`
    pub sentence_feature: Tensor<T>,
}

/// Batched encoder outputs recorded on a tape.
pub struct EncodedText {
    /// `[N, dim]`
    pub sentence: Var,
    /// One `[N, dim]` node per padded position.
    pub words: Vec<Var>,
}

/// Bidirectional GRU over word embeddings.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: ParamId,
    forward_cell: GruCell,
    backward_cell: GruCell,
    hidden: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut table = Tensor::randn(&[vocab_size, embed_dim], 1.0, rng);
        // padding row stays zero
        table.data_mut()[..embed_dim].iter_mut().for_each(|v| *v = T::zero());
        let embedding = store.add(format!("{prefix}/embedding"), table);
        let forward_cell = GruCell::new(store, &format!("{prefix}/gru_forward"), embed_dim, hidden, rng);
        let backward_cell = GruCell::new(store, &format!("{prefix}/gru_backward"), embed_dim, hidden, rng);
        Self { embedding, forward_cell, backward_cell, hidden }
    }

    /// Feature width `D_w` (both directions).
    pub fn dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a batch of id sequences. Sequences shorter than the longest
    /// are padded; padded positions leave the recurrent state unchanged.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &[Vec<usize>]) -> EncodedText {
        let n = batch.len();
        let max_len = batch.iter().map(Vec::len).max().unwrap_or(0);
        let table = tape.param(self.embedding);
        let h = self.hidden;
        let mut embeds = Vec::with_capacity(max_len);
        let mut masks = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let ids: Vec<usize> = batch.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            embeds.push(tape.embedding(table, &ids));
            let mut m = Vec::with_capacity(n * h);
            for s in batch {
                let v = if t < s.len() { T::one() } else { T::zero() };
                m.extend(std::iter::repeat_n(v, h));
            }
            masks.push(tape.constant(Tensor::new(&[n, h], m).expect("mask shape")));
        }
        let zero = tape.constant(Tensor::zeros(&[n, h]));

        let mut fw_states = Vec::with_capacity(max_len);
        let mut state = zero;
        for t in 0..max_len {
            let next = self.forward_cell.step(tape, embeds[t], state);
            state = masked_update(tape, state, next, masks[t]);
            fw_states.push(state);
        }
        let fw_final = state;

        let mut bw_states = vec![zero; max_len];
        let mut state = zero;
        for t in (0..max_len).rev() {
            let next = self.backward_cell.step(tape, embeds[t], state);
            state = masked_update(tape, state, next, masks[t]);
            bw_states[t] = state;
        }
        let bw_final = state;

        let words = (0..max_len).map(|t| tape.concat1(&[fw_states[t], bw_states[t]])).collect();
        let sentence = tape.concat1(&[fw_final, bw_final]);
        EncodedText { sentence, words }
    }

    /// Encodes one caption with no gradient tracking. The encoder has no
    /// stochastic layers, so repeated calls are bit-identical.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, caption: &Caption) -> Result<TextFeatures<T>, Error> {
        if caption.ids.is_empty() {
            return Err(Error::Caption("caption has no tokens after filtering".into()));
        }
        let mut tape = Tape::frozen(store);
        let enc = self.forward(&mut tape, std::slice::from_ref(&caption.ids));
        let dim = self.dim();
        let mut words = Vec::with_capacity(caption.ids.len() * dim);
        for &w in &enc.words {
            words.extend_from_slice(tape.value(w).data());
        }
        Ok(TextFeatures {
            word_features: Tensor::new(&[caption.ids.len(), dim], words)?,
            sentence_feature: Tensor::new(&[dim], tape.value(enc.sentence).data().to_vec())?,
        })
    }

    /// Sentence features for a batch, with no gradient tracking.
    pub fn sentences<T: Scalar>(&self, store: &ParamStore<T>, batch: &[Vec<usize>]) -> Tensor<T> {
        let mut tape = Tape::frozen(store);
        let enc = self.forward(&mut tape, batch);
        tape.value(enc.sentence).clone()
    }
}

/// `old + mask * (new - old)`
fn masked_update<T: Scalar>(tape: &mut Tape<'_, T>, old: Var, new: Var, mask: Var) -> Var {
    let d = tape.sub(new, old);
    let md = tape.mul(mask, d);
    tape.add(old, md)
}
