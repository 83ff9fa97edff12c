use rand::seq::SliceRandom;
use rand::Rng;

use super::Seq2SeqError;
use crate::corpus::{TokenId, TokenSequence, BOS, PAD};

/// Teacher-forcing batch. Sources are unpadded (the encoder pads them);
/// decoder inputs are BOS-shifted targets, and both they and the targets
/// are padded with PAD to one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sources: Vec<Vec<TokenId>>,
    pub decoder_inputs: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
}

impl Batch {
    /// Targets are used as given, so a truncated sample without EOS is allowed.
    pub fn from_ids(sources: Vec<Vec<TokenId>>, targets: &[&[TokenId]], max_len: usize) -> Result<Self, Seq2SeqError> {
        if sources.is_empty() || sources.len() != targets.len() {
            return Err(Seq2SeqError::InvalidConfig("batch needs one target per source".into()));
        }
        for s in &sources {
            if s.is_empty() || s.len() > max_len {
                return Err(Seq2SeqError::Length { which: "source", len: s.len(), max: max_len });
            }
        }
        let len = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        if len == 0 || len > max_len {
            return Err(Seq2SeqError::Length { which: "target", len, max: max_len });
        }
        if let Some(t) = targets.iter().find(|t| t.is_empty()) {
            return Err(Seq2SeqError::Length { which: "target", len: t.len(), max: max_len });
        }
        let mut decoder_inputs = Vec::with_capacity(targets.len());
        let mut padded = Vec::with_capacity(targets.len());
        for t in targets {
            let mut input = vec![BOS];
            input.extend_from_slice(&t[..t.len() - 1]);
            input.resize(len, PAD);
            decoder_inputs.push(input);
            let mut out = t.to_vec();
            out.resize(len, PAD);
            padded.push(out);
        }
        Ok(Self { sources, decoder_inputs, targets: padded })
    }

    pub fn from_pairs(pairs: &[(&TokenSequence, &TokenSequence)], max_len: usize) -> Result<Self, Seq2SeqError> {
        let sources = pairs.iter().map(|(s, _)| s.ids.clone()).collect();
        let targets: Vec<&[TokenId]> = pairs.iter().map(|(_, t)| t.ids.as_slice()).collect();
        Self::from_ids(sources, &targets, max_len)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn target_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn flat_targets(&self) -> Vec<TokenId> {
        self.targets.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// Number of non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != PAD).count()
    }
}

/// Groups example indices into batches whose `count * longest side` stays
/// within `token_budget`. Examples of similar length are bucketed together;
/// ties in length and the batch order are shuffled with `rng`.
pub fn bucket_batches<R: Rng + ?Sized>(lengths: &[usize], token_budget: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let l = lengths[i].max(longest);
        if !cur.is_empty() && (cur.len() + 1) * l > token_budget {
            batches.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(lengths[i]);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shifts_and_pads() {
        let targets: [&[TokenId]; 2] = [&[6, 7, EOS], &[8, EOS]];
        let b = Batch::from_ids(vec![vec![5, EOS]], &targets[..1], 25).unwrap();
        assert_eq!(b.decoder_inputs, vec![vec![BOS, 6, 7]]);
        assert_eq!(b.targets, vec![vec![6, 7, EOS]]);
        let b = Batch::from_ids(vec![vec![5, EOS], vec![4, EOS]], &targets, 25).unwrap();
        assert_eq!(b.decoder_inputs[1], vec![BOS, 8, PAD]);
        assert_eq!(b.targets[1], vec![8, EOS, PAD]);
        assert_eq!(b.target_tokens(), 5);
    }

    #[test]
    fn length_violations() {
        let long = vec![4; 26];
        assert!(matches!(Batch::from_ids(vec![long.clone()], &[&[4]], 25), Err(Seq2SeqError::Length { which: "source", .. })));
        assert!(matches!(Batch::from_ids(vec![vec![4]], &[&long], 25), Err(Seq2SeqError::Length { which: "target", .. })));
    }

    #[test]
    fn budget_respected_and_every_index_once() {
        let lengths: Vec<usize> = (0..200).map(|i| 2 + (i * 7) % 20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = bucket_batches(&lengths, 64, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| lengths[i]).max().unwrap();
            assert!(b.len() * longest <= 64 || b.len() == 1);
        }
    }
}
