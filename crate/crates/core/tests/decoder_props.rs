use mdpolicy::decoder::{DecodeConfig, Decoder, FocusMode, MaskPredictor, Selection, Strategy as DecodeStrategy};
use mdpolicy::diffusion::TokenSequence;
use mdpolicy::predictor::{Conditioning, HeadKind};
use mdpolicy::rng;
use mdpolicy::vocab::{VocabLayout, ACTION_DIM};
use mdpolicy::Result;
use proptest::prelude::*;
use rand::Rng;

/// Pseudo-random logits that depend on the whole input sequence.
struct Hashing {
    seed: u64,
}

impl MaskPredictor for Hashing {
    fn head(&self) -> HeadKind {
        HeadKind::Localized
    }

    fn answer_logits(&self, seq: &TokenSequence, _: &Conditioning) -> Result<Vec<f64>> {
        let mut h = self.seed;
        for &id in &seq.ids {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(u64::from(id) + 1);
        }
        let mut r = rng::from_seed(h);
        Ok((0..seq.answer().len() * 32).map(|_| r.gen_range(-4.0..4.0)).collect())
    }
}

fn cond() -> Conditioning {
    Conditioning {
        observation: vec![],
        task_id: 0,
    }
}

fn strategies() -> impl Strategy<Value = (DecodeStrategy, FocusMode, Selection)> {
    (
        prop_oneof![Just(DecodeStrategy::Vanilla), Just(DecodeStrategy::Hierarchical)],
        prop_oneof![Just(FocusMode::Consecutive), Just(FocusMode::ReArgmax)],
        prop_oneof![Just(Selection::Greedy), Just(Selection::Sample)],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decoders_terminate_with_valid_chunks(seed in any::<u64>(), (strategy, focus_mode, selection) in strategies()) {
        let layout = VocabLayout::new(512, 32).unwrap();
        let cfg = DecodeConfig { strategy, focus_mode, selection, ..DecodeConfig::default() };
        let dec = Decoder::new(cfg, 5, ACTION_DIM).unwrap();
        let model = Hashing { seed };
        let out = dec.decode(&model, &[1, 2, 6, 8], &cond(), &layout, &mut rng::from_seed(seed)).unwrap();
        let again = dec.decode(&model, &[1, 2, 6, 8], &cond(), &layout, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(&out, &again);

        let steps = &out.trace.steps;
        prop_assert_eq!(steps.len(), 10);
        prop_assert!(out.tokens.iter().all(|&id| layout.is_action_token(id)));
        prop_assert!(out.chunk().unwrap().detokenize(
            &mdpolicy::vocab::BinSpec::new([-1.0; 7], [1.0; 7], 32).unwrap(), &layout).is_ok());

        let mut prev_masked = usize::MAX;
        let mut frozen: Vec<Option<usize>> = vec![None; 5];
        let mut visits = [0usize; 5];
        for (k, s) in steps.iter().enumerate() {
            prop_assert!(s.revealed.iter().all(|p| !s.remasked.contains(p)));
            match strategy {
                DecodeStrategy::Vanilla => {
                    prop_assert!(s.masked_count <= prev_masked);
                    prop_assert!(s.focus.is_none());
                    if k > 0 {
                        let before = &steps[k - 1].tokens;
                        for (p, &id) in before.iter().enumerate() {
                            if id != layout.mask_token_id {
                                prop_assert_eq!(s.tokens[p], id);
                            }
                        }
                    }
                }
                DecodeStrategy::Hierarchical => {
                    let f = s.focus.unwrap();
                    prop_assert!(s.revealed.iter().all(|p| p / ACTION_DIM == f));
                    for (a, fz) in frozen.iter().enumerate() {
                        if let Some(at) = fz {
                            let then = &steps[*at].tokens[a * ACTION_DIM..(a + 1) * ACTION_DIM];
                            prop_assert_eq!(&s.tokens[a * ACTION_DIM..(a + 1) * ACTION_DIM], then);
                        }
                    }
                    prop_assert!(frozen[f].is_none());
                    visits[f] += 1;
                    if visits[f] == 2 {
                        let row = &s.tokens[f * ACTION_DIM..(f + 1) * ACTION_DIM];
                        prop_assert!(row.iter().all(|&id| id != layout.mask_token_id));
                        frozen[f] = Some(k);
                    }
                }
            }
            prev_masked = s.masked_count;
        }
    }
}
