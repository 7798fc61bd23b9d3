//! Perturbation checks of the decoder attention structure.

use worldkit_core::sos::{TokenId, RESERVED_TOKENS};

use crate::config::Task;
use crate::features::DecoderInput;
use crate::network::WorldModel;
use crate::tape::KeyMask;
use crate::tensor::Mat;

/// Outcome of perturbing every input token once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    /// Largest logit change in a row outside the perturbed token's element.
    pub outside: f64,
    /// Largest logit change in a later row outside the perturbed element.
    pub later_outside: f64,
}

fn replacement(t: TokenId, vocab: usize) -> TokenId {
    let r = RESERVED_TOKENS.len();
    if vocab <= r + 1 {
        return if t == r { r - 1 } else { r };
    }
    if t < r {
        r
    } else {
        r + (t - r + 1) % (vocab - r)
    }
}

/// Replaces each input token in turn and records how far the change
/// spreads. Element membership comes from the target layout.
pub fn perturb_inputs(model: &WorldModel, task: Task, memory: &Mat, target: &DecoderInput) -> Perturbation {
    let base = model.decode_logits(task, memory, target);
    let vocab = model.vocab_size(task);
    let layout = &target.layout;
    let mut out = Perturbation {
        outside: 0.0,
        later_outside: 0.0,
    };
    for p in 0..target.len() {
        let mut x = target.clone();
        x.ids[p] = replacement(x.ids[p], vocab);
        let l = model.decode_logits(task, memory, &x);
        let own = layout.element_of(p);
        for row in 0..target.len() {
            if own.is_some() && layout.element_of(row) == own {
                continue;
            }
            let d = base.row(row).iter().zip(l.row(row)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.outside = out.outside.max(d);
            if row > p {
                out.later_outside = out.later_outside.max(d);
            }
        }
    }
    out
}

/// The same target under a different attention mask.
pub fn with_mask(target: &DecoderInput, mask: KeyMask) -> DecoderInput {
    let mut t = target.clone();
    t.mask = mask;
    t
}

/// True when no perturbation reaches another element (exactly zero change).
pub fn elements_independent(model: &WorldModel, task: Task, memory: &Mat, target: &DecoderInput) -> bool {
    perturb_inputs(model, task, memory, target).outside == 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{encoder_inputs, sos_decoder_target};
    use crate::network::tests::tiny_setup;
    use worldkit_core::sos::{ElementSource, SosSerialization};

    #[test]
    fn block_mask_isolates_and_broken_masks_leak() {
        let (m, samples) = tiny_setup(81);
        let x = encoder_inputs(&samples[0], &m.vocabs, &m.config).unwrap();
        let enc = m.encode(&x);
        let mem = m.memory(Task::Graph, &enc);
        let ser = SosSerialization::from_elements(&[vec![8, 9, 10], vec![11, 12, 13], vec![9, 8, 12]], ElementSource::Triple);
        let target = sos_decoder_target(&ser);
        let p = perturb_inputs(&m, Task::Graph, &mem, &target);
        assert_eq!(p.outside, 0.0);
        let causal = with_mask(&target, KeyMask::causal(target.len()));
        let c = perturb_inputs(&m, Task::Graph, &mem, &causal);
        assert!(c.later_outside > 0.0);
        assert!(!elements_independent(&m, Task::Graph, &mem, &with_mask(&target, KeyMask::Full)));
    }

    #[test]
    fn replacement_changes_the_token() {
        for v in [9, 10, 40] {
            for t in 0..v {
                let r = replacement(t, v);
                assert_ne!(r, t);
                assert!(r < v);
            }
        }
    }
}
