use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layer_name, MambaModel, Trainable};

/// Channels and states kept trainable in one layer, both ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdtSelection {
    pub channels: Vec<usize>,
    pub states: Vec<usize>,
}

fn keep_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Indices of the `k` largest scores; ties go to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Picks channels by accumulated gradient magnitude over `A`, `W_B` and `W_C`,
/// then states by magnitude within the kept channels.
///
/// `ga` is `[D,H]`, `gb` and `gc` are `[H,D]`, all holding `Σ|grad|`.
pub fn sdt_select(ga: &[f64], gb: &[f64], gc: &[f64], d: usize, h: usize, keep: (f64, f64)) -> SdtSelection {
    let entry = |ch: usize, st: usize| ga[ch * h + st] + gb[st * d + ch] + gc[st * d + ch];
    let channel_score: Vec<f64> = (0..d).map(|ch| (0..h).map(|st| entry(ch, st)).sum()).collect();
    let channels = top_k(&channel_score, keep_count(keep.0, d));
    let state_score: Vec<f64> = (0..h)
        .map(|st| channels.iter().map(|&ch| entry(ch, st)).sum())
        .collect();
    let states = top_k(&state_score, keep_count(keep.1, h));
    SdtSelection { channels, states }
}

/// Accumulates `|grad|` of the scan matrices over `warmup` sequences and
/// restricts their trainable entries to the selected channels × states.
pub fn select_sdt_mask(
    model: &mut MambaModel,
    warmup: &[(Vec<usize>, Vec<(usize, usize)>)],
    keep: (f64, f64),
) -> Result<Vec<SdtSelection>> {
    if warmup.is_empty() {
        return Err(Error::contract("SDT selection needs warmup data"));
    }
    let (d, h) = (model.arch.d_inner(), model.arch.d_state);
    let fields = ["a_log", "w_b", "w_c"];
    for i in 0..model.arch.n_layer {
        for f in fields {
            model.params.set_trainable(&layer_name(i, f), Trainable::Full)?;
        }
    }
    let mut acc: Vec<[Vec<f64>; 3]> = (0..model.arch.n_layer)
        .map(|_| [vec![0.0; d * h], vec![0.0; d * h], vec![0.0; d * h]])
        .collect();
    for (tokens, targets) in warmup {
        let g = model.loss_and_grads(tokens, targets)?;
        for (i, layer) in acc.iter_mut().enumerate() {
            for (slot, f) in layer.iter_mut().zip(fields) {
                if let Some(grad) = g.grads.get(&layer_name(i, f)) {
                    slot.iter_mut().zip(grad).for_each(|(a, v)| *a += v.abs());
                }
            }
        }
    }
    let mut selections = Vec::with_capacity(acc.len());
    for (i, [ga, gb, gc]) in acc.iter().enumerate() {
        if ga.iter().chain(gb).chain(gc).all(|&v| v == 0.0) {
            log::warn!("sdt: layer {i} has all-zero warmup gradients, keeping lowest indices");
        }
        let sel = sdt_select(ga, gb, gc, d, h, keep);
        let mut mask_a = vec![false; d * h];
        let mut mask_bc = vec![false; d * h];
        for &ch in &sel.channels {
            for &st in &sel.states {
                mask_a[ch * h + st] = true;
                mask_bc[st * d + ch] = true;
            }
        }
        model.params.set_trainable(&layer_name(i, "a_log"), Trainable::Masked(mask_a))?;
        model.params.set_trainable(&layer_name(i, "w_b"), Trainable::Masked(mask_bc.clone()))?;
        model.params.set_trainable(&layer_name(i, "w_c"), Trainable::Masked(mask_bc))?;
        selections.push(sel);
    }
    Ok(selections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_channels_quarter_states_on_four_by_four() {
        let (d, h) = (4, 4);
        let ga: Vec<f64> = (0..16).map(|i| (i * 7 % 5) as f64).collect();
        let gb: Vec<f64> = (0..16).map(|i| (i % 3) as f64).collect();
        let gc = vec![0.5; 16];
        let sel = sdt_select(&ga, &gb, &gc, d, h, (0.5, 0.25));
        assert_eq!(sel.channels.len(), 2);
        assert_eq!(sel.states.len(), 1);
    }

    #[test]
    fn keep_everything_selects_everything() {
        let sel = sdt_select(&[1.0; 6], &[0.0; 6], &[0.0; 6], 2, 3, (1.0, 1.0));
        assert_eq!(sel.channels, vec![0, 1]);
        assert_eq!(sel.states, vec![0, 1, 2]);
    }

    #[test]
    fn zero_gradients_break_ties_by_lowest_index() {
        let sel = sdt_select(&[0.0; 16], &[0.0; 16], &[0.0; 16], 4, 4, (0.5, 0.25));
        assert_eq!(sel, SdtSelection { channels: vec![0, 1], states: vec![0] });
    }

    #[test]
    fn strongest_channel_and_state_win() {
        let (d, h) = (3, 2);
        let mut ga = vec![0.0; d * h];
        ga[2 * h + 1] = 5.0;
        let sel = sdt_select(&ga, &[0.0; 6], &[0.0; 6], d, h, (0.34, 0.5));
        assert_eq!(sel, SdtSelection { channels: vec![2], states: vec![1] });
    }
}
