use super::{CodeVocab, Visit};

/// Sorted indices of the active dimensions of the flattened visit: Dx codes
/// occupy `0..|A|`, treatments `|A|..|A|+|B|`.
pub fn active_codes(visit: &Visit, n_dx: usize) -> Vec<usize> {
    let mut codes: Vec<usize> = visit
        .objects
        .iter()
        .flat_map(|o| std::iter::once(o.dx).chain(o.tx.iter().map(|&m| n_dx + m)))
        .collect();
    codes.sort_unstable();
    codes.dedup();
    codes
}

/// Multi-hot `{0,1}^{|A|+|B|}` view of a visit; attachment and multiplicity
/// are discarded.
pub fn flatten_visit(visit: &Visit, vocab: &CodeVocab) -> Vec<f64> {
    let mut x = vec![0.0; vocab.n_codes()];
    for j in active_codes(visit, vocab.n_dx()) {
        x[j] = 1.0;
    }
    x
}
