/// Substitutions + insertions + deletions turning `reference` into `hyp`.
pub fn edit_distance(reference: &[usize], hyp: &[usize]) -> usize {
    strsim::generic_levenshtein(&reference.to_vec(), &hyp.to_vec())
}

/// Edit distance over reference length. An empty reference scores the
/// number of inserted tokens (0 when both are empty).
pub fn cer(reference: &[usize], hyp: &[usize]) -> f64 {
    let edits = edit_distance(reference, hyp) as f64;
    edits / reference.len().max(1) as f64
}

/// Corpus-level rate: total edits over total reference tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusCer {
    pub edits: usize,
    pub ref_tokens: usize,
    pub utterances: usize,
    /// Utterances whose reference was empty.
    pub empty_refs: usize,
}

impl CorpusCer {
    pub fn add(&mut self, reference: &[usize], hyp: &[usize]) {
        self.edits += edit_distance(reference, hyp);
        self.ref_tokens += reference.len();
        self.utterances += 1;
        if reference.is_empty() {
            self.empty_refs += 1;
        }
    }

    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.ref_tokens.max(1) as f64
    }
}
