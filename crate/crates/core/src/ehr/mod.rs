//! Hierarchical EHR records: vocabulary, visits made of diagnosis objects,
//! cohort files, flattening, visit complexity and cohort slicing.

mod complexity;
mod flatten;
mod io;
mod record;
mod split;

pub use complexity::{
    is_complex_visit, slice_by_complexity, slice_by_max_visits, visit_complexity,
};
pub use flatten::{active_codes, flatten_visit};
pub use io::{parse_cohort, read_cohort, serialize_cohort, write_cohort};
pub use record::{validate_patient, CodeVocab, Cohort, DxObject, Patient, Visit};
pub use split::{split_folds, FoldSplit, DEFAULT_RATIOS};
