//! Interaction logs, temporal splits, the forgotten/retained partition and
//! prompt rendering.

mod bundle;
mod interactions;
mod prompt;
mod split;
pub mod synthetic;
pub mod vocab;

pub use bundle::{BundleOptions, DatasetBundle};
pub use interactions::{load_interactions, read_interactions, write_interactions, CsvFormat, Interaction};
pub use prompt::{answer_token, render_prompt, PromptOptions, RenderedSample};
pub use split::{
    forgotten_user_count, select_forgotten_users, temporal_sort, temporal_split, Partition,
    SplitRatios, UserKeyed,
};
pub use synthetic::SyntheticSpec;
pub use vocab::Vocabulary;
