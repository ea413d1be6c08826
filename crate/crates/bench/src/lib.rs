//! Shared inputs for the benchmarks.

use churnforge_core::{compute_labels, generate_store, split_windows, LabelSet, RecordStore, SimConfig};

/// Default simulation shrunk to `n` subscribers, with its labels.
pub fn simulated(n: usize) -> (RecordStore, LabelSet) {
    let config = SimConfig {
        n_subscribers: n,
        ..SimConfig::default()
    };
    let (store, _) = generate_store(&config).expect("simulation");
    let (_, eval) = split_windows(store.window());
    let labels = compute_labels(&store, eval);
    (store, labels)
}
