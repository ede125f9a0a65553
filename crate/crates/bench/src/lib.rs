//! Shared fixtures for the criterion benches.

use ffs_core::datakit::{generate, DatasetSpec, FeatureRecord};
use ffs_core::flow::{init_flow, FlowArch, FlowModel, FlowVariant};
use ffs_core::numerics::SeededRng;

/// A default-architecture flow with randomized conditioner outputs, so the
/// couplings are not the identity.
pub fn flow(variant: FlowVariant) -> FlowModel {
    let mut rng = SeededRng::new(7);
    let mut model = init_flow(variant, 2, FlowArch::default(), &mut rng).expect("default flow");
    let mut params = model.params();
    for p in params.iter_mut() {
        *p += 0.05 * (2.0 * rng.uniform() - 1.0);
    }
    model.set_params(&params).expect("same length");
    model
}

/// Training records of the default crescents dataset.
pub fn train_records() -> Vec<FeatureRecord> {
    generate(&DatasetSpec::default()).expect("default dataset").train
}
