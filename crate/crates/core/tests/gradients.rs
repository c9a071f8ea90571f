mod common;

use common::{full_model_error, perturbed};
use patient_gnn::gnn::{GnnModel, LayerKind, ModelConfig};
use patient_gnn::train::LossConfig;

#[test]
fn two_layer_architectures_match_finite_differences() {
    let losses = [LossConfig::bce(), LossConfig::wbce(Some(2.5)), LossConfig::focal(0.75, 1.0), LossConfig::focal(0.25, 2.0)];
    for seed in 0..3u64 {
        let g = common::random_graph(seed, 10, 3, 0.3);
        for (kind, heads) in [(LayerKind::Sage, 1), (LayerKind::Gat, 2), (LayerKind::Gt, 1), (LayerKind::Gt, 2)] {
            let base = GnnModel::new(ModelConfig::standard(kind, 3, 4, 2, heads, seed)).unwrap();
            let model = perturbed(base, seed);
            for loss in &losses {
                let err = full_model_error(&model, &g, loss);
                assert!(err < 1e-4, "{kind:?} heads={heads} seed={seed} {:?}: rel err {err:e}", loss.kind);
            }
        }
    }
}
