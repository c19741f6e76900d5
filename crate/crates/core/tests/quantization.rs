use fitq::experiments::DeskSetup;
use fitq::model::{evaluate, TrainConfig};
use fitq::quant::{qat_finetune, track_ranges, BitConfig, CalibrationConfig, QatConfig};

fn frozen_qat() -> QatConfig {
    QatConfig {
        train: TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..QatConfig::default().train
        },
        ..QatConfig::default()
    }
}

#[test]
fn wide_grids_match_full_precision_and_narrow_grids_cost_accuracy() {
    let run = DeskSetup::default().run().unwrap();
    let names = run.model.block_names();
    let ranges = track_ranges(&run.model, &run.train, &CalibrationConfig::default()).unwrap();
    let fp = evaluate(&run.model, &run.test).unwrap().accuracy;
    let accuracy = |w, a| {
        let bits = BitConfig::uniform(&names, w, a).unwrap();
        qat_finetune(&run.model, &bits, &ranges, &run.train, &run.test, &frozen_qat())
            .unwrap()
            .test_accuracy
    };
    let wide = accuracy(32, 32);
    assert!((wide - fp).abs() <= 0.005, "32-bit {wide} vs fp {fp}");
    let eight = accuracy(8, 8);
    let three = accuracy(3, 3);
    assert!(three <= eight, "3-bit {three} vs 8-bit {eight}");
}
