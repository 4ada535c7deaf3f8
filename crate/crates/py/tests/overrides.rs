use geoloc::synth::{SplitMode, WorldConfig};
use geoloc::train::{LossMode, TrainConfig};
use geoloc_py::{merge_overrides, parse_enum, resolve};
use serde_json::json;

#[test]
fn nested_overrides_replace_only_named_fields() {
    let cfg: TrainConfig =
        resolve(Some(&json!({ "loss_mode": "triplet", "model": { "offset_mode": "none" }, "schedule": { "total_epochs": 12 } })))
            .unwrap();
    let def = TrainConfig::default();
    assert_eq!(cfg.loss_mode, LossMode::Triplet);
    assert_eq!(cfg.schedule.total_epochs, 12);
    assert_eq!(cfg.schedule.warmup_epochs, def.schedule.warmup_epochs);
    assert_eq!(cfg.model.embed_dim, def.model.embed_dim);
    assert_eq!(cfg.learning_rate, def.learning_rate);
}

#[test]
fn no_overrides_gives_defaults() {
    assert_eq!(resolve::<WorldConfig>(None).unwrap(), WorldConfig::default());
    assert_eq!(resolve::<WorldConfig>(Some(&json!({}))).unwrap(), WorldConfig::default());
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let err = resolve::<TrainConfig>(Some(&json!({ "schedule": { "epochs": 3 } }))).unwrap_err();
    assert!(err.contains("schedule.epochs"), "{err}");
    assert!(resolve::<TrainConfig>(Some(&json!({ "loss_mode": "quadruplet" }))).is_err());
    assert!(resolve::<TrainConfig>(Some(&json!([1, 2]))).is_err());
    let mut base = json!({ "a": { "b": 1 } });
    merge_overrides(&mut base, &json!({ "a": 5 }), "").unwrap();
    assert_eq!(base, json!({ "a": 5 }));
}

#[test]
fn enum_names_use_kebab_case() {
    assert_eq!(parse_enum::<SplitMode>("split", "cross-area").unwrap(), SplitMode::CrossArea);
    assert_eq!(parse_enum::<SplitMode>("split", "CrossArea").unwrap_err(), "unknown split `CrossArea`");
}
