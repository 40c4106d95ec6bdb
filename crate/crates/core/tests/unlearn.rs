use std::sync::OnceLock;

use aru_core::data::{generate_synthetic, DatasetBundle, Split, SyntheticConfig};
use aru_core::eval::{evaluate, DEFAULT_LAMBDA};
use aru_core::nn::{accuracy, build_model, cross_entropy, forward, sgd_train, ModelState, TrainConfig, Trainable};
use aru_core::unlearn::{
    adv_neg_grad, aru, cf_k, finetune, neg_grad, retrain_scratch, run_unlearning, Method, MethodParams,
    Stage, UnlearnRequest,
};

/// Default synthetic benchmark and the original model for seed 0.
fn pinned() -> &'static (DatasetBundle, ModelState) {
    static CELL: OnceLock<(DatasetBundle, ModelState)> = OnceLock::new();
    CELL.get_or_init(|| {
        let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let m = build_model(b.num_classes, b.image_shape, 0).unwrap();
        let (theta, _) = sgd_train(&m, &b.train, &TrainConfig::original(), &Trainable::All).unwrap();
        (b, theta)
    })
}

/// A small bundle and briefly trained model for structural checks.
fn small() -> &'static (DatasetBundle, ModelState) {
    static CELL: OnceLock<(DatasetBundle, ModelState)> = OnceLock::new();
    CELL.get_or_init(|| {
        let b = generate_synthetic(&SyntheticConfig {
            num_identities: 20,
            images_per_identity: 6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let m = build_model(b.num_classes, b.image_shape, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::original()
        };
        (b.clone(), sgd_train(&m, &b.train, &cfg, &Trainable::All).unwrap().0)
    })
}

fn short() -> MethodParams {
    let mut p = MethodParams::default();
    p.finetune.epochs = 2;
    p.retrain.epochs = 2;
    p
}

fn forget_f(model: &ModelState, b: &DatasetBundle) -> f64 {
    evaluate(model, b, DEFAULT_LAMBDA).unwrap().metrics.forgetting
}

#[test]
fn original_model_memorises_the_forget_set() {
    let (b, theta) = pinned();
    let train_acc = accuracy(theta, &b.train).unwrap();
    assert!(train_acc >= 0.85, "train accuracy {train_acc}");
    let m = evaluate(theta, b, DEFAULT_LAMBDA).unwrap().metrics.mia_accuracy;
    assert!(m >= 0.55, "MIA accuracy {m}");
}

#[test]
fn pinned_runs_order_as_expected() {
    let (b, theta) = pinned();
    let p = MethodParams::default();
    let f_theta = forget_f(theta, b);
    let ft = finetune(theta, b, &p, 0).unwrap().model;
    let f_ft = forget_f(&ft, b);
    let u_theta = accuracy(theta, &b.test).unwrap();
    let u_ft = accuracy(&ft, &b.test).unwrap();
    assert!(u_ft >= u_theta - 0.05, "finetune utility {u_ft} vs original {u_theta}");

    let retrain = retrain_scratch(b, &theta.arch(), &p, 0).unwrap().model;
    let f_re = forget_f(&retrain, b);
    assert!(f_re <= 0.1, "retrain forgetting {f_re}");

    let f_aru = forget_f(&aru(theta, b, &p, 0).unwrap().model, b);
    assert!(f_aru < f_ft, "aru {f_aru} vs finetune {f_ft} (original {f_theta})");

    let f_adv = forget_f(&adv_neg_grad(theta, b, &p, 0).unwrap().model, b);
    assert!(f_adv < f_ft, "advneggrad {f_adv} vs finetune {f_ft}");
}

#[test]
fn gradient_ascent_lowers_forget_accuracy() {
    let (b, theta) = pinned();
    let mut p = MethodParams::default();
    p.ascent_epochs = Some(1);
    let m = neg_grad(theta, b, &p, 0).unwrap().model;
    let before = accuracy(theta, &b.forget).unwrap();
    let after = accuracy(&m, &b.forget).unwrap();
    assert!(after < before, "{after} vs {before}");

    // One small step already raises the forget loss.
    let (x, y) = aru_core::data::stack_records(&b.forget).unwrap();
    let loss = |m: &ModelState| cross_entropy(&forward(m, &x).unwrap(), &y).unwrap();
    let step = MethodParams {
        finetune: TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.0,
            batch_size: b.forget.len(),
            ..TrainConfig::finetune()
        },
        ascent_epochs: Some(1),
        ..MethodParams::default()
    };
    let one = neg_grad(theta, b, &step, 0).unwrap().model;
    assert!(loss(&one) > loss(theta));
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let (b, theta) = small();
    let mut p = short();
    p.finetune.epochs = 0;
    assert_eq!(&finetune(theta, b, &p, 0).unwrap().model, theta);
    p.ascent_epochs = Some(0);
    assert_eq!(&neg_grad(theta, b, &p, 0).unwrap().model, theta);
}

#[test]
fn degenerate_settings_reduce_to_finetune() {
    let (b, theta) = small();
    let p = short();
    let ft = finetune(theta, b, &p, 3).unwrap().model.checksum();
    let zero_ratio = MethodParams { ratio: 0.0, ..short() };
    assert_eq!(aru(theta, b, &zero_ratio, 3).unwrap().model.checksum(), ft);
    let all = MethodParams { k: theta.layers.len(), ..short() };
    assert_eq!(cf_k(theta, b, &all, 3).unwrap().model.checksum(), ft);
    let no_forget = MethodParams { forget_weight: 0.0, ..short() };
    assert_eq!(adv_neg_grad(theta, b, &no_forget, 3).unwrap().model.checksum(), ft);
}

#[test]
fn access_audit_separates_stages() {
    let (b, theta) = small();
    let p = short();
    for method in [Method::Retrain, Method::Finetune, Method::CfK, Method::Aru, Method::RandomMask, Method::TopGradMask, Method::RandomNoiseMask] {
        let r = run_unlearning(&UnlearnRequest { method, params: p.clone(), seed: 0 }, theta, b).unwrap();
        let a = &r.provenance.audit;
        assert_eq!(a.count(Stage::Training, Split::Forget), 0, "{method} trained on forget data");
        assert_eq!(a.count(Stage::Training, Split::Retain), b.retain.len() * 2, "{method}");
        assert_eq!(a.split_total(Split::Unseen) + a.split_total(Split::Test), 0, "{method}");
    }
    let r = aru(theta, b, &p, 0).unwrap();
    let a = &r.provenance.audit;
    assert_eq!(a.count(Stage::Attack, Split::Forget), b.forget.len() * 7);
    assert_eq!(a.count(Stage::Scoring, Split::Forget), b.forget.len());
    assert_eq!(a.identities(Stage::Attack, Split::Forget), b.identities(Split::Forget));
    for m in [Method::Retrain, Method::Finetune, Method::CfK] {
        let r = run_unlearning(&UnlearnRequest { method: m, params: p.clone(), seed: 0 }, theta, b).unwrap();
        assert_eq!(r.provenance.audit.split_total(Split::Forget), 0, "{m}");
    }
    let neg = run_unlearning(&UnlearnRequest { method: Method::NegGrad, params: p.clone(), seed: 0 }, theta, b).unwrap();
    assert!(neg.provenance.audit.count(Stage::Training, Split::Forget) > 0);
}

#[test]
fn runs_are_deterministic_and_recorded() {
    let (b, theta) = small();
    let p = short();
    let a = aru(theta, b, &p, 4).unwrap();
    let c = aru(theta, b, &p, 4).unwrap();
    assert_eq!(a.model.checksum(), c.model.checksum());
    assert_eq!(a.provenance.mask_checksum, c.provenance.mask_checksum);
    assert_eq!(a.provenance.model_checksum, a.model.checksum());
    assert_eq!(a.provenance.original_checksum, theta.checksum());
    assert_eq!(a.provenance.epoch_logs.len(), 2);
    let mask = a.provenance.mask.as_ref().unwrap();
    for (lm, (_, spec)) in mask.layers.iter().zip(theta.conv_layers()) {
        assert_eq!(lm.count(), spec.out_filters / 2);
    }
    let adv = adv_neg_grad(theta, b, &p, 4).unwrap();
    assert!(!adv.provenance.step_losses.is_empty());
    for s in &adv.provenance.step_losses {
        assert!((s.total - (s.retain - s.forget)).abs() < 1e-12);
    }
}

#[test]
fn invalid_parameters_are_config_errors() {
    let (b, theta) = small();
    let bad_k = MethodParams { k: 0, ..short() };
    assert!(cf_k(theta, b, &bad_k, 0).unwrap_err().is_config());
    let bad_ratio = MethodParams { ratio: 1.0, ..short() };
    assert!(aru(theta, b, &bad_ratio, 0).unwrap_err().is_config());
    let bad_lr = MethodParams {
        finetune: TrainConfig { learning_rate: 0.0, ..TrainConfig::finetune() },
        ..short()
    };
    assert!(finetune(theta, b, &bad_lr, 0).unwrap_err().is_config());
}
