use ohd_web::{loss_curve_json, loss_json, negatives_json, train_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn negatives_have_the_benchmark_shape() {
    let out = parse(&negatives_json("a dog and a frisbee on the grass.", "dog, frisbee, tree", 3).unwrap());
    let negs = out["negatives"].as_array().unwrap();
    assert_eq!(negs.len(), 27);
    let count = |k: &str| negs.iter().filter(|n| n["kind"] == k).count();
    assert_eq!(
        [count("insert_random"), count("insert_popular"), count("insert_adversarial"), count("remove"), count("alter")],
        [7, 7, 7, 6, 0]
    );
    assert!(negs.iter().all(|n| n["text"] != out["positive"]));
    assert_eq!(
        negatives_json("a dog and a frisbee on the grass.", "dog, frisbee, tree", 3).unwrap(),
        negatives_json("a dog and a frisbee on the grass.", "dog, frisbee, tree", 3).unwrap()
    );
}

#[test]
fn negatives_reject_empty_objects() {
    assert!(negatives_json("a dog.", " , ", 0).is_err());
}

#[test]
fn loss_breakdown_matches_identity() {
    let scores = r#"{"pos": [[3.0, 1.0], [0.5, 2.5]], "neg": [[2.0], [1.0]]}"#;
    let out = parse(&loss_json(scores, r#"{"lambda1": 0.1, "lambda2": 0.1}"#).unwrap());
    let l = &out["loss"];
    let f = |k: &str| l[k].as_f64().unwrap();
    let expect = 0.5 * (f("l_i2t") + f("l_t2i")) + 0.1 * f("l1") + 0.1 * f("l2");
    assert!((f("total") - expect).abs() < 1e-12);
    assert_eq!(out["grad_neg"].as_array().unwrap().len(), 2);
    assert!(loss_json(scores, r#"{"lamda": 1}"#).is_err());
    assert!(loss_json("[1]", "").is_err());
}

#[test]
fn loss_curve_components_move_with_the_enhanced_negative() {
    let scores = r#"{"pos": [[3.0, 1.0], [0.5, 2.5]], "neg": [[0.0], [1.0]]}"#;
    let pts: Vec<Value> = serde_json::from_str(&loss_curve_json(scores, "", 0, 0, -2.0, 6.0, 17).unwrap()).unwrap();
    assert_eq!(pts.len(), 17);
    assert_eq!(pts[0]["x"], -2.0);
    assert_eq!(pts[16]["x"], 6.0);
    let series = |k: &str| pts.iter().map(|p| p[k].as_f64().unwrap()).collect::<Vec<_>>();
    // A stronger enhanced negative hurts retrieval and L1; L2 wants it above
    // the in-batch negatives.
    assert!(series("l_i2t").windows(2).all(|w| w[1] > w[0]));
    assert!(series("l1").windows(2).all(|w| w[1] >= w[0]));
    assert!(series("l2").windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(series("l_t2i").first(), series("l_t2i").last());
    assert!(loss_curve_json(scores, "", 0, 1, 0.0, 1.0, 5).is_err());
    assert!(loss_curve_json(scores, "", 0, 0, 0.0, 1.0, 1).is_err());
}

#[test]
fn toy_training_improves_accuracy() {
    let out = parse(&train_json(60, 60, 0.1, 1, 20).unwrap());
    assert_eq!(out["losses"].as_array().unwrap().len(), 60);
    let acc = out["accuracy"].as_array().unwrap();
    assert_eq!(acc.first().unwrap()["step"], 0);
    assert_eq!(acc.last().unwrap()["step"], 60);
    let first = acc.first().unwrap()["accuracy"].as_f64().unwrap();
    let last = acc.last().unwrap()["accuracy"].as_f64().unwrap();
    assert!(last > first + 0.3, "{first} -> {last}");
    assert!(train_json(0, 10, 0.1, 1, 5).is_err());
}
