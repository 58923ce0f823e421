use std::sync::OnceLock;

use antidistill::sampler::SamplerKind;
use antidistill_demo::{parse_problem, Lab};

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| Lab::new(1, 2).unwrap())
}

#[test]
fn problems_parse() {
    assert_eq!(parse_problem("3+4+2").unwrap().gold_answer, 9);
    assert_eq!(parse_problem(" 7 + 8 ").unwrap().gold_answer, 15);
    assert!(parse_problem("3").is_err());
    assert!(parse_problem("3+x").is_err());
}

#[test]
fn distributions_are_normalized_and_reduce_at_zero_lambda() {
    let d = lab().distribution("3+4+2", "<R>7,", 0.6, 0.0).unwrap();
    assert_eq!(d.labels.len(), d.adjusted.len());
    assert_eq!(d.labels[15], "<ANS>");
    assert!((d.adjusted.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (a, t) in d.adjusted.iter().zip(&d.teacher) {
        assert!((a - t).abs() < 1e-15);
    }
    let pushed = lab().distribution("3+4+2", "<R>7,", 0.6, 5.0).unwrap();
    assert_ne!(pushed.adjusted, d.adjusted);
    assert!(lab().distribution("3+4+2", "<R>?", 0.6, 0.0).is_err());
}

#[test]
fn epsilon_curve_covers_the_grid() {
    let rows = lab().epsilon_curve(-8, 0).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_error)));
}

#[test]
fn generation_reports_forward_counts() {
    let t = lab().generate("3+4+2", SamplerKind::Temperature, 0.6, 0.0, 3).unwrap();
    assert_eq!(t.proxy_forwards, 0);
    let a = lab().generate("3+4+2", SamplerKind::Antidistill, 0.6, 0.3, 3).unwrap();
    assert_eq!(a.proxy_forwards, 2 * a.teacher_forwards);
    assert!((1..=24).contains(&a.teacher_forwards));
}
