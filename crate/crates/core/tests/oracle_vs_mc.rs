use ntklab::mc::{run_update_experiment, ExperimentConfig};
use ntklab::net::{Architecture, WeightDistribution};
use ntklab::oracle::{exact_bias_and_mixed_moments, mu4_exact, to_f64, Convention, OracleCap};

fn within(label: &str, value: f64, se: f64, exact: f64) {
    let z = (value - exact) / se;
    println!("{label}: mc {value} exact {exact} z {z:.2}");
    assert!(z.abs() <= 5.0, "{label}: z = {z}");
}

fn check(n0: usize, hidden: Vec<usize>, x: Vec<f64>, dist: WeightDistribution, target: f64) {
    let arch = Architecture::new(n0, hidden.clone()).unwrap();
    let exact = exact_bias_and_mixed_moments(
        &arch,
        &x,
        &mu4_exact(dist),
        Convention::Corrected,
        &OracleCap::default(),
    )
    .unwrap();
    let mut c = ExperimentConfig::new(n0, hidden);
    c.x = Some(x);
    c.dist = dist;
    c.trials = 300_000;
    c.update = true;
    c.target = target;
    let r = run_update_experiment(&c).unwrap();
    let k = &r.kernel;
    within(
        "E[K]",
        k.k.mean(),
        k.k.se_mean(),
        to_f64(&exact.kernel_mean),
    );
    within("E[Kw]", k.kw.mean(), k.kw.se_mean(), to_f64(&exact.kw_mean));
    within("E[Kb]", k.kb.mean(), k.kb.se_mean(), to_f64(&exact.kb_mean));
    within(
        "E[Kw^2]",
        k.kw.second_raw_moment(),
        k.kw.se_second_raw_moment(),
        to_f64(&exact.kw_second),
    );
    within(
        "E[Kb^2]",
        k.kb.second_raw_moment(),
        k.kb.se_second_raw_moment(),
        to_f64(&exact.kb_second),
    );
    within(
        "E[KbKw]",
        k.kw_kb.mean(),
        k.kw_kb.se_mean(),
        to_f64(&exact.kb_kw),
    );
    within(
        "E[K^2]",
        k.k2.mean(),
        k.k2.se_mean(),
        to_f64(&exact.kernel_second),
    );
    within(
        "E[Delta_ww]",
        r.delta_ww.mean(),
        r.delta_ww.se_mean(),
        to_f64(&exact.delta_ww),
    );
    within(
        "E[Delta_wb]",
        r.delta_wb.mean(),
        r.delta_wb.se_mean(),
        to_f64(&exact.delta_wb),
    );
}

#[test]
fn two_by_two_gaussian() {
    check(
        2,
        vec![2, 2],
        vec![1.0, 1.0],
        WeightDistribution::Normal,
        0.0,
    );
}

#[test]
fn uneven_widths_uniform_with_target() {
    check(
        3,
        vec![3, 2],
        vec![1.0, -0.5, 2.0],
        WeightDistribution::Uniform,
        0.7,
    );
}

#[test]
fn deeper_narrow_gaussian() {
    check(
        2,
        vec![2, 3, 2],
        vec![0.3, 1.1],
        WeightDistribution::Normal,
        -1.0,
    );
}
