//! Plain-text and CSV renderings of evaluation reports and outcome tables.

use std::fmt::Write;

use pathgrid_core::evaluator::{ErrorClass, EvalReport};
use pathgrid_core::twinsim::{FailureMode, OutcomeTable};

fn failure_label(f: FailureMode) -> &'static str {
    match f {
        FailureMode::NoState => "no_state",
        FailureMode::OcclusionCluster => "occlusion_cluster",
        FailureMode::NestedBlock => "nested_block",
        FailureMode::MisId => "mis_id",
        FailureMode::MechanicalSlip => "mechanical_slip",
        FailureMode::PlannerMiss => "planner_miss",
    }
}

pub fn eval_text(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "pairs              {}", r.n_pairs).unwrap();
    writeln!(s, "stepwise_accuracy  {:.4}", r.stepwise_accuracy).unwrap();
    writeln!(s, "precision          {:.4}", r.precision).unwrap();
    writeln!(s, "recall             {:.4}", r.recall).unwrap();
    writeln!(s, "f1                 {:.4}", r.f1).unwrap();
    writeln!(s, "valid_path_percent {:.2}%", 100.0 * r.valid_path_percent).unwrap();
    for e in ErrorClass::ALL {
        writeln!(s, "{:<19}{}", e.label(), r.error_counts.get(&e).copied().unwrap_or(0)).unwrap();
    }
    s
}

/// `metric,value` rows; reals are written with full round-trip precision.
pub fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    writeln!(s, "n_pairs,{}", r.n_pairs).unwrap();
    for (k, v) in [
        ("stepwise_accuracy", r.stepwise_accuracy),
        ("precision", r.precision),
        ("recall", r.recall),
        ("f1", r.f1),
        ("valid_path_percent", r.valid_path_percent),
    ] {
        writeln!(s, "{k},{v:?}").unwrap();
    }
    for e in ErrorClass::ALL {
        writeln!(s, "{},{}", e.label(), r.error_counts.get(&e).copied().unwrap_or(0)).unwrap();
    }
    s
}

/// Success, grasp and placement rates, then the failure breakdown.
pub fn outcome_text(t: &OutcomeTable) -> String {
    let mut s = String::new();
    writeln!(s, "| trials | success % | grasp % | placement % |").unwrap();
    writeln!(s, "|-------:|----------:|--------:|------------:|").unwrap();
    writeln!(
        s,
        "| {:>6} | {:>9.1} | {:>7.1} | {:>11.1} |",
        t.trials,
        t.success_pct(),
        t.grasp_pct(),
        t.placement_pct()
    )
    .unwrap();
    writeln!(s).unwrap();
    writeln!(s, "regrounds {}, detours {}, global replans {}", t.regrounds, t.detours, t.global_replans).unwrap();
    for f in FailureMode::ALL {
        writeln!(s, "{:<18}{}", failure_label(f), t.failures.get(&f).copied().unwrap_or(0)).unwrap();
    }
    s
}

pub fn outcome_csv(t: &OutcomeTable) -> String {
    let mut s = String::from("trials,success_pct,grasp_pct,placement_pct,regrounds,detours,global_replans");
    for f in FailureMode::ALL {
        write!(s, ",{}", failure_label(f)).unwrap();
    }
    writeln!(
        s,
        "\n{},{:?},{:?},{:?},{},{},{}",
        t.trials,
        t.success_pct(),
        t.grasp_pct(),
        t.placement_pct(),
        t.regrounds,
        t.detours,
        t.global_replans
    )
    .unwrap();
    s.pop();
    for f in FailureMode::ALL {
        write!(s, ",{}", t.failures.get(&f).copied().unwrap_or(0)).unwrap();
    }
    s.push('\n');
    s
}
