use mixoram::harness::{audit_costs, run_eviction_e2e, Scenario, Transport};
use mixoram::shuffle::Design;

fn run(design: Design, n: usize, m: usize, epochs: usize) {
    let mut sc = Scenario::new(design, n, m, 11);
    sc.trials = epochs;
    let rep = run_eviction_e2e(&sc).unwrap();
    assert!(rep.passed(), "{}", rep.summary_text());
}

#[test]
fn every_design_round_trips() {
    for design in Design::ALL {
        for (n, m) in [(16, 2), (16, 4), (64, 2), (64, 4)] {
            run(design, n, m, 1);
        }
    }
}

#[test]
fn several_epochs_in_a_row() {
    for design in Design::ALL {
        run(design, 32, 2, 4);
    }
}

#[test]
fn single_mix_degenerates_to_a_local_shuffle() {
    for design in Design::ALL {
        run(design, 16, 1, 2);
    }
}

#[test]
fn audits_pass() {
    for design in Design::ALL {
        for n in [16, 64] {
            let sc = Scenario::new(design, n, 4, 5);
            let rep = audit_costs(&sc).unwrap();
            assert!(rep.passed(), "{}", rep.summary_text());
        }
    }
}

#[test]
fn tcp_transport_round_trips() {
    for design in Design::ALL {
        let mut sc = Scenario::new(design, 16, 2, 9);
        sc.transport = Transport::Tcp;
        sc.trials = 2;
        let rep = run_eviction_e2e(&sc).unwrap();
        assert!(rep.passed(), "{}", rep.summary_text());
    }
}

